//! Integer cumulative frequency tables.

use crate::error::{Error, Result};

pub const DEFAULT_PRECISION: u32 = 16;
/// Largest number of in-range symbols a table may hold.
pub const MAX_SUPPORT: usize = 8193;
/// Fixed-point scale used to turn probabilities into integers.
const FIXED_ONE: f64 = (1u64 << 32) as f64;

/// A quantized discrete distribution over `support_min..=support_max`,
/// optionally bracketed by a low and a high escape symbol.
///
/// Slot layout: `[low escape] support_min .. support_max [high escape]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    support_min: i32,
    escapes: bool,
    precision: u32,
    /// `cdf[0] = 0`, `cdf[n] = 2^precision`, strictly increasing.
    cdf: Vec<u32>,
}

/// Where a value lands in a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolSlot {
    Inside(usize),
    /// Escape slot and the distance past the support edge (at least 1).
    Below(usize, u32),
    Above(usize, u32),
}

impl CdfTable {
    /// Quantizes `pmf` (over consecutive integers from `support_min`) plus
    /// optional `(below, above)` tail masses into a table of `2^precision`
    /// counts. Every slot receives at least one count; counts beyond that are
    /// distributed proportionally after a fixed-point conversion so the result
    /// only depends on the rounded inputs.
    pub fn from_pmf(
        support_min: i32,
        pmf: &[f64],
        tails: Option<(f64, f64)>,
        precision: u32,
    ) -> Result<Self> {
        if !(8..=16).contains(&precision) {
            return Err(Error::Coding(format!(
                "precision {precision} outside 8..=16"
            )));
        }
        if pmf.is_empty() || pmf.len() > MAX_SUPPORT {
            return Err(Error::Coding(format!(
                "support of {} symbols not in 1..={MAX_SUPPORT}",
                pmf.len()
            )));
        }
        let mut mass: Vec<f64> = Vec::with_capacity(pmf.len() + 2);
        if let Some((lo, _)) = tails {
            mass.push(lo);
        }
        mass.extend_from_slice(pmf);
        if let Some((_, hi)) = tails {
            mass.push(hi);
        }
        let total_counts = 1u64 << precision;
        let n = mass.len() as u64;
        if n > total_counts {
            return Err(Error::Coding(format!(
                "{n} symbols cannot each get a count at precision {precision}"
            )));
        }
        let fixed: Vec<u64> = mass
            .iter()
            .map(|&p| {
                if p.is_finite() && p > 0.0 {
                    (p * FIXED_ONE).round() as u64
                } else {
                    0
                }
            })
            .collect();
        let sum: u64 = fixed.iter().sum();
        let spare = total_counts - n;
        let mut counts: Vec<u64> = if sum == 0 {
            // degenerate input: fall back to uniform
            let each = spare / n;
            vec![1 + each; n as usize]
        } else {
            fixed
                .iter()
                .map(|&q| 1 + ((q as u128 * spare as u128) / sum as u128) as u64)
                .collect()
        };
        let assigned: u64 = counts.iter().sum();
        let argmax = fixed
            .iter()
            .enumerate()
            .fold(0, |best, (i, &q)| if q > fixed[best] { i } else { best });
        counts[argmax] += total_counts - assigned;
        let mut cdf = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for c in counts {
            acc += c as u32;
            cdf.push(acc);
        }
        Ok(CdfTable {
            support_min,
            escapes: tails.is_some(),
            precision,
            cdf,
        })
    }

    /// Builds a table directly from counts (as parsed from a bitstream).
    pub fn from_counts(
        support_min: i32,
        counts: &[u32],
        escapes: bool,
        precision: u32,
    ) -> Result<Self> {
        let min_len = if escapes { 3 } else { 1 };
        if counts.len() < min_len
            || counts.len() > MAX_SUPPORT + 2
            || !(8..=16).contains(&precision)
        {
            return Err(Error::Coding("malformed count table".into()));
        }
        let mut cdf = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u64;
        cdf.push(0);
        for &c in counts {
            if c == 0 {
                return Err(Error::Coding("zero count in table".into()));
            }
            acc += c as u64;
            cdf.push(acc.min(u32::MAX as u64) as u32);
        }
        if acc != 1u64 << precision {
            return Err(Error::Coding(format!(
                "counts sum to {acc}, expected 2^{precision}"
            )));
        }
        Ok(CdfTable {
            support_min,
            escapes,
            precision,
            cdf,
        })
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn support_min(&self) -> i32 {
        self.support_min
    }

    pub fn support_max(&self) -> i32 {
        self.support_min + self.support_len() as i32 - 1
    }

    pub fn has_escapes(&self) -> bool {
        self.escapes
    }

    pub fn support_len(&self) -> usize {
        self.num_slots() - if self.escapes { 2 } else { 0 }
    }

    pub fn num_slots(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn counts(&self) -> Vec<u32> {
        self.cdf.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn count(&self, slot: usize) -> u32 {
        self.cdf[slot + 1] - self.cdf[slot]
    }

    /// Quantized probability of a slot.
    pub fn probability(&self, slot: usize) -> f64 {
        self.count(slot) as f64 / (1u64 << self.precision) as f64
    }

    /// Locates `value`; fails if it is out of range in a table without escapes
    /// or too far out to be represented by the 32-bit escape payload.
    pub fn slot_of(&self, value: i32) -> Result<SymbolSlot> {
        let off = if self.escapes { 1 } else { 0 };
        if value < self.support_min {
            if !self.escapes {
                return Err(Error::Coding(format!(
                    "value {value} below support {}",
                    self.support_min
                )));
            }
            let d = (self.support_min as i64 - value as i64) as u32;
            return Ok(SymbolSlot::Below(0, d));
        }
        let max = self.support_max();
        if value > max {
            if !self.escapes {
                return Err(Error::Coding(format!("value {value} above support {max}")));
            }
            let d = (value as i64 - max as i64) as u32;
            return Ok(SymbolSlot::Above(self.num_slots() - 1, d));
        }
        Ok(SymbolSlot::Inside(
            (value - self.support_min) as usize + off,
        ))
    }

    /// Value carried by an in-range slot.
    pub fn value_of(&self, slot: usize) -> Option<i32> {
        let off = if self.escapes { 1 } else { 0 };
        if slot < off || slot >= off + self.support_len() {
            None
        } else {
            Some(self.support_min + (slot - off) as i32)
        }
    }

    pub fn is_low_escape(&self, slot: usize) -> bool {
        self.escapes && slot == 0
    }

    pub fn is_high_escape(&self, slot: usize) -> bool {
        self.escapes && slot == self.num_slots() - 1
    }

    /// Slot whose cumulative interval contains `target`.
    pub fn find(&self, target: u32) -> usize {
        // first index with cdf[i + 1] > target
        self.cdf[1..].partition_point(|&c| c <= target)
    }

    /// Ideal cost in bits of coding `value` with this table, escape payload included.
    pub fn cost_bits(&self, value: i32) -> Result<f64> {
        Ok(match self.slot_of(value)? {
            SymbolSlot::Inside(s) => -self.probability(s).log2(),
            SymbolSlot::Below(s, _) | SymbolSlot::Above(s, _) => -self.probability(s).log2() + 32.0,
        })
    }

    /// Compact serialization: support_min i32, flags u8, precision u8, slot
    /// count u16, then each count as u16. Tables with at least two slots
    /// never hold a count of `2^16`.
    pub fn write_to(&self, out: &mut Vec<u8>) -> Result<()> {
        if self.num_slots() < 2 || self.num_slots() > u16::MAX as usize {
            return Err(Error::Coding("table not serializable".into()));
        }
        out.extend_from_slice(&self.support_min.to_be_bytes());
        out.push(self.escapes as u8);
        out.push(self.precision as u8);
        out.extend_from_slice(&(self.num_slots() as u16).to_be_bytes());
        for c in self.counts() {
            out.extend_from_slice(&(c as u16).to_be_bytes());
        }
        Ok(())
    }

    pub fn read_from(buf: &[u8], pos: &mut usize) -> Result<Self> {
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = buf
                .get(*pos..*pos + n)
                .ok_or_else(|| Error::Bitstream("truncated table".into()))?;
            *pos += n;
            Ok(s)
        };
        let support_min = i32::from_be_bytes(take(pos, 4)?.try_into().unwrap());
        let escapes = match take(pos, 1)?[0] {
            0 => false,
            1 => true,
            f => return Err(Error::Bitstream(format!("bad table flags {f}"))),
        };
        let precision = take(pos, 1)?[0] as u32;
        let n = u16::from_be_bytes(take(pos, 2)?.try_into().unwrap()) as usize;
        let raw = take(pos, 2 * n)?;
        let counts: Vec<u32> = raw
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect();
        CdfTable::from_counts(support_min, &counts, escapes, precision)
            .map_err(|e| Error::Bitstream(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::gauss_uniform_pmf;

    #[test]
    fn two_equiprobable_symbols_at_precision_eight() {
        let t = CdfTable::from_pmf(0, &[0.5, 0.5], None, 8).unwrap();
        assert_eq!(t.counts(), vec![128, 128]);
    }

    #[test]
    fn counts_sum_to_total_and_are_positive() {
        let pmf = [1e-30, 0.2, 0.7, 0.0999, 0.0];
        let t = CdfTable::from_pmf(-2, &pmf, Some((1e-12, 1e-4)), 12).unwrap();
        assert_eq!(*t.cdf().last().unwrap(), 1 << 12);
        assert!(t.counts().iter().all(|&c| c >= 1));
        assert_eq!(t.num_slots(), 7);
        assert_eq!(t.support_max(), 2);
    }

    #[test]
    fn too_many_symbols_for_precision_is_an_error() {
        assert!(CdfTable::from_pmf(0, &vec![1.0; 300], None, 8).is_err());
        assert!(CdfTable::from_pmf(0, &[1.0], None, 17).is_err());
    }

    #[test]
    fn unit_gaussian_quantization_costs_under_a_hundredth_of_a_bit() {
        let (lo, hi) = (-8i32, 8i32);
        let pmf: Vec<f64> = (lo..=hi)
            .map(|v| gauss_uniform_pmf(v as f64, 0.0, 1.0))
            .collect();
        let tail = crate::ops::std_normal_cdf(lo as f64 - 0.5);
        let t = CdfTable::from_pmf(lo, &pmf, Some((tail, tail)), 16).unwrap();
        let mut kl = 0.0;
        for (i, &p) in pmf.iter().enumerate() {
            kl += p * (p / t.probability(i + 1)).log2();
        }
        for s in [0, t.num_slots() - 1] {
            kl += tail * (tail / t.probability(s)).log2();
        }
        assert!(kl <= 0.01, "KL {kl}");
        assert!(kl >= 0.0);
    }

    #[test]
    fn slots_and_values() {
        let t = CdfTable::from_pmf(-1, &[0.25, 0.5, 0.25], Some((0.01, 0.01)), 16).unwrap();
        assert_eq!(t.slot_of(-1).unwrap(), SymbolSlot::Inside(1));
        assert_eq!(t.slot_of(1).unwrap(), SymbolSlot::Inside(3));
        assert_eq!(t.slot_of(-5).unwrap(), SymbolSlot::Below(0, 4));
        assert_eq!(t.slot_of(3).unwrap(), SymbolSlot::Above(4, 2));
        assert_eq!(t.value_of(2), Some(0));
        assert_eq!(t.value_of(0), None);
        for target in 0..(1u32 << 16) {
            let s = t.find(target);
            assert!(t.cdf()[s] <= target && target < t.cdf()[s + 1]);
        }
    }

    #[test]
    fn serialization_round_trip() {
        let t = CdfTable::from_pmf(-3, &[0.1, 0.2, 0.3, 0.4], Some((0.001, 0.002)), 16).unwrap();
        let mut buf = vec![];
        t.write_to(&mut buf).unwrap();
        let mut pos = 0;
        assert_eq!(CdfTable::read_from(&buf, &mut pos).unwrap(), t);
        assert_eq!(pos, buf.len());
        assert!(CdfTable::read_from(&buf[..buf.len() - 1], &mut 0).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let pmf: Vec<f64> = (0..50)
            .map(|v| gauss_uniform_pmf(v as f64, 20.3, 6.1))
            .collect();
        let a = CdfTable::from_pmf(0, &pmf, Some((1e-6, 1e-6)), 16).unwrap();
        let b = CdfTable::from_pmf(0, &pmf, Some((1e-6, 1e-6)), 16).unwrap();
        assert_eq!(a, b);
    }
}
