//! Byte-oriented range coder with carry propagation.
//!
//! The encoder keeps a 33-bit `low` (bit 32 is the carry) and a 32-bit
//! `range` that renormalizes to at least 2^24. The first byte of the raw
//! stream is always zero and is not stored; the flush writes only as many
//! bytes as are needed to single out a value inside the final interval, and
//! the decoder supplies the missing tail as zeros.

use std::borrow::Cow;

use crate::entropy::{CdfTable, SymbolSlot};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
/// Bits per bypass chunk of an escape payload.
const BYPASS_BITS: u32 = 16;
/// Zero bytes the decoder may read past the end of a well-formed stream.
const MAX_VIRTUAL_BYTES: usize = 3;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
    first: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
            first: true,
        }
    }

    fn push(&mut self, b: u8) {
        if self.first {
            self.first = false;
        } else {
            self.out.push(b);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut b = self.cache;
            loop {
                self.push(b.wrapping_add(carry));
                b = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Narrows to `[start, start + size)` out of `2^bits`.
    pub fn encode(&mut self, start: u32, size: u32, bits: u32) {
        debug_assert!(size > 0 && (start as u64 + size as u64) <= 1u64 << bits);
        let r = self.range >> bits;
        self.low += r as u64 * start as u64;
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_slot(&mut self, table: &CdfTable, slot: usize) {
        let cdf = table.cdf();
        self.encode(cdf[slot], cdf[slot + 1] - cdf[slot], table.precision());
    }

    /// Raw 32-bit payload as two equiprobable 16-bit chunks.
    pub fn encode_raw32(&mut self, v: u32) {
        self.encode(v >> BYPASS_BITS, 1, BYPASS_BITS);
        self.encode(v & 0xFFFF, 1, BYPASS_BITS);
    }

    pub fn encode_value(&mut self, table: &CdfTable, value: i32) -> Result<()> {
        match table.slot_of(value)? {
            SymbolSlot::Inside(s) => self.encode_slot(table, s),
            SymbolSlot::Below(s, d) | SymbolSlot::Above(s, d) => {
                self.encode_slot(table, s);
                self.encode_raw32(d);
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        // smallest value in [low, low + range) whose low 24 bits are zero
        self.low = (self.low + (TOP as u64 - 1)) & !(TOP as u64 - 1);
        self.shift_low();
        self.shift_low();
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    virtual_bytes: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            virtual_bytes: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if let Some(&b) = self.data.get(self.pos) {
            self.pos += 1;
            Ok(b)
        } else {
            self.virtual_bytes += 1;
            if self.virtual_bytes > MAX_VIRTUAL_BYTES {
                return Err(Error::Coding("range coder stream truncated".into()));
            }
            Ok(0)
        }
    }

    fn target(&mut self, bits: u32) -> Result<(u32, u32)> {
        let r = self.range >> bits;
        let t = self.code / r;
        if t >= 1 << bits {
            return Err(Error::Coding("range coder stream corrupt".into()));
        }
        Ok((t, r))
    }

    fn consume(&mut self, start: u32, size: u32, r: u32) -> Result<()> {
        self.code -= start * r;
        self.range = size * r;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_slot(&mut self, table: &CdfTable) -> Result<usize> {
        let (t, r) = self.target(table.precision())?;
        let slot = table.find(t);
        let cdf = table.cdf();
        self.consume(cdf[slot], cdf[slot + 1] - cdf[slot], r)?;
        Ok(slot)
    }

    pub fn decode_raw32(&mut self) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..2 {
            let (t, r) = self.target(BYPASS_BITS)?;
            self.consume(t, 1, r)?;
            v = (v << BYPASS_BITS) | t;
        }
        Ok(v)
    }

    pub fn decode_value(&mut self, table: &CdfTable) -> Result<i32> {
        let slot = self.decode_slot(table)?;
        if let Some(v) = table.value_of(slot) {
            return Ok(v);
        }
        let d = self.decode_raw32()? as i64;
        let v = if table.is_low_escape(slot) {
            table.support_min() as i64 - d
        } else {
            table.support_max() as i64 + d
        };
        i32::try_from(v).map_err(|_| Error::Coding(format!("escaped value {v} out of range")))
    }
}

/// One symbol and the table it is coded with.
#[derive(Debug, Clone, Copy)]
pub struct SymbolSpec<'a> {
    pub symbol: i32,
    pub table: &'a CdfTable,
}

/// Encodes a sequence; every symbol is checked before any byte is produced.
pub fn encode_sequence(symbols: &[SymbolSpec]) -> Result<Vec<u8>> {
    for s in symbols {
        s.table.slot_of(s.symbol)?;
    }
    let mut enc = RangeEncoder::new();
    for s in symbols {
        enc.encode_value(s.table, s.symbol)?;
    }
    Ok(enc.finish())
}

/// Supplies the table for position `index`, possibly depending on the
/// symbols decoded so far.
pub trait CdfProvider {
    fn table(&mut self, index: usize, decoded: &[i32]) -> Result<Cow<'_, CdfTable>>;
}

impl CdfProvider for [CdfTable] {
    fn table(&mut self, index: usize, _decoded: &[i32]) -> Result<Cow<'_, CdfTable>> {
        self.get(index)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::Coding(format!("no table for symbol {index}")))
    }
}

pub fn decode_sequence<P: CdfProvider + ?Sized>(
    bytes: &[u8],
    provider: &mut P,
    n: usize,
) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let v = dec.decode_value(provider.table(i, &out)?.as_ref())?;
        out.push(v);
    }
    Ok(out)
}

/// Ideal information content under the tables and the real coded size, in bits.
pub fn estimated_vs_actual(symbols: &[SymbolSpec]) -> Result<(f64, f64)> {
    let mut est = 0.0;
    for s in symbols {
        est += s.table.cost_bits(s.symbol)?;
    }
    let bytes = encode_sequence(symbols)?;
    Ok((est, 8.0 * bytes.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize) -> CdfTable {
        CdfTable::from_pmf(0, &vec![1.0; n], None, 16).unwrap()
    }

    fn random_table(rng: &mut ChaCha8Rng) -> CdfTable {
        let n = rng.random_range(1..40);
        let pmf: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
        let escapes = rng.random_bool(0.7);
        let tails = escapes.then(|| (rng.random::<f64>() * 0.01, rng.random::<f64>() * 0.01));
        let precision = rng.random_range(8..=16);
        CdfTable::from_pmf(rng.random_range(-20..20), &pmf, tails, precision).unwrap()
    }

    fn random_symbol(rng: &mut ChaCha8Rng, t: &CdfTable) -> i32 {
        if t.has_escapes() && rng.random_bool(0.05) {
            if rng.random_bool(0.5) {
                t.support_min() - rng.random_range(1..100_000)
            } else {
                t.support_max() + rng.random_range(1..100_000)
            }
        } else {
            rng.random_range(t.support_min()..=t.support_max())
        }
    }

    #[test]
    fn empty_sequence() {
        let bytes = encode_sequence(&[]).unwrap();
        assert_eq!(bytes.len(), 1);
        let mut tables: Vec<CdfTable> = vec![];
        assert!(decode_sequence(&bytes, tables.as_mut_slice(), 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn uniform_bytes_cost_one_byte_each() {
        let t = uniform(256);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let syms: Vec<i32> = (0..10_000).map(|_| rng.random_range(0..256)).collect();
        let specs: Vec<SymbolSpec> = syms
            .iter()
            .map(|&symbol| SymbolSpec { symbol, table: &t })
            .collect();
        let bytes = encode_sequence(&specs).unwrap();
        assert!((9980..=10050).contains(&bytes.len()), "{}", bytes.len());
        let mut tables = vec![t.clone(); syms.len()];
        assert_eq!(
            decode_sequence(&bytes, tables.as_mut_slice(), syms.len()).unwrap(),
            syms
        );
    }

    #[test]
    fn near_certain_symbol_is_tiny() {
        let t = CdfTable::from_pmf(0, &[1.0, 1e-9], None, 16).unwrap();
        let bytes = encode_sequence(&[SymbolSpec {
            symbol: 0,
            table: &t,
        }])
        .unwrap();
        assert!(bytes.len() <= 8);
    }

    #[test]
    fn skewed_binary_source_costs_its_entropy() {
        let t = CdfTable::from_pmf(0, &[0.99, 0.01], None, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let syms: Vec<i32> = (0..n).map(|_| rng.random_bool(0.01) as i32).collect();
        let specs: Vec<SymbolSpec> = syms
            .iter()
            .map(|&symbol| SymbolSpec { symbol, table: &t })
            .collect();
        let (est, actual) = estimated_vs_actual(&specs).unwrap();
        let h = -(0.99f64 * 0.99f64.log2() + 0.01 * 0.01f64.log2());
        assert!((h - 0.0808).abs() < 1e-4);
        assert!(
            (actual / n as f64 - h).abs() < 0.005,
            "{}",
            actual / n as f64
        );
        assert!(actual <= est * 1.01 + 64.0);
    }

    #[test]
    fn escapes_round_trip_extremes() {
        let t = CdfTable::from_pmf(-2, &[0.2, 0.6, 0.2], Some((0.01, 0.01)), 16).unwrap();
        let syms = [i32::MIN, -3, -2, 0, 2, 3, i32::MAX, 70_000];
        let specs: Vec<SymbolSpec> = syms
            .iter()
            .map(|&symbol| SymbolSpec { symbol, table: &t })
            .collect();
        let bytes = encode_sequence(&specs).unwrap();
        let mut tables = vec![t; syms.len()];
        assert_eq!(
            decode_sequence(&bytes, tables.as_mut_slice(), syms.len()).unwrap(),
            syms
        );
    }

    #[test]
    fn out_of_support_without_escape_fails_before_output() {
        let t = uniform(4);
        assert!(encode_sequence(&[SymbolSpec {
            symbol: 4,
            table: &t
        }])
        .is_err());
    }

    #[test]
    fn truncated_stream_is_reported() {
        let t = uniform(256);
        let syms: Vec<i32> = (0..100).map(|i| (i * 73) % 256).collect();
        let specs: Vec<SymbolSpec> = syms
            .iter()
            .map(|&symbol| SymbolSpec { symbol, table: &t })
            .collect();
        let bytes = encode_sequence(&specs).unwrap();
        let mut tables = vec![t; syms.len()];
        let r = decode_sequence(&bytes[..bytes.len() / 2], tables.as_mut_slice(), syms.len());
        assert!(matches!(r, Err(Error::Coding(_))));
    }

    struct PreviousSymbol {
        tables: Vec<CdfTable>,
    }

    impl CdfProvider for PreviousSymbol {
        fn table(&mut self, index: usize, decoded: &[i32]) -> Result<Cow<'_, CdfTable>> {
            let k = if index == 0 {
                0
            } else {
                decoded[index - 1].rem_euclid(self.tables.len() as i32) as usize
            };
            Ok(Cow::Borrowed(&self.tables[k]))
        }
    }

    #[test]
    fn autoregressive_provider_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tables: Vec<CdfTable> = (0..7).map(|_| random_table(&mut rng)).collect();
        for _ in 0..1000 {
            let n = rng.random_range(0..30);
            let mut syms = Vec::with_capacity(n);
            let mut enc = RangeEncoder::new();
            for i in 0..n {
                let k = if i == 0 {
                    0
                } else {
                    (syms[i - 1] as i32).rem_euclid(7) as usize
                };
                let s = random_symbol(&mut rng, &tables[k]);
                enc.encode_value(&tables[k], s).unwrap();
                syms.push(s);
            }
            let bytes = enc.finish();
            let mut p = PreviousSymbol {
                tables: tables.clone(),
            };
            assert_eq!(decode_sequence(&bytes, &mut p, n).unwrap(), syms);
        }
    }

    #[test]
    fn million_fuzzed_symbols_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tables: Vec<CdfTable> = (0..64).map(|_| random_table(&mut rng)).collect();
        let picks: Vec<usize> = (0..1_000_000).map(|_| rng.random_range(0..64)).collect();
        let syms: Vec<i32> = picks
            .iter()
            .map(|&k| random_symbol(&mut rng, &tables[k]))
            .collect();
        let mut enc = RangeEncoder::new();
        for (&k, &s) in picks.iter().zip(&syms) {
            enc.encode_value(&tables[k], s).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for (&k, &s) in picks.iter().zip(&syms) {
            assert_eq!(dec.decode_value(&tables[k]).unwrap(), s);
        }
    }

    #[test]
    fn pinned_vectors() {
        // frozen outputs; any change here breaks compatibility of stored streams
        let t =
            CdfTable::from_pmf(-2, &[0.1, 0.2, 0.4, 0.2, 0.1], Some((0.001, 0.001)), 16).unwrap();
        let syms = [0, 1, -1, 2, -2, 0, 0, 5, -9, 1];
        let specs: Vec<SymbolSpec> = syms
            .iter()
            .map(|&symbol| SymbolSpec { symbol, table: &t })
            .collect();
        let bytes = encode_sequence(&specs).unwrap();
        assert_eq!(hex(&bytes), PINNED_A);
        let u = uniform(256);
        let specs: Vec<SymbolSpec> = (0..8)
            .map(|i| SymbolSpec {
                symbol: i * 31,
                table: &u,
            })
            .collect();
        let bytes_b = encode_sequence(&specs).unwrap();
        let mut dec = RangeDecoder::new(&bytes_b).unwrap();
        for s in &specs {
            assert_eq!(dec.decode_value(&u).unwrap(), s.symbol);
        }
        assert_eq!(hex(&bytes_b), PINNED_B);
    }

    const PINNED_A: &str = "9a2318ae400001472a000000d9";
    const PINNED_B: &str = "001f3e3e3e3e3e3d46";

    fn hex(b: &[u8]) -> String {
        b.iter().map(|x| format!("{x:02x}")).collect()
    }

    proptest! {
        #[test]
        fn arbitrary_tables_round_trip(seed in any::<u64>(), n in 0usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tables: Vec<CdfTable> = (0..n).map(|_| random_table(&mut rng)).collect();
            let syms: Vec<i32> = tables.iter().map(|t| random_symbol(&mut rng, t)).collect();
            let specs: Vec<SymbolSpec> = syms.iter().zip(&tables).map(|(&symbol, table)| SymbolSpec { symbol, table }).collect();
            let bytes = encode_sequence(&specs).unwrap();
            let mut tables = tables;
            prop_assert_eq!(decode_sequence(&bytes, tables.as_mut_slice(), n).unwrap(), syms);
        }

        #[test]
        fn long_sequences_stay_within_one_percent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_table(&mut rng);
            let syms: Vec<i32> = (0..2000).map(|_| {
                let target = rng.random_range(0..1u32 << t.precision());
                let slot = t.find(target);
                t.value_of(slot).unwrap_or(t.support_min())
            }).collect();
            let specs: Vec<SymbolSpec> = syms.iter().map(|&symbol| SymbolSpec { symbol, table: &t }).collect();
            let (est, actual) = estimated_vs_actual(&specs).unwrap();
            prop_assert!(actual <= est * 1.01 + 64.0, "{} vs {}", actual, est);
        }
    }
}
