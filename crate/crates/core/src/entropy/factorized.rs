//! Learned per-channel univariate prior for the hyper latent.
//!
//! Each channel owns a small monotone network `x -> logit C(x)` built from
//! softplus-positive matrices and tanh gates, the standard construction for
//! hyperprior codecs. The pmf of integer `v` is `C(v + 0.5) - C(v - 0.5)`.

use candle_core::{DType, Tensor};

use super::cdf::CdfTable;
use crate::error::{contract, Result};
use crate::ops::softplus;
use crate::params::{Init, Scope};

const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const INIT_SCALE: f64 = 10.0;
/// Tail mass below which the table support stops growing.
const TAIL_MASS: f64 = 1.0 / (1u64 << 20) as f64;
const MAX_HALF_WIDTH: i32 = 4096;

#[derive(Clone)]
struct Layer {
    matrix: Tensor,
    bias: Tensor,
    factor: Option<Tensor>,
}

#[derive(Clone)]
pub struct FactorizedPrior {
    channels: usize,
    layers: Vec<Layer>,
}

impl FactorizedPrior {
    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        let scale = INIT_SCALE.powf(1.0 / (FILTERS.len() - 1) as f64);
        let mut layers = Vec::new();
        for i in 0..FILTERS.len() - 1 {
            let (fin, fout) = (FILTERS[i], FILTERS[i + 1]);
            let init = (1.0 / scale / fout as f64).exp_m1().ln();
            let matrix = scope.param(
                &format!("matrix{i}"),
                &[channels, fout, fin],
                Init::Const(init),
            )?;
            let bias = scope.param(
                &format!("bias{i}"),
                &[channels, fout, 1],
                Init::Uniform(0.5),
            )?;
            let factor = if i + 2 < FILTERS.len() {
                Some(scope.param(&format!("factor{i}"), &[channels, fout, 1], Init::Zeros)?)
            } else {
                None
            };
            layers.push(Layer {
                matrix,
                bias,
                factor,
            });
        }
        Ok(FactorizedPrior { channels, layers })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `x` is `[C, 1, P]`; returns the cumulative logits with the same shape.
    fn logits_cumulative(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = softplus(&layer.matrix)?
                .matmul(&h)?
                .broadcast_add(&layer.bias)?;
            if let Some(f) = &layer.factor {
                h = (&h + f.tanh()?.broadcast_mul(&h.tanh()?)?)?;
            }
        }
        Ok(h)
    }

    /// Likelihood of every element of `v` (`[B, C, H, W]`), same shape.
    pub fn likelihood(&self, v: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = v.dims4()?;
        if c != self.channels {
            return Err(contract!(
                "factorized prior has {} channels, input {c}",
                self.channels
            ));
        }
        let flat = v.permute((1, 0, 2, 3))?.reshape((c, 1, b * h * w))?;
        let lower = self.logits_cumulative(&(&flat - 0.5)?)?;
        let upper = self.logits_cumulative(&(&flat + 0.5)?)?;
        // evaluate on the side of the median where the sigmoids are not saturated
        let sign = ((&lower + &upper)?.ge(0.0)?.to_dtype(lower.dtype())? * -2.0)?
            .affine(1.0, 1.0)?
            .detach();
        let s = |t: &Tensor| -> Result<Tensor> { Ok(candle_nn::ops::sigmoid(&(t * &sign)?)?) };
        let lik = (s(&upper)? - s(&lower)?)?.abs()?;
        Ok(lik.reshape((c, b, h, w))?.permute((1, 0, 2, 3))?)
    }

    /// Extracts the parameters for scalar evaluation.
    pub fn to_scalar(&self) -> Result<ScalarFactorizedPrior> {
        let grab = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        };
        let mut layers = Vec::new();
        for l in &self.layers {
            let matrix = grab(&l.matrix)?.into_iter().map(scalar_softplus).collect();
            let bias = grab(&l.bias)?;
            let factor = match &l.factor {
                Some(f) => Some(grab(f)?.into_iter().map(libm::tanh).collect()),
                None => None,
            };
            layers.push(ScalarLayer {
                matrix,
                bias,
                factor,
            });
        }
        Ok(ScalarFactorizedPrior {
            channels: self.channels,
            layers,
        })
    }
}

fn scalar_softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

struct ScalarLayer {
    /// softplus already applied, `[C, fout, fin]`
    matrix: Vec<f64>,
    bias: Vec<f64>,
    /// tanh already applied
    factor: Option<Vec<f64>>,
}

/// `f64` evaluator used for table construction on both coder sides.
pub struct ScalarFactorizedPrior {
    channels: usize,
    layers: Vec<ScalarLayer>,
}

impl ScalarFactorizedPrior {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn logit_cdf(&self, c: usize, x: f64) -> f64 {
        let mut h = [x, 0.0, 0.0];
        let mut next = [0.0; 3];
        for (i, l) in self.layers.iter().enumerate() {
            let (fin, fout) = (FILTERS[i], FILTERS[i + 1]);
            for o in 0..fout {
                let mut acc = l.bias[c * fout + o];
                for j in 0..fin {
                    acc += l.matrix[(c * fout + o) * fin + j] * h[j];
                }
                if let Some(f) = &l.factor {
                    acc += f[c * fout + o] * libm::tanh(acc);
                }
                next[o] = acc;
            }
            h = next;
        }
        h[0]
    }

    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        sigmoid(self.logit_cdf(c, x))
    }

    pub fn pmf(&self, c: usize, v: f64) -> f64 {
        let lo = self.logit_cdf(c, v - 0.5);
        let hi = self.logit_cdf(c, v + 0.5);
        let s = if lo + hi >= 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * hi) - sigmoid(s * lo)).abs()
    }

    /// Point where the channel CDF crosses one half.
    pub fn median(&self, c: usize) -> f64 {
        let (mut lo, mut hi) = (-1.0e4, 1.0e4);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.logit_cdf(c, mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Coding table for channel `c`, support grown outward from the median
    /// until both tails hold less than 2^-20.
    pub fn table(&self, c: usize, precision: u32) -> Result<CdfTable> {
        let center = self.median(c).round().clamp(-1.0e6, 1.0e6) as i32;
        let below = |v: i32| sigmoid(self.logit_cdf(c, v as f64 - 0.5));
        let above = |v: i32| sigmoid(-self.logit_cdf(c, v as f64 + 0.5));
        let mut lo = center;
        while center - lo < MAX_HALF_WIDTH && below(lo) > TAIL_MASS {
            lo -= 1;
        }
        let mut hi = center;
        while hi - center < MAX_HALF_WIDTH && above(hi) > TAIL_MASS {
            hi += 1;
        }
        let pmf: Vec<f64> = (lo..=hi).map(|v| self.pmf(c, v as f64)).collect();
        CdfTable::from_pmf(lo, &pmf, Some((below(lo), above(hi))), precision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;
    use candle_nn::Optimizer;
    use rand::SeedableRng;
    use rand_distr::Distribution;

    fn prior(dtype: DType, channels: usize, seed: u64) -> (ParamStore, FactorizedPrior) {
        let mut store = ParamStore::new(dtype, seed).unwrap();
        let p = FactorizedPrior::new(&mut Scope::root(&mut store).sub("fp"), channels).unwrap();
        (store, p)
    }

    #[test]
    fn pmf_sums_to_one_and_matches_tensor_path() -> Result<()> {
        let (_s, p) = prior(DType::F64, 3, 5);
        let sp = p.to_scalar()?;
        for c in 0..3 {
            let m = sp.median(c).round();
            let total: f64 = (-200..=200).map(|d| sp.pmf(c, m + d as f64)).sum();
            assert!((total - 1.0).abs() < 1e-5, "channel {c}: {total}");
        }
        let v =
            Tensor::new(&[-3f64, 0.0, 1.0, 7.0, 2.0, -1.0], &Device::Cpu)?.reshape((1, 3, 1, 2))?;
        let t = p.likelihood(&v)?.flatten_all()?.to_vec1::<f64>()?;
        let vals = [-3.0, 0.0, 1.0, 7.0, 2.0, -1.0];
        for (i, got) in t.iter().enumerate() {
            assert!((got - sp.pmf(i / 2, vals[i])).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn cdf_is_monotone() -> Result<()> {
        let (_s, p) = prior(DType::F64, 2, 9);
        let sp = p.to_scalar()?;
        let mut prev = 0.0;
        for i in -100..100 {
            let c = sp.cdf(1, i as f64 * 0.37);
            assert!(c >= prev);
            prev = c;
        }
        Ok(())
    }

    #[test]
    fn table_covers_the_mass() -> Result<()> {
        let (_s, p) = prior(DType::F64, 1, 2);
        let t = p.to_scalar()?.table(0, 16)?;
        assert!(t.has_escapes());
        assert!(t.probability(0) < 1e-3 && t.probability(t.num_slots() - 1) < 1e-3);
        Ok(())
    }

    #[test]
    fn fitting_unit_gaussian_samples_concentrates_mass_at_zero() -> Result<()> {
        let (store, p) = prior(DType::F64, 1, 0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let uni = rand_distr::Uniform::new(-0.5, 0.5).unwrap();
        let mut opt = candle_nn::AdamW::new(
            store.vars(),
            candle_nn::ParamsAdamW {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        for _ in 0..300 {
            let xs: Vec<f64> = (0..512)
                .map(|_| normal.sample(&mut rng) + uni.sample(&mut rng))
                .collect();
            let v = Tensor::from_vec(xs, (1, 1, 1, 512), &Device::Cpu)?;
            let loss = p.likelihood(&v)?.maximum(1e-9)?.log()?.mean_all()?.neg()?;
            opt.backward_step(&loss)?;
        }
        let sp = p.to_scalar()?;
        assert!(sp.pmf(0, 0.0) > sp.pmf(0, 3.0));
        assert!((sp.pmf(0, 0.0) - 0.3829).abs() < 0.05);
        Ok(())
    }
}
