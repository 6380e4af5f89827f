//! Discrete likelihoods of the coded latents.
//!
//! Every continuous density used here is convolved with the unit uniform
//! density, so the probability of an integer symbol `v` is the density's
//! mass on `[v - 0.5, v + 0.5]`. Two evaluation paths exist for each family:
//! differentiable tensor versions used by training, and scalar `f64`
//! versions used to build the integer tables the range coder consumes.

mod cdf;
mod factorized;

pub use cdf::{CdfTable, SymbolSlot, DEFAULT_PRECISION};
pub use factorized::{FactorizedPrior, ScalarFactorizedPrior};

use candle_core::Tensor;

use crate::error::{contract, Result};
use crate::ops::{normal_cdf, std_normal_cdf};

/// Lower clamp applied to probabilities before taking logs on the rate side.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / (1u64 << 24) as f64;
/// Smallest scale any Gaussian component may take.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Per-element mixture parameters, element-major: element `e`, component
/// `k` lives at index `e * k_components + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionParams {
    pub components: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl DistributionParams {
    pub fn new(
        components: usize,
        weights: Vec<f64>,
        means: Vec<f64>,
        scales: Vec<f64>,
    ) -> Result<Self> {
        let p = DistributionParams {
            components,
            weights,
            means,
            scales,
        };
        p.validate()?;
        Ok(p)
    }

    /// A single Gaussian per element.
    pub fn single(means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let n = means.len();
        Self::new(1, vec![1.0; n], means, scales)
    }

    pub fn len(&self) -> usize {
        if self.components == 0 {
            0
        } else {
            self.means.len() / self.components
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.components;
        if k == 0 {
            return Err(contract!("mixture needs at least one component"));
        }
        if self.weights.len() != self.means.len()
            || self.scales.len() != self.means.len()
            || !self.means.len().is_multiple_of(k)
        {
            return Err(contract!("mixture arrays have inconsistent lengths"));
        }
        for (e, w) in self.weights.chunks(k).enumerate() {
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-6 || w.iter().any(|&x| x < 0.0) {
                return Err(contract!("element {e}: weights {w:?} not on the simplex"));
            }
        }
        if let Some(s) = self.scales.iter().find(|&&s| !(s >= SCALE_FLOOR)) {
            return Err(contract!("scale {s} below floor {SCALE_FLOOR}"));
        }
        Ok(())
    }

    /// Components of element `e` as `(weight, mean, scale)` triples.
    pub fn element(&self, e: usize) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let k = self.components;
        (e * k..(e + 1) * k).map(move |i| (self.weights[i], self.means[i], self.scales[i]))
    }

    /// Probability of integer `v` for element `e`.
    pub fn pmf(&self, e: usize, v: f64) -> f64 {
        self.element(e)
            .map(|(w, m, s)| w * gauss_uniform_pmf(v, m, s))
            .sum()
    }
}

/// `Phi((v + 0.5 - mu) / sigma) - Phi((v - 0.5 - mu) / sigma)`, evaluated on
/// the lower tail side so that far-tail probabilities do not cancel.
pub fn gauss_uniform_pmf(v: f64, mu: f64, sigma: f64) -> f64 {
    let d = (v - mu).abs();
    let sigma = sigma.max(SCALE_FLOOR);
    std_normal_cdf((0.5 - d) / sigma) - std_normal_cdf((-0.5 - d) / sigma)
}

/// Elementwise [`gauss_uniform_pmf`] over slices.
pub fn gauss_uniform_pmf_slice(v: &[f64], mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    if v.len() != mu.len() || v.len() != sigma.len() {
        return Err(contract!("pmf arguments have different lengths"));
    }
    Ok(v.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&v, &m), &s)| gauss_uniform_pmf(v, m, s))
        .collect())
}

/// Mixture pmf of every element `e` at `v[e]`.
pub fn gmm_uniform_pmf(v: &[f64], params: &DistributionParams) -> Result<Vec<f64>> {
    if v.len() != params.len() {
        return Err(contract!(
            "{} symbols for {} mixture elements",
            v.len(),
            params.len()
        ));
    }
    Ok(v.iter()
        .enumerate()
        .map(|(e, &x)| params.pmf(e, x))
        .collect())
}

/// Tensor form of [`gauss_uniform_pmf`]; broadcasts `mu` and `sigma` against `v`.
pub fn gauss_uniform_likelihood(v: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let d = v.broadcast_sub(mu)?.abs()?;
    let sigma = sigma.maximum(SCALE_FLOOR)?;
    let upper = normal_cdf(&d.neg()?.affine(1.0, 0.5)?.broadcast_div(&sigma)?)?;
    let lower = normal_cdf(&d.neg()?.affine(1.0, -0.5)?.broadcast_div(&sigma)?)?;
    Ok((upper - lower)?)
}

/// Tensor mixture likelihood: `v` is `[B, N, H, W]`; `weights`, `means`,
/// `scales` are `[B, K, N, H, W]`.
pub fn gmm_uniform_likelihood(
    v: &Tensor,
    weights: &Tensor,
    means: &Tensor,
    scales: &Tensor,
) -> Result<Tensor> {
    let v = v.unsqueeze(1)?;
    let per = gauss_uniform_likelihood(&v, means, scales)?;
    Ok((per * weights)?.sum(1)?)
}

/// Sum of elementwise Gaussian log-densities `log N(x; 0, sigma0^2)` in nats.
pub fn x2_prior_logp(x2: &[f64], sigma0: f64) -> Result<f64> {
    if !(sigma0 > 0.0) {
        return Err(contract!("sigma0 must be positive, got {sigma0}"));
    }
    let var = sigma0 * sigma0;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    Ok(x2.iter().map(|x| norm - x * x / (2.0 * var)).sum())
}

/// `-sum log2 max(p, 2^-24)` over a slice of probabilities.
pub fn rate_bits(probabilities: &[f64]) -> f64 {
    probabilities
        .iter()
        .map(|&p| -p.max(LIKELIHOOD_FLOOR).log2())
        .sum()
}

/// Tensor rate in nats, `-sum ln max(p, 2^-24)`.
pub fn rate_nats(likelihood: &Tensor) -> Result<Tensor> {
    Ok(likelihood
        .maximum(LIKELIHOOD_FLOOR)?
        .log()?
        .sum_all()?
        .neg()?)
}

/// Converts the raw `[B, 3K*N, H, W]` output of the parameter head into
/// `(weights, means, scales)`, each `[B, K, N, H, W]`.
pub fn split_mixture_params(raw: &Tensor, components: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = raw.dims4()?;
    let k = components;
    if c % (3 * k) != 0 {
        return Err(contract!(
            "{c} parameter channels not divisible by 3K = {}",
            3 * k
        ));
    }
    let n = c / (3 * k);
    let raw = raw.reshape((b, 3, k, n, h, w))?;
    let logits = raw.narrow(1, 0, 1)?.squeeze(1)?;
    let weights = candle_nn::ops::softmax(&logits, 1)?;
    let means = raw.narrow(1, 1, 1)?.squeeze(1)?;
    let scales = scale_from_raw(&raw.narrow(1, 2, 1)?.squeeze(1)?)?;
    Ok((weights, means, scales))
}

/// `max(exp(clamp(r)), SCALE_FLOOR)`.
pub fn scale_from_raw(raw: &Tensor) -> Result<Tensor> {
    Ok(raw.clamp(-20.0, 20.0)?.exp()?.maximum(SCALE_FLOOR)?)
}

/// Scalar mirror of [`scale_from_raw`].
pub fn scalar_scale_from_raw(raw: f64) -> f64 {
    raw.clamp(-20.0, 20.0).exp().max(SCALE_FLOOR)
}

/// Scalar mirror of [`split_mixture_params`] for one element whose raw
/// parameters are `raw[(t * K + k) * stride]` with `t` in {logit, mean, scale}.
pub fn scalar_mixture(raw: impl Fn(usize, usize) -> f64, k: usize, out: &mut Vec<(f64, f64, f64)>) {
    out.clear();
    let max = (0..k).map(|j| raw(0, j)).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = (0..k).map(|j| (raw(0, j) - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    for (j, e) in exps.iter().enumerate() {
        out.push((e / total, raw(1, j), scalar_scale_from_raw(raw(2, j))));
    }
}

/// Half-width of a table in units of the largest component scale.
pub const TABLE_SIGMAS: f64 = 8.0;
/// Cap on the half-width of any Gaussian table.
pub const MAX_TABLE_HALF_WIDTH: f64 = 4096.0;

/// Coding table for one mixture element given its `(weight, mean, scale)`
/// components. The support spans every component's mean plus or minus eight
/// scales; mass outside goes to the two escape symbols.
pub fn mixture_table(components: &[(f64, f64, f64)], precision: u32) -> Result<CdfTable> {
    if components.is_empty() {
        return Err(contract!("mixture table needs at least one component"));
    }
    let clampv = |v: f64| v.clamp(-1.0e6, 1.0e6);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(_, m, s) in components {
        let half = (TABLE_SIGMAS * s).min(MAX_TABLE_HALF_WIDTH).ceil() + 1.0;
        lo = lo.min(clampv(m.round()) - half);
        hi = hi.max(clampv(m.round()) + half);
    }
    if hi - lo > 2.0 * MAX_TABLE_HALF_WIDTH {
        // widely separated components: keep the window around the heaviest one
        let &(_, m, _) = components
            .iter()
            .fold(&components[0], |a, b| if b.0 > a.0 { b } else { a });
        lo = clampv(m.round()) - MAX_TABLE_HALF_WIDTH;
        hi = clampv(m.round()) + MAX_TABLE_HALF_WIDTH;
    }
    let (lo, hi) = (lo as i32, hi as i32);
    let mut pmf = Vec::with_capacity((hi - lo + 1) as usize);
    for v in lo..=hi {
        pmf.push(
            components
                .iter()
                .map(|&(w, m, s)| w * gauss_uniform_pmf(v as f64, m, s))
                .sum(),
        );
    }
    let mut below = 0.0;
    let mut above = 0.0;
    for &(w, m, s) in components {
        let s = s.max(SCALE_FLOOR);
        below += w * std_normal_cdf((lo as f64 - 0.5 - m) / s);
        above += w * std_normal_cdf((m - hi as f64 - 0.5) / s);
    }
    CdfTable::from_pmf(lo, &pmf, Some((below, above)), precision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    /// Composite Simpson integration of the standard normal density.
    fn simpson_normal_mass(a: f64, b: f64) -> f64 {
        let n = 2000;
        let h = (b - a) / n as f64;
        let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn centered_unit_gaussian_bin_matches_quadrature() {
        let oracle = simpson_normal_mass(-0.5, 0.5);
        assert!((oracle - 0.382925).abs() < 1e-6);
        assert!((gauss_uniform_pmf(2.0, 2.0, 1.0) - oracle).abs() < 1e-12);
    }

    #[test]
    fn collapsed_scale_puts_all_mass_in_one_bin() {
        assert!((gauss_uniform_pmf(3.0, 3.2, 1e-6) - 1.0).abs() < 1e-12);
        assert!(gauss_uniform_pmf(4.0, 3.2, 1e-6) < 1e-300);
    }

    #[test]
    fn pmf_sums_to_one_over_forty_sigma() {
        for &(mu, sigma) in &[(0.3f64, 1.0f64), (-7.25, 3.5), (100.9, 0.2), (0.0, 25.0)] {
            let lo = (mu - 40.0 * sigma).floor() as i64;
            let hi = (mu + 40.0 * sigma).ceil() as i64;
            let s: f64 = (lo..=hi)
                .map(|v| gauss_uniform_pmf(v as f64, mu, sigma))
                .sum();
            assert!((s - 1.0).abs() < 1e-6, "mu {mu} sigma {sigma}: {s}");
        }
    }

    #[test]
    fn mixture_with_one_component_is_the_gaussian() {
        let p = DistributionParams::single(vec![0.4, -2.0], vec![0.7, 3.0]).unwrap();
        let v = [1.0, -5.0];
        let got = gmm_uniform_pmf(&v, &p).unwrap();
        assert!((got[0] - gauss_uniform_pmf(1.0, 0.4, 0.7)).abs() < 1e-12);
        assert!((got[1] - gauss_uniform_pmf(-5.0, -2.0, 3.0)).abs() < 1e-12);
    }

    #[test]
    fn identical_components_match_one_component() {
        let p = DistributionParams::new(3, vec![1.0 / 3.0; 3], vec![1.5; 3], vec![0.8; 3]).unwrap();
        assert!((p.pmf(0, 2.0) - gauss_uniform_pmf(2.0, 1.5, 0.8)).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(DistributionParams::new(2, vec![0.5, 0.6], vec![0.0; 2], vec![1.0; 2]).is_err());
        assert!(DistributionParams::new(1, vec![1.0], vec![0.0], vec![0.0]).is_err());
        assert!(DistributionParams::new(2, vec![1.0], vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn x2_prior_closed_forms() {
        let s0 = 0.5;
        let n = 4;
        let at_zero = x2_prior_logp(&vec![0.0; n], s0).unwrap();
        assert!(
            (at_zero - n as f64 * -0.5 * (2.0 * std::f64::consts::PI * s0 * s0).ln()).abs() < 1e-12
        );
        let x = [0.1, -0.2, 0.3, 0.05];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let sq: f64 = x.iter().map(|v| v * v).sum();
        let drop = x2_prior_logp(&x, s0).unwrap() - x2_prior_logp(&x2, s0).unwrap();
        assert!((drop - 3.0 * sq / (2.0 * s0 * s0)).abs() < 1e-12);
        assert!(x2_prior_logp(&x, 0.0).is_err());
    }

    #[test]
    fn x2_prior_matches_scalar_loop() {
        let x: Vec<f64> = (0..10)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
            .collect();
        let s0 = 1.3;
        let mut acc = 0.0;
        for v in &x {
            let density =
                (-v * v / (2.0 * s0 * s0)).exp() / (s0 * (2.0 * std::f64::consts::PI).sqrt());
            acc += density.ln();
        }
        assert!((x2_prior_logp(&x, s0).unwrap() - acc).abs() < 1e-10);
    }

    #[test]
    fn rate_of_certain_and_uniform_symbols() {
        assert_eq!(rate_bits(&[1.0, 1.0]), 0.0);
        let u = vec![1.0 / 256.0; 10];
        assert!((rate_bits(&u) - 80.0).abs() < 1e-9);
        // reordering is a pure sum
        let a = [0.1, 0.7, 0.2];
        let b = [0.2, 0.1, 0.7];
        assert!((rate_bits(&a) - rate_bits(&b)).abs() < 1e-12);
        assert!((rate_bits(&[0.0]) - 24.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_and_scalar_likelihoods_agree() -> Result<()> {
        let dev = Device::Cpu;
        let v = Tensor::new(&[0f64, 1.0, -3.0, 7.0], &dev)?;
        let mu = Tensor::new(&[0.2f64, -0.4, -3.1, 2.0], &dev)?;
        let s = Tensor::new(&[1.0f64, 0.3, 2.0, 0.9], &dev)?;
        let got = gauss_uniform_likelihood(&v, &mu, &s)?.to_vec1::<f64>()?;
        let want = gauss_uniform_pmf_slice(
            &[0.0, 1.0, -3.0, 7.0],
            &[0.2, -0.4, -3.1, 2.0],
            &[1.0, 0.3, 2.0, 0.9],
        )?;
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
        Ok(())
    }
}
