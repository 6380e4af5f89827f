//! Invariant probes behind the `selftest` command and the acceptance suite.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{
    decode_image, encode_image, reconstruct_in_memory, DecodeOptions, EncodeOptions,
};
use crate::config::{DistortionKind, ModelConfig, QuantMode, RegNorm};
use crate::entropy::{
    gauss_uniform_likelihood, gauss_uniform_pmf, gmm_uniform_likelihood, DistributionParams,
    FactorizedPrior,
};
use crate::error::{contract, Error, Result};
use crate::flow::{QuantPlan, Quantizer};
use crate::image_io::to_rgb8;
use crate::metrics::{bd_rate, RatePoint};
use crate::model::Model;
use crate::nn::{HeadScratch, ScalarEntropyHead};
use crate::ops::std_normal_cdf;
use crate::params::{ParamStore, Scope};
use crate::train::{evaluate, LossWeights};

/// Outcome of one probe.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// `[1, 3, side, side]` images of independent uniform samples.
pub fn uniform_images(n: usize, side: usize, seed: u64, dtype: DType) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..3 * side * side).map(|_| rng.random::<f32>()).collect();
            Ok(Tensor::from_vec(v, (1, 3, side, side), &Device::Cpu)?.to_dtype(dtype)?)
        })
        .collect()
}

/// Largest pixel error of the unquantized flow inverted from its own latents
/// with the true x-branch.
pub fn invertibility_error(model: &Model, images: &[Tensor]) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in images {
        let x = x.to_dtype(model.dtype())?;
        let t = model.forward(
            &x,
            QuantPlan::uniform(QuantMode::Identity),
            &mut Quantizer::new(0),
            None,
        )?;
        let back = model.inverse(&t.state(), t.hyper.mean.as_ref(), None)?;
        let err = (back - &x)?
            .abs()?
            .max_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Images whose decoded file differs on the 8-bit output from the in-memory
/// reconstruction. Containers are written to and read back from `dir`.
pub fn two_path_mismatches(
    model: &Model,
    images: &[Tensor],
    residual: bool,
    dir: &Path,
) -> Result<usize> {
    let opts = EncodeOptions {
        residual,
        ..EncodeOptions::default()
    };
    let mut bad = 0;
    for (i, x) in images.iter().enumerate() {
        let path = dir.join(format!("two_path_{i}.anfc"));
        std::fs::write(&path, encode_image(model, x, &opts)?.to_bytes()?)
            .map_err(|e| Error::io(&path, e))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let file = decode_image(model, &bytes, &DecodeOptions::default())?.image;
        let memory = reconstruct_in_memory(model, x, &opts, false)?;
        if to_rgb8(&file)? != to_rgb8(&memory)? {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Actual payload bits and the model's `-sum log2 p` estimate per image.
pub fn rate_accounting(
    model: &Model,
    images: &[Tensor],
    residual: bool,
) -> Result<Vec<(usize, f64)>> {
    let opts = EncodeOptions {
        residual,
        ..EncodeOptions::default()
    };
    images
        .iter()
        .map(|x| {
            let e = encode_image(model, x, &opts)?;
            Ok((e.payload_bits(), e.estimate.total()))
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Total mass of an integer pmf, summed outward from `center` until the
/// remaining tails fall under `1e-12`.
fn total_mass(center: f64, pmf: impl Fn(f64) -> f64, tail: impl Fn(f64, f64) -> f64) -> f64 {
    let c = center.round();
    let mut r = 1.0;
    while tail(c - r, c + r) > 1e-12 && r < 1e7 {
        r *= 2.0;
    }
    let mut s = 0.0;
    let mut v = c - r;
    while v <= c + r {
        s += pmf(v);
        v += 1.0;
    }
    s
}

/// Mass of a unit-uniform-convolved Gaussian outside `[lo - 0.5, hi + 0.5]`.
fn gauss_tails(lo: f64, hi: f64, mu: f64, sigma: f64) -> f64 {
    std_normal_cdf((lo - 0.5 - mu) / sigma) + std_normal_cdf((mu - hi - 0.5) / sigma)
}

/// Largest deviation from one of the total mass of the factorized, single
/// Gaussian and mixture pmfs over `draws` random parameter sets each.
pub fn pmf_normalization(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for d in 0..draws {
        let mut store = ParamStore::new(DType::F64, seed.wrapping_add(d as u64))?;
        let prior = FactorizedPrior::new(&mut Scope::root(&mut store).sub("p"), 1)?;
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            let n = store.get(&name).expect("listed").elem_count();
            let dims = store.get(&name).expect("listed").dims().to_vec();
            let v: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
            store.set(&name, &Tensor::from_vec(v, dims, &Device::Cpu)?)?;
        }
        let p = prior.to_scalar()?;
        let m = total_mass(
            p.median(0),
            |v| p.pmf(0, v),
            |lo, hi| p.cdf(0, lo - 0.5) + (1.0 - p.cdf(0, hi + 0.5)),
        );
        worst = worst.max((m - 1.0).abs());

        let mu = rng.random_range(-50.0..50.0);
        let sigma = 10f64.powf(rng.random_range(-1.0..2.0));
        let m = total_mass(
            mu,
            |v| gauss_uniform_pmf(v, mu, sigma),
            |lo, hi| gauss_tails(lo, hi, mu, sigma),
        );
        worst = worst.max((m - 1.0).abs());

        let k = 3;
        let logits: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let weights: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let means: Vec<f64> = (0..k).map(|_| rng.random_range(-30.0..30.0)).collect();
        let scales: Vec<f64> = (0..k)
            .map(|_| 10f64.powf(rng.random_range(-1.0..1.5)))
            .collect();
        let comps: Vec<(f64, f64, f64)> =
            (0..k).map(|i| (weights[i], means[i], scales[i])).collect();
        let mix = DistributionParams::new(k, weights, means, scales)?;
        let m = total_mass(
            0.0,
            |v| mix.pmf(0, v),
            |lo, hi| {
                comps
                    .iter()
                    .map(|&(w, mu, s)| w * gauss_tails(lo, hi, mu, s))
                    .sum()
            },
        );
        worst = worst.max((m - 1.0).abs());
    }
    Ok(worst)
}

/// Largest difference between a one-component mixture and the single
/// Gaussian pmf, through both the scalar and the tensor paths.
pub fn gmm_degeneracy(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let (mut vs, mut mus, mut sigmas) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..draws {
        let mu = rng.random_range(-20.0..20.0);
        let sigma = 10f64.powf(rng.random_range(-1.5..1.5));
        let v = (mu + normal(&mut rng) * sigma * 2.0).round();
        let mix = DistributionParams::single(vec![mu], vec![sigma])?;
        worst = worst.max((mix.pmf(0, v) - gauss_uniform_pmf(v, mu, sigma)).abs());
        vs.push(v);
        mus.push(mu);
        sigmas.push(sigma);
    }
    let n = draws;
    let t = |v: &[f64]| Tensor::from_vec(v.to_vec(), (1, 1, 1, 1, n), &Device::Cpu);
    let single = gauss_uniform_likelihood(&t(&vs)?, &t(&mus)?, &t(&sigmas)?)?;
    let ones = Tensor::ones((1, 1, 1, 1, n), DType::F64, &Device::Cpu)?;
    let mixed = gmm_uniform_likelihood(&t(&vs)?.squeeze(0)?, &ones, &t(&mus)?, &t(&sigmas)?)?;
    let d = (single.squeeze(0)? - mixed)?
        .abs()?
        .max_all()?
        .to_scalar::<f64>()?;
    Ok(worst.max(d))
}

/// Positions of a `side x side` latent whose entropy parameters, in either
/// the tensor or the scalar evaluation, change when that position or any
/// later one (raster order) is perturbed, or that the immediately following
/// position does not see.
pub fn causality_violations(model: &Model, side: usize, seed: u64) -> Result<Vec<usize>> {
    let (ctx, head) = model
        .context()
        .ok_or_else(|| contract!("causality probe needs the autoregressive entropy model"))?;
    let n = model.config().flow.latent_channels;
    let plane = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |len: usize, scale: f64| -> Vec<f64> {
        (0..len)
            .map(|_| (normal(&mut rng) * scale).round())
            .collect()
    };
    let z0 = draw(n * plane, 3.0);
    let hyper: Vec<f64> = draw(2 * n * plane, 1.0);
    let dt = model.dtype();
    let as_t = |v: &[f64], c: usize| -> Result<Tensor> {
        Ok(Tensor::from_vec(v.to_vec(), (1, c, side, side), &Device::Cpu)?.to_dtype(dt)?)
    };
    let hyper_t = as_t(&hyper, 2 * n)?;
    let params = |z: &[f64]| -> Result<Vec<f64>> {
        let raw = head.forward(&ctx.forward(&as_t(z, n)?, None)?, &hyper_t, None)?;
        Ok(raw.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    };
    let channels = 3 * model.config().mixtures * n;
    let at =
        |p: &[f64], pos: usize| -> Vec<f64> { (0..channels).map(|c| p[c * plane + pos]).collect() };
    let base = params(&z0)?;
    let scalar = ScalarEntropyHead::new(ctx, head, None)?;
    let hyper32: Vec<f32> = hyper.iter().map(|&v| v as f32).collect();
    let mut scratch = HeadScratch::default();
    let mut bad = Vec::new();
    let noise = draw(n * plane, 5.0);
    for p in 0..plane {
        let mut z = z0.clone();
        for c in 0..n {
            for q in p..plane {
                z[c * plane + q] += noise[c * plane + q] + 1.0;
            }
        }
        let moved = params(&z)?;
        let mut ok = (0..=p).all(|q| at(&moved, q) == at(&base, q));
        let z32: Vec<f32> = z.iter().map(|&v| v as f32).collect();
        let z0_32: Vec<f32> = z0.iter().map(|&v| v as f32).collect();
        let (y, x) = (p / side, p % side);
        let a = scalar
            .params_at(&z32, &hyper32, side, side, y, x, &mut scratch)
            .to_vec();
        let b = scalar
            .params_at(&z0_32, &hyper32, side, side, y, x, &mut scratch)
            .to_vec();
        ok &= a == b;
        if p > 0 && p % side != 0 {
            // the previous position must see position p-1
            let mut z = z0.clone();
            for c in 0..n {
                z[c * plane + p - 1] += 7.0;
            }
            ok &= at(&params(&z)?, p) != at(&base, p);
        }
        if !ok {
            bad.push(p);
        }
    }
    Ok(bad)
}

/// BD-rate of a curve against itself and of a copy at 0.9 times the rate.
pub fn bd_rate_oracle() -> Result<(f64, f64)> {
    let anchor: Vec<RatePoint> = [
        (0.12, 27.1),
        (0.25, 29.8),
        (0.5, 32.6),
        (0.9, 35.0),
        (1.4, 37.2),
    ]
    .iter()
    .map(|&(rate, quality)| RatePoint { rate, quality })
    .collect();
    let cheaper: Vec<RatePoint> = anchor
        .iter()
        .map(|p| RatePoint {
            rate: 0.9 * p.rate,
            quality: p.quality,
        })
        .collect();
    Ok((bd_rate(&anchor, &anchor)?, bd_rate(&cheaper, &anchor)?))
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

/// Result of comparing backpropagated gradients with central differences.
#[derive(Debug, Clone, Default)]
pub struct GradientReport {
    pub probes: usize,
    /// Probes whose gradient clears the round-off floor by a factor of ten.
    pub informative: usize,
    /// Probes outside tolerance, as `name[index]: analytic vs numeric`.
    pub failures: Vec<String>,
}

const FD_STEP: f64 = 1e-4;

/// Probes three scalars of every parameter tensor whose name contains one of
/// `parts` on a 64x64 uniform image. Needs an `F64` model.
pub fn gradient_check(model: &Model, parts: &[&str], seed: u64) -> Result<GradientReport> {
    if model.dtype() != DType::F64 {
        return Err(contract!("gradient_check needs an F64 model"));
    }
    let x = uniform_images(1, 64, seed, DType::F64)?.remove(0);
    let w = LossWeights {
        lambda2: 0.002,
        lambda1: 0.00002,
        distortion: DistortionKind::Mse,
        reg_norm: RegNorm::L2,
    };
    let plan = QuantPlan::uniform(QuantMode::Noise);
    let loss = |m: &Model| -> Result<Tensor> {
        Ok(evaluate(m, &x, plan, &mut Quantizer::new(seed), &w, None)?
            .terms
            .total)
    };
    let base = loss(model)?;
    let grads = base.backward()?;
    // round-off in the central difference of a loss of this size
    let noise = 100.0 * f64::EPSILON * base.to_scalar::<f64>()?.abs() / FD_STEP;
    let mut names: Vec<&str> = model
        .store()
        .names()
        .filter(|n| parts.iter().any(|p| n.contains(p)))
        .collect();
    names.sort();
    let mut report = GradientReport::default();
    for name in names {
        let var = model.store().get(name).expect("listed");
        let n = var.elem_count();
        let g = grads
            .get(var)
            .map(|g| g.flatten_all()?.to_vec1::<f64>())
            .transpose()?;
        for k in 0..3.min(n) {
            let i = (k * 7919 + 3) % n;
            let analytic = g.as_ref().map_or(0.0, |g| g[i]);
            let v0 = model.store().scalar(name, i)?;
            model.store().set_scalar(name, i, v0 + FD_STEP)?;
            let up = loss(model)?.to_scalar::<f64>()?;
            model.store().set_scalar(name, i, v0 - FD_STEP)?;
            let down = loss(model)?.to_scalar::<f64>()?;
            model.store().set_scalar(name, i, v0)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let scale = analytic.abs().max(numeric.abs());
            report.probes += 1;
            if (analytic - numeric).abs() > 1e-3 * scale + noise {
                report
                    .failures
                    .push(format!("{name}[{i}]: {analytic} vs {numeric}"));
            }
            if scale > 10.0 * noise {
                report.informative += 1;
            }
        }
    }
    Ok(report)
}

/// Reduced-size run of the invariant suite on a fresh random model.
pub fn run(dir: &Path, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let model = Model::new(ModelConfig::tiny(), DType::F32, seed)?;
    let images = uniform_images(4, 64, seed, DType::F32)?;
    let e = invertibility_error(&model, &images)?;
    out.push(check(
        "invertibility",
        e <= 1e-4,
        format!("max error {e:.2e}"),
    ));
    for residual in [false, true] {
        let mut cfg = ModelConfig::tiny();
        cfg.residual_head = residual;
        let m = Model::new(cfg, DType::F32, seed)?;
        let bad = two_path_mismatches(&m, &images[..2], residual, dir)?;
        out.push(check(
            if residual {
                "two-path (residual)"
            } else {
                "two-path"
            },
            bad == 0,
            format!("{bad} of 2 images differ"),
        ));
    }
    let worst = rate_accounting(&model, &images[..2], false)?
        .into_iter()
        .map(|(bits, est)| bits as f64 - (1.01 * est + 64.0))
        .fold(f64::NEG_INFINITY, f64::max);
    out.push(check(
        "rate accounting",
        worst <= 0.0,
        format!("worst slack {worst:.1} bits"),
    ));
    let d = pmf_normalization(100, seed)?;
    out.push(check(
        "pmf normalization",
        d <= 1e-5,
        format!("max |mass - 1| {d:.2e}"),
    ));
    let d = gmm_degeneracy(1000, seed)?;
    out.push(check(
        "mixture degeneracy",
        d <= 1e-12,
        format!("max difference {d:.2e}"),
    ));
    let bad = causality_violations(&Model::new(ModelConfig::tiny(), DType::F64, seed)?, 8, seed)?;
    out.push(check(
        "context causality",
        bad.is_empty(),
        format!("violations at {bad:?}"),
    ));
    let (same, shifted) = bd_rate_oracle()?;
    out.push(check(
        "bd-rate oracle",
        same.abs() < 5e-4 && (shifted + 10.0).abs() <= 0.1,
        format!("{same:.4}% and {shifted:.4}%"),
    ));
    Ok(out)
}
