//! Range coding of the three latents.

use crate::entropy::{
    gauss_uniform_pmf, mixture_table, CdfTable, ScalarFactorizedPrior, DEFAULT_PRECISION,
};
use crate::error::{Error, Result};
use crate::nn::{HeadScratch, ScalarEntropyHead};
use crate::rangecoder::{RangeDecoder, RangeEncoder};

/// Smallest and largest bucketed scale of the x-branch residual.
pub const RESIDUAL_SCALE_MIN: f64 = 0.11;
pub const RESIDUAL_SCALE_MAX: f64 = 64.0;
pub const RESIDUAL_SCALE_LEVELS: usize = 64;

pub(crate) struct Coded {
    pub bytes: Vec<u8>,
    pub estimated_bits: f64,
}

/// Information content of a model probability. Unlike the training loss
/// this is not floored at 2^-24; only underflow to zero is guarded.
fn cost(p: f64) -> f64 {
    -p.max(f64::MIN_POSITIVE).log2()
}

/// `h` is `M x H x W`, coded channel by channel in raster order.
pub(crate) fn encode_h(prior: &ScalarFactorizedPrior, h: &[i32], plane: usize) -> Result<Coded> {
    let mut enc = RangeEncoder::new();
    let mut est = 0.0;
    for c in 0..prior.channels() {
        let table = prior.table(c, DEFAULT_PRECISION)?;
        for &v in &h[c * plane..(c + 1) * plane] {
            enc.encode_value(&table, v)?;
            est += cost(prior.pmf(c, v as f64));
        }
    }
    Ok(Coded {
        bytes: enc.finish(),
        estimated_bits: est,
    })
}

pub(crate) fn decode_h(
    prior: &ScalarFactorizedPrior,
    bytes: &[u8],
    plane: usize,
) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(prior.channels() * plane);
    for c in 0..prior.channels() {
        let table = prior.table(c, DEFAULT_PRECISION)?;
        for _ in 0..plane {
            out.push(dec.decode_value(&table)?);
        }
    }
    Ok(out)
}

/// Conditional model of the main latent.
pub(crate) enum ZModel<'a> {
    /// Autoregressive mixture; `hyper` is the `2N x H x W` feature map.
    Gmm {
        head: &'a ScalarEntropyHead,
        hyper: &'a [f32],
    },
    /// Zero-mean Gaussian per element; `scales` is `N x H x W`.
    Gaussian { scales: &'a [f64] },
}

/// Visits every element of an `N x H x W` latent in raster order, position
/// by position, handing its coding table and pmf to `code`. `z` must hold
/// every element visited before the current one.
fn walk_z(
    model: &ZModel,
    n: usize,
    height: usize,
    width: usize,
    z: &mut [f32],
    mut code: impl FnMut(&CdfTable, &dyn Fn(f64) -> f64) -> Result<i32>,
) -> Result<()> {
    let plane = height * width;
    let mut scratch = HeadScratch::default();
    let mut comps = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let pos = y * width + x;
            match model {
                ZModel::Gmm { head, hyper } => {
                    let raw = head
                        .params_at(z, hyper, height, width, y, x, &mut scratch)
                        .to_vec();
                    for c in 0..n {
                        head.mixture(&raw, c, &mut comps);
                        let table = mixture_table(&comps, DEFAULT_PRECISION)?;
                        let pmf = |v: f64| {
                            comps
                                .iter()
                                .map(|&(w, m, s)| w * gauss_uniform_pmf(v, m, s))
                                .sum()
                        };
                        z[c * plane + pos] = code(&table, &pmf)? as f32;
                    }
                }
                ZModel::Gaussian { scales } => {
                    for c in 0..n {
                        let s = scales[c * plane + pos];
                        let table = mixture_table(&[(1.0, 0.0, s)], DEFAULT_PRECISION)?;
                        z[c * plane + pos] =
                            code(&table, &|v| gauss_uniform_pmf(v, 0.0, s))? as f32;
                    }
                }
            }
        }
    }
    Ok(())
}

pub(crate) fn encode_z(
    model: &ZModel,
    z: &[i32],
    n: usize,
    height: usize,
    width: usize,
) -> Result<Coded> {
    let plane = height * width;
    let mut buf: Vec<f32> = z.iter().map(|&v| v as f32).collect();
    let mut enc = RangeEncoder::new();
    let mut est = 0.0;
    let mut pos = 0usize;
    walk_z(model, n, height, width, &mut buf, |table, pmf| {
        // elements arrive position-major; recover the channel-major index
        let (c, p) = (pos % n, pos / n);
        pos += 1;
        let v = z[c * plane + p];
        enc.encode_value(table, v)?;
        est += cost(pmf(v as f64));
        Ok(v)
    })?;
    Ok(Coded {
        bytes: enc.finish(),
        estimated_bits: est,
    })
}

pub(crate) fn decode_z(
    model: &ZModel,
    bytes: &[u8],
    n: usize,
    height: usize,
    width: usize,
) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut buf = vec![0f32; n * height * width];
    walk_z(model, n, height, width, &mut buf, |table, _| {
        dec.decode_value(table)
    })?;
    Ok(buf.iter().map(|&v| v as i32).collect())
}

/// Bucket of a residual scale on the exponential grid.
pub fn residual_bucket(scale: f64) -> usize {
    let ratio = (RESIDUAL_SCALE_MAX / RESIDUAL_SCALE_MIN).ln();
    let t = (scale.max(RESIDUAL_SCALE_MIN) / RESIDUAL_SCALE_MIN).ln() / ratio;
    let i = (t * (RESIDUAL_SCALE_LEVELS - 1) as f64).round();
    if i.is_nan() {
        return 0;
    }
    (i as usize).min(RESIDUAL_SCALE_LEVELS - 1)
}

pub fn residual_bucket_scale(bucket: usize) -> f64 {
    let t = bucket as f64 / (RESIDUAL_SCALE_LEVELS - 1) as f64;
    RESIDUAL_SCALE_MIN * (RESIDUAL_SCALE_MAX / RESIDUAL_SCALE_MIN).powf(t)
}

struct ResidualTables(Vec<Option<CdfTable>>);

impl ResidualTables {
    fn new() -> Self {
        ResidualTables(vec![None; RESIDUAL_SCALE_LEVELS])
    }

    fn get(&mut self, scale: f64) -> Result<&CdfTable> {
        let b = residual_bucket(scale);
        if self.0[b].is_none() {
            self.0[b] = Some(mixture_table(
                &[(1.0, 0.0, residual_bucket_scale(b))],
                DEFAULT_PRECISION,
            )?);
        }
        Ok(self.0[b].as_ref().expect("just built"))
    }
}

/// Rounded x-branch in 8-bit units under zero-mean Gaussians of the given scales.
pub(crate) fn encode_x(x: &[i32], scales: &[f64]) -> Result<Coded> {
    if x.len() != scales.len() {
        return Err(Error::Coding("residual and scale sizes differ".into()));
    }
    let mut tables = ResidualTables::new();
    let mut enc = RangeEncoder::new();
    let mut est = 0.0;
    for (&v, &s) in x.iter().zip(scales) {
        enc.encode_value(tables.get(s)?, v)?;
        est += cost(gauss_uniform_pmf(v as f64, 0.0, s));
    }
    Ok(Coded {
        bytes: enc.finish(),
        estimated_bits: est,
    })
}

pub(crate) fn decode_x(bytes: &[u8], scales: &[f64]) -> Result<Vec<i32>> {
    let mut tables = ResidualTables::new();
    let mut dec = RangeDecoder::new(bytes)?;
    scales
        .iter()
        .map(|&s| dec.decode_value(tables.get(s)?))
        .collect()
}
