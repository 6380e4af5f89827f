//! Image to bitstream and back.
//!
//! Encoding pads the image, runs the flow with rounding, codes `h` with the
//! factorized prior, codes `z` autoregressively (or under the hyper Gaussian)
//! and optionally codes the rounded x-branch. Decoding mirrors it and runs
//! the inverse flow from the decoded latents.

mod container;
mod latent;

use candle_core::{DType, Tensor};

pub use container::{Container, Flags, FORMAT_VERSION, HEADER_LEN, MAGIC};
pub use latent::{
    residual_bucket, residual_bucket_scale, RESIDUAL_SCALE_LEVELS, RESIDUAL_SCALE_MAX,
    RESIDUAL_SCALE_MIN,
};

use crate::config::{EntropyMode, QuantMode};
use crate::error::{contract, Error, Result};
use crate::flow::{
    AugmentedState, HyperOutput, HyperStep, PipelineTrace, QuantPlan, Quantizer, SPATIAL_MULTIPLE,
};
use crate::model::Model;
use crate::nn::{Conditioning, ScalarEntropyHead};
use latent::ZModel;

/// Default cap on padded pixels per image.
pub const DEFAULT_MAX_PIXELS: usize = 4096 * 4096;

/// Scale of the x-branch residual: `x̂₂ = round(255 · x₂)`.
pub const RESIDUAL_UNIT: f64 = 255.0;

#[derive(Debug, Clone)]
pub struct EncodeOptions {
    pub residual: bool,
    pub lambda_index: Option<usize>,
    pub max_pixels: usize,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            residual: false,
            lambda_index: None,
            max_pixels: DEFAULT_MAX_PIXELS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    /// Skip the quality enhancement network. Residual streams always skip
    /// it: the network is trained on reconstructions from a zeroed x-branch.
    pub bypass_qe: bool,
    pub max_pixels: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            bypass_qe: false,
            max_pixels: DEFAULT_MAX_PIXELS,
        }
    }
}

/// Model information content of each payload, `-Σ log2 p`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RateEstimate {
    pub h_bits: f64,
    pub z_bits: f64,
    pub x_bits: f64,
}

impl RateEstimate {
    pub fn total(&self) -> f64 {
        self.h_bits + self.z_bits + self.x_bits
    }
}

/// Integer latents, channel-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Latents {
    pub h_hat: Vec<i32>,
    pub z_hat: Vec<i32>,
    pub x_hat: Option<Vec<i32>>,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub container: Container,
    pub estimate: RateEstimate,
    pub latents: Latents,
}

impl Encoded {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.container.to_bytes()
    }

    pub fn payload_bits(&self) -> usize {
        8 * self.container.payload_bytes()
    }

    pub fn bpp(&self) -> f64 {
        self.container.bpp()
    }
}

#[derive(Debug, Clone)]
pub struct Decoded {
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub latents: Latents,
}

/// Padded size for an `height x width` image.
pub fn padded_dims(height: usize, width: usize) -> (usize, usize) {
    (
        height.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE,
        width.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE,
    )
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the bottom and right edges of `[B, C, H, W]` up to the next
/// multiple; returns the original `(H, W)`.
pub fn pad_reflect(x: &Tensor, multiple: usize) -> Result<(Tensor, (usize, usize))> {
    if multiple == 0 {
        return Err(contract!("padding multiple must be positive"));
    }
    let (_, _, h, w) = x.dims4()?;
    let (ph, pw) = (
        h.div_ceil(multiple) * multiple,
        w.div_ceil(multiple) * multiple,
    );
    let mut out = x.clone();
    for (dim, n, p) in [(2, h, ph), (3, w, pw)] {
        if p != n {
            let idx: Vec<u32> = (0..p).map(|i| reflect_index(i, n) as u32).collect();
            let idx = Tensor::from_vec(idx, p, x.device())?;
            out = out.contiguous()?.index_select(&idx, dim)?;
        }
    }
    Ok((out, (h, w)))
}

/// Inverse of [`pad_reflect`].
pub fn crop(x: &Tensor, dims: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if dims.0 > h || dims.1 > w {
        return Err(contract!("crop {dims:?} larger than {h}x{w}"));
    }
    Ok(x.narrow(2, 0, dims.0)?.narrow(3, 0, dims.1)?)
}

/// Hyper transform at a given quantization: returns `ĥ`, the latent to code
/// (mean-removed in single-Gaussian mode) and the hyper synthesis output.
pub fn hyper_encode(
    z2: &Tensor,
    hyper: &dyn HyperStep,
    mode: QuantMode,
    quantizer: &mut Quantizer,
    cond: Option<&Conditioning>,
) -> Result<(Tensor, Tensor, HyperOutput)> {
    let h_hat = quantizer.apply(&hyper.analysis(z2, cond)?, mode)?;
    let out = hyper.synthesis(&h_hat, cond)?;
    let centered = match &out.mean {
        Some(mu) => (z2 - mu)?,
        None => z2.clone(),
    };
    let z_hat = quantizer.apply(&centered, mode)?;
    Ok((h_hat, z_hat, out))
}

/// Accepts `[3, H, W]` or `[1, 3, H, W]` with values in `[0, 1]`.
fn as_batch(image: &Tensor, dtype: DType) -> Result<Tensor> {
    let x = match image.rank() {
        3 => image.unsqueeze(0)?,
        4 => image.clone(),
        r => {
            return Err(Error::Image(format!(
                "expected a [3,H,W] image, got rank {r}"
            )))
        }
    };
    let (b, c, _, _) = x.dims4()?;
    if b != 1 {
        return Err(contract!(
            "codec works on one image at a time, got batch {b}"
        ));
    }
    if c != 3 {
        return Err(Error::Image(format!("non-RGB input with {c} channels")));
    }
    let x = x.to_dtype(dtype)?;
    let lo = x.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let hi = x.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(lo >= 0.0 && hi <= 1.0) {
        return Err(contract!(
            "pixel values must lie in [0, 1], got [{lo}, {hi}]"
        ));
    }
    Ok(x)
}

fn check_budget(height: usize, width: usize, max_pixels: usize) -> Result<()> {
    let (ph, pw) = padded_dims(height, width);
    if ph.saturating_mul(pw) > max_pixels {
        return Err(Error::Image(format!(
            "{height}x{width} image pads to {ph}x{pw}, over the budget of {max_pixels} pixels"
        )));
    }
    Ok(())
}

fn to_ints(t: &Tensor) -> Result<Vec<i32>> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    v.into_iter()
        .map(|f| {
            if f.abs() < i32::MAX as f64 {
                Ok(f as i32)
            } else {
                Err(Error::Coding(format!("latent value {f} cannot be coded")))
            }
        })
        .collect()
}

fn from_ints(v: &[i32], dims: &[usize], dtype: DType) -> Result<Tensor> {
    let f: Vec<f32> = v.iter().map(|&i| i as f32).collect();
    Ok(Tensor::from_vec(f, dims, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

struct Analysis {
    trace: PipelineTrace,
    cond: Option<Conditioning>,
    dims: (usize, usize),
    x_hat: Option<Tensor>,
}

fn analyze(model: &Model, image: &Tensor, opts: &EncodeOptions) -> Result<Analysis> {
    let x = as_batch(image, model.dtype())?;
    let (_, _, h, w) = x.dims4()?;
    check_budget(h, w, opts.max_pixels)?;
    if opts.residual && !model.has_residual_head() {
        return Err(Error::Checkpoint(
            "residual mode needs the x-branch scale head".into(),
        ));
    }
    let cond = model.condition(opts.lambda_index)?;
    let (xp, dims) = pad_reflect(&x, SPATIAL_MULTIPLE)?;
    let trace = model.forward(
        &xp,
        QuantPlan::uniform(QuantMode::Round),
        &mut Quantizer::new(0),
        cond.as_ref(),
    )?;
    let x_hat = if opts.residual {
        Some((&trace.x2 * RESIDUAL_UNIT)?.round()?)
    } else {
        None
    };
    Ok(Analysis {
        trace,
        cond,
        dims,
        x_hat,
    })
}

fn x_branch(x_hat: Option<&Tensor>, like: &Tensor) -> Result<Tensor> {
    match x_hat {
        Some(v) => Ok((v / RESIDUAL_UNIT)?),
        None => Ok(Tensor::zeros(like.dims(), like.dtype(), like.device())?),
    }
}

#[allow(clippy::too_many_arguments)]
fn synthesize(
    model: &Model,
    x_branch: Tensor,
    z_hat: Tensor,
    h_hat: Tensor,
    mean: Option<&Tensor>,
    cond: Option<&Conditioning>,
    bypass_qe: bool,
    dims: (usize, usize),
) -> Result<Tensor> {
    let state = AugmentedState::from_branches(x_branch, z_hat, h_hat);
    let x_tilde = model.inverse(&state, mean, cond)?;
    let out = if bypass_qe {
        x_tilde
    } else {
        model.enhance(&x_tilde, cond)?
    };
    Ok(crop(&out, dims)?.clamp(0.0, 1.0)?)
}

fn z_model_inputs(
    model: &Model,
    hyper: &HyperOutput,
    cond: Option<&Conditioning>,
) -> Result<ZInputs> {
    match model.context() {
        Some((ctx, head)) => Ok(ZInputs::Gmm(
            ScalarEntropyHead::new(ctx, head, cond)?,
            hyper
                .features
                .flatten_all()?
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?,
        )),
        None => {
            let (_, scale) = model.hyper_synthesis().gaussian(&hyper.features)?;
            Ok(ZInputs::Gaussian(
                scale
                    .flatten_all()?
                    .to_dtype(DType::F64)?
                    .to_vec1::<f64>()?,
            ))
        }
    }
}

enum ZInputs {
    Gmm(ScalarEntropyHead, Vec<f32>),
    Gaussian(Vec<f64>),
}

impl ZInputs {
    fn model(&self) -> ZModel<'_> {
        match self {
            ZInputs::Gmm(head, hyper) => ZModel::Gmm { head, hyper },
            ZInputs::Gaussian(scales) => ZModel::Gaussian { scales },
        }
    }
}

fn residual_scales(model: &Model, z_hat: &Tensor) -> Result<Vec<f64>> {
    Ok(model
        .residual_scales(z_hat)?
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?)
}

fn flags_for(model: &Model, residual: bool) -> Flags {
    Flags {
        gmm: model.config().entropy == EntropyMode::Gmm,
        residual,
        variable_rate: model.config().is_variable_rate(),
    }
}

pub fn encode_image(model: &Model, image: &Tensor, opts: &EncodeOptions) -> Result<Encoded> {
    let a = analyze(model, image, opts)?;
    let t = &a.trace;
    let (_, _, hh, hw) = t.h_hat.dims4()?;
    let (_, n, zh, zw) = t.z_hat.dims4()?;
    let h_hat = to_ints(&t.h_hat)?;
    let prior = model.prior().to_scalar()?;
    let h_coded = latent::encode_h(&prior, &h_hat, hh * hw)?;

    let z_hat = to_ints(&t.z_hat)?;
    let inputs = z_model_inputs(model, &t.hyper, a.cond.as_ref())?;
    let z_coded = latent::encode_z(&inputs.model(), &z_hat, n, zh, zw)?;

    let (x_hat, x_coded) = match &a.x_hat {
        Some(xt) => {
            let v = to_ints(xt)?;
            let coded = latent::encode_x(&v, &residual_scales(model, &t.z_hat)?)?;
            (Some(v), Some(coded))
        }
        None => (None, None),
    };
    let lambda_index = u8::try_from(opts.lambda_index.unwrap_or(0))
        .map_err(|_| contract!("lambda index does not fit the header"))?;
    let container = Container {
        flags: flags_for(model, opts.residual),
        height: a.dims.0 as u32,
        width: a.dims.1 as u32,
        lambda_index,
        config_hash: model.fingerprint()?,
        h_payload: h_coded.bytes,
        z_payload: z_coded.bytes,
        x_payload: x_coded.as_ref().map(|c| c.bytes.clone()),
    };
    Ok(Encoded {
        container,
        estimate: RateEstimate {
            h_bits: h_coded.estimated_bits,
            z_bits: z_coded.estimated_bits,
            x_bits: x_coded.map_or(0.0, |c| c.estimated_bits),
        },
        latents: Latents {
            h_hat,
            z_hat,
            x_hat,
        },
    })
}

/// What a decoder would output for `image`, computed directly from the
/// rounded latents without any entropy coding.
pub fn reconstruct_in_memory(
    model: &Model,
    image: &Tensor,
    opts: &EncodeOptions,
    bypass_qe: bool,
) -> Result<Tensor> {
    let a = analyze(model, image, opts)?;
    let t = a.trace;
    let xb = x_branch(a.x_hat.as_ref(), &t.x2)?;
    synthesize(
        model,
        xb,
        t.z_hat_recon,
        t.h_hat,
        t.hyper.mean.as_ref(),
        a.cond.as_ref(),
        bypass_qe || a.x_hat.is_some(),
        a.dims,
    )
}

pub fn decode_container(model: &Model, c: &Container, opts: &DecodeOptions) -> Result<Decoded> {
    if c.config_hash != model.fingerprint()? {
        return Err(Error::Bitstream(
            "config hash does not match the loaded model".into(),
        ));
    }
    let expected = flags_for(model, c.flags.residual);
    if c.flags != expected {
        return Err(Error::Bitstream(format!(
            "stream mode {:?} does not match the model {:?}",
            c.flags, expected
        )));
    }
    let (h, w) = (c.height as usize, c.width as usize);
    check_budget(h, w, opts.max_pixels)?;
    let lambda_index = if c.flags.variable_rate {
        Some(c.lambda_index as usize)
    } else if c.lambda_index != 0 {
        return Err(Error::Bitstream(format!(
            "fixed-rate stream with lambda index {}",
            c.lambda_index
        )));
    } else {
        None
    };
    let cond = model.condition(lambda_index)?;
    let (ph, pw) = c.padded_dims();
    let f = &model.config().flow;
    let (hh, hw) = (ph / 64, pw / 64);
    let (zh, zw) = (ph / 16, pw / 16);
    let dtype = model.dtype();

    let prior = model.prior().to_scalar()?;
    let h_vals = latent::decode_h(&prior, &c.h_payload, hh * hw)?;
    let h_hat = from_ints(&h_vals, &[1, f.hyper_channels, hh, hw], dtype)?;
    let hyper = model.synthesis(&h_hat, cond.as_ref())?;

    let inputs = z_model_inputs(model, &hyper, cond.as_ref())?;
    let z_vals = latent::decode_z(&inputs.model(), &c.z_payload, f.latent_channels, zh, zw)?;
    let z_hat = from_ints(&z_vals, &[1, f.latent_channels, zh, zw], dtype)?;

    let x_vals = match &c.x_payload {
        Some(bytes) => Some(latent::decode_x(bytes, &residual_scales(model, &z_hat)?)?),
        None => None,
    };
    let x_hat = x_vals
        .as_ref()
        .map(|v| from_ints(v, &[1, 3, ph, pw], dtype))
        .transpose()?;
    let like = Tensor::zeros((1, 3, ph, pw), dtype, &candle_core::Device::Cpu)?;
    let xb = x_branch(x_hat.as_ref(), &like)?;
    let image = synthesize(
        model,
        xb,
        z_hat,
        h_hat,
        hyper.mean.as_ref(),
        cond.as_ref(),
        opts.bypass_qe || x_hat.is_some(),
        (h, w),
    )?;
    Ok(Decoded {
        image,
        latents: Latents {
            h_hat: h_vals,
            z_hat: z_vals,
            x_hat: x_vals,
        },
    })
}

pub fn decode_image(model: &Model, bytes: &[u8], opts: &DecodeOptions) -> Result<Decoded> {
    decode_container(model, &Container::from_bytes(bytes)?, opts)
}
