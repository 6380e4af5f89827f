use candle_core::{DType, Tensor};

use crate::config::{DistortionKind, RegNorm, TrainConfig};
use crate::entropy::{gauss_uniform_likelihood, rate_nats};
use crate::error::Result;
use crate::flow::{PipelineTrace, QuantPlan, Quantizer};
use crate::metrics::{ms_ssim, mse};
use crate::model::{Likelihoods, Model};
use crate::nn::Conditioning;

/// Pixel range the MSE and x-branch terms are measured in.
pub const PIXEL_SCALE: f64 = 255.0;

/// Weights of one rate-distortion objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda2: f64,
    pub lambda1: f64,
    pub distortion: DistortionKind,
    pub reg_norm: RegNorm,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LossWeights {
            lambda2: cfg.lambda2,
            lambda1: cfg.lambda1(),
            distortion: cfg.distortion,
            reg_norm: cfg.reg_norm,
        }
    }

    /// Same objective at another rate point; `lambda1` keeps its ratio.
    pub fn at_lambda(&self, lambda2: f64) -> Self {
        LossWeights {
            lambda2,
            lambda1: self.lambda1 * lambda2 / self.lambda2,
            ..*self
        }
    }
}

/// Scalar loss tensors; `total = rate + reg + dist`.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    /// Nats per pixel.
    pub rate: Tensor,
    pub reg: Tensor,
    pub dist: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub rate_nats: f64,
    pub reg: f64,
    pub dist: f64,
}

impl LossValues {
    pub fn rate_bpp(&self) -> f64 {
        self.rate_nats / std::f64::consts::LN_2
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossTerms {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            total: scalar(&self.total)?,
            rate_nats: scalar(&self.rate)?,
            reg: scalar(&self.reg)?,
            dist: scalar(&self.dist)?,
        })
    }
}

/// The training objective from pipeline outputs: rate of both latents in
/// nats per pixel, the x-branch regularizer and the weighted distortion of
/// the decoder-side reconstruction `x_hat`.
pub fn rd_loss(
    x: &Tensor,
    x_hat: &Tensor,
    x2: &Tensor,
    likelihoods: &Likelihoods,
    w: &LossWeights,
) -> Result<LossTerms> {
    let (b, _, h, wd) = x.dims4()?;
    let pixels = (b * h * wd) as f64;
    let rate = ((rate_nats(&likelihoods.h)? + rate_nats(&likelihoods.z)?)? / pixels)?;
    let reg = match w.reg_norm {
        RegNorm::L2 => ((x2 * PIXEL_SCALE)?.sqr()?.mean_all()? * w.lambda1)?,
        RegNorm::L1 => ((x2 * PIXEL_SCALE)?.abs()?.mean_all()? * w.lambda1)?,
        RegNorm::None => rate.zeros_like()?,
    };
    let dist = match w.distortion {
        DistortionKind::Mse => (mse(x, x_hat)? * (w.lambda2 * PIXEL_SCALE * PIXEL_SCALE))?,
        DistortionKind::MsSsim => (ms_ssim(x, x_hat)?.affine(-1.0, 1.0)? * w.lambda2)?,
    };
    let total = ((&rate + &reg)? + &dist)?;
    Ok(LossTerms {
        total,
        rate,
        reg,
        dist,
    })
}

/// Everything one training evaluation produces.
pub struct Evaluation {
    pub terms: LossTerms,
    pub trace: PipelineTrace,
    pub x_hat: Tensor,
    /// Negative log-likelihood of the rounded x-branch under the residual
    /// scale head, in nats per pixel; trained alongside but not part of
    /// `terms.total`. Its inputs are detached from the flow.
    pub residual_nll: Option<Tensor>,
}

/// Runs the pipeline, the decoder-side reconstruction and the objective.
pub fn evaluate(
    model: &Model,
    x: &Tensor,
    plan: QuantPlan,
    quantizer: &mut Quantizer,
    w: &LossWeights,
    cond: Option<&Conditioning>,
) -> Result<Evaluation> {
    let trace = model.forward(x, plan, quantizer, cond)?;
    let likelihoods = model.likelihoods(&trace, cond)?;
    let x_hat = model.reconstruct(&trace, &trace.x2.zeros_like()?, cond)?;
    let terms = rd_loss(x, &x_hat, &trace.x2, &likelihoods, w)?;
    let residual_nll = if model.has_residual_head() {
        let (b, _, h, wd) = x.dims4()?;
        let target = (trace.x2.detach() * PIXEL_SCALE)?.round()?;
        let scales = model.residual_scales(&trace.z_hat.detach())?;
        let zero = Tensor::zeros((), target.dtype(), target.device())?;
        let lk = gauss_uniform_likelihood(&target, &zero, &scales)?;
        Some((rate_nats(&lk)? / (b * h * wd) as f64)?)
    } else {
        None
    };
    Ok(Evaluation {
        terms,
        trace,
        x_hat,
        residual_nll,
    })
}
