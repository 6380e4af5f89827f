//! Additive autoencoding transforms and their composition.
//!
//! The state carries three branches: the image-shaped x-branch, the latent
//! z-branch at 1/16 resolution and the hyper h-branch at 1/64 resolution.
//! Every step adds a network output to one branch, so each step is inverted
//! exactly by subtracting the same output and the Jacobian determinant is 1.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::config::{FlowConfig, QuantMode};
use crate::error::{contract, Result};
use crate::nn::Conditioning;
use crate::ops::round_ste;

/// A map used inside a coupling, from one branch shape to the other.
pub trait CouplingNet: Send + Sync {
    fn forward(&self, input: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor>;
}

impl CouplingNet for crate::nn::AnalysisNet {
    fn forward(&self, input: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        crate::nn::AnalysisNet::forward(self, input, cond)
    }
}

impl CouplingNet for crate::nn::SynthesisNet {
    fn forward(&self, input: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        crate::nn::SynthesisNet::forward(self, input, cond)
    }
}

/// One autoencoding transform: `enc` maps x-branch to z-branch, `dec` maps back.
pub struct CouplingPair {
    pub enc: Box<dyn CouplingNet>,
    pub dec: Box<dyn CouplingNet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Enc,
    Dec,
}

#[derive(Debug, Clone)]
pub struct AugmentedState {
    pub x: Tensor,
    pub z: Tensor,
    pub h: Tensor,
}

/// Spatial size must be a multiple of this for the latent shapes to exist.
pub const SPATIAL_MULTIPLE: usize = 64;

impl AugmentedState {
    /// Image with zero z-branch and the given h-branch augmentation (zeros if absent).
    pub fn new(x: &Tensor, n: usize, m: usize, e_h: Option<&Tensor>) -> Result<Self> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(contract!("x-branch needs 3 channels, got {c}"));
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(contract!(
                "image {h}x{w} is not a positive multiple of {SPATIAL_MULTIPLE}"
            ));
        }
        let z = Tensor::zeros((b, n, h / 16, w / 16), x.dtype(), x.device())?;
        let h_shape = (b, m, h / 64, w / 64);
        let hb = match e_h {
            Some(e) => {
                if e.dims() != [h_shape.0, h_shape.1, h_shape.2, h_shape.3] {
                    return Err(contract!(
                        "e_h shape {:?} does not match {h_shape:?}",
                        e.dims()
                    ));
                }
                e.clone()
            }
            None => Tensor::zeros(h_shape, x.dtype(), x.device())?,
        };
        Ok(AugmentedState {
            x: x.clone(),
            z,
            h: hb,
        })
    }

    pub fn from_branches(x: Tensor, z: Tensor, h: Tensor) -> Self {
        AugmentedState { x, z, h }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(contract!(
            "{what}: network output {:?} vs branch {:?}",
            a.dims(),
            b.dims()
        ));
    }
    Ok(())
}

/// `z <- z + enc(x)`.
pub fn encode_step(
    s: &AugmentedState,
    pair: &CouplingPair,
    cond: Option<&Conditioning>,
) -> Result<AugmentedState> {
    let m = pair.enc.forward(&s.x, cond)?;
    same_shape(&m, &s.z, "encode step")?;
    Ok(AugmentedState {
        x: s.x.clone(),
        z: (&s.z + m)?,
        h: s.h.clone(),
    })
}

/// `x <- x - dec(z)`.
pub fn decode_step(
    s: &AugmentedState,
    pair: &CouplingPair,
    cond: Option<&Conditioning>,
) -> Result<AugmentedState> {
    let mu = pair.dec.forward(&s.z, cond)?;
    same_shape(&mu, &s.x, "decode step")?;
    Ok(AugmentedState {
        x: (&s.x - mu)?,
        z: s.z.clone(),
        h: s.h.clone(),
    })
}

/// Exact inverse of [`encode_step`] or [`decode_step`].
pub fn invert_step(
    s: &AugmentedState,
    pair: &CouplingPair,
    which: Which,
    cond: Option<&Conditioning>,
) -> Result<AugmentedState> {
    match which {
        Which::Enc => {
            let m = pair.enc.forward(&s.x, cond)?;
            same_shape(&m, &s.z, "inverse encode step")?;
            Ok(AugmentedState {
                x: s.x.clone(),
                z: (&s.z - m)?,
                h: s.h.clone(),
            })
        }
        Which::Dec => {
            let mu = pair.dec.forward(&s.z, cond)?;
            same_shape(&mu, &s.x, "inverse decode step")?;
            Ok(AugmentedState {
                x: (&s.x + mu)?,
                z: s.z.clone(),
                h: s.h.clone(),
            })
        }
    }
}

/// Log-determinant of the flow Jacobian: additive couplings preserve volume.
pub fn log_det(_cfg: &FlowConfig) -> f64 {
    0.0
}

/// Output of the hyper decoder: features for the entropy model and, in the
/// single-Gaussian mode, the mean subtracted from the z-branch.
#[derive(Debug, Clone)]
pub struct HyperOutput {
    pub features: Tensor,
    pub mean: Option<Tensor>,
}

/// The hyperprior transform between the last encode and decode steps.
pub trait HyperStep {
    fn analysis(&self, z: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor>;
    fn synthesis(&self, h_hat: &Tensor, cond: Option<&Conditioning>) -> Result<HyperOutput>;
}

/// Applies a [`QuantMode`] with its own seeded noise source.
pub struct Quantizer {
    rng: ChaCha8Rng,
}

impl Quantizer {
    pub fn new(seed: u64) -> Self {
        Quantizer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform noise in `[-0.5, 0.5)` shaped like `like`.
    pub fn noise(&mut self, like: &Tensor) -> Result<Tensor> {
        let u = Uniform::new(-0.5f64, 0.5).expect("valid bounds");
        let n = like.elem_count();
        let v: Vec<f64> = (0..n).map(|_| u.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(v, like.dims(), like.device())?.to_dtype(like.dtype())?)
    }

    pub fn apply(&mut self, x: &Tensor, mode: QuantMode) -> Result<Tensor> {
        match mode {
            QuantMode::Identity => Ok(x.clone()),
            QuantMode::Noise => Ok((x + self.noise(x)?)?),
            QuantMode::Round => Ok(x.round()?),
            QuantMode::SteRound => round_ste(x),
        }
    }
}

/// How the pipeline quantizes. `rate` feeds the likelihoods; `recon` feeds
/// the synthesis path (they differ only in mixed training).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantPlan {
    pub rate: QuantMode,
    pub recon: QuantMode,
}

impl QuantPlan {
    pub fn uniform(mode: QuantMode) -> Self {
        QuantPlan {
            rate: mode,
            recon: mode,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepTrace {
    /// z-branch after this step's encode.
    pub z: Tensor,
    /// Decoder output subtracted from the x-branch.
    pub dec_out: Tensor,
    /// x-branch after this step's decode.
    pub x: Tensor,
}

/// Everything the forward pass produces.
#[derive(Debug, Clone)]
pub struct PipelineTrace {
    pub steps: Vec<StepTrace>,
    /// z-branch entering the hyper transform.
    pub z2: Tensor,
    pub h_hat: Tensor,
    pub hyper: HyperOutput,
    /// Quantized (mean-removed) latent used for the rate.
    pub z_hat: Tensor,
    /// Quantized latent used by the synthesis path.
    pub z_hat_recon: Tensor,
    /// Final x-branch.
    pub x2: Tensor,
}

impl PipelineTrace {
    pub fn state(&self) -> AugmentedState {
        AugmentedState::from_branches(
            self.x2.clone(),
            self.z_hat_recon.clone(),
            self.h_hat.clone(),
        )
    }
}

/// Runs all encode/decode steps with the hyper transform spliced in before
/// the last decode. `e_h` augments the h-branch; with [`QuantMode::Noise`] and
/// no `e_h` the quantizer samples it, and rounding is then skipped for `h`.
pub fn forward_pipeline(
    x: &Tensor,
    e_h: Option<&Tensor>,
    pairs: &[CouplingPair],
    hyper: &dyn HyperStep,
    cfg: &FlowConfig,
    plan: QuantPlan,
    quantizer: &mut Quantizer,
    cond: Option<&Conditioning>,
) -> Result<PipelineTrace> {
    let Some((last, head)) = pairs.split_last() else {
        return Err(contract!("pipeline needs at least one coupling pair"));
    };
    if pairs.len() != cfg.num_steps {
        return Err(contract!(
            "{} coupling pairs for {} configured steps",
            pairs.len(),
            cfg.num_steps
        ));
    }
    let mut s = AugmentedState::new(x, cfg.latent_channels, cfg.hyper_channels, None)?;
    let mut steps = Vec::with_capacity(pairs.len());
    for pair in head {
        s = encode_step(&s, pair, cond)?;
        let mu = pair.dec.forward(&s.z, cond)?;
        same_shape(&mu, &s.x, "decode step")?;
        s.x = (&s.x - &mu)?;
        steps.push(StepTrace {
            z: s.z.clone(),
            dec_out: mu,
            x: s.x.clone(),
        });
    }
    s = encode_step(&s, last, cond)?;
    let z2 = s.z.clone();

    let h = hyper.analysis(&z2, cond)?;
    let h_hat = match (e_h, plan.rate) {
        (Some(e), mode) => {
            same_shape(e, &h, "e_h")?;
            let aug = (&h + e)?;
            match mode {
                QuantMode::Noise => aug,
                m => quantizer.apply(&aug, m)?,
            }
        }
        (None, mode) => quantizer.apply(&h, mode)?,
    };
    let hyper_out = hyper.synthesis(&h_hat, cond)?;
    let centered = match &hyper_out.mean {
        Some(mu) => (&z2 - mu)?,
        None => z2.clone(),
    };
    let z_hat = quantizer.apply(&centered, plan.rate)?;
    let z_hat_recon = if plan.recon == plan.rate {
        z_hat.clone()
    } else {
        quantizer.apply(&centered, plan.recon)?
    };
    let mu = last.dec.forward(&z_hat_recon, cond)?;
    same_shape(&mu, &s.x, "decode step")?;
    let x2 = (&s.x - &mu)?;
    steps.push(StepTrace {
        z: z2.clone(),
        dec_out: mu,
        x: x2.clone(),
    });
    Ok(PipelineTrace {
        steps,
        z2,
        h_hat,
        hyper: hyper_out,
        z_hat,
        z_hat_recon,
        x2,
    })
}

/// Inverts the pipeline from `(x2, z_hat, h)`; `hyper_mean` is added back to
/// the z-branch after the last decoder has consumed `z_hat`.
pub fn inverse_pipeline(
    latents: &AugmentedState,
    pairs: &[CouplingPair],
    hyper_mean: Option<&Tensor>,
    cond: Option<&Conditioning>,
) -> Result<Tensor> {
    let Some((last, head)) = pairs.split_last() else {
        return Err(contract!("pipeline needs at least one coupling pair"));
    };
    let mut s = invert_step(latents, last, Which::Dec, cond)?;
    if let Some(mu) = hyper_mean {
        same_shape(mu, &s.z, "hyper mean")?;
        s.z = (&s.z + mu)?;
    }
    s = invert_step(&s, last, Which::Enc, cond)?;
    for pair in head.iter().rev() {
        s = invert_step(&s, pair, Which::Dec, cond)?;
        s = invert_step(&s, pair, Which::Enc, cond)?;
    }
    Ok(s.x)
}

/// Zero tensor shaped like an x-branch for the given image.
pub fn zero_x_branch(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros(like.dims(), like.dtype(), like.device())?)
}
