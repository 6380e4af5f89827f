//! Model and run configuration. Everything a run needs is in [`RunConfig`],
//! which round-trips through TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the flow: number of autoencoding transforms and channel widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Autoencoding transforms stacked in the x/z flow (1 is the VAE case).
    pub num_steps: usize,
    /// Hidden width of the coupling networks.
    pub hidden_channels: usize,
    /// Latent channels of the z-branch.
    pub latent_channels: usize,
    /// Channels of the hyperprior h-branch.
    pub hyper_channels: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            num_steps: 2,
            hidden_channels: 128,
            latent_channels: 320,
            hyper_channels: 192,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        if self.hidden_channels == 0 || self.latent_channels == 0 || self.hyper_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    /// Autoregressive context plus K-component Gaussian mixture.
    Gmm,
    /// Mean-subtracted single Gaussian predicted from the hyperprior.
    Gaussian,
}

impl std::str::FromStr for EntropyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(EntropyMode::Gmm),
            "gaussian" => Ok(EntropyMode::Gaussian),
            other => Err(Error::Config(format!("unknown entropy mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub flow: FlowConfig,
    pub mixtures: usize,
    pub entropy: EntropyMode,
    pub qe_blocks: usize,
    pub qe_width: usize,
    /// Adds the per-pixel scale head used to code the rounded x-branch residual.
    pub residual_head: bool,
    /// Rate points for a variable-rate model; `None` builds plain convolutions.
    pub lambda_set: Option<Vec<f64>>,
    pub cond_embedding: usize,
    /// GDN between the stages of every coupling network, not only the first step.
    pub gdn_all_steps: bool,
    /// Feed |z| into the hyper analysis network.
    pub hyper_abs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            flow: FlowConfig::default(),
            mixtures: 3,
            entropy: EntropyMode::Gmm,
            qe_blocks: 3,
            qe_width: 64,
            residual_head: false,
            lambda_set: None,
            cond_embedding: 16,
            gdn_all_steps: true,
            hyper_abs: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model used by the overfit experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            flow: FlowConfig {
                num_steps: 2,
                hidden_channels: 32,
                latent_channels: 48,
                hyper_channels: 32,
            },
            qe_width: 16,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        if self.mixtures == 0 {
            return Err(Error::Config("mixtures must be at least 1".into()));
        }
        if self.qe_width == 0 {
            return Err(Error::Config("qe_width must be positive".into()));
        }
        if let Some(set) = &self.lambda_set {
            if set.is_empty() || set.len() > 255 {
                return Err(Error::Config("lambda_set must hold 1..=255 values".into()));
            }
            if set.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                return Err(Error::Config("lambda values must be positive".into()));
            }
            if self.cond_embedding == 0 {
                return Err(Error::Config("cond_embedding must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn is_variable_rate(&self) -> bool {
        self.lambda_set.is_some()
    }
}

/// Distortion used by the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionKind {
    Mse,
    MsSsim,
}

/// Norm of the x-branch regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegNorm {
    L2,
    L1,
    None,
}

/// How latents are quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// No quantization at all (exact flow).
    Identity,
    /// Additive uniform noise in (-0.5, 0.5); training only.
    Noise,
    /// Nearest-integer rounding.
    Round,
    /// Rounding forward, identity gradient backward.
    SteRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda2: f64,
    /// Defaults to `0.01 * lambda2` when absent.
    pub lambda1: Option<f64>,
    pub distortion: DistortionKind,
    pub reg_norm: RegNorm,
    pub lr: f64,
    pub lr_decayed: f64,
    pub decay_step: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub seed: u64,
    /// Quantization on the reconstruction path (the rate path always uses noise).
    pub recon_quant: QuantMode,
    /// Variable-rate training samples this many lambdas per step.
    pub lambdas_per_step: usize,
    /// Fine-tuning length as a fraction of `max_steps`.
    pub finetune_fraction: f64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda2: 0.1,
            lambda1: None,
            distortion: DistortionKind::Mse,
            reg_norm: RegNorm::L2,
            lr: 1e-4,
            lr_decayed: 1e-5,
            decay_step: 40_000,
            batch_size: 8,
            crop_size: 256,
            max_steps: 50_000,
            checkpoint_every: 5_000,
            log_every: 100,
            seed: 0,
            recon_quant: QuantMode::Noise,
            lambdas_per_step: 1,
            finetune_fraction: 0.1,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn lambda1(&self) -> f64 {
        self.lambda1.unwrap_or(0.01 * self.lambda2)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.decay_step {
            self.lr
        } else {
            self.lr_decayed
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda2 > 0.0) {
            return Err(Error::Config("lambda2 must be positive".into()));
        }
        if self.lambda1().is_sign_negative() {
            return Err(Error::Config("lambda1 must be nonnegative".into()));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(64) {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of 64",
                self.crop_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.recon_quant == QuantMode::Round {
            return Err(Error::Config(
                "recon_quant must be differentiable (noise, ste-round or identity)".into(),
            ));
        }
        if self.lambdas_per_step == 0 {
            return Err(Error::Config("lambdas_per_step must be positive".into()));
        }
        Ok(())
    }
}

/// A complete, self-describing run: model, optimization and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Directory of PNG files for random crops.
    pub data: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Rate points used for MSE-optimized models, highest rate first.
pub const MSE_LAMBDAS: [f64; 6] = [0.1, 0.05, 0.02, 0.01, 0.005, 0.002];
/// Rate points used for MS-SSIM-optimized models, highest rate first.
pub const MSSSIM_LAMBDAS: [f64; 6] = [200.0, 100.0, 40.0, 20.0, 10.0, 4.0];
/// Rate points of the variable-rate model.
pub const VARIABLE_RATE_LAMBDAS: [f64; 5] = [0.1, 0.05, 0.02, 0.01, 0.005];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_widths() {
        let m = ModelConfig::default();
        assert_eq!(
            (
                m.flow.hidden_channels,
                m.flow.latent_channels,
                m.flow.hyper_channels,
                m.mixtures
            ),
            (128, 320, 192, 3)
        );
        let t = TrainConfig::default();
        assert!((t.lambda1() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::tiny();
        cfg.model.lambda_set = Some(VARIABLE_RATE_LAMBDAS.to_vec());
        cfg.train.crop_size = 64;
        let s = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&s).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let mut t = TrainConfig::default();
        t.crop_size = 100;
        assert!(t.validate().is_err());
        let mut f = FlowConfig::default();
        f.num_steps = 0;
        assert!(f.validate().is_err());
        assert!(RunConfig::from_toml_str("[model]\nmixtures = 0\n").is_err());
    }
}
