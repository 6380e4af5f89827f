//! The complete codec model: coupling pairs, hyperprior, entropy model,
//! quality enhancement and the optional residual and rate-conditioning parts.

use std::path::Path;

use candle_core::{DType, Tensor, Var};

use crate::config::{EntropyMode, ModelConfig};
use crate::entropy::{
    gauss_uniform_likelihood, gmm_uniform_likelihood, split_mixture_params, FactorizedPrior,
};
use crate::error::{contract, Error, Result};
use crate::flow::{
    forward_pipeline, inverse_pipeline, AugmentedState, CouplingPair, HyperOutput, HyperStep,
    PipelineTrace, QuantPlan, Quantizer,
};
use crate::nn::{
    AnalysisNet, Conditioning, ContextModel, HyperAnalysis, HyperSynthesis, ParamHead, QeNet,
    RateCondition, RateEmbedding, ResidualScaleHead, SynthesisNet,
};
use crate::params::{read_checkpoint, ParamStore, Scope};

pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    pairs: Vec<CouplingPair>,
    hyper_enc: HyperAnalysis,
    hyper_dec: HyperSynthesis,
    context: Option<ContextModel>,
    head: Option<ParamHead>,
    prior: FactorizedPrior,
    qe: QeNet,
    residual: Option<ResidualScaleHead>,
    rate: Option<RateEmbedding>,
}

/// Per-element likelihoods of the coded latents.
pub struct Likelihoods {
    pub h: Tensor,
    pub z: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed)?;
        let f = &config.flow;
        let (l, n, m) = (f.hidden_channels, f.latent_channels, f.hyper_channels);
        let cond = config.lambda_set.as_ref().map(|_| config.cond_embedding);
        let mut root = Scope::root(&mut store);
        let rate = match &config.lambda_set {
            Some(set) => Some(RateEmbedding::new(
                &mut root.sub("rate"),
                set,
                config.cond_embedding,
            )?),
            None => None,
        };
        let mut pairs = Vec::with_capacity(f.num_steps);
        for i in 0..f.num_steps {
            let gdn = i == 0 || config.gdn_all_steps;
            let enc = AnalysisNet::new(&mut root.sub(&format!("step{i}.enc")), 3, l, n, gdn, cond)?;
            let dec =
                SynthesisNet::new(&mut root.sub(&format!("step{i}.dec")), n, l, 3, gdn, cond)?;
            pairs.push(CouplingPair {
                enc: Box::new(enc),
                dec: Box::new(dec),
            });
        }
        let hyper_enc =
            HyperAnalysis::new(&mut root.sub("hyper.enc"), n, m, config.hyper_abs, cond)?;
        let hyper_dec = HyperSynthesis::new(&mut root.sub("hyper.dec"), m, n, cond)?;
        let (context, head) = match config.entropy {
            EntropyMode::Gmm => (
                Some(ContextModel::new(&mut root.sub("context"), n, cond)?),
                Some(ParamHead::new(
                    &mut root.sub("head"),
                    n,
                    config.mixtures,
                    cond,
                )?),
            ),
            EntropyMode::Gaussian => (None, None),
        };
        let prior = FactorizedPrior::new(&mut root.sub("prior"), m)?;
        let qe = QeNet::new(&mut root.sub("qe"), config.qe_width, config.qe_blocks, cond)?;
        let residual = if config.residual_head {
            Some(ResidualScaleHead::new(&mut root.sub("residual"), n)?)
        } else {
            None
        };
        Ok(Model {
            config,
            store,
            pairs,
            hyper_enc,
            hyper_dec,
            context,
            head,
            prior,
            qe,
            residual,
            rate,
        })
    }

    /// Builds the model described by a checkpoint and loads its values.
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let (_, config) = read_checkpoint(path)?;
        let model = Model::new(config, dtype, 0)?;
        model.store.load_values(path)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path, &self.config)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }

    /// Vars of the x-branch residual scale head only.
    pub fn residual_vars(&self) -> Vec<Var> {
        self.store
            .iter()
            .filter(|(n, _)| n.starts_with("residual."))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn fingerprint(&self) -> Result<[u8; 8]> {
        self.store.fingerprint(&self.config)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn pairs(&self) -> &[CouplingPair] {
        &self.pairs
    }

    pub fn prior(&self) -> &FactorizedPrior {
        &self.prior
    }

    pub fn context(&self) -> Option<(&ContextModel, &ParamHead)> {
        self.context.as_ref().zip(self.head.as_ref())
    }

    pub fn hyper_synthesis(&self) -> &HyperSynthesis {
        &self.hyper_dec
    }

    pub fn has_residual_head(&self) -> bool {
        self.residual.is_some()
    }

    pub fn lambdas(&self) -> Option<&[f64]> {
        self.rate.as_ref().map(|r| r.lambdas())
    }

    /// Rate conditioning for a variable-rate model; `None` for fixed-rate
    /// models, which accept no index other than 0.
    pub fn condition(&self, lambda_index: Option<usize>) -> Result<Option<Conditioning>> {
        match (&self.rate, lambda_index) {
            (Some(r), Some(i)) => Ok(Some(r.condition(i)?)),
            (Some(_), None) => Err(contract!("variable-rate model needs a lambda index")),
            (None, None) | (None, Some(0)) => Ok(None),
            (None, Some(i)) => Err(contract!("fixed-rate model has no lambda index {i}")),
        }
    }

    pub fn rate_condition(&self, lambda_index: usize) -> Result<RateCondition> {
        self.rate
            .as_ref()
            .ok_or_else(|| contract!("not a variable-rate model"))?
            .rate(lambda_index)
    }

    pub fn forward(
        &self,
        x: &Tensor,
        plan: QuantPlan,
        quantizer: &mut Quantizer,
        cond: Option<&Conditioning>,
    ) -> Result<PipelineTrace> {
        forward_pipeline(
            x,
            None,
            &self.pairs,
            self,
            &self.config.flow,
            plan,
            quantizer,
            cond,
        )
    }

    pub fn likelihoods(
        &self,
        trace: &PipelineTrace,
        cond: Option<&Conditioning>,
    ) -> Result<Likelihoods> {
        let h = self.prior.likelihood(&trace.h_hat)?;
        let z = match self.context() {
            Some((ctx, head)) => {
                let raw = head.forward(
                    &ctx.forward(&trace.z_hat, cond)?,
                    &trace.hyper.features,
                    cond,
                )?;
                let (w, m, s) = split_mixture_params(&raw, self.config.mixtures)?;
                gmm_uniform_likelihood(&trace.z_hat, &w, &m, &s)?
            }
            None => {
                let (_, scale) = self.hyper_dec.gaussian(&trace.hyper.features)?;
                let zero = Tensor::zeros((), trace.z_hat.dtype(), trace.z_hat.device())?;
                gauss_uniform_likelihood(&trace.z_hat, &zero, &scale)?
            }
        };
        Ok(Likelihoods { h, z })
    }

    /// Inverse flow from given latents, before quality enhancement.
    pub fn inverse(
        &self,
        latents: &AugmentedState,
        hyper_mean: Option<&Tensor>,
        cond: Option<&Conditioning>,
    ) -> Result<Tensor> {
        inverse_pipeline(latents, &self.pairs, hyper_mean, cond)
    }

    pub fn enhance(&self, x: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        self.qe.forward(x, cond)
    }

    /// Decoder-side reconstruction from a trace: `x2` replaced by `x_branch`.
    pub fn reconstruct(
        &self,
        trace: &PipelineTrace,
        x_branch: &Tensor,
        cond: Option<&Conditioning>,
    ) -> Result<Tensor> {
        let state = AugmentedState::from_branches(
            x_branch.clone(),
            trace.z_hat_recon.clone(),
            trace.h_hat.clone(),
        );
        let x_tilde = self.inverse(&state, trace.hyper.mean.as_ref(), cond)?;
        self.enhance(&x_tilde, cond)
    }

    /// Scale of the rounded x-branch residual, in 8-bit units.
    pub fn residual_scales(&self, z_hat: &Tensor) -> Result<Tensor> {
        self.residual
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("model has no residual scale head".into()))?
            .forward(z_hat)
    }
}

impl HyperStep for Model {
    fn analysis(&self, z: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        self.hyper_enc.forward(z, cond)
    }

    fn synthesis(&self, h_hat: &Tensor, cond: Option<&Conditioning>) -> Result<HyperOutput> {
        let features = self.hyper_dec.forward(h_hat, cond)?;
        let mean = match self.config.entropy {
            EntropyMode::Gaussian => Some(self.hyper_dec.gaussian(&features)?.0),
            EntropyMode::Gmm => None,
        };
        Ok(HyperOutput { features, mean })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::{FlowConfig, QuantMode};
    use candle_core::Device;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            flow: FlowConfig {
                num_steps: 2,
                hidden_channels: 8,
                latent_channels: 6,
                hyper_channels: 4,
            },
            qe_width: 4,
            qe_blocks: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_preserves_fingerprint_and_outputs() -> Result<()> {
        let mut cfg = micro_config();
        cfg.residual_head = true;
        let m = Model::new(cfg, DType::F32, 4)?;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        m.save(&path)?;
        let back = Model::load(&path, DType::F32)?;
        assert_eq!(back.fingerprint()?, m.fingerprint()?);
        assert_eq!(back.config(), m.config());
        let other = Model::new(micro_config(), DType::F32, 5)?;
        assert_ne!(other.fingerprint()?, m.fingerprint()?);
        Ok(())
    }

    #[test]
    fn exact_model_round_trip() -> Result<()> {
        for entropy in [EntropyMode::Gmm, EntropyMode::Gaussian] {
            let mut cfg = micro_config();
            cfg.entropy = entropy;
            let m = Model::new(cfg, DType::F32, 1)?;
            let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 128), &Device::Cpu)?;
            let t = m.forward(
                &x,
                QuantPlan::uniform(QuantMode::Identity),
                &mut Quantizer::new(0),
                None,
            )?;
            let back = m.inverse(&t.state(), t.hyper.mean.as_ref(), None)?;
            let err = (back - &x)?.abs()?.max_all()?.to_scalar::<f32>()?;
            assert!(err < 1e-4, "{err}");
            let lk = m.likelihoods(&t, None)?;
            assert_eq!(lk.z.dims(), t.z_hat.dims());
            assert_eq!(lk.h.dims(), t.h_hat.dims());
        }
        Ok(())
    }

    #[test]
    fn fixed_and_variable_rate_conditions() -> Result<()> {
        let m = Model::new(micro_config(), DType::F32, 1)?;
        assert!(m.condition(None)?.is_none());
        assert!(m.condition(Some(1)).is_err());
        let mut cfg = micro_config();
        cfg.lambda_set = Some(vec![0.1, 0.05]);
        let v = Model::new(cfg, DType::F32, 1)?;
        assert!(v.condition(None).is_err());
        assert!(v.condition(Some(2)).is_err());
        assert_eq!(v.condition(Some(1))?.unwrap().index, 1);
        assert_eq!(v.rate_condition(1)?.lambda_value, 0.05);
        Ok(())
    }
}
