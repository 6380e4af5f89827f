//! Rate-distortion training, fine-tuning and the variable-rate objective.

mod data;
mod loss;

use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{DataSource, ImageSet};
pub use loss::{evaluate, rd_loss, Evaluation, LossTerms, LossValues, LossWeights, PIXEL_SCALE};

use crate::config::{DistortionKind, QuantMode, TrainConfig};
use crate::error::{contract, Error, Result};
use crate::flow::{QuantPlan, Quantizer};
use crate::metrics::MS_SSIM_MIN_SIDE;
use crate::model::Model;

/// Steps in a row above the divergence threshold before training halts.
pub const DIVERGENCE_PATIENCE: usize = 100;
/// Loss multiple of the running median counted as divergent.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
const MEDIAN_WINDOW: usize = 1000;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub total: f64,
    #[serde(rename = "R_bpp")]
    pub rate_bpp: f64,
    pub reg: f64,
    #[serde(rename = "D")]
    pub dist: f64,
    pub lr: f64,
}

/// Halts training on non-finite losses or a sustained blow-up relative to
/// the running median.
#[derive(Debug, Default)]
pub struct DivergenceDetector {
    history: VecDeque<f64>,
    strikes: usize,
}

impl DivergenceDetector {
    pub fn observe(&mut self, step: usize, v: &LossValues) -> Result<()> {
        if ![v.total, v.rate_nats, v.reg, v.dist]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(Error::Diverged {
                step,
                reason: format!("non-finite loss {v:?}"),
            });
        }
        if self.history.len() >= DIVERGENCE_PATIENCE {
            let mut sorted: Vec<f64> = self.history.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            if v.total > DIVERGENCE_FACTOR * median {
                self.strikes += 1;
            } else {
                self.strikes = 0;
            }
            if self.strikes >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step,
                    reason: format!(
                        "loss {} above {DIVERGENCE_FACTOR}x the running median {median} for {DIVERGENCE_PATIENCE} steps",
                        v.total
                    ),
                });
            }
        }
        if self.history.len() == MEDIAN_WINDOW {
            self.history.pop_front();
        }
        self.history.push_back(v.total);
        Ok(())
    }
}

/// Averages the objective over the given rate points of a variable-rate
/// model, with `lambda1` tracking each `lambda2` at the ratio of `base`.
/// Returns the averaged terms and the averaged residual-head NLL.
pub fn variable_rate_loss(
    model: &Model,
    x: &Tensor,
    lambda_indices: &[usize],
    base: &LossWeights,
    plan: QuantPlan,
    quantizer: &mut Quantizer,
) -> Result<(LossTerms, Option<Tensor>)> {
    let lambdas = model
        .lambdas()
        .ok_or_else(|| contract!("variable-rate loss needs a model with a lambda set"))?
        .to_vec();
    if lambda_indices.is_empty() {
        return Err(contract!("no rate points sampled"));
    }
    let n = lambda_indices.len() as f64;
    let mut acc: Option<(LossTerms, Option<Tensor>)> = None;
    for &i in lambda_indices {
        let lambda = *lambdas
            .get(i)
            .ok_or_else(|| contract!("lambda index {i} outside the set of {}", lambdas.len()))?;
        let cond = model.condition(Some(i))?;
        let e = evaluate(
            model,
            x,
            plan,
            quantizer,
            &base.at_lambda(lambda),
            cond.as_ref(),
        )?;
        acc = Some(match acc {
            None => (e.terms, e.residual_nll),
            Some((t, r)) => (
                LossTerms {
                    total: (t.total + e.terms.total)?,
                    rate: (t.rate + e.terms.rate)?,
                    reg: (t.reg + e.terms.reg)?,
                    dist: (t.dist + e.terms.dist)?,
                },
                match (r, e.residual_nll) {
                    (Some(a), Some(b)) => Some((a + b)?),
                    _ => None,
                },
            ),
        });
    }
    let (t, r) = acc.expect("at least one rate point");
    Ok((
        LossTerms {
            total: (t.total / n)?,
            rate: (t.rate / n)?,
            reg: (t.reg / n)?,
            dist: (t.dist / n)?,
        },
        r.map(|r| r / n).transpose()?,
    ))
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g
                .sqr()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v) {
                grads.insert(v, (g * f)?);
            }
        }
    }
    Ok(norm)
}

/// Optimizer state and bookkeeping for one training run.
pub struct Trainer<'m> {
    model: &'m Model,
    cfg: TrainConfig,
    weights: LossWeights,
    vars: Vec<Var>,
    opt: AdamW,
    quantizer: Quantizer,
    rng: ChaCha8Rng,
    detector: DivergenceDetector,
    step: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.distortion == DistortionKind::MsSsim && cfg.crop_size < MS_SSIM_MIN_SIDE {
            return Err(Error::Config(format!(
                "MS-SSIM training needs crops of at least {MS_SSIM_MIN_SIDE}"
            )));
        }
        let vars = model.vars();
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: cfg.lr_at(0),
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            weights: LossWeights::from_config(cfg),
            vars,
            opt,
            quantizer: Quantizer::new(cfg.seed),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed)),
            detector: DivergenceDetector::default(),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn plan(&self) -> QuantPlan {
        QuantPlan {
            rate: QuantMode::Noise,
            recon: self.cfg.recon_quant,
        }
    }

    /// One optimization step on a batch drawn from `data`.
    pub fn step(&mut self, data: &mut dyn DataSource) -> Result<LossValues> {
        let x = data.batch(self.cfg.batch_size, self.cfg.crop_size, &mut self.rng)?;
        self.step_on(&x.to_dtype(self.model.dtype())?)
    }

    /// One optimization step on a given batch.
    pub fn step_on(&mut self, x: &Tensor) -> Result<LossValues> {
        let plan = self.plan();
        let (terms, residual) = match self.model.lambdas().map(<[f64]>::len) {
            Some(n) => {
                let idx: Vec<usize> = (0..self.cfg.lambdas_per_step)
                    .map(|_| self.rng.random_range(0..n))
                    .collect();
                variable_rate_loss(
                    self.model,
                    x,
                    &idx,
                    &self.weights,
                    plan,
                    &mut self.quantizer,
                )?
            }
            None => {
                let e = evaluate(
                    self.model,
                    x,
                    plan,
                    &mut self.quantizer,
                    &self.weights,
                    None,
                )?;
                (e.terms, e.residual_nll)
            }
        };
        let values = terms.values()?;
        self.detector.observe(self.step, &values)?;
        let objective = match residual {
            Some(r) => (&terms.total + r)?,
            None => terms.total.clone(),
        };
        let mut grads = objective.backward()?;
        if let Some(max) = self.cfg.grad_clip {
            clip_gradients(&mut grads, &self.vars, max)?;
        }
        self.opt.set_learning_rate(self.cfg.lr_at(self.step));
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(values)
    }
}

/// Called at every logged step; returning `false` stops training.
pub type StepHook<'a> = &'a mut dyn FnMut(&Model, &LogRow) -> Result<bool>;

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: usize,
    pub last: LossValues,
    pub rows: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
    pub stopped_early: bool,
}

struct CsvLog {
    writer: csv::Writer<std::fs::File>,
}

impl CsvLog {
    fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new()
            .has_headers(fresh)
            .from_writer(file);
        Ok(CsvLog { writer })
    }

    fn write(&mut self, row: &LogRow) -> Result<()> {
        self.writer
            .serialize(row)
            .and_then(|_| self.writer.flush().map_err(Into::into))
            .map_err(|e| Error::Config(format!("training log: {e}")))
    }
}

/// Trains `model` in place for `cfg.max_steps` steps. With `out_dir`, writes
/// `train_log.csv`, periodic checkpoints under `checkpoints/` and the final
/// `model.safetensors`; a diverging run leaves `diverged.safetensors`.
pub fn train(
    model: &Model,
    data: &mut dyn DataSource,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut hook: Option<StepHook>,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(model, cfg)?;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
            Some(CsvLog::open(&dir.join("train_log.csv"))?)
        }
        None => None,
    };
    let mut report = TrainReport::default();
    while trainer.steps_done() < cfg.max_steps {
        let step = trainer.steps_done();
        let v = match trainer.step(data) {
            Ok(v) => v,
            Err(e @ Error::Diverged { .. }) => {
                if let Some(dir) = out_dir {
                    model.save(&dir.join("diverged.safetensors"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        report.last = v;
        let done = step + 1;
        if done % cfg.log_every.max(1) == 0 || done == cfg.max_steps {
            let row = LogRow {
                step: done,
                total: v.total,
                rate_bpp: v.rate_bpp(),
                reg: v.reg,
                dist: v.dist,
                lr: cfg.lr_at(step),
            };
            log::info!(
                "step {done}: total {:.4} R {:.4} bpp reg {:.4} D {:.4}",
                row.total,
                row.rate_bpp,
                row.reg,
                row.dist
            );
            if let Some(l) = log.as_mut() {
                l.write(&row)?;
            }
            report.rows.push(row);
            if let Some(h) = hook.as_mut() {
                if !h(model, &row)? {
                    report.stopped_early = true;
                }
            }
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let p = dir
                    .join("checkpoints")
                    .join(format!("step_{done:07}.safetensors"));
                model.save(&p)?;
                report.checkpoints.push(p);
            }
        }
        if report.stopped_early {
            break;
        }
    }
    report.steps = trainer.steps_done();
    if let Some(dir) = out_dir {
        model.save(&dir.join("model.safetensors"))?;
    }
    Ok(report)
}

/// Training settings of a fine-tune from a parent at `lambda2`: the decayed
/// learning rate throughout, `finetune_fraction` of the base steps and
/// `lambda1` following the new `lambda2`.
pub fn finetune_config(cfg: &TrainConfig, lambda2: f64) -> TrainConfig {
    TrainConfig {
        lambda2,
        lambda1: cfg.lambda1.map(|l1| l1 * lambda2 / cfg.lambda2),
        lr: cfg.lr_decayed,
        decay_step: usize::MAX,
        max_steps: ((cfg.max_steps as f64 * cfg.finetune_fraction).ceil() as usize).max(1),
        ..cfg.clone()
    }
}

/// Loads `checkpoint` and re-optimizes it for `lambda2`.
pub fn finetune_for_rate(
    checkpoint: &Path,
    lambda2: f64,
    cfg: &TrainConfig,
    data: &mut dyn DataSource,
    out_dir: Option<&Path>,
    hook: Option<StepHook>,
) -> Result<(Model, TrainReport)> {
    let model = Model::load(checkpoint, DType::F32)?;
    let report = train(&model, data, &finetune_config(cfg, lambda2), out_dir, hook)?;
    Ok((model, report))
}
