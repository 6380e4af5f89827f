//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use anfc_core::codec::{encode_image, reconstruct_in_memory, EncodeOptions};
use anfc_core::config::{EntropyMode, FlowConfig, ModelConfig, QuantMode, TrainConfig};
use anfc_core::eval::step_ablation;
use anfc_core::flow::{QuantPlan, Quantizer};
use anfc_core::image_io::synthetic;
use anfc_core::metrics::psnr_rgb;
use anfc_core::model::Model;
use anfc_core::selftest::{
    bd_rate_oracle, causality_violations, gmm_degeneracy, gradient_check, invertibility_error,
    pmf_normalization, rate_accounting, two_path_mismatches, uniform_images,
};
use anfc_core::train::{train, ImageSet, LogRow};
use anfc_core::{DType, Result, Tensor};

struct Suite {
    failed: usize,
}

impl Suite {
    fn report(&mut self, name: &str, passed: bool, detail: String) {
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        if !passed {
            self.failed += 1;
        }
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Result<(bool, String)>) {
        let start = Instant::now();
        match f() {
            Ok((passed, detail)) => self.report(
                name,
                passed,
                format!("{detail} [{:.1}s]", start.elapsed().as_secs_f64()),
            ),
            Err(e) => self.report(name, false, format!("error: {e}")),
        }
    }
}

fn micro(entropy: EntropyMode) -> ModelConfig {
    ModelConfig {
        flow: FlowConfig {
            num_steps: 2,
            hidden_channels: 8,
            latent_channels: 6,
            hyper_channels: 4,
        },
        qe_width: 4,
        qe_blocks: 1,
        entropy,
        ..ModelConfig::default()
    }
}

fn x2_ratio(model: &Model, x: &Tensor) -> Result<f64> {
    let t = model.forward(
        x,
        QuantPlan::uniform(QuantMode::Round),
        &mut Quantizer::new(0),
        None,
    )?;
    let e2 =
        t.x2.sqr()?
            .sum_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
    let ex = x
        .sqr()?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    Ok(e2 / ex)
}

fn psnr_of(model: &Model, x: &Tensor, residual: bool) -> Result<f64> {
    let opts = EncodeOptions {
        residual,
        ..EncodeOptions::default()
    };
    psnr_rgb(x, &reconstruct_in_memory(model, x, &opts, false)?)
}

fn bpp_psnr(model: &Model, x: &Tensor) -> Result<(f64, f64)> {
    let bpp = encode_image(model, x, &EncodeOptions::default())?.bpp();
    Ok((bpp, psnr_of(model, x, false)?))
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: 0 };
    let dir = tempfile::tempdir().expect("tempdir");

    suite.run("invertibility", || {
        let model = Model::new(ModelConfig::tiny(), DType::F32, 0)?;
        let start = Instant::now();
        let e = invertibility_error(&model, &uniform_images(50, 64, 1, DType::F32)?)?;
        let secs = start.elapsed().as_secs_f64();
        Ok((
            e <= 1e-4 && secs < 60.0,
            format!("max error {e:.2e} over 50 images in {secs:.1}s"),
        ))
    });

    suite.run("two-path equivalence", || {
        let mut cfg = ModelConfig::tiny();
        cfg.residual_head = true;
        let model = Model::new(cfg, DType::F32, 2)?;
        let images = uniform_images(10, 64, 2, DType::F32)?;
        let off = two_path_mismatches(&model, &images, false, dir.path())?;
        let on = two_path_mismatches(&model, &images, true, dir.path())?;
        Ok((
            off == 0 && on == 0,
            format!("{off} and {on} of 10 images differ (residual off, on)"),
        ))
    });

    suite.run("rate accounting", || {
        let mut cfg = ModelConfig::tiny();
        cfg.residual_head = true;
        let model = Model::new(cfg, DType::F32, 3)?;
        let images: Vec<Tensor> = (0..10)
            .map(|i| synthetic(100 + i, 64, 64, DType::F32))
            .collect::<Result<_>>()?;
        let mut worst = f64::NEG_INFINITY;
        for residual in [false, true] {
            for (bits, est) in rate_accounting(&model, &images, residual)? {
                worst = worst.max(bits as f64 - (1.01 * est + 64.0));
            }
        }
        Ok((
            worst <= 0.0,
            format!("largest excess over 1.01 x estimate + 64 is {worst:.1} bits"),
        ))
    });

    suite.run("pmf normalization", || {
        let d = pmf_normalization(1000, 4)?;
        Ok((
            d <= 1e-5,
            format!("max |mass - 1| {d:.2e} over 1000 draws per family"),
        ))
    });

    suite.run("mixture degeneracy", || {
        let d = gmm_degeneracy(1000, 5)?;
        Ok((d <= 1e-12, format!("max |K=1 mixture - Gaussian| {d:.2e}")))
    });

    suite.run("gradient oracle", || {
        let flow = Model::new(micro(EntropyMode::Gmm), DType::F64, 31)?;
        let a = gradient_check(&flow, &["step0.enc", "step1.dec", "gdn", "hyper.dec"], 8)?;
        let ent = Model::new(micro(EntropyMode::Gmm), DType::F64, 32)?;
        let b = gradient_check(&ent, &["head", "context", "prior"], 8)?;
        let failures: Vec<&String> = a.failures.iter().chain(&b.failures).collect();
        Ok((
            failures.is_empty() && a.informative >= 20 && b.informative >= 20,
            format!(
                "{} + {} informative of {} probes, failures {:?}",
                a.informative,
                b.informative,
                a.probes + b.probes,
                failures
            ),
        ))
    });

    suite.run("context causality", || {
        let model = Model::new(ModelConfig::tiny(), DType::F64, 6)?;
        let bad = causality_violations(&model, 8, 6)?;
        Ok((
            bad.is_empty(),
            format!("violations at {bad:?} on an 8x8 latent"),
        ))
    });

    // Single-crop overfit. Training stops at the first logged step that meets
    // both thresholds; the model is reused by the residual check.
    let crop = synthetic(1, 64, 64, DType::F32).expect("crop");
    let mut overfit: Option<Model> = None;
    suite.run("overfit", || {
        let mut cfg = ModelConfig::tiny();
        cfg.residual_head = true;
        let model = Model::new(cfg, DType::F32, 0)?;
        let train_cfg = TrainConfig {
            batch_size: 1,
            crop_size: 64,
            max_steps: 20_000,
            lambda2: 0.1,
            log_every: 250,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let mut data = ImageSet::new(vec![crop.clone()])?;
        let mut last = (0.0, f64::INFINITY);
        let mut hook = |m: &Model, _: &LogRow| -> Result<bool> {
            last = (psnr_of(m, &crop, false)?, x2_ratio(m, &crop)?);
            Ok(!(last.0 >= 32.0 && last.1 <= 0.05))
        };
        let report = train(&model, &mut data, &train_cfg, None, Some(&mut hook))?;
        let (psnr, ratio) = last;
        let no_qe = psnr_rgb(
            &crop,
            &reconstruct_in_memory(&model, &crop, &EncodeOptions::default(), true)?,
        )?;
        overfit = Some(model);
        Ok((
            psnr >= 32.0 && ratio <= 0.05,
            format!(
                "{} steps, PSNR {psnr:.2} dB (without QE {no_qe:.2}), x2 energy ratio {ratio:.4}",
                report.steps
            ),
        ))
    });

    suite.run("residual mode", || {
        let model = overfit.as_ref().ok_or(anfc_core::Error::Contract(
            "overfit model unavailable".into(),
        ))?;
        let off = psnr_of(model, &crop, false)?;
        let on = psnr_of(model, &crop, true)?;
        Ok((on >= off, format!("PSNR on {on:.2} dB, off {off:.2} dB")))
    });

    // Two toy models trained from the same initialization on random 64x64
    // crops of one 128x128 image, measured on that whole image.
    suite.run("lambda ordering", || {
        let image = synthetic(1, 128, 128, DType::F32)?;
        let mut points = Vec::new();
        for lambda2 in [0.1, 0.01] {
            let model = Model::new(ModelConfig::tiny(), DType::F32, 0)?;
            let cfg = TrainConfig {
                batch_size: 1,
                crop_size: 64,
                max_steps: 3000,
                lambda2,
                log_every: 1000,
                checkpoint_every: 0,
                ..TrainConfig::default()
            };
            train(
                &model,
                &mut ImageSet::new(vec![image.clone()])?,
                &cfg,
                None,
                None,
            )?;
            points.push(bpp_psnr(&model, &image)?);
        }
        let (hi, lo) = (points[0], points[1]);
        Ok((
            hi.0 > lo.0 && hi.1 > lo.1,
            format!(
                "lambda 0.1: {:.4} bpp {:.2} dB; lambda 0.01: {:.4} bpp {:.2} dB",
                hi.0, hi.1, lo.0, lo.1
            ),
        ))
    });

    suite.run("bd-rate oracle", || {
        let (same, shifted) = bd_rate_oracle()?;
        Ok((
            same.abs() < 5e-4 && (shifted + 10.0).abs() <= 0.1,
            format!("identical {same:.4}%, 0.9x rate {shifted:.4}%"),
        ))
    });

    suite.run("step-count ablation", || {
        let cfg = TrainConfig {
            batch_size: 1,
            crop_size: 64,
            max_steps: 5,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let rows = step_ablation(&[1, 2, 3], &ModelConfig::tiny(), &cfg, &crop)?;
        let ok = rows.len() == 3
            && rows
                .iter()
                .all(|r| r.final_loss.is_finite() && r.bpp > 0.0 && r.psnr_rgb.is_finite());
        let detail = rows
            .iter()
            .map(|r| {
                format!(
                    "{} steps: {} params, {:.3} bpp",
                    r.num_steps, r.parameters, r.bpp
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        Ok((ok, detail))
    });

    println!("{} criteria failed", suite.failed);
    if suite.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
