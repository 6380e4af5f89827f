use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{decode_image, encode_image, DecodeOptions, EncodeOptions};
use crate::config::{ModelConfig, TrainConfig};
use crate::error::Result;
use crate::metrics::psnr_rgb;
use crate::model::Model;
use crate::train::Trainer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub num_steps: usize,
    pub parameters: usize,
    pub final_loss: f64,
    pub bpp: f64,
    pub psnr_rgb: f64,
}

/// Trains one model per step count on `image` for `train.max_steps` steps
/// and measures each through a real bitstream.
pub fn step_ablation(
    step_counts: &[usize],
    base: &ModelConfig,
    train: &TrainConfig,
    image: &Tensor,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &k in step_counts {
        let mut cfg = base.clone();
        cfg.flow.num_steps = k;
        let model = Model::new(cfg, DType::F32, train.seed)?;
        let mut trainer = Trainer::new(&model, train)?;
        let x = image.to_dtype(DType::F32)?;
        let mut loss = f64::NAN;
        for _ in 0..train.max_steps {
            loss = trainer.step_on(&x)?.total;
        }
        let bytes = encode_image(&model, &x, &EncodeOptions::default())?.to_bytes()?;
        let dec = decode_image(&model, &bytes, &DecodeOptions::default())?;
        let (_, _, h, w) = x.dims4()?;
        rows.push(AblationRow {
            num_steps: k,
            parameters: model.num_parameters(),
            final_loss: loss,
            bpp: bytes.len() as f64 * 8.0 / (h * w) as f64,
            psnr_rgb: psnr_rgb(&x, &dec.image)?,
        });
        log::info!("ablation: {} steps -> {:?}", k, rows.last());
    }
    Ok(rows)
}
