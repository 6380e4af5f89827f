//! Fixtures shared by the benchmarks.

use anfc_core::codec::{encode_image, EncodeOptions};
use anfc_core::config::ModelConfig;
use anfc_core::entropy::CdfTable;
use anfc_core::image_io::synthetic;
use anfc_core::model::Model;
use anfc_core::{DType, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

/// Untrained tiny model with the residual head, so both stream kinds work.
pub fn tiny_model() -> Result<Model> {
    let mut cfg = ModelConfig::tiny();
    cfg.residual_head = true;
    Model::new(cfg, DType::F32, 0)
}

pub fn image(side: usize) -> Result<Tensor> {
    synthetic(7, side, side, DType::F32)
}

pub fn container(model: &Model, x: &Tensor, residual: bool) -> Result<Vec<u8>> {
    let opts = EncodeOptions {
        residual,
        ..EncodeOptions::default()
    };
    encode_image(model, x, &opts)?.to_bytes()
}

/// Discretized Laplace tables of increasing scale with escape slots.
pub fn laplace_tables(n: usize) -> Result<Vec<CdfTable>> {
    (0..n)
        .map(|i| {
            let b = 0.5 + i as f64;
            let pmf: Vec<f64> = (-16..=16)
                .map(|v: i32| (-(v.abs() as f64) / b).exp())
                .collect();
            let total: f64 = pmf.iter().sum();
            let pmf: Vec<f64> = pmf.iter().map(|p| 0.999 * p / total).collect();
            CdfTable::from_pmf(-16, &pmf, Some((5e-4, 5e-4)), 16)
        })
        .collect()
}

/// Symbols drawn to match `laplace_tables`, with occasional escapes.
pub fn laplace_symbols(tables: &[CdfTable], n: usize, seed: u64) -> Vec<(i32, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = rng.random_range(0..tables.len());
            let magnitude = Exp::new(1.0 / (0.5 + t as f64)).unwrap().sample(&mut rng);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            ((sign * magnitude).round() as i32, t)
        })
        .collect()
}
