pub mod codec;
pub mod config;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod flow;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod rangecoder;
pub mod selftest;
pub mod train;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, Result};
