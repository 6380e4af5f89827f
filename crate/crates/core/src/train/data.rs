use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io::read_png;

/// Supplies `[B, 3, crop, crop]` training batches in `[0, 1]`.
pub trait DataSource {
    fn batch(&mut self, batch: usize, crop: usize, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

fn random_crop(img: &Tensor, crop: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (_, _, h, w) = img.dims4()?;
    if h < crop || w < crop {
        return Err(Error::Image(format!(
            "{h}x{w} image is smaller than the {crop} crop"
        )));
    }
    let y = rng.random_range(0..=h - crop);
    let x = rng.random_range(0..=w - crop);
    Ok(img.narrow(2, y, crop)?.narrow(3, x, crop)?)
}

/// Random crops from a fixed set of images held in memory.
pub struct ImageSet {
    images: Vec<Tensor>,
}

impl ImageSet {
    pub fn new(images: Vec<Tensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Image("no training images".into()));
        }
        for im in &images {
            let (b, c, _, _) = im.dims4()?;
            if b != 1 || c != 3 {
                return Err(Error::Image(format!(
                    "training image of shape {:?}",
                    im.dims()
                )));
            }
        }
        Ok(ImageSet { images })
    }

    /// Every `.png` file directly inside `dir`, in name order.
    pub fn from_dir(dir: &Path, dtype: DType) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for e in entries {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
                paths.push(p);
            }
        }
        paths.sort();
        let images = paths
            .iter()
            .map(|p| read_png(p, dtype))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl DataSource for ImageSet {
    fn batch(&mut self, batch: usize, crop: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let crops = (0..batch)
            .map(|_| {
                let i = rng.random_range(0..self.images.len());
                random_crop(&self.images[i], crop, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&crops, 0)?)
    }
}
