//! 8-bit RGB PNG files and `[1, 3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Quantizes `[1, 3, H, W]` or `[3, H, W]` to interleaved 8-bit RGB.
pub fn to_rgb8(t: &Tensor) -> Result<(Vec<u8>, usize, usize)> {
    let t = if t.rank() == 4 {
        t.squeeze(0)?
    } else {
        t.clone()
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Image(format!("expected 3 channels, got {c}")));
    }
    let v = (t.to_dtype(DType::F64)?.clamp(0.0, 1.0)? * 255.0)?
        .round()?
        .permute((1, 2, 0))?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Ok((v.into_iter().map(|x| x as u8).collect(), h, w))
}

/// `[1, 3, H, W]` tensor from interleaved 8-bit RGB.
pub fn from_rgb8(data: &[u8], height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    if data.len() != 3 * height * width {
        return Err(Error::Image(format!(
            "{} bytes for a {height}x{width} RGB image",
            data.len()
        )));
    }
    let v: Vec<f32> = data.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_vec(v, (height, width, 3), &Device::Cpu)?
        .permute((2, 0, 1))?
        .contiguous()?
        .unsqueeze(0)?
        .to_dtype(dtype)?)
}

pub fn read_png(path: &Path, dtype: DType) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Image(format!(
                "{}: expected 8-bit RGB, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    from_rgb8(rgb.as_raw(), h as usize, w as usize, dtype)
}

pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let (data, h, w) = to_rgb8(t)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer(path, &data, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Deterministic test scene quantized to 8 bits: smooth color gradients,
/// a few flat shapes with hard edges and faint texture.
pub fn synthetic(seed: u64, height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 5]> = (0..9)
        .map(|_| {
            [
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.2),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let shapes: Vec<([f64; 4], [f64; 3])> = (0..4)
        .map(|_| {
            let cy = rng.random_range(0.0..1.0);
            let cx = rng.random_range(0.0..1.0);
            let r = rng.random_range(0.08..0.25);
            let kind = rng.random_range(0.0..1.0);
            (
                [cy, cx, r, kind],
                std::array::from_fn(|_| rng.random_range(0.1..0.9)),
            )
        })
        .collect();
    let grain = Normal::new(0.0, 1.5 / 255.0).expect("valid sigma");
    let mut data = vec![0u8; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            let (v, u) = (y as f64 / height as f64, x as f64 / width as f64);
            let mut px = base;
            for (c, p) in px.iter_mut().enumerate() {
                for w in waves.iter().skip(c).step_by(3) {
                    *p += w[3] * (std::f64::consts::TAU * (w[0] * u + w[1] * v) + w[2]).sin();
                }
            }
            for ([cy, cx, r, kind], color) in &shapes {
                let inside = if *kind < 0.5 {
                    (v - cy).hypot(u - cx) < *r
                } else {
                    (v - cy).abs() < *r && (u - cx).abs() < 0.6 * r
                };
                if inside {
                    px = *color;
                }
            }
            for (c, p) in px.iter().enumerate() {
                let q = (p + grain.sample(&mut rng)).clamp(0.0, 1.0);
                data[3 * (y * width + x) + c] = (q * 255.0).round() as u8;
            }
        }
    }
    from_rgb8(&data, height, width, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_and_gray_rejected() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..3 * 5 * 7).map(|i| (i * 37 % 256) as u8).collect();
        let t = from_rgb8(&data, 5, 7, DType::F32)?;
        assert_eq!(t.dims(), &[1, 3, 5, 7]);
        let p = dir.path().join("a.png");
        write_png(&p, &t)?;
        let back = read_png(&p, DType::F64)?;
        assert_eq!(to_rgb8(&back)?.0, data);
        let g = dir.path().join("g.png");
        image::save_buffer(&g, &[0u8; 4], 2, 2, image::ColorType::L8).unwrap();
        assert!(matches!(read_png(&g, DType::F32), Err(Error::Image(_))));
        Ok(())
    }
}
