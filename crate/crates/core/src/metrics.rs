//! Quality and rate-distortion metrics.

use candle_core::{DType, Device, Tensor, D};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Per-scale exponents of the five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Smallest image side accepted by [`ms_ssim`].
pub const MS_SSIM_MIN_SIDE: usize = 160;

/// PSNR over all samples of two 8-bit buffers.
pub fn psnr_rgb8(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Metric(format!(
            "buffers of {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    let sse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) / 255.0;
            d * d
        })
        .sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR-RGB of two images in `[0, 1]`, each rounded to 8 bits first.
pub fn psnr_rgb(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Metric(format!(
            "shapes {:?} and {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    psnr_rgb8(&quantize8(x)?, &quantize8(x_hat)?)
}

fn quantize8(t: &Tensor) -> Result<Vec<u8>> {
    let v = (t.to_dtype(DType::F64)?.clamp(0.0, 1.0)? * 255.0)?.round()?;
    Ok(v.flatten_all()?
        .to_vec1::<f64>()?
        .into_iter()
        .map(|x| x as u8)
        .collect())
}

pub fn mse(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    Ok((x - x_hat)?.sqr()?.mean_all()?)
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn blur(t: &Tensor, window: &[f64]) -> Result<Tensor> {
    let k = window.len();
    let g = Tensor::from_vec(window.to_vec(), k, &Device::Cpu)?.to_dtype(t.dtype())?;
    let t = t.conv2d(&g.reshape((1, 1, 1, k))?, 0, 1, 1, 1)?;
    Ok(t.conv2d(&g.reshape((1, 1, k, 1))?, 0, 1, 1, 1)?)
}

/// 2x2 average pooling; odd sizes repeat their last row or column first.
fn downsample(t: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    let mut t = t.clone();
    if h % 2 == 1 {
        t = t.pad_with_same(2, 0, 1)?;
    }
    if w % 2 == 1 {
        t = t.pad_with_same(3, 0, 1)?;
    }
    Ok(t.avg_pool2d(2)?)
}

/// Mean SSIM and mean contrast-structure term, each `[P]` over planes.
fn ssim_terms(x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = x.dims4()?;
    let window = gaussian_window(SSIM_WINDOW.min(h).min(w), SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_x = blur(x, &window)?;
    let mu_y = blur(y, &window)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let s_xx = (blur(&x.sqr()?, &window)? - &mu_xx)?;
    let s_yy = (blur(&y.sqr()?, &window)? - &mu_yy)?;
    let s_xy = (blur(&(x * y)?, &window)? - &mu_xy)?;
    let cs = ((s_xy * 2.0)? + c2)?.div(&((s_xx + s_yy)? + c2)?)?;
    let lum = ((mu_xy * 2.0)? + c1)?.div(&((mu_xx + mu_yy)? + c1)?)?;
    let ssim = (&lum * &cs)?;
    let p = x.dim(0)?;
    let mean = |t: &Tensor| -> Result<Tensor> { Ok(t.reshape((p, ()))?.mean(D::Minus1)?) };
    Ok((mean(&ssim)?, mean(&cs)?))
}

/// Five-scale MS-SSIM of `[B, C, H, W]` images with data range 1, averaged
/// over channels and the batch. Differentiable.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::Metric(format!(
            "shapes {:?} and {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let (b, c, h, w) = x.dims4()?;
    if h.min(w) < MS_SSIM_MIN_SIDE {
        return Err(Error::Metric(format!(
            "MS-SSIM needs both sides at least {MS_SSIM_MIN_SIDE}, got {h}x{w}"
        )));
    }
    let mut x = x.reshape((b * c, 1, h, w))?;
    let mut y = y.reshape((b * c, 1, h, w))?;
    let floor = 1e-12;
    let mut acc: Option<Tensor> = None;
    for (i, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y)?;
        let last = i + 1 == MS_SSIM_WEIGHTS.len();
        let term = if last { ssim } else { cs };
        let term = term.maximum(floor)?.powf(weight)?;
        acc = Some(match acc {
            Some(a) => (a * term)?,
            None => term,
        });
        if !last {
            x = downsample(&x)?;
            y = downsample(&y)?;
        }
    }
    Ok(acc.expect("five scales").mean_all()?)
}

pub fn ms_ssim_value(x: &Tensor, y: &Tensor) -> Result<f64> {
    let v = ms_ssim(&x.to_dtype(DType::F64)?, &y.to_dtype(DType::F64)?)?;
    Ok(v.to_scalar::<f64>()?)
}

/// One point of a rate-distortion curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub rate: f64,
    pub quality: f64,
}

fn cubic_fit(points: &[RatePoint], center: f64, half: f64) -> Result<[f64; 4]> {
    let n = points.len();
    let a = DMatrix::from_fn(n, 4, |r, c| {
        ((points[r].quality - center) / half).powi(c as i32)
    });
    let b = DVector::from_iterator(n, points.iter().map(|p| p.rate.ln()));
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Metric(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn check_curve(points: &[RatePoint], name: &str) -> Result<()> {
    if points.len() < 4 {
        return Err(Error::Metric(format!(
            "{name} curve has {} points, needs 4",
            points.len()
        )));
    }
    if points
        .iter()
        .any(|p| !(p.rate > 0.0) || !p.quality.is_finite())
    {
        return Err(Error::Metric(format!(
            "{name} curve has a nonpositive rate or bad quality"
        )));
    }
    Ok(())
}

/// Bjøntegaard delta rate of `test` against `anchor` in percent; negative
/// means `test` needs less rate at equal quality.
pub fn bd_rate(test: &[RatePoint], anchor: &[RatePoint]) -> Result<f64> {
    check_curve(test, "test")?;
    check_curve(anchor, "anchor")?;
    let range = |c: &[RatePoint]| {
        c.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.quality), hi.max(p.quality))
            })
    };
    let (tl, th) = range(test);
    let (al, ah) = range(anchor);
    let (lo, hi) = (tl.max(al), th.min(ah));
    if !(hi > lo) {
        return Err(Error::Metric("quality ranges do not overlap".into()));
    }
    let (center, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
    // integral over t in [-1, 1] of sum c_k t^k
    let integral = |c: [f64; 4]| 2.0 * c[0] + 2.0 * c[2] / 3.0;
    let diff = (integral(cubic_fit(test, center, half)?)
        - integral(cubic_fit(anchor, center, half)?))
        / 2.0;
    Ok(100.0 * (diff.exp() - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() -> Result<()> {
        let a: Vec<u8> = (0..192).map(|i| (i * 7 % 250) as u8).collect();
        assert_eq!(psnr_rgb8(&a, &a)?, PSNR_CAP);
        let b: Vec<u8> = a.iter().map(|v| v + 1).collect();
        assert!((psnr_rgb8(&a, &b)? - 20.0 * 255f64.log10()).abs() < 1e-9);
        // brute-force reference on a random 8x8 pair
        let c: Vec<u8> = (0..192).map(|i| ((i * 131 + 17) % 256) as u8).collect();
        let mut sse = 0.0;
        for i in 0..192 {
            let d = a[i] as f64 / 255.0 - c[i] as f64 / 255.0;
            sse += d * d;
        }
        let want = 10.0 * (192.0 / sse).log10();
        assert!((psnr_rgb8(&a, &c)? - want).abs() < 1e-9);
        let ta = Tensor::from_vec(
            a.iter().map(|&v| v as f32 / 255.0).collect::<Vec<_>>(),
            (1, 3, 8, 8),
            &Device::Cpu,
        )?;
        let tc = Tensor::from_vec(
            c.iter().map(|&v| v as f32 / 255.0).collect::<Vec<_>>(),
            (1, 3, 8, 8),
            &Device::Cpu,
        )?;
        assert!((psnr_rgb(&ta, &tc)? - want).abs() < 1e-9);
        Ok(())
    }

    #[test]
    fn mse_closed_form() -> Result<()> {
        let x = Tensor::rand(0f64, 0.8, (1, 3, 9, 9), &Device::Cpu)?;
        let m = mse(&x, &(&x + 0.1)?)?.to_scalar::<f64>()?;
        assert!((m - 0.01).abs() < 1e-12);
        assert_eq!(mse(&x, &x)?.to_scalar::<f64>()?, 0.0);
        Ok(())
    }

    /// Direct loops over one plane: valid Gaussian filtering, then means.
    fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
        let g = gaussian_window(SSIM_WINDOW.min(h).min(w), SSIM_SIGMA);
        let k = g.len();
        let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
        let (mut ssim, mut cs, mut n) = (0.0, 0.0, 0.0);
        for i in 0..=h - k {
            for j in 0..=w - k {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        let wt = g[a] * g[b];
                        let (p, q) = (x[(i + a) * w + j + b], y[(i + a) * w + j + b]);
                        mx += wt * p;
                        my += wt * q;
                        xx += wt * p * p;
                        yy += wt * q * q;
                        xy += wt * p * q;
                    }
                }
                let c = (2.0 * (xy - mx * my) + c2) / (xx - mx * mx + yy - my * my + c2);
                cs += c;
                ssim += c * (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                n += 1.0;
            }
        }
        (ssim / n, cs / n)
    }

    fn down_oracle(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let at = |i: usize, j: usize| x[i.min(h - 1) * w + j.min(w - 1)];
        let mut out = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                out.push(
                    (at(2 * i, 2 * j)
                        + at(2 * i + 1, 2 * j)
                        + at(2 * i, 2 * j + 1)
                        + at(2 * i + 1, 2 * j + 1))
                        / 4.0,
                );
            }
        }
        (out, oh, ow)
    }

    fn ms_ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let (mut x, mut y, mut h, mut w) = (x.to_vec(), y.to_vec(), h, w);
        let mut v = 1.0;
        for (i, wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (s, c) = ssim_oracle(&x, &y, h, w);
            if i == 4 {
                v *= s.max(1e-12).powf(*wt);
            } else {
                v *= c.max(1e-12).powf(*wt);
                let (nx, nh, nw) = down_oracle(&x, h, w);
                y = down_oracle(&y, h, w).0;
                x = nx;
                h = nh;
                w = nw;
            }
        }
        v
    }

    #[test]
    fn ms_ssim_matches_loop_oracle() -> Result<()> {
        let (h, w) = (161, 170);
        let x = Tensor::rand(0f64, 1.0, (1, 1, h, w), &Device::Cpu)?;
        let noise = Tensor::randn(0f64, 0.1, (1, 1, h, w), &Device::Cpu)?;
        let y = (&x + noise)?.clamp(0.0, 1.0)?;
        let got = ms_ssim_value(&x, &y)?;
        let want = ms_ssim_oracle(
            &x.flatten_all()?.to_vec1()?,
            &y.flatten_all()?.to_vec1()?,
            h,
            w,
        );
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        Ok(())
    }

    #[test]
    fn ms_ssim_examples() -> Result<()> {
        let x = Tensor::rand(0f64, 1.0, (2, 3, 160, 176), &Device::Cpu)?;
        assert!((ms_ssim_value(&x, &x)? - 1.0).abs() < 1e-12);
        for _ in 0..3 {
            let y = Tensor::rand(0f64, 1.0, (2, 3, 160, 176), &Device::Cpu)?;
            assert!(ms_ssim_value(&x, &y)? < 0.2);
        }
        let small = Tensor::rand(0f64, 1.0, (1, 3, 159, 300), &Device::Cpu)?;
        assert!(matches!(ms_ssim(&small, &small), Err(Error::Metric(_))));
        Ok(())
    }

    fn curve(rates: &[f64], q: &[f64]) -> Vec<RatePoint> {
        rates
            .iter()
            .zip(q)
            .map(|(&rate, &quality)| RatePoint { rate, quality })
            .collect()
    }

    #[test]
    fn bd_rate_oracles() -> Result<()> {
        let rates = [0.1, 0.25, 0.5, 0.9, 1.4];
        let q = [27.1, 29.8, 32.6, 35.0, 37.2];
        let anchor = curve(&rates, &q);
        assert!(bd_rate(&anchor, &anchor)?.abs() < 1e-9);
        let cheaper: Vec<f64> = rates.iter().map(|r| r * 0.9).collect();
        let test = curve(&cheaper, &q);
        assert!((bd_rate(&test, &anchor)? + 10.0).abs() < 1e-6);
        assert!(bd_rate(&anchor, &test)? > 0.0);
        let far = curve(&rates, &[50.0, 51.0, 52.0, 53.0, 54.0]);
        assert!(bd_rate(&far, &anchor).is_err());
        assert!(bd_rate(&anchor[..3], &anchor).is_err());
        Ok(())
    }
}
