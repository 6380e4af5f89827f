use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::config::QuantMode;
use crate::error::{Error, Result};
use crate::flow::{QuantPlan, Quantizer};
use crate::image_io::write_png;
use crate::model::Model;

/// Files written by [`visualize_steps`] and the measurements behind them.
#[derive(Debug, Clone, Default)]
pub struct StepFigures {
    pub files: Vec<PathBuf>,
    /// Mean squared value of the final x-branch.
    pub x2_mse: f64,
    /// Spectral energy fraction above half-band of the input.
    pub input_high_band: f64,
    /// The same for the x-branch after every step.
    pub step_high_band: Vec<f64>,
}

/// Channel mean of a `[1, C, H, W]` tensor as a flat plane.
fn mean_plane(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (_, _, h, w) = t.dims4()?;
    let v = t
        .to_dtype(DType::F64)?
        .mean(1)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Ok((v, h, w))
}

fn fft2(plane: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let mean = plane.iter().sum::<f64>() / plane.len() as f64;
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    let rows = planner.plan_fft_forward(w);
    for r in buf.chunks_mut(w) {
        rows.process(r);
    }
    let cols = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        cols.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf
}

/// `log(1 + |F|)` of the mean-removed plane with the zero frequency moved
/// to the center.
pub fn log_spectrum(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let f = fft2(plane, h, w);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = f[y * w + x].norm().ln_1p();
        }
    }
    out
}

/// Share of the (mean-removed) energy at frequencies above half the Nyquist
/// band along either axis.
pub fn high_band_fraction(plane: &[f64], h: usize, w: usize) -> f64 {
    let f = fft2(plane, h, w);
    let (mut hi, mut total) = (0.0, 0.0);
    for y in 0..h {
        let fy = y.min(h - y) as f64 / h as f64;
        for x in 0..w {
            let fx = x.min(w - x) as f64 / w as f64;
            let e = f[y * w + x].norm_sqr();
            total += e;
            if fy.max(fx) > 0.25 {
                hi += e;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        hi / total
    }
}

fn colormap(t: f64, diverging: bool) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let stops: &[[f64; 3]] = if diverging {
        &[
            [33.0, 102.0, 172.0],
            [247.0, 247.0, 247.0],
            [178.0, 24.0, 43.0],
        ]
    } else {
        &[
            [0.0, 0.0, 4.0],
            [120.0, 28.0, 109.0],
            [237.0, 105.0, 37.0],
            [252.0, 255.0, 164.0],
        ]
    };
    let s = t * (stops.len() - 1) as f64;
    let i = (s.floor() as usize).min(stops.len() - 2);
    let f = s - i as f64;
    Rgb(std::array::from_fn(|c| {
        (stops[i][c] + f * (stops[i + 1][c] - stops[i][c])).round() as u8
    }))
}

fn heatmap(v: &[f64], h: usize, w: usize, diverging: bool, path: &Path) -> Result<()> {
    let (lo, hi) = if diverging {
        let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        (-m, m)
    } else {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi } else { lo + 1.0 })
    };
    let zoom = (128 / h.min(w).max(1)).max(1);
    let img = RgbImage::from_fn((w * zoom) as u32, (h * zoom) as u32, |x, y| {
        let i = (y as usize / zoom) * w + x as usize / zoom;
        colormap((v[i] - lo) / (hi - lo), diverging)
    });
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Shifts the mean intensity of an image-shaped tensor to mid-gray.
fn mid_gray(t: &Tensor) -> Result<Tensor> {
    let mean = t.mean_all()?;
    Ok(t.broadcast_sub(&mean)?.affine(1.0, 128.0 / 255.0)?)
}

/// Writes per-step x-branch and decoder-output panels, their spectra, and
/// heatmaps of the main latent for its highest-variance channels.
pub fn visualize_steps(
    model: &Model,
    image: &Tensor,
    lambda_index: Option<usize>,
    out_dir: &Path,
) -> Result<StepFigures> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cond = model.condition(lambda_index)?;
    let (x, _) = crate::codec::pad_reflect(&image.to_dtype(model.dtype())?, 64)?;
    let trace = model.forward(
        &x,
        QuantPlan::uniform(QuantMode::Round),
        &mut Quantizer::new(0),
        cond.as_ref(),
    )?;
    let mut fig = StepFigures::default();
    let spectrum = |t: &Tensor, name: &str, fig: &mut StepFigures| -> Result<f64> {
        let (p, h, w) = mean_plane(t)?;
        let path = out_dir.join(name);
        heatmap(&log_spectrum(&p, h, w), h, w, false, &path)?;
        fig.files.push(path);
        Ok(high_band_fraction(&p, h, w))
    };
    fig.input_high_band = spectrum(&x, "input_spectrum.png", &mut fig)?;
    for (i, s) in trace.steps.iter().enumerate() {
        for (t, tag) in [(&s.x, "x"), (&s.dec_out, "dec")] {
            let path = out_dir.join(format!("step{}_{tag}.png", i + 1));
            write_png(&path, &mid_gray(t)?)?;
            fig.files.push(path);
        }
        let hb = spectrum(&s.x, &format!("step{}_x_spectrum.png", i + 1), &mut fig)?;
        fig.step_high_band.push(hb);
    }
    fig.x2_mse = trace
        .x2
        .to_dtype(DType::F64)?
        .sqr()?
        .mean_all()?
        .to_scalar::<f64>()?;

    let (_, n, h, w) = trace.z_hat.dims4()?;
    let planes = |t: &Tensor| -> Result<Vec<Vec<f64>>> {
        Ok(t.to_dtype(DType::F64)?
            .squeeze(0)?
            .reshape((n, h * w))?
            .to_vec2::<f64>()?)
    };
    let z_hat = planes(&trace.z_hat_recon)?;
    let z2 = planes(&trace.z2)?;
    let variance = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        variance(&z_hat[b])
            .total_cmp(&variance(&z_hat[a]))
            .then(a.cmp(&b))
    });
    for &c in order.iter().take(4) {
        for (v, tag) in [(&z_hat[c], "z_hat"), (&z2[c], "z2")] {
            let path = out_dir.join(format!("{tag}_c{c:02}.png"));
            heatmap(v, h, w, true, &path)?;
            fig.files.push(path);
        }
    }
    let (x2p, xh, xw) = mean_plane(&trace.x2)?;
    let path = out_dir.join("x2.png");
    heatmap(&x2p, xh, xw, true, &path)?;
    fig.files.push(path);
    Ok(fig)
}
