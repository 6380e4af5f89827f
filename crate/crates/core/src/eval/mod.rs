//! Rate-distortion sweeps through real bitstreams, diagnostics and the
//! step-count ablation.

mod ablation;
mod plot;
mod visualize;

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use ablation::{step_ablation, AblationRow};
pub use plot::{plot_rd, Series};
pub use visualize::{high_band_fraction, log_spectrum, visualize_steps, StepFigures};

use crate::codec::{decode_image, encode_image, DecodeOptions, EncodeOptions};
use crate::error::{Error, Result};
use crate::image_io::read_png;
use crate::metrics::{ms_ssim_value, psnr_rgb, RatePoint, MS_SSIM_MIN_SIDE};
use crate::model::Model;

/// How dataset PSNR is aggregated; stored with every sweep.
pub const PSNR_AVERAGING: &str = "mean of per-image PSNR";

/// Metrics of one image at one rate point, measured on the decoded file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdRecord {
    pub image: String,
    pub lambda: f64,
    pub lambda_index: Option<usize>,
    /// Container bits over original pixels.
    pub bpp: f64,
    pub psnr_rgb: f64,
    /// Absent for images smaller than the MS-SSIM minimum side.
    pub msssim: Option<f64>,
    pub bytes: usize,
}

/// Dataset averages, one record per rate point, in increasing rate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RdCurve {
    pub points: Vec<RdRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quality {
    Psnr,
    MsSsim,
}

impl RdCurve {
    /// Averages per-image records by rate point.
    pub fn from_records(records: &[RdRecord]) -> Result<Self> {
        let mut keys: Vec<(f64, Option<usize>)> = Vec::new();
        for r in records {
            if !keys.contains(&(r.lambda, r.lambda_index)) {
                keys.push((r.lambda, r.lambda_index));
            }
        }
        let mut points = Vec::new();
        for (lambda, lambda_index) in keys {
            let group: Vec<&RdRecord> = records
                .iter()
                .filter(|r| r.lambda == lambda && r.lambda_index == lambda_index)
                .collect();
            let n = group.len() as f64;
            let msssim = group
                .iter()
                .map(|r| r.msssim)
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / n);
            points.push(RdRecord {
                image: format!("mean of {}", group.len()),
                lambda,
                lambda_index,
                bpp: group.iter().map(|r| r.bpp).sum::<f64>() / n,
                psnr_rgb: group.iter().map(|r| r.psnr_rgb).sum::<f64>() / n,
                msssim,
                bytes: group.iter().map(|r| r.bytes).sum::<usize>() / group.len(),
            });
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        Ok(RdCurve { points })
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.points.windows(2).all(|w| w[0].bpp < w[1].bpp)
    }

    pub fn rate_points(&self, quality: Quality) -> Result<Vec<RatePoint>> {
        self.points
            .iter()
            .map(|p| {
                let q = match quality {
                    Quality::Psnr => Some(p.psnr_rgb),
                    Quality::MsSsim => p.msssim,
                };
                q.map(|quality| RatePoint {
                    rate: p.bpp,
                    quality,
                })
                .ok_or_else(|| Error::Metric("curve has no MS-SSIM values".into()))
            })
            .collect()
    }
}

/// The rate points of a sweep.
pub enum ModelSet<'a> {
    /// One model per `lambda2`.
    Fixed(Vec<(f64, &'a Model)>),
    /// Every point of a variable-rate model's lambda set.
    Variable(&'a Model),
}

impl ModelSet<'_> {
    fn points(&self) -> Result<Vec<(f64, Option<usize>, &Model)>> {
        match self {
            ModelSet::Fixed(v) => Ok(v.iter().map(|&(l, m)| (l, None, m)).collect()),
            ModelSet::Variable(m) => {
                let set = m
                    .lambdas()
                    .ok_or_else(|| Error::Config("model has no lambda set".into()))?;
                Ok(set
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| (l, Some(i), *m))
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub psnr_averaging: String,
    pub residual: bool,
    pub records: Vec<RdRecord>,
    pub curve: RdCurve,
}

/// Every `.png` directly inside `dir`, in name order, keyed by file stem.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Image(format!("no PNG files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            Ok((id, read_png(p, DType::F32)?))
        })
        .collect()
}

/// Encodes, writes out and decodes one image, and measures the decoded result.
pub fn measure(
    model: &Model,
    id: &str,
    image: &Tensor,
    lambda: f64,
    lambda_index: Option<usize>,
    residual: bool,
) -> Result<RdRecord> {
    let enc = encode_image(
        model,
        image,
        &EncodeOptions {
            residual,
            lambda_index,
            ..EncodeOptions::default()
        },
    )?;
    let bytes = enc.to_bytes()?;
    let dec = decode_image(model, &bytes, &DecodeOptions::default())?;
    let (_, _, h, w) = image.dims4()?;
    let msssim = if h.min(w) >= MS_SSIM_MIN_SIDE {
        Some(ms_ssim_value(image, &dec.image)?)
    } else {
        None
    };
    Ok(RdRecord {
        image: id.to_string(),
        lambda,
        lambda_index,
        bpp: bytes.len() as f64 * 8.0 / (h * w) as f64,
        psnr_rgb: psnr_rgb(image, &dec.image)?,
        msssim,
        bytes: bytes.len(),
    })
}

/// Measures every image at every rate point. Images are spread over the
/// available threads; records come back in (rate point, image) order.
pub fn rd_sweep(set: &ModelSet, images: &[(String, Tensor)], residual: bool) -> Result<Sweep> {
    let jobs: Vec<(f64, Option<usize>, &Model, &str, &Tensor)> = set
        .points()?
        .into_iter()
        .flat_map(|(l, i, m)| images.iter().map(move |(id, x)| (l, i, m, id.as_str(), x)))
        .collect();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs.len().max(1));
    let results: Vec<Result<RdRecord>> = if workers <= 1 {
        jobs.iter()
            .map(|&(l, i, m, id, x)| measure(m, id, x, l, i, residual))
            .collect()
    } else {
        let chunk = jobs.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|&(l, i, m, id, x)| measure(m, id, x, l, i, residual))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    };
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let curve = RdCurve::from_records(&records)?;
    Ok(Sweep {
        psnr_averaging: PSNR_AVERAGING.to_string(),
        residual,
        records,
        curve,
    })
}

fn write_csv(path: &Path, rows: &[RdRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{e}")))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("{e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl Sweep {
    /// Writes `sweep.json`, `records.csv`, `curve.csv` and the RD plots.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("sweep.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let records = dir.join("records.csv");
        write_csv(&records, &self.records)?;
        let curve = dir.join("curve.csv");
        write_csv(&curve, &self.curve.points)?;
        let mut files = vec![json, records, curve];
        let psnr = dir.join("rd_psnr.png");
        let pts = self.curve.rate_points(Quality::Psnr)?;
        plot_rd(&[Series::new("model", &pts)], &psnr)?;
        files.push(psnr);
        if let Ok(pts) = self.curve.rate_points(Quality::MsSsim) {
            let p = dir.join("rd_msssim.png");
            plot_rd(&[Series::new("model", &pts)], &p)?;
            files.push(p);
        }
        Ok(files)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
