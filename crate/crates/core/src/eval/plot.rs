use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::RatePoint;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// One curve of an RD plot, rate on the x axis.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: &str, points: &[RatePoint]) -> Self {
        let mut points: Vec<(f64, f64)> = points.iter().map(|p| (p.rate, p.quality)).collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Series {
            label: label.to_string(),
            points,
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws the series as polylines with point markers on shared axes. The
/// figure carries no text; labels live in the accompanying records.
pub fn plot_rd(series: &[Series], path: &Path) -> Result<()> {
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .collect();
    if all.is_empty() || all.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::Metric("nothing finite to plot".into()));
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = all.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-9);
        (lo - pad, hi + pad)
    };
    let (xl, xh) = span(|p| p.0);
    let (yl, yh) = span(|p| p.1);
    let (pw, ph) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let to_px = |(x, y): (f64, f64)| {
        (
            MARGIN as i64 + ((x - xl) / (xh - xl) * pw).round() as i64,
            (HEIGHT - MARGIN) as i64 - ((y - yl) / (yh - yl) * ph).round() as i64,
        )
    };
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, bottom) = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    line(
        &mut img,
        (left, bottom),
        ((WIDTH - MARGIN) as i64, bottom),
        axis,
    );
    line(&mut img, (left, bottom), (left, MARGIN as i64), axis);
    for (k, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        let px: Vec<(i64, i64)> = s.points.iter().map(|&p| to_px(p)).collect();
        for w in px.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
        for &(x, y) in &px {
            for d in -2..=2 {
                line(&mut img, (x - 2, y + d), (x + 2, y + d), c);
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
