//! Image-quality metrics, batch evaluation reports and window stitching.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fem::CapacitanceMatrix;
use crate::image::{Image, PermittivityImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PSNR_CAP_DB: f64 = 100.0;
pub const IOU_THRESHOLD: f64 = 0.5;

fn check_dims(op: &str, a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::InvalidInput(format!(
            "{op}: image {}×{} vs {}×{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

pub fn mse(pred: &Image, target: &Image) -> Result<f64> {
    check_dims("mse", pred, target)?;
    let s: f64 = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.data.len() as f64)
}

/// `10·log10(range²/MSE)`, reported as the cap when MSE < 1e-10.
pub fn psnr(pred: &Image, target: &Image, data_range: f64, cap_db: f64) -> Result<f64> {
    let e = mse(pred, target)?;
    if e < 1e-10 {
        return Ok(cap_db);
    }
    Ok((10.0 * (data_range * data_range / e).log10()).min(cap_db))
}

/// Index into `[0, n)` under symmetric (edge-repeating) reflection.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter with symmetric reflection at the borders.
fn blur(data: &[f64], rows: usize, cols: usize, w: &[f64]) -> Vec<f64> {
    let r = (w.len() / 2) as isize;
    let mut tmp = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            tmp[i * cols + j] = w
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * data[i * cols + reflect(j as isize + k as isize - r, cols)])
                .sum();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = w
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * tmp[reflect(i as isize + k as isize - r, rows) * cols + j])
                .sum();
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ 1.5), `K1 = 0.01`, `K2 = 0.03`,
/// data range 1, evaluated at every pixel with symmetric reflection padding.
pub fn ssim(pred: &Image, target: &Image) -> Result<f64> {
    check_dims("ssim", pred, target)?;
    let (rows, cols) = (pred.rows, pred.cols);
    let w = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (&pred.data, &target.data);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = blur(x, rows, cols, &w);
    let my = blur(y, rows, cols, &w);
    let mxx = blur(&prod(x, x), rows, cols, &w);
    let myy = blur(&prod(y, y), rows, cols, &w);
    let mxy = blur(&prod(x, y), rows, cols, &w);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..rows * cols)
        .map(|k| {
            let (ux, uy) = (mx[k], my[k]);
            let vx = mxx[k] - ux * ux;
            let vy = myy[k] - uy * uy;
            let cxy = mxy[k] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / (rows * cols) as f64)
}

/// Pearson correlation over pixels; 0 when either image is constant.
pub fn pearson_cc(pred: &Image, target: &Image) -> Result<f64> {
    check_dims("pearson_cc", pred, target)?;
    let constant = |d: &[f64]| d.iter().all(|&v| v == d[0]);
    if constant(&pred.data) || constant(&target.data) {
        return Ok(0.0);
    }
    let n = pred.data.len() as f64;
    let mx = pred.data.iter().sum::<f64>() / n;
    let my = target.data.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in pred.data.iter().zip(&target.data) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Intersection over union of `value > threshold` masks; 1 when both are empty.
pub fn iou(pred: &Image, target: &Image, threshold: f64) -> Result<f64> {
    check_dims("iou", pred, target)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&target.data) {
        let (p, q) = (a > threshold, b > threshold);
        inter += usize::from(p && q);
        union += usize::from(p || q);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mse: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub cc: f64,
    pub iou: f64,
}

impl SampleMetrics {
    pub fn compute(pred: &Image, target: &Image) -> Result<Self> {
        Ok(Self {
            mse: mse(pred, target)?,
            ssim: ssim(pred, target)?,
            psnr: psnr(pred, target, 1.0, PSNR_CAP_DB)?,
            cc: pearson_cc(pred, target)?,
            iou: iou(pred, target, IOU_THRESHOLD)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub predictor: String,
    pub count: usize,
    pub means: SampleMetrics,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn from_samples(predictor: impl Into<String>, per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        let means = SampleMetrics {
            mse: mean(|s| s.mse),
            ssim: mean(|s| s.ssim),
            psnr: mean(|s| s.psnr),
            cc: mean(|s| s.cc),
            iou: mean(|s| s.iou),
        };
        Self {
            predictor: predictor.into(),
            count: per_sample.len(),
            means,
            per_sample,
        }
    }

    /// Single-line JSON followed by a newline.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(e.column() as u64, e.to_string()))
    }
}

/// Runs `predictor` on every sample in order (in parallel) and scores it
/// against the stored ground truth.
pub fn evaluate<F>(name: &str, predictor: F, dataset: &Dataset) -> Result<MetricsReport>
where
    F: Fn(&CapacitanceMatrix) -> Result<PermittivityImage> + Sync,
{
    let per_sample = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            predictor(&s.capacitance)
                .and_then(|p| SampleMetrics::compute(p.as_image(), s.image.as_image()))
                .map_err(|e| e.in_sample(i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_samples(name, per_sample))
}

/// Scores precomputed predictions against targets, pairwise.
pub fn evaluate_images(name: &str, preds: &[Image], targets: &[Image]) -> Result<MetricsReport> {
    if preds.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let per_sample = preds
        .par_iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (p, t))| SampleMetrics::compute(p, t).map_err(|e| e.in_sample(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_samples(name, per_sample))
}

/// Joins windows left to right. Adjacent windows share `overlap` columns,
/// blended linearly from the left window into the right one.
pub fn stitch(windows: &[Image], overlap: usize) -> Result<Image> {
    let first = windows
        .first()
        .ok_or_else(|| Error::InvalidInput("stitch needs at least one window".into()))?;
    let rows = first.rows;
    if let Some(w) = windows.iter().find(|w| w.rows != rows) {
        return Err(Error::InvalidInput(format!(
            "window height {} differs from {rows}",
            w.rows
        )));
    }
    if let Some(w) = windows.iter().find(|w| w.cols < overlap) {
        return Err(Error::InvalidInput(format!(
            "overlap {overlap} exceeds window width {}",
            w.cols
        )));
    }
    let cols = windows.iter().map(|w| w.cols).sum::<usize>() - overlap * (windows.len() - 1);
    let mut out = Image::filled(rows, cols, 0.0);
    let mut start = 0usize;
    for (k, w) in windows.iter().enumerate() {
        for r in 0..rows {
            for c in 0..w.cols {
                let v = w.get(r, c);
                let blended = if k > 0 && c < overlap {
                    let t = (c + 1) as f64 / (overlap + 1) as f64;
                    (1.0 - t) * out.get(r, start + c) + t * v
                } else {
                    v
                };
                out.set(r, start + c, blended);
            }
        }
        start += w.cols - overlap;
    }
    Ok(out)
}
