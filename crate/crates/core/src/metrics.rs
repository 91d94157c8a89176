//! Benchmark evaluation: PSNR and SSIM over directories of image pairs.
//!
//! SSIM follows the standard windowed definition (11×11 Gaussian window,
//! σ = 1.5, k1 = 0.01, k2 = 0.03, dynamic range 1) computed on Rec. 601
//! luma over valid windows only (no padding). Published numbers from other
//! toolchains are therefore comparable only qualitatively.

use crate::error::{DereflectError, Result};
use crate::img::{check_same_shape, ImageTensor, LUMA_WEIGHTS};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// PSNR serialization cap for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// SSIM parameters.
#[derive(Debug, Clone, Copy)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// `-10·log10(MSE)` for unit dynamic range; infinite when MSE is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Peak signal-to-noise ratio in dB over all pixels and channels.
pub fn psnr(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let mut acc = 0.0f64;
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        let d = p as f64 - g as f64;
        acc += d * d;
    }
    Ok(psnr_from_mse(acc / pred.data().len() as f64))
}

fn gaussian_window(n: usize, sigma: f64) -> Array2<f64> {
    let half = (n - 1) as f64 / 2.0;
    let mut w = Array2::from_shape_fn((n, n), |(y, x)| {
        let dy = y as f64 - half;
        let dx = x as f64 - half;
        (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
    });
    let sum: f64 = w.iter().sum();
    w.mapv_inplace(|v| v / sum);
    w
}

fn luma64(img: &ImageTensor) -> Array2<f64> {
    let (h, w) = img.shape();
    let data = img.data();
    Array2::from_shape_fn((h, w), |(y, x)| {
        LUMA_WEIGHTS[0] as f64 * data[[y, x, 0]] as f64
            + LUMA_WEIGHTS[1] as f64 * data[[y, x, 1]] as f64
            + LUMA_WEIGHTS[2] as f64 * data[[y, x, 2]] as f64
    })
}

/// Mean SSIM over valid windows, optionally with the gradient of the mean
/// with respect to the predicted image (chained back to RGB).
///
/// For each window with weighted stats (μx, μy, σx², σy², σxy):
/// `S = (2μxμy + C1)(2σxy + C2) / ((μx² + μy² + C1)(σx² + σy² + C2))`
/// and the derivative wrt a pred luma sample x_i with window weight w_i is
/// `w_i·[(2μy·A2 + 2(y_i−μy)·A1)/(B1·B2) − S·(2μx/B1 + 2(x_i−μx)/B2)]`.
pub fn ssim_core(
    pred: &ImageTensor,
    gt: &ImageTensor,
    params: SsimParams,
    want_grad: bool,
) -> Result<(f64, Option<Array3<f32>>)> {
    check_same_shape(pred, gt)?;
    let (h, w) = pred.shape();
    let n = params.window;
    if h < n || w < n {
        return Err(DereflectError::Validation(format!(
            "image {h}x{w} smaller than SSIM window {n}"
        )));
    }
    let win = gaussian_window(n, params.sigma);
    let x = luma64(pred);
    let y = luma64(gt);
    let c1 = params.k1 * params.k1;
    let c2 = params.k2 * params.k2;

    let mut grad_luma = if want_grad {
        Some(Array2::<f64>::zeros((h, w)))
    } else {
        None
    };
    let n_windows = ((h - n + 1) * (w - n + 1)) as f64;
    let mut total = 0.0f64;

    for oy in 0..=h - n {
        for ox in 0..=w - n {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for dy in 0..n {
                for dx in 0..n {
                    let wgt = win[[dy, dx]];
                    let xv = x[[oy + dy, ox + dx]];
                    let yv = y[[oy + dy, ox + dx]];
                    mx += wgt * xv;
                    my += wgt * yv;
                    sxx += wgt * xv * xv;
                    syy += wgt * yv * yv;
                    sxy += wgt * xv * yv;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            let a1 = 2.0 * mx * my + c1;
            let a2 = 2.0 * cxy + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = vx + vy + c2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;

            if let Some(g) = grad_luma.as_mut() {
                let inv_b1b2 = 1.0 / (b1 * b2);
                for dy in 0..n {
                    for dx in 0..n {
                        let wgt = win[[dy, dx]];
                        let xv = x[[oy + dy, ox + dx]];
                        let yv = y[[oy + dy, ox + dx]];
                        let ds = wgt
                            * ((2.0 * my * a2 + 2.0 * (yv - my) * a1) * inv_b1b2
                                - s * (2.0 * mx / b1 + 2.0 * (xv - mx) / b2));
                        g[[oy + dy, ox + dx]] += ds / n_windows;
                    }
                }
            }
        }
    }

    let mean = total / n_windows;
    let grad_rgb = grad_luma.map(|g| {
        Array3::from_shape_fn((h, w, 3), |(yy, xx, c)| {
            (g[[yy, xx]] * LUMA_WEIGHTS[c] as f64) as f32
        })
    });
    Ok((mean, grad_rgb))
}

/// Mean SSIM with default parameters.
pub fn ssim(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    Ok(ssim_core(pred, gt, SsimParams::default(), false)?.0)
}

/// One evaluated image pair; `psnr_db` is capped at [`PSNR_CAP_DB`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub benchmark_name: String,
    pub scene_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// A pair that could not be evaluated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalItemError {
    pub file: String,
    pub message: String,
}

/// Per-image records plus unweighted means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub benchmark_name: String,
    pub records: Vec<EvalRecord>,
    pub errors: Vec<EvalItemError>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl BenchmarkReport {
    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "benchmark {}: {} images, {} errors\n",
            self.benchmark_name,
            self.records.len(),
            self.errors.len()
        ));
        out.push_str(&format!("{:<28} {:>9} {:>7}\n", "scene", "PSNR(dB)", "SSIM"));
        for rec in &self.records {
            out.push_str(&format!(
                "{:<28} {:>9.3} {:>7.4}\n",
                rec.scene_id, rec.psnr_db, rec.ssim
            ));
        }
        out.push_str(&format!(
            "{:<28} {:>9.3} {:>7.4}\n",
            "mean", self.mean_psnr_db, self.mean_ssim
        ));
        for err in &self.errors {
            out.push_str(&format!("error {}: {}\n", err.file, err.message));
        }
        out
    }
}

fn list_image_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.insert(name);
        }
    }
    Ok(names)
}

/// Evaluates every filename present in either directory; pairs that fail to
/// load or mismatch become error entries and evaluation continues.
pub fn evaluate_benchmark(
    benchmark_name: &str,
    pred_dir: &Path,
    gt_dir: &Path,
) -> Result<BenchmarkReport> {
    let pred_names = list_image_names(pred_dir)?;
    let gt_names = list_image_names(gt_dir)?;
    let all: BTreeSet<String> = pred_names.union(&gt_names).cloned().collect();
    if all.is_empty() {
        return Err(DereflectError::Validation(format!(
            "no .png files under {} or {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for name in all {
        if !pred_names.contains(&name) {
            errors.push(EvalItemError {
                file: name,
                message: "missing prediction".into(),
            });
            continue;
        }
        if !gt_names.contains(&name) {
            errors.push(EvalItemError {
                file: name,
                message: "missing ground truth".into(),
            });
            continue;
        }
        let outcome = (|| -> Result<EvalRecord> {
            let pred = ImageTensor::load(&pred_dir.join(&name))?;
            let gt = ImageTensor::load(&gt_dir.join(&name))?;
            Ok(EvalRecord {
                benchmark_name: benchmark_name.to_string(),
                scene_id: name.trim_end_matches(".png").to_string(),
                psnr_db: psnr(&pred, &gt)?.min(PSNR_CAP_DB),
                ssim: ssim(&pred, &gt)?,
            })
        })();
        match outcome {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push(EvalItemError {
                file: name,
                message: e.to_string(),
            }),
        }
    }

    let n = records.len().max(1) as f64;
    let mean_psnr_db = records.iter().map(|r| r.psnr_db).sum::<f64>() / n;
    let mean_ssim = records.iter().map(|r| r.ssim).sum::<f64>() / n;
    Ok(BenchmarkReport {
        benchmark_name: benchmark_name.to_string(),
        records,
        errors,
        mean_psnr_db,
        mean_ssim,
    })
}
