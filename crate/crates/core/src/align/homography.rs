//! Robust homography estimation: normalized DLT inside a RANSAC loop.

use super::features::KeypointMatch;
use crate::error::{DereflectError, Result};
use crate::rng::Rng;
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng as _;

/// A 3×3 planar projective transform, normalized so `h[2][2] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    matrix: Matrix3<f64>,
}

impl Homography {
    /// Wraps a matrix after normalizing and checking invertibility.
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        let h22 = matrix[(2, 2)];
        if h22.abs() < 1e-12 {
            return Err(DereflectError::Validation(
                "homography has vanishing h[2][2]".into(),
            ));
        }
        let normalized = matrix / h22;
        if normalized.determinant().abs() <= 1e-10 {
            return Err(DereflectError::Validation(
                "homography is numerically singular".into(),
            ));
        }
        Ok(Self { matrix: normalized })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// Maps a point `(x, y)` through the transform.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.matrix * Vector3::new(x, y, 1.0);
        (p[0] / p[2], p[1] / p[2])
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| DereflectError::Validation("homography not invertible".into()))?;
        Self::new(inv)
    }
}

/// RANSAC settings; the defaults match the alignment protocol.
#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    pub max_iters: usize,
    /// Forward reprojection error below this is an inlier (pixels).
    pub inlier_tol: f64,
    /// Confidence target used for adaptive early exit.
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            inlier_tol: 2.0,
            confidence: 0.999,
        }
    }
}

struct Normalization {
    transform: Matrix3<f64>,
}

fn normalize_points(points: &[(f64, f64)]) -> (Vec<(f64, f64)>, Normalization) {
    let n = points.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for &(x, y) in points {
        cx += x;
        cy += y;
    }
    cx /= n;
    cy /= n;
    let mut mean_dist = 0.0;
    for &(x, y) in points {
        mean_dist += ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    }
    mean_dist /= n;
    let scale = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let normalized = points
        .iter()
        .map(|&(x, y)| ((x - cx) * scale, (y - cy) * scale))
        .collect();
    let transform = Matrix3::new(scale, 0.0, -scale * cx, 0.0, scale, -scale * cy, 0.0, 0.0, 1.0);
    (normalized, Normalization { transform })
}

/// Direct linear transform on ≥4 correspondences with Hartley normalization.
pub fn dlt(pairs: &[((f64, f64), (f64, f64))]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(DereflectError::Validation(format!(
            "DLT needs at least 4 correspondences, got {}",
            pairs.len()
        )));
    }
    let src: Vec<(f64, f64)> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<(f64, f64)> = pairs.iter().map(|p| p.1).collect();
    let (src_n, tn_src) = normalize_points(&src);
    let (dst_n, tn_dst) = normalize_points(&dst);

    // At least 9 rows so the thin SVD's V^T spans the full right space and
    // exposes the nullspace vector (minimal 4-point systems are 8×9).
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (&(x, y), &(u, v))) in src_n.iter().zip(dst_n.iter()).enumerate() {
        let r = 2 * i;
        a[(r, 0)] = -x;
        a[(r, 1)] = -y;
        a[(r, 2)] = -1.0;
        a[(r, 6)] = u * x;
        a[(r, 7)] = u * y;
        a[(r, 8)] = u;
        a[(r + 1, 3)] = -x;
        a[(r + 1, 4)] = -y;
        a[(r + 1, 5)] = -1.0;
        a[(r + 1, 6)] = v * x;
        a[(r + 1, 7)] = v * y;
        a[(r + 1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| DereflectError::Validation("SVD failed in DLT".into()))?;
    let hvec = vt.row(vt.nrows() - 1);
    let hn = Matrix3::new(
        hvec[0], hvec[1], hvec[2], hvec[3], hvec[4], hvec[5], hvec[6], hvec[7], hvec[8],
    );
    let denorm = tn_dst
        .transform
        .try_inverse()
        .ok_or_else(|| DereflectError::Validation("degenerate normalization".into()))?
        * hn
        * tn_src.transform;
    Homography::new(denorm)
}

fn reprojection_error(h: &Homography, m: &KeypointMatch) -> f64 {
    let (px, py) = h.apply(m.src.0 as f64, m.src.1 as f64);
    ((px - m.dst.0 as f64).powi(2) + (py - m.dst.1 as f64).powi(2)).sqrt()
}

fn collinear(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    cross.abs() < 1e-6
}

fn degenerate_sample(pts: &[(f64, f64)]) -> bool {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                if collinear(pts[i], pts[j], pts[k]) {
                    return true;
                }
            }
        }
    }
    false
}

/// RANSAC + inlier least-squares refit.
///
/// Returns the refit model and the inlier mask under it. Seed-deterministic
/// given the rng stream.
pub fn estimate_homography(
    matches: &[KeypointMatch],
    rng: &mut Rng,
    params: RansacParams,
) -> Result<(Homography, Vec<bool>)> {
    if matches.len() < 4 {
        return Err(DereflectError::Validation(format!(
            "homography estimation needs at least 4 matches, got {}",
            matches.len()
        )));
    }

    let n = matches.len();
    let mut best_inliers: Vec<usize> = Vec::new();
    let mut best_err = f64::MAX;
    let mut needed_iters = params.max_iters;
    let mut iter = 0;
    while iter < needed_iters.min(params.max_iters) {
        iter += 1;
        // Sample 4 distinct indices.
        let mut idx = [0usize; 4];
        let mut filled = 0;
        while filled < 4 {
            let cand = rng.gen_range(0..n);
            if !idx[..filled].contains(&cand) {
                idx[filled] = cand;
                filled += 1;
            }
        }
        let src_pts: Vec<(f64, f64)> = idx
            .iter()
            .map(|&i| (matches[i].src.0 as f64, matches[i].src.1 as f64))
            .collect();
        let dst_pts: Vec<(f64, f64)> = idx
            .iter()
            .map(|&i| (matches[i].dst.0 as f64, matches[i].dst.1 as f64))
            .collect();
        if degenerate_sample(&src_pts) || degenerate_sample(&dst_pts) {
            continue;
        }
        let pairs: Vec<((f64, f64), (f64, f64))> =
            src_pts.into_iter().zip(dst_pts).collect();
        let Ok(model) = dlt(&pairs) else { continue };

        let mut inliers = Vec::new();
        let mut err_sum = 0.0;
        for (i, m) in matches.iter().enumerate() {
            let e = reprojection_error(&model, m);
            if e < params.inlier_tol {
                inliers.push(i);
                err_sum += e;
            }
        }
        let better = inliers.len() > best_inliers.len()
            || (inliers.len() == best_inliers.len()
                && !inliers.is_empty()
                && err_sum / (inliers.len() as f64) < best_err);
        if better {
            best_err = if inliers.is_empty() {
                f64::MAX
            } else {
                err_sum / inliers.len() as f64
            };
            best_inliers = inliers;
            // Adaptive iteration bound from the current inlier ratio.
            let w = best_inliers.len() as f64 / n as f64;
            let p_all = w.powi(4);
            if p_all > 1e-9 {
                let denom = (1.0 - p_all).max(1e-12).ln();
                let est = ((1.0 - params.confidence).ln() / denom).ceil();
                needed_iters = (est.max(1.0) as usize).min(params.max_iters);
            }
        }
    }

    if best_inliers.len() < 4 {
        return Err(DereflectError::AlignmentFailure(format!(
            "no consensus: best model had {} inliers",
            best_inliers.len()
        )));
    }

    // Least-squares refit on all inliers of the best model.
    let pairs: Vec<((f64, f64), (f64, f64))> = best_inliers
        .iter()
        .map(|&i| {
            (
                (matches[i].src.0 as f64, matches[i].src.1 as f64),
                (matches[i].dst.0 as f64, matches[i].dst.1 as f64),
            )
        })
        .collect();
    let refit = dlt(&pairs)?;
    let mask: Vec<bool> = matches
        .iter()
        .map(|m| reprojection_error(&refit, m) < params.inlier_tol)
        .collect();
    if mask.iter().filter(|&&b| b).count() < 4 {
        return Err(DereflectError::AlignmentFailure(
            "refit model lost its consensus".into(),
        ));
    }
    Ok((refit, mask))
}
