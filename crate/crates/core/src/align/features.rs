//! Scale- and rotation-invariant keypoint detection, description, matching.
//!
//! A compact SIFT-style pipeline: difference-of-Gaussians extrema over an
//! octave pyramid, edge rejection via the DoG Hessian, dominant-orientation
//! assignment, and 4×4×8 gradient-histogram descriptors with Lowe's ratio
//! test for matching. The toolkit validates behavior (self-match stability,
//! translation recovery), not descriptor bytes.

use crate::error::{DereflectError, Result};
use crate::img::ImageTensor;
use ndarray::Array2;

/// Detector/matcher tuning knobs.
#[derive(Debug, Clone, Copy)]
pub struct FeatureParams {
    /// Lowe ratio: best/second-best descriptor distance must fall below this.
    pub ratio_threshold: f32,
    /// Minimum |DoG| response for a candidate extremum.
    pub contrast_threshold: f32,
    /// Hessian edge-rejection ratio (principal curvature ratio bound).
    pub edge_ratio: f32,
    /// Scales sampled per octave.
    pub scales_per_octave: usize,
    /// Base blur applied at the bottom of each octave.
    pub sigma0: f32,
    /// Upper bound on pyramid octaves.
    pub max_octaves: usize,
    /// Start from a 2× upsampled base octave to catch fine detail.
    pub upsample_base: bool,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            ratio_threshold: 0.75,
            contrast_threshold: 0.01,
            edge_ratio: 10.0,
            scales_per_octave: 3,
            sigma0: 1.6,
            max_octaves: 3,
            upsample_base: true,
        }
    }
}

/// A detected keypoint in original-image coordinates (x = column, y = row).
#[derive(Debug, Clone)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub sigma: f32,
    pub orientation: f32,
}

/// One descriptor match between the two images.
#[derive(Debug, Clone)]
pub struct KeypointMatch {
    /// Location in the mixed image.
    pub src: (f32, f32),
    /// Location in the transmission image.
    pub dst: (f32, f32),
    pub descriptor_distance: f32,
}

const DESC_CELLS: usize = 4;
const DESC_BINS: usize = 8;
const DESC_LEN: usize = DESC_CELLS * DESC_CELLS * DESC_BINS;
const MIN_IMAGE_DIM: usize = 64;
const MIN_MATCHES: usize = 4;

fn reflect(idx: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = idx;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i.clamp(0, n - 1) as usize
}

fn gaussian_blur(img: &Array2<f32>, sigma: f32) -> Array2<f32> {
    if sigma <= 0.05 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for k in -radius..=radius {
        kernel.push((-(k * k) as f32 * inv).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for v in kernel.iter_mut() {
        *v /= sum;
    }

    let (h, w) = img.dim();
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - radius, w);
                acc += kv * img[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - radius, h);
                acc += kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn downsample2(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| img[[2 * y, 2 * x]])
}

fn upsample2_bilinear(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h * 2, w * 2), |(y, x)| {
        let sy = y as f32 / 2.0;
        let sx = x as f32 / 2.0;
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = sy - y0 as f32;
        let fx = sx - x0 as f32;
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

struct Octave {
    gaussians: Vec<Array2<f32>>,
    dogs: Vec<Array2<f32>>,
    /// Multiplier from octave coordinates back to original-image coordinates.
    scale: f32,
}

fn build_pyramid(base: &Array2<f32>, params: &FeatureParams) -> Vec<Octave> {
    let s = params.scales_per_octave;
    let k = 2f32.powf(1.0 / s as f32);
    let (mut current, mut scale, sensor_blur) = if params.upsample_base {
        // Upsampling doubles the apparent blur of the sensor image.
        (upsample2_bilinear(base), 0.5f32, 1.0f32)
    } else {
        (base.clone(), 1.0, 0.5)
    };
    // Lift the base image to sigma0.
    let init = (params.sigma0 * params.sigma0 - sensor_blur * sensor_blur).max(0.0).sqrt();
    current = gaussian_blur(&current, init);
    let mut octaves = Vec::new();
    for _ in 0..params.max_octaves {
        let (h, w) = current.dim();
        if h < 32 || w < 32 {
            break;
        }
        let mut gaussians = vec![current.clone()];
        let mut sigma = params.sigma0;
        for _ in 1..s + 3 {
            let next_sigma = sigma * k;
            let inc = (next_sigma * next_sigma - sigma * sigma).sqrt();
            gaussians.push(gaussian_blur(gaussians.last().unwrap(), inc));
            sigma = next_sigma;
        }
        let dogs = gaussians
            .windows(2)
            .map(|pair| &pair[1] - &pair[0])
            .collect();
        // The level with twice the base blur seeds the next octave.
        current = downsample2(&gaussians[s]);
        octaves.push(Octave { gaussians, dogs, scale });
        scale *= 2.0;
    }
    octaves
}

fn is_extremum(dogs: &[Array2<f32>], k: usize, y: usize, x: usize) -> bool {
    let v = dogs[k][[y, x]];
    let mut max = true;
    let mut min = true;
    for dk in 0..3 {
        for dy in 0..3 {
            for dx in 0..3 {
                if dk == 1 && dy == 1 && dx == 1 {
                    continue;
                }
                let n = dogs[k + dk - 1][[y + dy - 1, x + dx - 1]];
                if v <= n {
                    max = false;
                }
                if v >= n {
                    min = false;
                }
                if !max && !min {
                    return false;
                }
            }
        }
    }
    max || min
}

fn edge_like(dog: &Array2<f32>, y: usize, x: usize, edge_ratio: f32) -> bool {
    let dxx = dog[[y, x + 1]] + dog[[y, x - 1]] - 2.0 * dog[[y, x]];
    let dyy = dog[[y + 1, x]] + dog[[y - 1, x]] - 2.0 * dog[[y, x]];
    let dxy = (dog[[y + 1, x + 1]] - dog[[y + 1, x - 1]] - dog[[y - 1, x + 1]]
        + dog[[y - 1, x - 1]])
        / 4.0;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    if det <= 0.0 {
        return true;
    }
    let r = edge_ratio;
    tr * tr / det >= (r + 1.0) * (r + 1.0) / r
}

fn quadratic_offset(prev: f32, center: f32, next: f32) -> f32 {
    let denom = prev + next - 2.0 * center;
    if denom.abs() < 1e-12 {
        0.0
    } else {
        (-0.5 * (next - prev) / denom).clamp(-0.5, 0.5)
    }
}

fn gradient(img: &Array2<f32>, y: usize, x: usize) -> (f32, f32) {
    let (h, w) = img.dim();
    let gx = (img[[y, (x + 1).min(w - 1)]] - img[[y, x.saturating_sub(1)]]) / 2.0;
    let gy = (img[[(y + 1).min(h - 1), x]] - img[[y.saturating_sub(1), x]]) / 2.0;
    (gx, gy)
}

fn dominant_orientation(img: &Array2<f32>, y: f32, x: f32, sigma_rel: f32) -> f32 {
    const BINS: usize = 36;
    let (h, w) = img.dim();
    let radius = (4.5 * sigma_rel).round().max(3.0) as isize;
    let weight_sigma = 1.5 * sigma_rel;
    let mut hist = [0.0f32; BINS];
    let cy = y.round() as isize;
    let cx = x.round() as isize;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let py = cy + dy;
            let px = cx + dx;
            if py < 1 || px < 1 || py >= h as isize - 1 || px >= w as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, py as usize, px as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let angle = gy.atan2(gx).rem_euclid(std::f32::consts::TAU);
            let wgt = (-((dy * dy + dx * dx) as f32)
                / (2.0 * weight_sigma * weight_sigma))
                .exp();
            let bin = ((angle / std::f32::consts::TAU * BINS as f32) as usize) % BINS;
            hist[bin] += mag * wgt;
        }
    }
    // Two smoothing passes, then a parabola around the peak bin.
    for _ in 0..2 {
        let copy = hist;
        for b in 0..BINS {
            hist[b] = (copy[(b + BINS - 1) % BINS] + 2.0 * copy[b] + copy[(b + 1) % BINS]) / 4.0;
        }
    }
    let peak = hist
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let prev = hist[(peak + BINS - 1) % BINS];
    let next = hist[(peak + 1) % BINS];
    let offset = quadratic_offset(prev, hist[peak], next);
    (peak as f32 + offset + 0.5) / BINS as f32 * std::f32::consts::TAU
}

fn describe(
    img: &Array2<f32>,
    y: f32,
    x: f32,
    sigma_rel: f32,
    orientation: f32,
) -> Option<[f32; DESC_LEN]> {
    let (h, w) = img.dim();
    let cell = 3.0 * sigma_rel;
    let half = cell * (DESC_CELLS as f32 + 1.0) * std::f32::consts::SQRT_2 / 2.0;
    let radius = half.ceil() as isize;
    let cy = y.round() as isize;
    let cx = x.round() as isize;
    if cy - radius < 1 || cx - radius < 1 || cy + radius >= h as isize - 1 || cx + radius >= w as isize - 1
    {
        return None;
    }
    let (sin_o, cos_o) = orientation.sin_cos();
    let mut hist = [0.0f32; DESC_LEN];
    let d = DESC_CELLS as f32;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let fdx = dx as f32;
            let fdy = dy as f32;
            // Rotate into the keypoint frame, in cell units.
            let rx = (cos_o * fdx + sin_o * fdy) / cell + d / 2.0 - 0.5;
            let ry = (-sin_o * fdx + cos_o * fdy) / cell + d / 2.0 - 0.5;
            if rx <= -1.0 || ry <= -1.0 || rx >= d || ry >= d {
                continue;
            }
            let py = (cy + dy) as usize;
            let px = (cx + dx) as usize;
            let (gx, gy) = gradient(img, py, px);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle =
                (gy.atan2(gx) - orientation).rem_euclid(std::f32::consts::TAU);
            let fbin = angle / std::f32::consts::TAU * DESC_BINS as f32;
            let wgt = mag
                * (-((rx - (d - 1.0) / 2.0).powi(2) + (ry - (d - 1.0) / 2.0).powi(2))
                    / (2.0 * (0.5 * d).powi(2)))
                .exp();

            let x0 = rx.floor();
            let y0 = ry.floor();
            let b0 = fbin.floor();
            let fx = rx - x0;
            let fy = ry - y0;
            let fb = fbin - b0;
            for (iy, wy) in [(y0 as isize, 1.0 - fy), (y0 as isize + 1, fy)] {
                if iy < 0 || iy >= DESC_CELLS as isize {
                    continue;
                }
                for (ix, wx) in [(x0 as isize, 1.0 - fx), (x0 as isize + 1, fx)] {
                    if ix < 0 || ix >= DESC_CELLS as isize {
                        continue;
                    }
                    for (ib, wb) in [(b0 as usize % DESC_BINS, 1.0 - fb), ((b0 as usize + 1) % DESC_BINS, fb)]
                    {
                        hist[(iy as usize * DESC_CELLS + ix as usize) * DESC_BINS + ib] +=
                            wgt * wy * wx * wb;
                    }
                }
            }
        }
    }
    // Normalize, clamp, renormalize (illumination robustness).
    let norm = hist.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    for v in hist.iter_mut() {
        *v = (*v / norm).min(0.2);
    }
    let norm = hist.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
    for v in hist.iter_mut() {
        *v /= norm;
    }
    Some(hist)
}

/// Detects keypoints and computes their descriptors.
pub fn detect_and_describe(
    img: &ImageTensor,
    params: &FeatureParams,
) -> Result<(Vec<Keypoint>, Vec<[f32; DESC_LEN]>)> {
    let (h, w) = img.shape();
    if h < MIN_IMAGE_DIM || w < MIN_IMAGE_DIM {
        return Err(DereflectError::Validation(format!(
            "feature detection needs at least {MIN_IMAGE_DIM}x{MIN_IMAGE_DIM}, got {h}x{w}"
        )));
    }
    let luma = img.luma();
    let octaves = build_pyramid(&luma, params);
    let s = params.scales_per_octave;
    let k = 2f32.powf(1.0 / s as f32);

    let mut keypoints = Vec::new();
    let mut descriptors = Vec::new();
    for oct in octaves.iter() {
        let scale = oct.scale;
        let (oh, ow) = oct.dogs[0].dim();
        for level in 1..=s {
            let sigma_rel = params.sigma0 * k.powi(level as i32);
            for y in 1..oh - 1 {
                for x in 1..ow - 1 {
                    let v = oct.dogs[level][[y, x]];
                    if v.abs() < params.contrast_threshold {
                        continue;
                    }
                    if !is_extremum(&oct.dogs, level, y, x) {
                        continue;
                    }
                    if edge_like(&oct.dogs[level], y, x, params.edge_ratio) {
                        continue;
                    }
                    let dog = &oct.dogs[level];
                    let off_x = quadratic_offset(dog[[y, x - 1]], v, dog[[y, x + 1]]);
                    let off_y = quadratic_offset(dog[[y - 1, x]], v, dog[[y + 1, x]]);
                    let fx = x as f32 + off_x;
                    let fy = y as f32 + off_y;
                    let gimg = &oct.gaussians[level];
                    let orientation = dominant_orientation(gimg, fy, fx, sigma_rel);
                    if let Some(desc) = describe(gimg, fy, fx, sigma_rel, orientation) {
                        keypoints.push(Keypoint {
                            x: fx * scale,
                            y: fy * scale,
                            sigma: sigma_rel * scale,
                            orientation,
                        });
                        descriptors.push(desc);
                    }
                }
            }
        }
    }
    Ok((keypoints, descriptors))
}

/// Detects features in both images and returns ratio-test matches sorted by
/// ascending descriptor distance. Errors if fewer than 4 matches survive.
pub fn detect_and_match(
    mixed: &ImageTensor,
    transmission: &ImageTensor,
) -> Result<Vec<KeypointMatch>> {
    detect_and_match_with(mixed, transmission, &FeatureParams::default())
}

/// [`detect_and_match`] with explicit parameters.
pub fn detect_and_match_with(
    mixed: &ImageTensor,
    transmission: &ImageTensor,
    params: &FeatureParams,
) -> Result<Vec<KeypointMatch>> {
    let (src_kps, src_desc) = detect_and_describe(mixed, params)?;
    let (dst_kps, dst_desc) = detect_and_describe(transmission, params)?;
    if dst_desc.len() < 2 {
        return Err(DereflectError::InsufficientFeatures {
            found: dst_desc.len(),
            needed: MIN_MATCHES,
        });
    }

    let ratio2 = params.ratio_threshold * params.ratio_threshold;
    let mut matches = Vec::new();
    for (si, sd) in src_desc.iter().enumerate() {
        let mut best = f32::MAX;
        let mut second = f32::MAX;
        let mut best_j = 0usize;
        for (j, dd) in dst_desc.iter().enumerate() {
            let mut dist = 0.0f32;
            for (a, b) in sd.iter().zip(dd.iter()) {
                let d = a - b;
                dist += d * d;
            }
            if dist < best {
                second = best;
                best = dist;
                best_j = j;
            } else if dist < second {
                second = dist;
            }
        }
        if best < ratio2 * second {
            let s = &src_kps[si];
            let d = &dst_kps[best_j];
            matches.push(KeypointMatch {
                src: (s.x, s.y),
                dst: (d.x, d.y),
                descriptor_distance: best.sqrt(),
            });
        }
    }
    matches.sort_by(|a, b| {
        a.descriptor_distance
            .partial_cmp(&b.descriptor_distance)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if matches.len() < MIN_MATCHES {
        return Err(DereflectError::InsufficientFeatures {
            found: matches.len(),
            needed: MIN_MATCHES,
        });
    }
    Ok(matches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::textures;
    use crate::rng;
    use ndarray::Array3;

    fn median(mut xs: Vec<f32>) -> f32 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[xs.len() / 2]
    }

    #[test]
    fn self_match_is_near_exact() {
        let img = textures::transmission_texture(128, 128, &mut rng::stream(1, "feat"));
        let matches = detect_and_match(&img, &img).unwrap();
        assert!(matches.len() >= 4, "got {} matches", matches.len());
        for m in &matches {
            assert!((m.src.0 - m.dst.0).abs() < 0.5);
            assert!((m.src.1 - m.dst.1).abs() < 0.5);
        }
    }

    #[test]
    fn translation_is_recovered() {
        let img = textures::transmission_texture(128, 128, &mut rng::stream(2, "feat"));
        let (h, w) = img.shape();
        // Content moved 3 px to the right.
        let shifted = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            if x >= 3 {
                img.data()[[y, x - 3, c]]
            } else {
                img.data()[[y, 0, c]]
            }
        });
        let shifted = ImageTensor::new(shifted).unwrap();
        let matches = detect_and_match(&shifted, &img).unwrap();
        assert!(matches.len() >= 4);
        let dx = median(matches.iter().map(|m| m.src.0 - m.dst.0).collect());
        let dy = median(matches.iter().map(|m| m.src.1 - m.dst.1).collect());
        assert!((dx - 3.0).abs() < 0.5, "dx {dx}");
        assert!(dy.abs() < 0.5, "dy {dy}");
    }

    #[test]
    fn unrelated_noise_is_a_negative_control() {
        use rand::Rng as _;
        let img = textures::transmission_texture(128, 128, &mut rng::stream(3, "feat"));
        let mut stream = rng::stream(4, "noise");
        let noise = ImageTensor::new(Array3::from_shape_fn((128, 128, 3), |_| {
            stream.gen_range(0.0..1.0)
        }))
        .unwrap();
        match detect_and_match(&noise, &img) {
            Err(DereflectError::InsufficientFeatures { .. }) => {}
            Ok(matches) => {
                // Allow a handful of chance matches; they must stay scarce
                // enough that downstream RANSAC cannot form a consensus.
                assert!(matches.len() < 24, "{} spurious matches", matches.len());
            }
            Err(e) => panic!("unexpected error: {e}"),
        }
    }

    #[test]
    fn small_images_are_rejected() {
        let img = ImageTensor::zeros(32, 32).unwrap();
        assert!(detect_and_match(&img, &img).is_err());
    }
}

