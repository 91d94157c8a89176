//! Noise schedule, forward noising, and the training objectives.

pub mod losses;
pub mod perceptual;
pub mod schedule;

use crate::error::{DereflectError, Result};
use crate::rng::Rng;
use ndarray::Array3;
use rand::Rng as _;

pub use losses::{
    loss_consistency, loss_multistep_reference, loss_one_step, loss_reconstruction,
    loss_stage2, LossReport, ReconstructionReport,
};
pub use perceptual::{ConvPyramidDistance, PerceptualDistance};
pub use schedule::NoiseSchedule;

/// Channel-first (C, H, W) latent grid.
///
/// Values must stay finite; shapes are fixed by the codec factor.
pub type LatentTensor = Array3<f32>;

/// Forward noising: `z_t = √ᾱ_t·z + √(1−ᾱ_t)·ε`.
///
/// `t = 0` returns `z` unchanged (`ᾱ_0 = 1`).
pub fn add_noise(
    z: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    if t > sched.t_max() {
        return Err(DereflectError::Validation(format!(
            "step {t} out of range 0..={}",
            sched.t_max()
        )));
    }
    if z.dim() != eps.dim() {
        return Err(DereflectError::DimensionMismatch(format!(
            "latent {:?} vs noise {:?}",
            z.dim(),
            eps.dim()
        )));
    }
    if t == 0 {
        return Ok(z.clone());
    }
    let ab = sched.alpha_bar(t);
    let signal = ab.sqrt() as f32;
    let noise = (1.0 - ab).sqrt() as f32;
    let mut out = z.clone();
    out.zip_mut_with(eps, |zv, &ev| *zv = signal * *zv + noise * ev);
    Ok(out)
}

/// Standard-normal latent noise from a named stream.
pub fn sample_noise(shape: (usize, usize, usize), rng: &mut Rng) -> LatentTensor {
    let mut out = Array3::zeros(shape);
    for v in out.iter_mut() {
        *v = rng.sample::<f32, _>(rand_distr::StandardNormal);
    }
    out
}

/// Uniform training step draw over `[0, t_max]`.
pub fn sample_t(sched: &NoiseSchedule, rng: &mut Rng) -> usize {
    rng.gen_range(0..=sched.t_max())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn unit_latent(seed: u64) -> LatentTensor {
        let mut stream = rng::stream(seed, "latent");
        let mut z = sample_noise((4, 8, 8), &mut stream);
        let norm = z.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
        z.mapv_inplace(|v| v / norm);
        z
    }

    #[test]
    fn t_zero_is_identity_bitwise() {
        let sched = NoiseSchedule::toy().unwrap();
        let z = unit_latent(1);
        let eps = sample_noise((4, 8, 8), &mut rng::stream(2, "eps"));
        let out = add_noise(&z, 0, &eps, &sched).unwrap();
        for (a, b) in out.iter().zip(z.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn terminal_step_is_mostly_noise() {
        let sched = NoiseSchedule::toy().unwrap();
        let z = unit_latent(3);
        let mut eps = sample_noise((4, 8, 8), &mut rng::stream(4, "eps"));
        let norm = eps.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
        eps.mapv_inplace(|v| v / norm);
        let out = add_noise(&z, sched.t_max(), &eps, &sched).unwrap();
        let dot: f64 = out
            .iter()
            .zip(eps.iter())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let out_norm = out.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let cos = dot / out_norm;
        assert!(1.0 - cos < 0.1, "cosine distance to eps: {}", 1.0 - cos);
    }

    #[test]
    fn zero_signal_leaves_scaled_noise() {
        let sched = NoiseSchedule::toy().unwrap();
        let z = Array3::zeros((4, 8, 8));
        let eps = sample_noise((4, 8, 8), &mut rng::stream(5, "eps"));
        let t = 17;
        let out = add_noise(&z, t, &eps, &sched).unwrap();
        let scale = (1.0 - sched.alpha_bar(t)).sqrt() as f32;
        for (o, e) in out.iter().zip(eps.iter()) {
            assert_eq!(*o, scale * *e);
        }
    }

    #[test]
    fn add_noise_is_linear() {
        let sched = NoiseSchedule::toy().unwrap();
        let z = unit_latent(6);
        let eps = sample_noise((4, 8, 8), &mut rng::stream(7, "eps"));
        let a = 2.5f32;
        let scaled = add_noise(&(&z * a), 20, &(&eps * a), &sched).unwrap();
        let base = add_noise(&z, 20, &eps, &sched).unwrap();
        for (s, b) in scaled.iter().zip(base.iter()) {
            assert!((s - a * b).abs() < 1e-5);
        }
    }

    #[test]
    fn out_of_range_step_rejected() {
        let sched = NoiseSchedule::toy().unwrap();
        let z = unit_latent(8);
        let eps = sample_noise((4, 8, 8), &mut rng::stream(9, "eps"));
        assert!(add_noise(&z, sched.t_max() + 1, &eps, &sched).is_err());
    }

    #[test]
    fn monte_carlo_second_moment_identity() {
        // E[|z_t|^2] = alpha_bar * |z|^2 + (1 - alpha_bar) * d.
        let sched = NoiseSchedule::toy().unwrap();
        let z = sample_noise((4, 8, 8), &mut rng::stream(10, "z"));
        let z_norm2: f64 = z.iter().map(|v| (*v as f64).powi(2)).sum();
        let d = z.len() as f64;
        let t = 25;
        let ab = sched.alpha_bar(t);
        let expect = ab * z_norm2 + (1.0 - ab) * d;

        let n = 1000;
        let mut stream = rng::stream(11, "mc");
        let mut acc = 0.0f64;
        for _ in 0..n {
            let eps = sample_noise((4, 8, 8), &mut stream);
            let zt = add_noise(&z, t, &eps, &sched).unwrap();
            acc += zt.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
        }
        let mc = acc / n as f64;
        let var = 4.0 * ab * (1.0 - ab) * z_norm2 + (1.0 - ab).powi(2) * 2.0 * d;
        let sigma_mean = (var / n as f64).sqrt();
        assert!(
            (mc - expect).abs() < 3.0 * sigma_mean,
            "MC {mc} vs {expect} (3 sigma {})",
            3.0 * sigma_mean
        );
    }
}
