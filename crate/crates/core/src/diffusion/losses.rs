//! Training objectives and their analytic gradients.
//!
//! All reductions run in f64 accumulation with a fixed row-major sequential
//! order, making every loss deterministic and bitwise symmetric where the
//! math says it should be.

use super::perceptual::PerceptualDistance;
use super::LatentTensor;
use crate::error::{DereflectError, Result};
use crate::img::{check_same_shape, ImageTensor};
use crate::metrics::{ssim_core, SsimParams};
use ndarray::Array3;

fn check_latent_shapes(a: &LatentTensor, b: &LatentTensor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(DereflectError::DimensionMismatch(format!(
            "latent shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Shared MSE kernel: `‖a − b‖² / n` with sequential f64 accumulation.
pub fn mse(a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
    check_latent_shapes(a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Gradient of [`mse`] with respect to `a`: `2(a − b)/n`.
pub fn mse_grad(a: &LatentTensor, b: &LatentTensor) -> Result<LatentTensor> {
    check_latent_shapes(a, b)?;
    let n = a.len() as f64;
    let mut out = a.clone();
    out.zip_mut_with(b, |av, &bv| {
        *av = (2.0 * (*av as f64 - bv as f64) / n) as f32;
    });
    Ok(out)
}

/// Reference multi-step objective: MSE between predicted and true noise.
/// Exists to validate the shared MSE kernel; training uses the one-step form.
pub fn loss_multistep_reference(pred_eps: &LatentTensor, eps: &LatentTensor) -> Result<f64> {
    mse(pred_eps, eps)
}

/// One-step objective: MSE between the predicted and target noised latents.
pub fn loss_one_step(pred_zt: &LatentTensor, target_zt: &LatentTensor) -> Result<f64> {
    mse(pred_zt, target_zt)
}

/// Consistency objective between two shared-weight predictions; symmetric in
/// its arguments bitwise under the fixed reduction order.
pub fn loss_consistency(pred_1: &LatentTensor, pred_2: &LatentTensor) -> Result<f64> {
    mse(pred_1, pred_2)
}

/// Per-stage loss breakdown; `total` is the sum of the present components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_diff_1: f64,
    pub l_diff_2: Option<f64>,
    pub l_con: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn single(l_diff: f64) -> Self {
        Self {
            l_diff_1: l_diff,
            l_diff_2: None,
            l_con: None,
            total: l_diff,
        }
    }
}

/// Stage-2 objective: `L_diff(M1) + L_diff(M2) + L_con(M1, M2)`, equal weights.
pub fn loss_stage2(
    pred_1: &LatentTensor,
    target_1: &LatentTensor,
    pred_2: &LatentTensor,
    target_2: &LatentTensor,
) -> Result<LossReport> {
    let l_diff_1 = loss_one_step(pred_1, target_1)?;
    let l_diff_2 = loss_one_step(pred_2, target_2)?;
    let l_con = loss_consistency(pred_1, pred_2)?;
    Ok(LossReport {
        l_diff_1,
        l_diff_2: Some(l_diff_2),
        l_con: Some(l_con),
        total: l_diff_1 + l_diff_2 + l_con,
    })
}

/// Gradients of the stage-2 total with respect to both predictions.
pub fn loss_stage2_grads(
    pred_1: &LatentTensor,
    target_1: &LatentTensor,
    pred_2: &LatentTensor,
    target_2: &LatentTensor,
) -> Result<(LatentTensor, LatentTensor)> {
    check_latent_shapes(pred_1, pred_2)?;
    let mut g1 = mse_grad(pred_1, target_1)?;
    let mut g2 = mse_grad(pred_2, target_2)?;
    let con = mse_grad(pred_1, pred_2)?;
    g1.zip_mut_with(&con, |g, &c| *g += c);
    g2.zip_mut_with(&con, |g, &c| *g -= c);
    Ok((g1, g2))
}

/// Reconstruction loss breakdown: `L1 + λ·(L_SSIM + L_perceptual)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionReport {
    pub l1: f64,
    pub l_ssim: f64,
    pub l_perceptual: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Image reconstruction objective for the cross-latent decoder stage.
pub fn loss_reconstruction(
    pred_img: &ImageTensor,
    gt_img: &ImageTensor,
    lambda: f64,
    perceptual: &dyn PerceptualDistance,
) -> Result<ReconstructionReport> {
    let (report, _) = reconstruction_core(pred_img, gt_img, lambda, perceptual, false)?;
    Ok(report)
}

/// [`loss_reconstruction`] plus the gradient with respect to the prediction
/// (image-shaped, channel-last).
pub fn loss_reconstruction_with_grad(
    pred_img: &ImageTensor,
    gt_img: &ImageTensor,
    lambda: f64,
    perceptual: &dyn PerceptualDistance,
) -> Result<(ReconstructionReport, Array3<f32>)> {
    let (report, grad) = reconstruction_core(pred_img, gt_img, lambda, perceptual, true)?;
    Ok((report, grad.expect("gradient requested")))
}

fn reconstruction_core(
    pred_img: &ImageTensor,
    gt_img: &ImageTensor,
    lambda: f64,
    perceptual: &dyn PerceptualDistance,
    want_grad: bool,
) -> Result<(ReconstructionReport, Option<Array3<f32>>)> {
    check_same_shape(pred_img, gt_img)?;
    if lambda < 0.0 {
        return Err(DereflectError::Validation(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let n = pred_img.data().len() as f64;
    let mut l1 = 0.0f64;
    for (&p, &g) in pred_img.data().iter().zip(gt_img.data().iter()) {
        l1 += (p as f64 - g as f64).abs();
    }
    l1 /= n;

    let (ssim_mean, ssim_grad) = ssim_core(pred_img, gt_img, SsimParams::default(), want_grad)?;
    let l_ssim = 1.0 - ssim_mean;

    let (l_perc, perc_grad) = if want_grad {
        let (d, g) = perceptual.distance_with_grad(pred_img, gt_img)?;
        (d, Some(g))
    } else {
        (perceptual.distance(pred_img, gt_img)?, None)
    };

    let total = l1 + lambda * (l_ssim + l_perc);
    let report = ReconstructionReport {
        l1,
        l_ssim,
        l_perceptual: l_perc,
        lambda,
        total,
    };
    if !want_grad {
        return Ok((report, None));
    }

    let ssim_grad = ssim_grad.expect("requested");
    let perc_grad = perc_grad.expect("requested");
    let (h, w) = pred_img.shape();
    let pred = pred_img.data();
    let gt = gt_img.data();
    let mut grad = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let d = pred[[y, x, c]] as f64 - gt[[y, x, c]] as f64;
                let g_l1 = d.signum() / n;
                let g_ssim = -(ssim_grad[[y, x, c]] as f64);
                let g_perc = perc_grad[[y, x, c]] as f64;
                grad[[y, x, c]] = (g_l1 + lambda * (g_ssim + g_perc)) as f32;
            }
        }
    }
    Ok((report, Some(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::textures;
    use crate::diffusion::{perceptual::ConvPyramidDistance, sample_noise};
    use crate::rng;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mse_matches_two_loop_oracle() {
        let a = sample_noise((3, 6, 5), &mut rng::stream(1, "a"));
        let b = sample_noise((3, 6, 5), &mut rng::stream(2, "b"));
        let fast = mse(&a, &b).unwrap();
        // Independent summation: loop over channels, then flat pixels.
        let mut acc = 0.0f64;
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..5 {
                    let d = a[[c, y, x]] as f64 - b[[c, y, x]] as f64;
                    acc += d * d;
                }
            }
        }
        let slow = acc / 90.0;
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn mse_endpoints() {
        let a = sample_noise((2, 4, 4), &mut rng::stream(3, "a"));
        assert_eq!(loss_multistep_reference(&a, &a).unwrap(), 0.0);
        // f32 storage of (v + 1) rounds per element, so allow float noise.
        let b = a.mapv(|v| v + 1.0);
        assert_abs_diff_eq!(loss_one_step(&b, &a).unwrap(), 1.0, epsilon = 1e-7);
    }

    #[test]
    fn consistency_is_bitwise_symmetric() {
        let a = sample_noise((4, 8, 8), &mut rng::stream(4, "a"));
        let b = sample_noise((4, 8, 8), &mut rng::stream(5, "b"));
        let ab = loss_consistency(&a, &b).unwrap();
        let ba = loss_consistency(&b, &a).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
        assert_eq!(loss_consistency(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn stage2_decomposes() {
        let t1 = sample_noise((2, 4, 4), &mut rng::stream(6, "t"));
        let t2 = sample_noise((2, 4, 4), &mut rng::stream(7, "t"));
        // Perfect diff components, differing predictions.
        let rep = loss_stage2(&t1, &t1, &t2, &t2).unwrap();
        assert_eq!(rep.l_diff_1, 0.0);
        assert_eq!(rep.l_diff_2, Some(0.0));
        assert_eq!(rep.total, rep.l_con.unwrap());

        let p1 = sample_noise((2, 4, 4), &mut rng::stream(8, "p"));
        let p2 = sample_noise((2, 4, 4), &mut rng::stream(9, "p"));
        let rep = loss_stage2(&p1, &t1, &p2, &t2).unwrap();
        let expect = mse(&p1, &t1).unwrap() + mse(&p2, &t2).unwrap() + mse(&p1, &p2).unwrap();
        assert_abs_diff_eq!(rep.total, expect, epsilon = 1e-12);
    }

    #[test]
    fn stage2_gradients_match_finite_differences() {
        let t1 = sample_noise((2, 4, 4), &mut rng::stream(10, "t"));
        let t2 = sample_noise((2, 4, 4), &mut rng::stream(11, "t"));
        let p1 = sample_noise((2, 4, 4), &mut rng::stream(12, "p"));
        let p2 = sample_noise((2, 4, 4), &mut rng::stream(13, "p"));
        let (g1, g2) = loss_stage2_grads(&p1, &t1, &p2, &t2).unwrap();
        let h = 1e-3f32;
        for k in 0..16 {
            let (c, y, x) = (k % 2, (k / 2) % 4, k % 4);
            let mut plus = p1.clone();
            plus[[c, y, x]] += h;
            let mut minus = p1.clone();
            minus[[c, y, x]] -= h;
            let fp = loss_stage2(&plus, &t1, &p2, &t2).unwrap().total;
            let fm = loss_stage2(&minus, &t1, &p2, &t2).unwrap().total;
            let fd = (fp - fm) / (2.0 * h as f64);
            let an = g1[[c, y, x]] as f64;
            assert!(
                ((fd - an) / fd.abs().max(an.abs()).max(1e-8)).abs() < 1e-3,
                "p1 grad at {k}: fd {fd} vs {an}"
            );
            let mut plus = p2.clone();
            plus[[c, y, x]] += h;
            let fp = loss_stage2(&p1, &t1, &plus, &t2).unwrap().total;
            let fd = (fp
                - loss_stage2(&p1, &t1, &p2, &t2).unwrap().total)
                / h as f64;
            let an = g2[[c, y, x]] as f64;
            assert!((fd - an).abs() / fd.abs().max(1e-6) < 5e-2);
        }
    }

    #[test]
    fn reconstruction_endpoints() {
        let img = textures::transmission_texture(16, 16, &mut rng::stream(14, "img"));
        let perc = ConvPyramidDistance::default_seeded();
        let rep = loss_reconstruction(&img, &img, 0.2, &perc).unwrap();
        assert_eq!(rep.l1, 0.0);
        assert_eq!(rep.l_ssim, 0.0);
        assert_eq!(rep.l_perceptual, 0.0);
        assert_eq!(rep.total, 0.0);
    }

    #[test]
    fn reconstruction_l1_constant_shift() {
        let gt = crate::img::ImageTensor::splat(16, 16, 0.3).unwrap();
        let pred = crate::img::ImageTensor::splat(16, 16, 0.4).unwrap();
        let perc = ConvPyramidDistance::default_seeded();
        // Lambda 0 collapses the loss to pure L1.
        let rep = loss_reconstruction(&pred, &gt, 0.0, &perc).unwrap();
        assert_abs_diff_eq!(rep.l1, 0.1, epsilon = 1e-6);
        assert_abs_diff_eq!(rep.total, rep.l1, epsilon = 1e-12);
    }

    #[test]
    fn reconstruction_rejects_negative_lambda() {
        let img = textures::transmission_texture(16, 16, &mut rng::stream(15, "img"));
        let perc = ConvPyramidDistance::default_seeded();
        assert!(loss_reconstruction(&img, &img, -0.1, &perc).is_err());
    }
}
