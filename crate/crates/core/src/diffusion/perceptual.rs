//! Pluggable perceptual distance.
//!
//! The default is a multi-scale feature distance through a small, fixed,
//! randomly-initialized convolutional pyramid (deterministic seed), so CI
//! needs no pretrained weights. Anything implementing [`PerceptualDistance`]
//! can stand in, e.g. a learned perceptual network.

use crate::error::Result;
use crate::img::{check_same_shape, ImageTensor};
use crate::rng;
use ndarray::{Array3, Array4};
use rand::Rng as _;

/// Perceptual distance between two images; zero iff features coincide.
pub trait PerceptualDistance {
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;

    /// Distance plus its gradient with respect to `a` (channel-last).
    fn distance_with_grad(&self, a: &ImageTensor, b: &ImageTensor)
        -> Result<(f64, Array3<f32>)>;
}

struct PyrLevel {
    /// (c_out, c_in, 3, 3)
    weight: Array4<f64>,
    bias: Vec<f64>,
}

/// Fixed random conv pyramid: 3 stride-2 tanh levels, 8 channels each.
pub struct ConvPyramidDistance {
    levels: Vec<PyrLevel>,
}

const PYR_SEED: u64 = 0x00d1_55ab_7e11_ed01;
const PYR_CHANNELS: usize = 8;
const PYR_DEPTH: usize = 3;

impl ConvPyramidDistance {
    /// Builds the pyramid from an explicit seed.
    pub fn new(seed: u64) -> Self {
        let mut stream = rng::stream(seed, "perceptual-pyramid");
        let mut levels = Vec::new();
        let mut c_in = 3;
        for _ in 0..PYR_DEPTH {
            let fan_in = (c_in * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let mut weight = Array4::zeros((PYR_CHANNELS, c_in, 3, 3));
            for v in weight.iter_mut() {
                let n: f64 = stream.sample(rand_distr::StandardNormal);
                *v = n * std;
            }
            levels.push(PyrLevel {
                weight,
                bias: vec![0.0; PYR_CHANNELS],
            });
            c_in = PYR_CHANNELS;
        }
        Self { levels }
    }

    /// The shipped default weights.
    pub fn default_seeded() -> Self {
        Self::new(PYR_SEED)
    }

    fn to_chw64(img: &ImageTensor) -> Array3<f64> {
        let (h, w) = img.shape();
        let data = img.data();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| data[[y, x, c]] as f64)
    }

    fn forward_level(level: &PyrLevel, x: &Array3<f64>) -> Array3<f64> {
        let (ci, h, w) = x.dim();
        let co = level.weight.dim().0;
        let oh = h.div_ceil(2);
        let ow = w.div_ceil(2);
        let mut out = Array3::zeros((co, oh, ow));
        for c in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = level.bias[c];
                    for ic in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += level.weight[[c, ic, ky, kx]]
                                    * x[[ic, iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[c, oy, ox]] = acc.tanh();
                }
            }
        }
        out
    }

    /// Input gradient of a level given the gradient at its pre-activation.
    fn backward_level_input(level: &PyrLevel, gy_pre: &Array3<f64>, in_dim: (usize, usize, usize)) -> Array3<f64> {
        let (ci, h, w) = in_dim;
        let (co, oh, ow) = gy_pre.dim();
        let mut gx = Array3::zeros((ci, h, w));
        for c in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gy_pre[[c, oy, ox]];
                    if g == 0.0 {
                        continue;
                    }
                    for ic in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                gx[[ic, iy as usize, ix as usize]] +=
                                    level.weight[[c, ic, ky, kx]] * g;
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    fn features(&self, img: &ImageTensor) -> Vec<Array3<f64>> {
        let mut feats = Vec::with_capacity(PYR_DEPTH + 1);
        feats.push(Self::to_chw64(img));
        for level in &self.levels {
            let next = Self::forward_level(level, feats.last().unwrap());
            feats.push(next);
        }
        feats
    }

    fn core(
        &self,
        a: &ImageTensor,
        b: &ImageTensor,
        want_grad: bool,
    ) -> Result<(f64, Option<Array3<f32>>)> {
        check_same_shape(a, b)?;
        let fa = self.features(a);
        let fb = self.features(b);

        let mut distance = 0.0f64;
        for (la, lb) in fa.iter().skip(1).zip(fb.iter().skip(1)) {
            let n = la.len() as f64;
            let mut acc = 0.0f64;
            for (&x, &y) in la.iter().zip(lb.iter()) {
                let d = x - y;
                acc += d * d;
            }
            distance += acc / n;
        }
        if !want_grad {
            return Ok((distance, None));
        }

        // Backward pass accumulating per-level direct terms.
        let mut gf: Option<Array3<f64>> = None;
        for li in (0..PYR_DEPTH).rev() {
            let la = &fa[li + 1];
            let lb = &fb[li + 1];
            let n = la.len() as f64;
            let mut g = Array3::from_shape_fn(la.dim(), |idx| 2.0 * (la[idx] - lb[idx]) / n);
            if let Some(upper) = gf.take() {
                g.zip_mut_with(&upper, |gv, &uv| *gv += uv);
            }
            // tanh backward: d/dpre = g * (1 - y^2).
            g.zip_mut_with(la, |gv, &yv| *gv *= 1.0 - yv * yv);
            gf = Some(Self::backward_level_input(
                &self.levels[li],
                &g,
                fa[li].dim(),
            ));
        }
        let gx = gf.expect("at least one level");
        let (_, h, w) = gx.dim();
        let grad = Array3::from_shape_fn((h, w, 3), |(y, x, c)| gx[[c, y, x]] as f32);
        Ok((distance, Some(grad)))
    }
}

impl PerceptualDistance for ConvPyramidDistance {
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        Ok(self.core(a, b, false)?.0)
    }

    fn distance_with_grad(
        &self,
        a: &ImageTensor,
        b: &ImageTensor,
    ) -> Result<(f64, Array3<f32>)> {
        let (d, g) = self.core(a, b, true)?;
        Ok((d, g.expect("gradient requested")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::textures;
    use crate::rng;

    #[test]
    fn identical_images_have_zero_distance() {
        let img = textures::transmission_texture(16, 16, &mut rng::stream(1, "p"));
        let d = ConvPyramidDistance::default_seeded();
        assert_eq!(d.distance(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn distance_is_deterministic_and_symmetric() {
        let a = textures::transmission_texture(16, 16, &mut rng::stream(2, "p"));
        let b = textures::transmission_texture(16, 16, &mut rng::stream(3, "p"));
        let d = ConvPyramidDistance::default_seeded();
        let ab = d.distance(&a, &b).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, ConvPyramidDistance::default_seeded().distance(&a, &b).unwrap());
        assert_eq!(ab, d.distance(&b, &a).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = textures::transmission_texture(16, 16, &mut rng::stream(4, "p"));
        let b = textures::transmission_texture(16, 16, &mut rng::stream(5, "p"));
        let dist = ConvPyramidDistance::default_seeded();
        let (_, grad) = dist.distance_with_grad(&a, &b).unwrap();
        let h = 1e-4f32;
        for k in 0..12 {
            let y = (3 * k) % 16;
            let x = (5 * k) % 16;
            let c = k % 3;
            let mut plus = a.data().clone();
            plus[[y, x, c]] += h;
            let mut minus = a.data().clone();
            minus[[y, x, c]] -= h;
            let dp = dist
                .distance(&ImageTensor::new(plus).unwrap(), &b)
                .unwrap();
            let dm = dist
                .distance(&ImageTensor::new(minus).unwrap(), &b)
                .unwrap();
            let fd = (dp - dm) / (2.0 * h as f64);
            let an = grad[[y, x, c]] as f64;
            let denom = fd.abs().max(an.abs()).max(1e-9);
            assert!(
                ((fd - an) / denom).abs() < 1e-3,
                "at ({y},{x},{c}): fd {fd} vs analytic {an}"
            );
        }
    }
}
