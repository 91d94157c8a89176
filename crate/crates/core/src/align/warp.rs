//! Bilinear warping under inverse homography mapping.

use super::homography::Homography;
use crate::error::Result;
use crate::img::ImageTensor;
use ndarray::{Array2, Array3};

/// A warped image plus its validity mask (false where the inverse map left
/// the source image).
#[derive(Debug, Clone)]
pub struct WarpOutput {
    pub image: ImageTensor,
    pub valid: Array2<bool>,
}

/// Resamples `mixed` into the reference frame of `h` (which maps mixed
/// coordinates to reference coordinates), producing an `out_shape` image.
///
/// Output pixel `(x, y)` samples the source at `h⁻¹·(x, y)` with bilinear
/// interpolation; positions outside the source are zeroed and masked out.
pub fn warp_to_reference(
    mixed: &ImageTensor,
    h: &Homography,
    out_shape: (usize, usize),
) -> Result<WarpOutput> {
    let inv = h.inverse()?;
    let (src_h, src_w) = mixed.shape();
    let (out_h, out_w) = out_shape;
    let src = mixed.data();
    let mut out = Array3::zeros((out_h, out_w, 3));
    let mut valid = Array2::from_elem((out_h, out_w), false);

    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            if sx < 0.0 || sy < 0.0 || sx > (src_w - 1) as f64 || sy > (src_h - 1) as f64 {
                continue;
            }
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let y1 = (y0 + 1).min(src_h - 1);
            let fx = (sx - x0 as f64) as f32;
            let fy = (sy - y0 as f64) as f32;
            for c in 0..3 {
                let top = src[[y0, x0, c]] * (1.0 - fx) + src[[y0, x1, c]] * fx;
                let bottom = src[[y1, x0, c]] * (1.0 - fx) + src[[y1, x1, c]] * fx;
                out[[y, x, c]] = top * (1.0 - fy) + bottom * fy;
            }
            valid[[y, x]] = true;
        }
    }
    Ok(WarpOutput {
        image: ImageTensor::from_clamped(out)?,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::textures;
    use crate::rng;
    use nalgebra::Matrix3;

    #[test]
    fn identity_warp_is_exact() {
        let img = textures::transmission_texture(32, 48, &mut rng::stream(1, "warp"));
        let out = warp_to_reference(&img, &Homography::identity(), img.shape()).unwrap();
        assert_eq!(out.image, img);
        assert!(out.valid.iter().all(|&v| v));
    }

    #[test]
    fn integer_translation_matches_on_overlap() {
        let img = textures::transmission_texture(32, 32, &mut rng::stream(2, "warp"));
        // h maps source x to x+5 in the reference frame.
        let h = Homography::new(Matrix3::new(
            1.0, 0.0, 5.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0,
        ))
        .unwrap();
        let out = warp_to_reference(&img, &h, img.shape()).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if x < 5 {
                    assert!(!out.valid[[y, x]]);
                } else {
                    assert!(out.valid[[y, x]]);
                    for c in 0..3 {
                        let got = out.image.data()[[y, x, c]];
                        let expect = img.data()[[y, x - 5, c]];
                        assert!((got - expect).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn quarter_rotation_matches_analytic_mapping() {
        let img = textures::transmission_texture(33, 33, &mut rng::stream(3, "warp"));
        let c = 16.0;
        // 90° counter-clockwise rotation about the center:
        // (x, y) -> (c + (y - c), c - (x - c)).
        let h = Homography::new(Matrix3::new(
            0.0, 1.0, 0.0, -1.0, 0.0, 2.0 * c, 0.0, 0.0, 1.0,
        ))
        .unwrap();
        let out = warp_to_reference(&img, &h, img.shape()).unwrap();
        for y in 0..33usize {
            for x in 0..33usize {
                // Inverse of the rotation: source = (c - (y - c), c + (x - c)).
                let sx = c - (y as f64 - c);
                let sy = c + (x as f64 - c);
                if !(0.0..=32.0).contains(&sx) || !(0.0..=32.0).contains(&sy) {
                    continue;
                }
                assert!(out.valid[[y, x]]);
                for ch in 0..3 {
                    let got = out.image.data()[[y, x, ch]];
                    let expect = img.data()[[sy as usize, sx as usize, ch]];
                    assert!((got - expect).abs() < 1e-6, "at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn round_trip_recovers_smooth_images() {
        // Warp forward then backward; compare on the doubly-valid region.
        // Smooth image: the bilinear tolerance only holds without hard edges.
        let img = ImageTensor::from_clamped(ndarray::Array3::from_shape_fn(
            (48, 48, 3),
            |(y, x, c)| {
                let fy = y as f32 / 47.0;
                let fx = x as f32 / 47.0;
                0.2 + 0.3 * fy
                    + 0.2 * fx
                    + 0.25 * (-((fy - 0.4).powi(2) + (fx - 0.6).powi(2)) / 0.05).exp()
                    + 0.02 * c as f32
            },
        ))
        .unwrap();
        let h = Homography::new(Matrix3::new(
            0.99, 0.01, 1.5, -0.02, 1.01, -0.75, 1e-5, -1e-5, 1.0,
        ))
        .unwrap();
        let fwd = warp_to_reference(&img, &h.inverse().unwrap(), img.shape()).unwrap();
        let back = warp_to_reference(&fwd.image, &h, img.shape()).unwrap();
        let mut err = 0.0f64;
        let mut count = 0usize;
        for y in 0..48 {
            for x in 0..48 {
                if fwd.valid[[y, x]] && back.valid[[y, x]] {
                    for c in 0..3 {
                        err += (back.image.data()[[y, x, c]] - img.data()[[y, x, c]]).abs()
                            as f64;
                        count += 1;
                    }
                }
            }
        }
        let mae = err / count as f64;
        assert!(mae <= 2.0 / 255.0, "round-trip MAE {mae}");
    }
}
