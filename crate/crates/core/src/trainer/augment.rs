//! Paired augmentation: one transform drawn per scene, applied identically
//! to the transmission and every mixed image.

use crate::error::{DereflectError, Result};
use crate::img::{ImageTensor, LUMA_WEIGHTS};
use crate::rng::Rng;
use ndarray::Array3;
use rand::Rng as _;

/// Augmentation ranges; `identity` disables everything.
#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    pub crop: usize,
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue_radians: f32,
}

impl AugmentParams {
    pub fn toy(crop: usize) -> Self {
        Self {
            crop,
            flip: true,
            brightness: 0.08,
            contrast: 0.1,
            saturation: 0.1,
            hue_radians: 0.08,
        }
    }

    pub fn identity(crop: usize) -> Self {
        Self {
            crop,
            flip: false,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue_radians: 0.0,
        }
    }
}

/// One ground-truth transmission with its mixed variants, ready to train on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub scene_id: String,
    pub transmission: ImageTensor,
    pub mixed: Vec<ImageTensor>,
}

/// The transform drawn for one scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawnTransform {
    pub crop_y: usize,
    pub crop_x: usize,
    pub flip: bool,
    brightness: f32,
    contrast: f32,
    saturation: f32,
    hue: f32,
}

/// Draws one transform for the given source size.
pub fn draw_transform(
    src: (usize, usize),
    params: &AugmentParams,
    rng: &mut Rng,
) -> Result<DrawnTransform> {
    let (h, w) = src;
    let c = params.crop;
    if c > h || c > w {
        return Err(DereflectError::Validation(format!(
            "crop {c} larger than image {h}x{w}"
        )));
    }
    let crop_y = if h == c { 0 } else { rng.gen_range(0..=h - c) };
    let crop_x = if w == c { 0 } else { rng.gen_range(0..=w - c) };
    let flip = params.flip && rng.gen_bool(0.5);
    let sym = |rng: &mut Rng, r: f32| if r == 0.0 { 0.0 } else { rng.gen_range(-r..=r) };
    Ok(DrawnTransform {
        crop_y,
        crop_x,
        flip,
        brightness: sym(rng, params.brightness),
        contrast: 1.0 + sym(rng, params.contrast),
        saturation: 1.0 + sym(rng, params.saturation),
        hue: sym(rng, params.hue_radians),
    })
}

fn apply_one(img: &ImageTensor, t: &DrawnTransform, crop: usize) -> Result<ImageTensor> {
    let data = img.data();
    let (sin_h, cos_h) = t.hue.sin_cos();
    let mut out = Array3::zeros((crop, crop, 3));
    for y in 0..crop {
        for x in 0..crop {
            let sx = if t.flip {
                t.crop_x + (crop - 1 - x)
            } else {
                t.crop_x + x
            };
            let sy = t.crop_y + y;
            let (mut r, mut g, mut b) = (
                data[[sy, sx, 0]],
                data[[sy, sx, 1]],
                data[[sy, sx, 2]],
            );
            // Hue rotation in YIQ space.
            if t.hue != 0.0 {
                let yl = 0.299 * r + 0.587 * g + 0.114 * b;
                let i = 0.596 * r - 0.274 * g - 0.322 * b;
                let q = 0.211 * r - 0.523 * g + 0.312 * b;
                let i2 = cos_h * i - sin_h * q;
                let q2 = sin_h * i + cos_h * q;
                r = yl + 0.956 * i2 + 0.621 * q2;
                g = yl - 0.272 * i2 - 0.647 * q2;
                b = yl - 1.106 * i2 + 1.703 * q2;
            }
            // Saturation around luma, contrast around mid-gray, brightness.
            // Neutral values skip their op so identity stays bitwise exact.
            let luma = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b;
            for v in [&mut r, &mut g, &mut b] {
                if t.saturation != 1.0 {
                    *v = luma + t.saturation * (*v - luma);
                }
                if t.contrast != 1.0 {
                    *v = 0.5 + t.contrast * (*v - 0.5);
                }
                if t.brightness != 0.0 {
                    *v += t.brightness;
                }
            }
            out[[y, x, 0]] = r;
            out[[y, x, 1]] = g;
            out[[y, x, 2]] = b;
        }
    }
    ImageTensor::from_clamped(out)
}

/// Applies one shared transform to the transmission and all mixed images.
pub fn augment_pair(
    pair: &TrainPair,
    params: &AugmentParams,
    rng: &mut Rng,
) -> Result<(TrainPair, DrawnTransform)> {
    let t = draw_transform(pair.transmission.shape(), params, rng)?;
    let transmission = apply_one(&pair.transmission, &t, params.crop)?;
    let mixed = pair
        .mixed
        .iter()
        .map(|m| apply_one(m, &t, params.crop))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        TrainPair {
            scene_id: pair.scene_id.clone(),
            transmission,
            mixed,
        },
        t,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::textures;
    use crate::rng;

    fn pair(seed: u64, size: usize) -> TrainPair {
        let mut stream = rng::stream(seed, "aug");
        TrainPair {
            scene_id: "s".into(),
            transmission: textures::transmission_texture(size, size, &mut stream),
            mixed: vec![
                textures::transmission_texture(size, size, &mut stream),
                textures::transmission_texture(size, size, &mut stream),
            ],
        }
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let p = pair(1, 32);
        let (out, t) =
            augment_pair(&p, &AugmentParams::identity(32), &mut rng::stream(2, "r")).unwrap();
        assert_eq!(out, p);
        assert_eq!((t.crop_y, t.crop_x, t.flip), (0, 0, false));
    }

    #[test]
    fn shared_transform_pairs_transmission_and_mixed() {
        let p = pair(3, 48);
        let params = AugmentParams::toy(32);
        let (_, t1) = augment_pair(&p, &params, &mut rng::stream(4, "r")).unwrap();
        let (_, t2) = augment_pair(&p, &params, &mut rng::stream(4, "r")).unwrap();
        // Same stream seed, same drawn transform; the pairing contract is
        // that one draw covers the whole group.
        assert_eq!(t1, t2);
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let p = pair(5, 16);
        assert!(augment_pair(&p, &AugmentParams::toy(32), &mut rng::stream(6, "r")).is_err());
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // Chi-square sanity over the 17 valid offsets of an 80->64 crop.
        let params = AugmentParams::toy(64);
        let mut stream = rng::stream(7, "offsets");
        let mut counts = [0usize; 17];
        let n = 1000;
        for _ in 0..n {
            let t = draw_transform((80, 80), &params, &mut stream).unwrap();
            counts[t.crop_y] += 1;
        }
        let expected = n as f64 / 17.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 16 degrees of freedom; 99.9th percentile is about 39.3.
        assert!(chi2 < 39.3, "chi2 {chi2}");
    }
}
