//! Procedural source textures so the pipeline needs no image downloads.
//!
//! Transmission textures carry sharp structure (glyph strokes, edges) on a
//! smooth base; reflection textures are sparse, smooth highlight fields, the
//! way real glass reflections read at a distance.

use crate::img::ImageTensor;
use crate::rng::Rng;
use ndarray::Array3;
use rand::Rng as _;

/// 5x7 glyph bitmaps, one bit per column in the low 5 bits of each row.
const GLYPHS: [[u8; 7]; 12] = [
    // A
    [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
    // E
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
    // H
    [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
    // K
    [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
    // M
    [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
    // R
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
    // T
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
    // X
    [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
    // 2
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    // 4
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    // 7
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    // 8
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
];

fn linear_gradient(h: usize, w: usize, rng: &mut Rng) -> Array3<f32> {
    let angle = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let c0: [f32; 3] = [rng.gen_range(0.1..0.7), rng.gen_range(0.1..0.7), rng.gen_range(0.1..0.7)];
    let c1: [f32; 3] = [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)];
    let diag = ((h * h + w * w) as f32).sqrt();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let s = ((x as f32 * dx + y as f32 * dy) / diag + 1.0) / 2.0;
        c0[c] * (1.0 - s) + c1[c] * s
    })
}

fn add_gaussian_blobs(
    img: &mut Array3<f32>,
    n: usize,
    sigma_range: (f32, f32),
    amp_range: (f32, f32),
    rng: &mut Rng,
) {
    let (h, w, _) = img.dim();
    for _ in 0..n {
        let cy = rng.gen_range(0.0..h as f32);
        let cx = rng.gen_range(0.0..w as f32);
        let sigma = rng.gen_range(sigma_range.0..sigma_range.1);
        let amp = rng.gen_range(amp_range.0..amp_range.1);
        let color: [f32; 3] = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let g = amp * (-d2 * inv).exp();
                for c in 0..3 {
                    img[[y, x, c]] += g * color[c];
                }
            }
        }
    }
}

fn stamp_glyphs(img: &mut Array3<f32>, n: usize, rng: &mut Rng) {
    let (h, w, _) = img.dim();
    for _ in 0..n {
        let glyph = &GLYPHS[rng.gen_range(0..GLYPHS.len())];
        let scale = rng.gen_range(1..=2usize);
        let gw = 5 * scale;
        let gh = 7 * scale;
        if h <= gh || w <= gw {
            continue;
        }
        let oy = rng.gen_range(0..h - gh);
        let ox = rng.gen_range(0..w - gw);
        let color: [f32; 3] = if rng.gen_bool(0.5) {
            [rng.gen_range(0.0..0.2); 3]
        } else {
            [rng.gen_range(0.8..1.0); 3]
        };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..5 {
                if bits & (1 << (4 - col)) == 0 {
                    continue;
                }
                for sy in 0..scale {
                    for sx in 0..scale {
                        let y = oy + row * scale + sy;
                        let x = ox + col * scale + sx;
                        for c in 0..3 {
                            img[[y, x, c]] = color[c];
                        }
                    }
                }
            }
        }
    }
}

/// A scene-like texture: gradient base, soft blobs, small speckles for
/// keypoint-scale detail, and sharp glyph strokes.
pub fn transmission_texture(h: usize, w: usize, rng: &mut Rng) -> ImageTensor {
    let mut img = linear_gradient(h, w, rng);
    add_gaussian_blobs(
        &mut img,
        rng.gen_range(1..=3),
        (w as f32 / 8.0, w as f32 / 3.0),
        (-0.25, 0.25),
        rng,
    );
    add_gaussian_blobs(&mut img, rng.gen_range(16..=24), (1.0, 2.5), (-0.6, 0.6), rng);
    stamp_glyphs(&mut img, rng.gen_range(2..=5), rng);
    ImageTensor::from_clamped(img).expect("procedural texture is well-formed")
}

/// A reflection-like texture: near-dark field with smooth bright highlights.
pub fn reflection_texture(h: usize, w: usize, rng: &mut Rng) -> ImageTensor {
    let base = rng.gen_range(0.0..0.05);
    let mut img = Array3::from_elem((h, w, 3), base);
    add_gaussian_blobs(
        &mut img,
        rng.gen_range(2..=5),
        (w as f32 / 10.0, w as f32 / 4.0),
        (0.3, 0.9),
        rng,
    );
    // Occasional elongated streak, approximated by a chain of blobs.
    if rng.gen_bool(0.6) {
        let cy = rng.gen_range(0.0..h as f32);
        let cx = rng.gen_range(0.0..w as f32);
        let angle = rng.gen_range(0.0..std::f32::consts::TAU);
        let (dy, dx) = angle.sin_cos();
        let sigma = rng.gen_range(w as f32 / 24.0..w as f32 / 10.0);
        let amp = rng.gen_range(0.2..0.5);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for k in -3i32..=3 {
            let by = cy + dy * k as f32 * sigma;
            let bx = cx + dx * k as f32 * sigma;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f32 - by).powi(2) + (x as f32 - bx).powi(2);
                    let g = amp * (-d2 * inv).exp();
                    for c in 0..3 {
                        img[[y, x, c]] += g;
                    }
                }
            }
        }
    }
    ImageTensor::from_clamped(img).expect("procedural texture is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn textures_are_deterministic_per_seed() {
        let a = transmission_texture(32, 32, &mut rng::stream(1, "tex"));
        let b = transmission_texture(32, 32, &mut rng::stream(1, "tex"));
        assert_eq!(a, b);
        let c = transmission_texture(32, 32, &mut rng::stream(2, "tex"));
        assert_ne!(a, c);
    }

    #[test]
    fn reflection_is_sparser_than_transmission() {
        let mut rng = rng::stream(3, "tex");
        let mut refl_dark = 0usize;
        let mut trans_dark = 0usize;
        for _ in 0..8 {
            let r = reflection_texture(32, 32, &mut rng);
            let t = transmission_texture(32, 32, &mut rng);
            refl_dark += r.data().iter().filter(|&&v| v < 0.1).count();
            trans_dark += t.data().iter().filter(|&&v| v < 0.1).count();
        }
        assert!(refl_dark > trans_dark);
    }
}
