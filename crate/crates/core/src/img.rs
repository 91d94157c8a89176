//! Channel-last floating-point images and lossless file IO.

use crate::error::{DereflectError, Result};
use ndarray::{Array3, Zip};
use std::path::Path;

/// Minimum spatial extent of a valid image.
pub const MIN_DIM: usize = 8;

/// Rec. 601 luma weights used for grayscale conversion.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// A height × width × 3 image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Wraps an array, validating shape, finiteness, and range.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(DereflectError::DimensionMismatch(format!(
                "expected 3 channels, got {c}"
            )));
        }
        if h < MIN_DIM || w < MIN_DIM {
            return Err(DereflectError::Validation(format!(
                "image {h}x{w} is below the {MIN_DIM}x{MIN_DIM} minimum"
            )));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(DereflectError::Validation(format!(
                    "pixel value {v} outside [0,1]"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Wraps an array after clamping every value into `[0, 1]`.
    pub fn from_clamped(mut data: Array3<f32>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self::new(data)
    }

    /// All-zero image of the given size.
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(Array3::zeros((height, width, 3)))
    }

    /// Constant-valued image.
    pub fn splat(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, 3), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// Consumes the tensor, returning the raw array.
    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Rec. 601 luma plane.
    pub fn luma(&self) -> ndarray::Array2<f32> {
        let (h, w, _) = self.data.dim();
        ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
            LUMA_WEIGHTS[0] * self.data[[y, x, 0]]
                + LUMA_WEIGHTS[1] * self.data[[y, x, 1]]
                + LUMA_WEIGHTS[2] * self.data[[y, x, 2]]
        })
    }

    /// Channel-first copy (3, H, W) for the network stack.
    pub fn to_chw(&self) -> Array3<f32> {
        let (h, w, _) = self.data.dim();
        let mut out = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[c, y, x]] = self.data[[y, x, c]];
                }
            }
        }
        out
    }

    /// Builds an image from a channel-first (3, H, W) array, clamping to `[0,1]`.
    pub fn from_chw_clamped(chw: &Array3<f32>) -> Result<Self> {
        let (c, h, w) = chw.dim();
        if c != 3 {
            return Err(DereflectError::DimensionMismatch(format!(
                "expected 3 channels, got {c}"
            )));
        }
        let mut out = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = chw[[ch, y, x]];
                    out[[y, x, ch]] = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
                }
            }
        }
        Self::new(out)
    }

    /// Mean absolute difference against another image of the same shape.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        check_same_shape(self, other)?;
        let mut acc = 0.0f64;
        Zip::from(&self.data).and(&other.data).for_each(|&a, &b| {
            acc += (a as f64 - b as f64).abs();
        });
        Ok(acc / self.data.len() as f64)
    }

    /// Writes the image as a lossless 16-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.shape();
        let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let at = |c: usize| {
                (self.data[[y as usize, x as usize, c]] * 65535.0).round() as u16
            };
            *px = image::Rgb([at(0), at(1), at(2)]);
        }
        buf.save(path)?;
        Ok(())
    }

    /// Loads an 8- or 16-bit image file into `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let dynimg = image::open(path)?;
        let rgb = dynimg.to_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = Array3::zeros((h, w, 3));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = px.0[c].clamp(0.0, 1.0);
            }
        }
        Self::new(data)
    }
}

/// Errors unless both images have identical dimensions.
pub fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DereflectError::DimensionMismatch(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        let mut arr = Array3::zeros((8, 8, 3));
        arr[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::new(arr).is_err());
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(ImageTensor::zeros(4, 16).is_err());
    }

    #[test]
    fn clamped_constructor_fixes_range() {
        let mut arr = Array3::zeros((8, 8, 3));
        arr[[0, 0, 0]] = 1.5;
        arr[[1, 1, 1]] = -0.25;
        let img = ImageTensor::from_clamped(arr).unwrap();
        assert_eq!(img.data()[[0, 0, 0]], 1.0);
        assert_eq!(img.data()[[1, 1, 1]], 0.0);
    }

    #[test]
    fn chw_round_trip() {
        let mut arr = Array3::zeros((8, 10, 3));
        for (i, v) in arr.iter_mut().enumerate() {
            *v = (i % 97) as f32 / 96.0;
        }
        let img = ImageTensor::new(arr).unwrap();
        let back = ImageTensor::from_chw_clamped(&img.to_chw()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn png_round_trip_is_near_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut arr = Array3::zeros((16, 12, 3));
        for (i, v) in arr.iter_mut().enumerate() {
            *v = (i % 101) as f32 / 100.0;
        }
        let img = ImageTensor::new(arr).unwrap();
        img.save_png(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        // 16-bit quantization: half a step of 1/65535.
        assert!(img.mean_abs_diff(&back).unwrap() < 1.0 / 65535.0);
    }
}
