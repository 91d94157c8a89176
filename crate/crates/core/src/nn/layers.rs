//! Convolution, linear, activation, and resampling primitives.

use super::param::{ParamSet, ParamView};
use crate::rng::Rng;
use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng as _;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-normal scaled by the factor (1.0 for plain He).
    He(f32),
    /// Exact zeros (zero convolution).
    Zero,
}

/// 2D convolution with square kernels and zero padding.
pub struct Conv2d {
    pub w: Array4<f32>,
    pub b: Array1<f32>,
    pub gw: Array4<f32>,
    pub gb: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let mut w = Array4::zeros((c_out, c_in, kernel, kernel));
        if let Init::He(gain) = init {
            let std = gain * (2.0 / (c_in * kernel * kernel) as f32).sqrt();
            for v in w.iter_mut() {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                *v = n as f32 * std;
            }
        }
        Self {
            w,
            b: Array1::zeros(c_out),
            gw: Array4::zeros((c_out, c_in, kernel, kernel)),
            gb: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    /// Zero convolution: weights and biases start at exact zeros.
    pub fn zero_conv(c_in: usize, c_out: usize, kernel: usize, rng: &mut Rng) -> Self {
        Self::new(c_in, c_out, kernel, 1, kernel / 2, Init::Zero, rng)
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().2
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f32>, oh: usize, ow: usize) -> Array2<f32> {
        let (ci, h, w) = x.dim();
        let k = self.kernel();
        let mut col = Array2::zeros((ci * k * k, oh * ow));
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[[row, oy * ow + ox]] = x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, gcol: &Array2<f32>, in_dim: (usize, usize, usize), oh: usize, ow: usize) -> Array3<f32> {
        let (ci, h, w) = in_dim;
        let k = self.kernel();
        let mut gx = Array3::zeros(in_dim);
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[[c, iy as usize, ix as usize]] += gcol[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_shape(h, w);
        let co = self.w.dim().0;
        let k = self.kernel();
        let ci = self.w.dim().1;
        let col = self.im2col(x, oh, ow);
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("conv weight is standard layout");
        let mut y_mat = w_mat.dot(&col);
        for c in 0..co {
            let bias = self.b[c];
            y_mat.row_mut(c).mapv_inplace(|v| v + bias);
        }
        y_mat
            .into_shape_with_order((co, oh, ow))
            .expect("output reshape")
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array3<f32>, gy: &Array3<f32>) -> Array3<f32> {
        let (co, oh, ow) = gy.dim();
        let k = self.kernel();
        let ci = self.w.dim().1;
        let col = self.im2col(x, oh, ow);
        let gy_mat = gy
            .view()
            .into_shape_with_order((co, oh * ow))
            .expect("grad reshape");
        // gw += gy · colᵀ
        let gw_update = gy_mat.dot(&col.t());
        let mut gw_mat = self
            .gw
            .view_mut()
            .into_shape_with_order((co, ci * k * k))
            .expect("grad weight reshape");
        gw_mat += &gw_update;
        for c in 0..co {
            self.gb[c] += gy_mat.row(c).sum();
        }
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("conv weight reshape");
        let gcol = w_mat.t().dot(&gy_mat);
        self.col2im(&gcol, x.dim(), oh, ow)
    }
}

impl ParamSet for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_>)) {
        f(ParamView {
            name: format!("{prefix}.w"),
            shape: self.w.shape().to_vec(),
            data: self.w.as_slice().expect("standard layout"),
        });
        f(ParamView {
            name: format!("{prefix}.b"),
            shape: self.b.shape().to_vec(),
            data: self.b.as_slice().expect("standard layout"),
        });
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        f(
            self.w.as_slice_mut().expect("standard layout"),
            self.gw.as_slice_mut().expect("standard layout"),
        );
        f(
            self.b.as_slice_mut().expect("standard layout"),
            self.gb.as_slice_mut().expect("standard layout"),
        );
    }

    fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}

/// Fully-connected layer.
pub struct Linear {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
    pub gw: Array2<f32>,
    pub gb: Array1<f32>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, init: Init, rng: &mut Rng) -> Self {
        let mut w = Array2::zeros((d_out, d_in));
        if let Init::He(gain) = init {
            let std = gain * (2.0 / d_in as f32).sqrt();
            for v in w.iter_mut() {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                *v = n as f32 * std;
            }
        }
        Self {
            w,
            b: Array1::zeros(d_out),
            gw: Array2::zeros((d_out, d_in)),
            gb: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array1<f32>) -> Array1<f32> {
        self.w.dot(x) + &self.b
    }

    pub fn backward(&mut self, x: &Array1<f32>, gy: &Array1<f32>) -> Array1<f32> {
        for (i, &g) in gy.iter().enumerate() {
            self.gb[i] += g;
            for (j, &xv) in x.iter().enumerate() {
                self.gw[[i, j]] += g * xv;
            }
        }
        self.w.t().dot(gy)
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_>)) {
        f(ParamView {
            name: format!("{prefix}.w"),
            shape: self.w.shape().to_vec(),
            data: self.w.as_slice().expect("standard layout"),
        });
        f(ParamView {
            name: format!("{prefix}.b"),
            shape: self.b.shape().to_vec(),
            data: self.b.as_slice().expect("standard layout"),
        });
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        f(
            self.w.as_slice_mut().expect("standard layout"),
            self.gw.as_slice_mut().expect("standard layout"),
        );
        f(
            self.b.as_slice_mut().expect("standard layout"),
            self.gb.as_slice_mut().expect("standard layout"),
        );
    }

    fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}

/// `x·σ(x)` applied elementwise.
pub fn silu(x: &Array3<f32>) -> Array3<f32> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

/// Backward of [`silu`] given the layer input.
pub fn silu_backward(x: &Array3<f32>, gy: &Array3<f32>) -> Array3<f32> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *g *= s * (1.0 + v * (1.0 - s));
    });
    gx
}

/// Nearest-neighbor 2× upsampling.
pub fn upsample2_nearest(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

/// Adjoint of [`upsample2_nearest`]: sums gradients over each 2×2 block.
pub fn upsample2_backward(gy: &Array3<f32>) -> Array3<f32> {
    let (c, h2, w2) = gy.dim();
    let mut gx = Array3::zeros((c, h2 / 2, w2 / 2));
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                gx[[ci, y / 2, x / 2]] += gy[[ci, y, x]];
            }
        }
    }
    gx
}

/// Sinusoidal timestep embedding (half sine, half cosine).
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f32> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
        let angle = t as f64 * freq;
        out[i] = angle.sin() as f32;
        out[half + i] = angle.cos() as f32;
    }
    out
}
