//! Latent codec: encoder ℰ, decoder 𝒟, and the zero-conv fusion layers of
//! the cross-latent decoder.

use super::NetworkConfig;
use crate::error::{DereflectError, Result};
use crate::nn::layers::{Conv2d, Init};
use crate::nn::param::{ParamSet, ParamView};
use crate::nn::{silu, silu_backward, upsample2_backward, upsample2_nearest};
use crate::rng::Rng;
use ndarray::Array3;

/// Multi-scale encoder features captured for the cross-latent decoder.
#[derive(Debug, Clone)]
pub struct SkipFeatureSet {
    /// Full resolution, `codec_widths[0]` channels.
    pub full: Array3<f32>,
    /// Half resolution, `codec_widths[1]` channels.
    pub half: Array3<f32>,
    /// Quarter resolution, `codec_widths[1]` channels.
    pub quarter: Array3<f32>,
}

impl SkipFeatureSet {
    pub const SCALES: usize = 3;
}

/// Encoder/decoder trunk (one parameter partition).
pub struct Codec {
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    e4: Conv2d,
    e5: Conv2d,
    d1: Conv2d,
    d2: Conv2d,
    d3: Conv2d,
    d4: Conv2d,
}

/// Zero-initialized fusion convolutions (their own partition; the only
/// trainable part in the decoder stage).
pub struct Fusion {
    quarter: Conv2d,
    half: Conv2d,
    full: Conv2d,
}

pub struct EncodeCache {
    x: Array3<f32>,
    z1: Array3<f32>,
    a1: Array3<f32>,
    z2: Array3<f32>,
    a2: Array3<f32>,
    z3: Array3<f32>,
    a3: Array3<f32>,
    z4: Array3<f32>,
    a4: Array3<f32>,
}

pub struct DecodeCache {
    z: Array3<f32>,
    w1: Array3<f32>,
    f1: Array3<f32>,
    up1: Array3<f32>,
    w2: Array3<f32>,
    f2: Array3<f32>,
    up2: Array3<f32>,
    w3: Array3<f32>,
    f3: Array3<f32>,
    out: Array3<f32>,
    skips: Option<SkipFeatureSet>,
}

fn sigmoid(x: &Array3<f32>) -> Array3<f32> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

impl Codec {
    pub fn new(config: &NetworkConfig, rng: &mut Rng) -> Self {
        let [w0, w1] = config.codec_widths;
        let cl = config.latent_channels;
        Self {
            e1: Conv2d::new(3, w0, 3, 1, 1, Init::He(1.0), rng),
            e2: Conv2d::new(w0, w1, 3, 2, 1, Init::He(1.0), rng),
            e3: Conv2d::new(w1, w1, 3, 1, 1, Init::He(1.0), rng),
            e4: Conv2d::new(w1, w1, 3, 2, 1, Init::He(1.0), rng),
            e5: Conv2d::new(w1, cl, 3, 1, 1, Init::He(1.0), rng),
            d1: Conv2d::new(cl, w1, 3, 1, 1, Init::He(1.0), rng),
            d2: Conv2d::new(w1, w1, 3, 1, 1, Init::He(1.0), rng),
            d3: Conv2d::new(w1, w0, 3, 1, 1, Init::He(1.0), rng),
            d4: Conv2d::new(w0, 3, 3, 1, 1, Init::He(1.0), rng),
        }
    }

    /// Encodes a channel-first image into (latent, skip features).
    pub fn encode(&self, x: &Array3<f32>, config: &NetworkConfig) -> Result<(Array3<f32>, SkipFeatureSet, EncodeCache)> {
        let (_, h, w) = x.dim();
        let f = config.codec_factor;
        if h % f != 0 || w % f != 0 {
            return Err(DereflectError::Validation(format!(
                "image {h}x{w} not divisible by codec factor {f}"
            )));
        }
        let z1 = self.e1.forward(x);
        let a1 = silu(&z1);
        let z2 = self.e2.forward(&a1);
        let a2 = silu(&z2);
        let z3 = self.e3.forward(&a2);
        let a3 = silu(&z3);
        let z4 = self.e4.forward(&a3);
        let a4 = silu(&z4);
        let latent = self.e5.forward(&a4);
        let skips = SkipFeatureSet {
            full: a1.clone(),
            half: a3.clone(),
            quarter: a4.clone(),
        };
        let cache = EncodeCache {
            x: x.clone(),
            z1,
            a1,
            z2,
            a2,
            z3,
            a3,
            z4,
            a4,
        };
        Ok((latent, skips, cache))
    }

    /// Backward through the encoder given the latent gradient. Accumulates
    /// weight gradients; returns the image gradient.
    pub fn encode_backward(&mut self, cache: &EncodeCache, g_latent: &Array3<f32>) -> Array3<f32> {
        let ga4 = self.e5.backward(&cache.a4, g_latent);
        let gz4 = silu_backward(&cache.z4, &ga4);
        let ga3 = self.e4.backward(&cache.a3, &gz4);
        let gz3 = silu_backward(&cache.z3, &ga3);
        let ga2 = self.e3.backward(&cache.a2, &gz3);
        let gz2 = silu_backward(&cache.z2, &ga2);
        let ga1 = self.e2.backward(&cache.a1, &gz2);
        let gz1 = silu_backward(&cache.z1, &ga1);
        self.e1.backward(&cache.x, &gz1)
    }

    /// Decodes a latent; with `fusion` present, skip features are injected
    /// through the zero convolutions at each decoder stage input.
    pub fn decode(
        &self,
        z: &Array3<f32>,
        skips_fusion: Option<(&SkipFeatureSet, &Fusion)>,
    ) -> (Array3<f32>, DecodeCache) {
        let w1 = self.d1.forward(z);
        let mut f1 = silu(&w1);
        if let Some((skips, fusion)) = skips_fusion {
            f1 += &fusion.quarter.forward(&skips.quarter);
        }
        let up1 = upsample2_nearest(&f1);
        let w2 = self.d2.forward(&up1);
        let mut f2 = silu(&w2);
        if let Some((skips, fusion)) = skips_fusion {
            f2 += &fusion.half.forward(&skips.half);
        }
        let up2 = upsample2_nearest(&f2);
        let w3 = self.d3.forward(&up2);
        let mut f3 = silu(&w3);
        if let Some((skips, fusion)) = skips_fusion {
            f3 += &fusion.full.forward(&skips.full);
        }
        let w4 = self.d4.forward(&f3);
        let out = sigmoid(&w4);
        let cache = DecodeCache {
            z: z.clone(),
            w1,
            f1,
            up1,
            w2,
            f2,
            up2,
            w3,
            f3,
            out: out.clone(),
            skips: skips_fusion.map(|(s, _)| s.clone()),
        };
        (out, cache)
    }

    /// Backward through the decoder. Accumulates decoder weight gradients
    /// (and fusion gradients when `fusion` is given); returns the latent
    /// gradient. Skip-feature gradients are not propagated: the encoder is
    /// frozen wherever fusion training happens.
    pub fn decode_backward(
        &mut self,
        cache: &DecodeCache,
        g_img: &Array3<f32>,
        mut fusion: Option<&mut Fusion>,
    ) -> Array3<f32> {
        // sigmoid backward: g * y * (1 - y).
        let mut gw4 = g_img.clone();
        gw4.zip_mut_with(&cache.out, |g, &y| *g *= y * (1.0 - y));
        let gf3 = self.d4.backward(&cache.f3, &gw4);
        if let (Some(fu), Some(sk)) = (fusion.as_deref_mut(), cache.skips.as_ref()) {
            fu.full.backward(&sk.full, &gf3);
        }
        let gw3 = silu_backward(&cache.w3, &gf3);
        let gup2 = self.d3.backward(&cache.up2, &gw3);
        let gf2 = upsample2_backward(&gup2);
        if let (Some(fu), Some(sk)) = (fusion.as_deref_mut(), cache.skips.as_ref()) {
            fu.half.backward(&sk.half, &gf2);
        }
        let gw2 = silu_backward(&cache.w2, &gf2);
        let gup1 = self.d2.backward(&cache.up1, &gw2);
        let gf1 = upsample2_backward(&gup1);
        if let (Some(fu), Some(sk)) = (fusion.as_deref_mut(), cache.skips.as_ref()) {
            fu.quarter.backward(&sk.quarter, &gf1);
        }
        let gw1 = silu_backward(&cache.w1, &gf1);
        self.d1.backward(&cache.z, &gw1)
    }
}

impl Fusion {
    pub fn new(config: &NetworkConfig, rng: &mut Rng) -> Self {
        let [w0, w1] = config.codec_widths;
        Self {
            quarter: Conv2d::zero_conv(w1, w1, 3, rng),
            half: Conv2d::zero_conv(w1, w1, 3, rng),
            full: Conv2d::zero_conv(w0, w0, 3, rng),
        }
    }
}

impl ParamSet for Codec {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_>)) {
        for (name, layer) in [
            ("e1", &self.e1),
            ("e2", &self.e2),
            ("e3", &self.e3),
            ("e4", &self.e4),
            ("e5", &self.e5),
            ("d1", &self.d1),
            ("d2", &self.d2),
            ("d3", &self.d3),
            ("d4", &self.d4),
        ] {
            layer.visit(&format!("{prefix}codec.{name}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.e1.visit_mut(f);
        self.e2.visit_mut(f);
        self.e3.visit_mut(f);
        self.e4.visit_mut(f);
        self.e5.visit_mut(f);
        self.d1.visit_mut(f);
        self.d2.visit_mut(f);
        self.d3.visit_mut(f);
        self.d4.visit_mut(f);
    }

    fn zero_grad(&mut self) {
        self.e1.zero_grad();
        self.e2.zero_grad();
        self.e3.zero_grad();
        self.e4.zero_grad();
        self.e5.zero_grad();
        self.d1.zero_grad();
        self.d2.zero_grad();
        self.d3.zero_grad();
        self.d4.zero_grad();
    }
}

impl ParamSet for Fusion {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_>)) {
        self.quarter.visit(&format!("{prefix}fusion.quarter"), f);
        self.half.visit(&format!("{prefix}fusion.half"), f);
        self.full.visit(&format!("{prefix}fusion.full"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.quarter.visit_mut(f);
        self.half.visit_mut(f);
        self.full.visit_mut(f);
    }

    fn zero_grad(&mut self) {
        self.quarter.zero_grad();
        self.half.zero_grad();
        self.full.zero_grad();
    }
}
