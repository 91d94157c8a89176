//! One-step denoiser: U-Net trunk μ_θ plus the conditioning branch f_φ.
//!
//! The conditioning branch mirrors the trunk's downsampling path (initialized
//! as a trainable copy at the start of foundation training) and feeds the
//! trunk through zero convolutions, so at initialization the conditioned
//! network is bitwise identical to the unconditioned one.

use super::NetworkConfig;
use crate::nn::layers::{Conv2d, Init, Linear};
use crate::nn::param::{ParamSet, ParamView};
use crate::nn::{silu, silu_backward, timestep_embedding, upsample2_backward, upsample2_nearest};
use crate::rng::Rng;
use ndarray::{concatenate, Array1, Array3, Axis};

fn silu1(x: &Array1<f32>) -> Array1<f32> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

fn silu1_backward(x: &Array1<f32>, gy: &Array1<f32>) -> Array1<f32> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *g *= s * (1.0 + v * (1.0 - s));
    });
    gx
}

/// Residual block with per-channel embedding modulation.
pub struct ResBlock {
    conv1: Conv2d,
    emb_lin: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

pub struct ResBlockCache {
    x: Array3<f32>,
    a1: Array3<f32>,
    h1: Array3<f32>,
    a2: Array3<f32>,
}

impl ResBlock {
    fn new(c_in: usize, c_out: usize, emb_dim: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv2d::new(c_in, c_out, 3, 1, 1, Init::He(1.0), rng),
            emb_lin: Linear::new(emb_dim, c_out, Init::He(0.2), rng),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, Init::He(0.5), rng),
            skip: (c_in != c_out).then(|| Conv2d::new(c_in, c_out, 1, 1, 0, Init::He(1.0), rng)),
        }
    }

    fn forward(&self, x: &Array3<f32>, emb_act: &Array1<f32>) -> (Array3<f32>, ResBlockCache) {
        let a1 = silu(x);
        let mut h1 = self.conv1.forward(&a1);
        let e = self.emb_lin.forward(emb_act);
        for (c, &ev) in e.iter().enumerate() {
            h1.index_axis_mut(Axis(0), c).mapv_inplace(|v| v + ev);
        }
        let a2 = silu(&h1);
        let h2 = self.conv2.forward(&a2);
        let out = match &self.skip {
            Some(s) => s.forward(x) + &h2,
            None => x + &h2,
        };
        (
            out,
            ResBlockCache {
                x: x.clone(),
                a1,
                h1,
                a2,
            },
        )
    }

    /// Accumulates parameter gradients; adds the embedding gradient into
    /// `g_emb_act`; returns the input gradient.
    fn backward(
        &mut self,
        cache: &ResBlockCache,
        gy: &Array3<f32>,
        emb_act: &Array1<f32>,
        g_emb_act: &mut Array1<f32>,
    ) -> Array3<f32> {
        let mut gx = match &mut self.skip {
            Some(s) => s.backward(&cache.x, gy),
            None => gy.clone(),
        };
        let ga2 = self.conv2.backward(&cache.a2, gy);
        let gh1 = silu_backward(&cache.h1, &ga2);
        let c_out = gh1.dim().0;
        let ge = Array1::from_shape_fn(c_out, |c| gh1.index_axis(Axis(0), c).sum());
        *g_emb_act += &self.emb_lin.backward(emb_act, &ge);
        let ga1 = self.conv1.backward(&cache.a1, &gh1);
        gx += &silu_backward(&cache.x, &ga1);
        gx
    }
}

impl ParamSet for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.emb_lin.visit(&format!("{prefix}.emb"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&format!("{prefix}.skip"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.conv1.visit_mut(f);
        self.emb_lin.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }

    fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.emb_lin.zero_grad();
        self.conv2.zero_grad();
        if let Some(s) = &mut self.skip {
            s.zero_grad();
        }
    }
}

fn copy_conv(dst: &mut Conv2d, src: &Conv2d) {
    dst.w.assign(&src.w);
    dst.b.assign(&src.b);
}

fn copy_resblock(dst: &mut ResBlock, src: &ResBlock) {
    copy_conv(&mut dst.conv1, &src.conv1);
    dst.emb_lin.w.assign(&src.emb_lin.w);
    dst.emb_lin.b.assign(&src.emb_lin.b);
    copy_conv(&mut dst.conv2, &src.conv2);
    if let (Some(d), Some(s)) = (&mut dst.skip, &src.skip) {
        copy_conv(d, s);
    }
}

/// Encoder-side trunk blocks plus the timestep MLP.
pub struct ThetaDown {
    pub conv_in: Conv2d,
    pub db1: ResBlock,
    pub down1: Conv2d,
    pub db2: ResBlock,
    pub down2: Conv2d,
    pub time_lin1: Linear,
    pub time_lin2: Linear,
}

/// Bottleneck block.
pub struct ThetaMid {
    pub mid: ResBlock,
}

/// Decoder-side trunk blocks.
pub struct ThetaUp {
    pub conv_u2: Conv2d,
    pub ub2: ResBlock,
    pub conv_u1: Conv2d,
    pub ub1: ResBlock,
    pub conv_out: Conv2d,
}

/// The learned constant condition vector (prompt stand-in).
pub struct CondVector {
    pub c: Array1<f32>,
    pub g: Array1<f32>,
}

/// U-Net trunk, split into its freeze partitions.
pub struct Unet {
    pub down: ThetaDown,
    pub mid: ThetaMid,
    pub up: ThetaUp,
}

/// Conditioning branch: trainable copy of the downsampling path, hint
/// injection, and zero-conv outputs.
pub struct Phi {
    pub hint_conv: Conv2d,
    pub conv_in: Conv2d,
    pub db1: ResBlock,
    pub down1: Conv2d,
    pub db2: ResBlock,
    pub down2: Conv2d,
    pub mid: ResBlock,
    pub zc1: Conv2d,
    pub zc2: Conv2d,
    pub zc_mid: Conv2d,
}

impl Unet {
    pub fn new(config: &NetworkConfig, rng: &mut Rng) -> Self {
        let [w1, w2, w3] = config.unet_widths;
        let cl = config.latent_channels;
        let ed = config.emb_dim;
        Self {
            down: ThetaDown {
                conv_in: Conv2d::new(cl, w1, 3, 1, 1, Init::He(1.0), rng),
                db1: ResBlock::new(w1, w1, ed, rng),
                down1: Conv2d::new(w1, w2, 3, 2, 1, Init::He(1.0), rng),
                db2: ResBlock::new(w2, w2, ed, rng),
                down2: Conv2d::new(w2, w3, 3, 2, 1, Init::He(1.0), rng),
                time_lin1: Linear::new(config.time_dim, ed, Init::He(1.0), rng),
                time_lin2: Linear::new(ed, ed, Init::He(1.0), rng),
            },
            mid: ThetaMid {
                mid: ResBlock::new(w3, w3, ed, rng),
            },
            up: ThetaUp {
                conv_u2: Conv2d::new(w3, w2, 3, 1, 1, Init::He(1.0), rng),
                ub2: ResBlock::new(w2 * 2, w2, ed, rng),
                conv_u1: Conv2d::new(w2, w1, 3, 1, 1, Init::He(1.0), rng),
                ub1: ResBlock::new(w1 * 2, w1, ed, rng),
                conv_out: Conv2d::new(w1, cl, 3, 1, 1, Init::He(0.5), rng),
            },
        }
    }
}

impl Phi {
    pub fn new(config: &NetworkConfig, rng: &mut Rng) -> Self {
        let [w1, w2, w3] = config.unet_widths;
        let cl = config.latent_channels;
        let ed = config.emb_dim;
        Self {
            hint_conv: Conv2d::new(cl, w1, 3, 1, 1, Init::He(0.5), rng),
            conv_in: Conv2d::new(cl, w1, 3, 1, 1, Init::He(1.0), rng),
            db1: ResBlock::new(w1, w1, ed, rng),
            down1: Conv2d::new(w1, w2, 3, 2, 1, Init::He(1.0), rng),
            db2: ResBlock::new(w2, w2, ed, rng),
            down2: Conv2d::new(w2, w3, 3, 2, 1, Init::He(1.0), rng),
            mid: ResBlock::new(w3, w3, ed, rng),
            zc1: Conv2d::zero_conv(w1, w1, 1, rng),
            zc2: Conv2d::zero_conv(w2, w2, 1, rng),
            zc_mid: Conv2d::zero_conv(w3, w3, 1, rng),
        }
    }

    /// Re-initializes the branch as a copy of the trunk's down path
    /// (the standard trainable-copy initialization).
    pub fn copy_from_trunk(&mut self, unet: &Unet) {
        copy_conv(&mut self.conv_in, &unet.down.conv_in);
        copy_resblock(&mut self.db1, &unet.down.db1);
        copy_conv(&mut self.down1, &unet.down.down1);
        copy_resblock(&mut self.db2, &unet.down.db2);
        copy_conv(&mut self.down2, &unet.down.down2);
        copy_resblock(&mut self.mid, &unet.mid.mid);
    }
}

/// Cache of the timestep/condition embedding path.
pub struct EmbCache {
    t_sin: Array1<f32>,
    u: Array1<f32>,
    su: Array1<f32>,
    emb: Array1<f32>,
    pub emb_act: Array1<f32>,
}

/// Conditioning-branch activations.
pub struct PhiCache {
    z_t: Array3<f32>,
    cond: Array3<f32>,
    p0: Array3<f32>,
    c_db1: ResBlockCache,
    p1: Array3<f32>,
    pd1_in: Array3<f32>,
    c_db2: ResBlockCache,
    p2: Array3<f32>,
    pd2_in: Array3<f32>,
    c_mid: ResBlockCache,
    p3: Array3<f32>,
}

/// Zero-conv outputs injected into the trunk.
pub struct Injections {
    pub inj1: Array3<f32>,
    pub inj2: Array3<f32>,
    pub inj_mid: Array3<f32>,
}

/// Trunk activations.
pub struct TrunkCache {
    z_t: Array3<f32>,
    x0: Array3<f32>,
    c_db1: ResBlockCache,
    h1: Array3<f32>,
    c_db2: ResBlockCache,
    h2: Array3<f32>,
    c_mid: ResBlockCache,
    u2a: Array3<f32>,
    cat2: Array3<f32>,
    c_ub2: ResBlockCache,
    u1a: Array3<f32>,
    cat1: Array3<f32>,
    c_ub1: ResBlockCache,
    v1: Array3<f32>,
}

/// Everything needed to run the backward pass of one denoiser call.
pub struct DenoiseCache {
    pub emb: EmbCache,
    pub phi: Option<PhiCache>,
    pub trunk: TrunkCache,
}

impl Unet {
    pub fn embed(&self, t: usize, cond: &CondVector, config: &NetworkConfig) -> EmbCache {
        let t_sin = timestep_embedding(t, config.time_dim);
        let u = self.down.time_lin1.forward(&t_sin);
        let su = silu1(&u);
        let emb = self.down.time_lin2.forward(&su) + &cond.c;
        let emb_act = silu1(&emb);
        EmbCache {
            t_sin,
            u,
            su,
            emb,
            emb_act,
        }
    }

    /// Backward through the embedding path; accumulates time-MLP and
    /// condition-vector gradients.
    pub fn embed_backward(
        &mut self,
        cache: &EmbCache,
        g_emb_act: &Array1<f32>,
        cond: &mut CondVector,
    ) {
        let g_emb = silu1_backward(&cache.emb, g_emb_act);
        cond.g += &g_emb;
        let gsu = self.down.time_lin2.backward(&cache.su, &g_emb);
        let gu = silu1_backward(&cache.u, &gsu);
        let _ = self.down.time_lin1.backward(&cache.t_sin, &gu);
    }
}

/// Forward through the conditioning branch.
pub fn phi_forward(
    phi: &Phi,
    z_t: &Array3<f32>,
    cond_latent: &Array3<f32>,
    emb_act: &Array1<f32>,
) -> (Injections, PhiCache) {
    let p0 = phi.conv_in.forward(z_t) + &phi.hint_conv.forward(cond_latent);
    let (p1, c_db1) = phi.db1.forward(&p0, emb_act);
    let pd1 = phi.down1.forward(&p1);
    let (p2, c_db2) = phi.db2.forward(&pd1, emb_act);
    let pd2 = phi.down2.forward(&p2);
    let (p3, c_mid) = phi.mid.forward(&pd2, emb_act);
    let inj = Injections {
        inj1: phi.zc1.forward(&p1),
        inj2: phi.zc2.forward(&p2),
        inj_mid: phi.zc_mid.forward(&p3),
    };
    let cache = PhiCache {
        z_t: z_t.clone(),
        cond: cond_latent.clone(),
        p0,
        c_db1,
        p1,
        pd1_in: pd1,
        c_db2,
        p2,
        pd2_in: pd2,
        c_mid,
        p3,
    };
    (inj, cache)
}

/// Backward through the conditioning branch given injection gradients.
pub fn phi_backward(
    phi: &mut Phi,
    cache: &PhiCache,
    g_inj: &Injections,
    emb_act: &Array1<f32>,
    g_emb_act: &mut Array1<f32>,
) {
    let gp3 = phi.zc_mid.backward(&cache.p3, &g_inj.inj_mid);
    let gpd2 = phi.mid.backward(&cache.c_mid, &gp3, emb_act, g_emb_act);
    let mut gp2 = phi.down2.backward(&cache.p2, &gpd2);
    gp2 += &phi.zc2.backward(&cache.p2, &g_inj.inj2);
    let gpd1 = phi.db2.backward(&cache.c_db2, &gp2, emb_act, g_emb_act);
    let mut gp1 = phi.down1.backward(&cache.p1, &gpd1);
    gp1 += &phi.zc1.backward(&cache.p1, &g_inj.inj1);
    let gp0 = phi.db1.backward(&cache.c_db1, &gp1, emb_act, g_emb_act);
    let _ = phi.conv_in.backward(&cache.z_t, &gp0);
    let _ = phi.hint_conv.backward(&cache.cond, &gp0);
}

/// Forward through the trunk with optional injections.
pub fn trunk_forward(
    unet: &Unet,
    z_t: &Array3<f32>,
    emb_act: &Array1<f32>,
    inj: Option<&Injections>,
) -> (Array3<f32>, TrunkCache) {
    let x0 = unet.down.conv_in.forward(z_t);
    let (h1, c_db1) = unet.down.db1.forward(&x0, emb_act);
    let d1 = unet.down.down1.forward(&h1);
    let (h2, c_db2) = unet.down.db2.forward(&d1, emb_act);
    let d2 = unet.down.down2.forward(&h2);
    let (h3, c_mid) = unet.mid.mid.forward(&d2, emb_act);

    let (h3i, skip2, skip1) = match inj {
        Some(inj) => (&h3 + &inj.inj_mid, &h2 + &inj.inj2, &h1 + &inj.inj1),
        None => (h3.clone(), h2.clone(), h1.clone()),
    };

    let u2a = upsample2_nearest(&h3i);
    let u2b = unet.up.conv_u2.forward(&u2a);
    let cat2 = concatenate(Axis(0), &[u2b.view(), skip2.view()]).expect("channel concat");
    let (v2, c_ub2) = unet.up.ub2.forward(&cat2, emb_act);
    let u1a = upsample2_nearest(&v2);
    let u1b = unet.up.conv_u1.forward(&u1a);
    let cat1 = concatenate(Axis(0), &[u1b.view(), skip1.view()]).expect("channel concat");
    let (v1, c_ub1) = unet.up.ub1.forward(&cat1, emb_act);
    let out = unet.up.conv_out.forward(&v1);

    let cache = TrunkCache {
        z_t: z_t.clone(),
        x0,
        c_db1,
        h1,
        c_db2,
        h2,
        c_mid,
        u2a,
        cat2,
        c_ub2,
        u1a,
        cat1,
        c_ub1,
        v1,
    };
    (out, cache)
}

/// Backward through the trunk. Returns the injection gradients (to feed the
/// conditioning branch) when the forward pass was conditioned.
pub fn trunk_backward(
    unet: &mut Unet,
    cache: &TrunkCache,
    gy: &Array3<f32>,
    emb_act: &Array1<f32>,
    g_emb_act: &mut Array1<f32>,
    conditioned: bool,
) -> Option<Injections> {
    let w1 = unet.down.conv_in.w.dim().0;
    let w2 = unet.down.down1.w.dim().0;

    let gv1 = unet.up.conv_out.backward(&cache.v1, gy);
    let gcat1 = unet.up.ub1.backward(&cache.c_ub1, &gv1, emb_act, g_emb_act);
    let gu1b = gcat1.slice(ndarray::s![0..w1, .., ..]).to_owned();
    let gskip1 = gcat1.slice(ndarray::s![w1.., .., ..]).to_owned();
    let gu1a = unet.up.conv_u1.backward(&cache.u1a, &gu1b);
    let gv2 = upsample2_backward(&gu1a);
    let gcat2 = unet.up.ub2.backward(&cache.c_ub2, &gv2, emb_act, g_emb_act);
    let gu2b = gcat2.slice(ndarray::s![0..w2, .., ..]).to_owned();
    let gskip2 = gcat2.slice(ndarray::s![w2.., .., ..]).to_owned();
    let gu2a = unet.up.conv_u2.backward(&cache.u2a, &gu2b);
    let gh3 = upsample2_backward(&gu2a);

    let gd2 = unet.mid.mid.backward(&cache.c_mid, &gh3, emb_act, g_emb_act);
    let mut gh2 = unet.down.down2.backward(&cache.h2, &gd2);
    gh2 += &gskip2;
    let gd1 = unet.down.db2.backward(&cache.c_db2, &gh2, emb_act, g_emb_act);
    let mut gh1 = unet.down.down1.backward(&cache.h1, &gd1);
    gh1 += &gskip1;
    let gx0 = unet.down.db1.backward(&cache.c_db1, &gh1, emb_act, g_emb_act);
    let _ = unet.down.conv_in.backward(&cache.z_t, &gx0);

    conditioned.then_some(Injections {
        inj1: gskip1,
        inj2: gskip2,
        inj_mid: gh3,
    })
}

impl ParamSet for ThetaDown {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_>)) {
        self.conv_in.visit(&format!("{prefix}theta_down.conv_in"), f);
        self.db1.visit(&format!("{prefix}theta_down.db1"), f);
        self.down1.visit(&format!("{prefix}theta_down.down1"), f);
        self.db2.visit(&format!("{prefix}theta_down.db2"), f);
        self.down2.visit(&format!("{prefix}theta_down.down2"), f);
        self.time_lin1.visit(&format!("{prefix}theta_down.time_lin1"), f);
        self.time_lin2.visit(&format!("{prefix}theta_down.time_lin2"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.conv_in.visit_mut(f);
        self.db1.visit_mut(f);
        self.down1.visit_mut(f);
        self.db2.visit_mut(f);
        self.down2.visit_mut(f);
        self.time_lin1.visit_mut(f);
        self.time_lin2.visit_mut(f);
    }

    fn zero_grad(&mut self) {
        self.conv_in.zero_grad();
        self.db1.zero_grad();
        self.down1.zero_grad();
        self.db2.zero_grad();
        self.down2.zero_grad();
        self.time_lin1.zero_grad();
        self.time_lin2.zero_grad();
    }
}

impl ParamSet for ThetaMid {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_>)) {
        self.mid.visit(&format!("{prefix}theta_mid.mid"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.mid.visit_mut(f);
    }

    fn zero_grad(&mut self) {
        self.mid.zero_grad();
    }
}

impl ParamSet for ThetaUp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_>)) {
        self.conv_u2.visit(&format!("{prefix}theta_up.conv_u2"), f);
        self.ub2.visit(&format!("{prefix}theta_up.ub2"), f);
        self.conv_u1.visit(&format!("{prefix}theta_up.conv_u1"), f);
        self.ub1.visit(&format!("{prefix}theta_up.ub1"), f);
        self.conv_out.visit(&format!("{prefix}theta_up.conv_out"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.conv_u2.visit_mut(f);
        self.ub2.visit_mut(f);
        self.conv_u1.visit_mut(f);
        self.ub1.visit_mut(f);
        self.conv_out.visit_mut(f);
    }

    fn zero_grad(&mut self) {
        self.conv_u2.zero_grad();
        self.ub2.zero_grad();
        self.conv_u1.zero_grad();
        self.ub1.zero_grad();
        self.conv_out.zero_grad();
    }
}

impl ParamSet for Phi {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_>)) {
        self.hint_conv.visit(&format!("{prefix}phi.hint_conv"), f);
        self.conv_in.visit(&format!("{prefix}phi.conv_in"), f);
        self.db1.visit(&format!("{prefix}phi.db1"), f);
        self.down1.visit(&format!("{prefix}phi.down1"), f);
        self.db2.visit(&format!("{prefix}phi.db2"), f);
        self.down2.visit(&format!("{prefix}phi.down2"), f);
        self.mid.visit(&format!("{prefix}phi.mid"), f);
        self.zc1.visit(&format!("{prefix}phi.zc1"), f);
        self.zc2.visit(&format!("{prefix}phi.zc2"), f);
        self.zc_mid.visit(&format!("{prefix}phi.zc_mid"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.hint_conv.visit_mut(f);
        self.conv_in.visit_mut(f);
        self.db1.visit_mut(f);
        self.down1.visit_mut(f);
        self.db2.visit_mut(f);
        self.down2.visit_mut(f);
        self.mid.visit_mut(f);
        self.zc1.visit_mut(f);
        self.zc2.visit_mut(f);
        self.zc_mid.visit_mut(f);
    }

    fn zero_grad(&mut self) {
        self.hint_conv.zero_grad();
        self.conv_in.zero_grad();
        self.db1.zero_grad();
        self.down1.zero_grad();
        self.db2.zero_grad();
        self.down2.zero_grad();
        self.mid.zero_grad();
        self.zc1.zero_grad();
        self.zc2.zero_grad();
        self.zc_mid.zero_grad();
    }
}

impl CondVector {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        let mut c = Array1::zeros(dim);
        for v in c.iter_mut() {
            let n: f64 = rand::Rng::sample(rng, rand_distr::StandardNormal);
            *v = n as f32 * 0.1;
        }
        Self {
            c,
            g: Array1::zeros(dim),
        }
    }
}

impl ParamSet for CondVector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_>)) {
        f(ParamView {
            name: format!("{prefix}cond.c"),
            shape: self.c.shape().to_vec(),
            data: self.c.as_slice().expect("standard layout"),
        });
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        f(
            self.c.as_slice_mut().expect("standard layout"),
            self.g.as_slice_mut().expect("standard layout"),
        );
    }

    fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }
}
