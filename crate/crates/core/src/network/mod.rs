//! Toy-scale model: latent codec, conditioned one-step denoiser, and the
//! cross-latent decoder, organized into named parameter partitions.

pub mod checkpoint;
pub mod codec;
pub mod unet;

use crate::diffusion::{sample_noise, LatentTensor, NoiseSchedule};
use crate::error::{DereflectError, Result};
use crate::img::ImageTensor;
use crate::nn::param::ParamSet;
use crate::rng;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub use codec::{Codec, DecodeCache, EncodeCache, Fusion, SkipFeatureSet};
pub use unet::{CondVector, DenoiseCache, Injections, Phi, Unet};

/// Architecture hyperparameters. All spatial sizes are multiples of
/// `codec_factor`; U-Net widths cover its three resolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub codec_factor: usize,
    pub latent_channels: usize,
    pub unet_widths: [usize; 3],
    pub codec_widths: [usize; 2],
    pub emb_dim: usize,
    pub time_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            codec_factor: 4,
            latent_channels: 4,
            unet_widths: [32, 64, 128],
            codec_widths: [32, 64],
            emb_dim: 128,
            time_dim: 64,
        }
    }
}

impl NetworkConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / self.codec_factor
    }
}

/// Named freeze partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    ThetaDown,
    ThetaMid,
    ThetaUp,
    Phi,
    Cond,
    Codec,
    Fusion,
}

impl Partition {
    pub const ALL: [Partition; 7] = [
        Partition::ThetaDown,
        Partition::ThetaMid,
        Partition::ThetaUp,
        Partition::Phi,
        Partition::Cond,
        Partition::Codec,
        Partition::Fusion,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Partition::ThetaDown => "theta_down",
            Partition::ThetaMid => "theta_mid",
            Partition::ThetaUp => "theta_up",
            Partition::Phi => "phi",
            Partition::Cond => "c",
            Partition::Codec => "codec",
            Partition::Fusion => "fusion",
        }
    }
}

/// Which partitions a training phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainSelection {
    /// Codec autoencoder pretraining.
    Codec,
    /// Unconditional prior: full trunk plus the condition vector.
    Prior,
    /// Foundation: decoder-side trunk and the conditioning branch.
    UpAndPhi,
    /// Alternating halves of stage 2.
    PhiOnly,
    UpOnly,
    /// Cross-latent decoder stage.
    FusionOnly,
}

impl TrainSelection {
    pub fn partitions(&self) -> &'static [Partition] {
        match self {
            TrainSelection::Codec => &[Partition::Codec],
            TrainSelection::Prior => &[
                Partition::ThetaDown,
                Partition::ThetaMid,
                Partition::ThetaUp,
                Partition::Cond,
            ],
            TrainSelection::UpAndPhi => &[Partition::ThetaUp, Partition::Phi],
            TrainSelection::PhiOnly => &[Partition::Phi],
            TrainSelection::UpOnly => &[Partition::ThetaUp],
            TrainSelection::FusionOnly => &[Partition::Fusion],
        }
    }
}

/// Borrowed group of partitions, optimizable as one set.
pub struct MultiParamSet<'a>(pub Vec<&'a mut dyn ParamSet>);

impl ParamSet for MultiParamSet<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(crate::nn::param::ParamView<'_>)) {
        for p in &self.0 {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        for p in &mut self.0 {
            p.visit_mut(f);
        }
    }

    fn zero_grad(&mut self) {
        for p in &mut self.0 {
            p.zero_grad();
        }
    }
}

/// The complete model artifact.
pub struct Model {
    pub config: NetworkConfig,
    pub codec: Codec,
    pub fusion: Fusion,
    pub unet: Unet,
    pub phi: Phi,
    pub cond: CondVector,
    /// Seed of the fixed inference noise z_T; part of the artifact so
    /// inference is deterministic.
    pub noise_seed: u64,
    pub stages_completed: BTreeSet<String>,
}

/// Inference outcome flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferStatus {
    Trained,
    /// Parameters have not completed foundation training; the output is a
    /// codec round-trip of noise through identity paths.
    UntrainedWarning,
}

impl Model {
    pub fn new(config: NetworkConfig, seed: u64) -> Self {
        let mut init_codec = rng::stream(seed, "init-codec");
        let mut init_unet = rng::stream(seed, "init-unet");
        let mut init_phi = rng::stream(seed, "init-phi");
        let mut init_cond = rng::stream(seed, "init-cond");
        let mut init_fusion = rng::stream(seed, "init-fusion");
        Self {
            codec: Codec::new(&config, &mut init_codec),
            fusion: Fusion::new(&config, &mut init_fusion),
            unet: Unet::new(&config, &mut init_unet),
            phi: Phi::new(&config, &mut init_phi),
            cond: CondVector::new(config.emb_dim, &mut init_cond),
            config,
            noise_seed: seed,
            stages_completed: BTreeSet::new(),
        }
    }

    pub fn partition(&self, p: Partition) -> &dyn ParamSet {
        match p {
            Partition::ThetaDown => &self.unet.down,
            Partition::ThetaMid => &self.unet.mid,
            Partition::ThetaUp => &self.unet.up,
            Partition::Phi => &self.phi,
            Partition::Cond => &self.cond,
            Partition::Codec => &self.codec,
            Partition::Fusion => &self.fusion,
        }
    }

    /// Mutable borrows of the partitions a selection trains.
    pub fn select_mut(&mut self, sel: TrainSelection) -> MultiParamSet<'_> {
        match sel {
            TrainSelection::Codec => MultiParamSet(vec![&mut self.codec]),
            TrainSelection::Prior => MultiParamSet(vec![
                &mut self.unet.down,
                &mut self.unet.mid,
                &mut self.unet.up,
                &mut self.cond,
            ]),
            TrainSelection::UpAndPhi => MultiParamSet(vec![&mut self.unet.up, &mut self.phi]),
            TrainSelection::PhiOnly => MultiParamSet(vec![&mut self.phi]),
            TrainSelection::UpOnly => MultiParamSet(vec![&mut self.unet.up]),
            TrainSelection::FusionOnly => MultiParamSet(vec![&mut self.fusion]),
        }
    }

    pub fn zero_grad_all(&mut self) {
        self.codec.zero_grad();
        self.fusion.zero_grad();
        self.unet.down.zero_grad();
        self.unet.mid.zero_grad();
        self.unet.up.zero_grad();
        self.phi.zero_grad();
        self.cond.zero_grad();
    }

    /// Content hash of every partition, for freeze contracts.
    pub fn partition_hashes(&self) -> BTreeMap<String, String> {
        Partition::ALL
            .iter()
            .map(|p| {
                (
                    p.name().to_string(),
                    crate::nn::param::hash_hex(&self.partition(*p).content_hash()),
                )
            })
            .collect()
    }

    /// Initializes the conditioning branch as a trainable copy of the trunk.
    pub fn init_phi_from_trunk(&mut self) {
        let Model { unet, phi, .. } = self;
        phi.copy_from_trunk(unet);
    }

    /// Encoder ℰ: image to (latent, skip features).
    pub fn encode(&self, img: &ImageTensor) -> Result<(LatentTensor, SkipFeatureSet)> {
        let chw = img.to_chw();
        let (latent, skips, _) = self.codec.encode(&chw, &self.config)?;
        Ok((latent, skips))
    }

    /// One denoiser forward pass. `cond_latent = encode(M)`; `None` runs the
    /// unconditioned trunk (zero-init φ is bitwise equivalent).
    pub fn denoise_one_step(
        &self,
        z_t: &LatentTensor,
        cond_latent: Option<&LatentTensor>,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<(LatentTensor, DenoiseCache)> {
        if t > sched.t_max() {
            return Err(DereflectError::Validation(format!(
                "step {t} out of range 0..={}",
                sched.t_max()
            )));
        }
        if let Some(cond) = cond_latent {
            if cond.dim() != z_t.dim() {
                return Err(DereflectError::DimensionMismatch(format!(
                    "z_t {:?} vs cond latent {:?}",
                    z_t.dim(),
                    cond.dim()
                )));
            }
        }
        let emb = self.unet.embed(t, &self.cond, &self.config);
        let (phi_out, phi_cache) = match cond_latent {
            Some(cond) => {
                let (inj, cache) = unet::phi_forward(&self.phi, z_t, cond, &emb.emb_act);
                (Some(inj), Some(cache))
            }
            None => (None, None),
        };
        let (out, trunk) = unet::trunk_forward(&self.unet, z_t, &emb.emb_act, phi_out.as_ref());
        Ok((
            out,
            DenoiseCache {
                emb,
                phi: phi_cache,
                trunk,
            },
        ))
    }

    /// Backward of [`Model::denoise_one_step`]; accumulates gradients into
    /// every touched partition (updates are masked by the trainable set).
    pub fn denoise_backward(&mut self, cache: &DenoiseCache, g_out: &LatentTensor) {
        let mut g_emb_act = ndarray::Array1::zeros(self.config.emb_dim);
        let conditioned = cache.phi.is_some();
        let g_inj = unet::trunk_backward(
            &mut self.unet,
            &cache.trunk,
            g_out,
            &cache.emb.emb_act,
            &mut g_emb_act,
            conditioned,
        );
        if let (Some(g_inj), Some(phi_cache)) = (g_inj, cache.phi.as_ref()) {
            unet::phi_backward(
                &mut self.phi,
                phi_cache,
                &g_inj,
                &cache.emb.emb_act,
                &mut g_emb_act,
            );
        }
        self.unet
            .embed_backward(&cache.emb, &g_emb_act, &mut self.cond);
    }

    /// Cross-latent decode: latent plus skip features to an image in [0,1].
    pub fn decode_cross_latent(
        &self,
        z: &LatentTensor,
        skips: &SkipFeatureSet,
    ) -> Result<ImageTensor> {
        self.check_skip_scales(skips)?;
        let (out, _) = self.codec.decode(z, Some((skips, &self.fusion)));
        ImageTensor::from_chw_clamped(&out)
    }

    /// Plain decode through the codec decoder only.
    pub fn decode_plain(&self, z: &LatentTensor) -> Result<ImageTensor> {
        let (out, _) = self.codec.decode(z, None);
        ImageTensor::from_chw_clamped(&out)
    }

    fn check_skip_scales(&self, skips: &SkipFeatureSet) -> Result<()> {
        let (cq, hq, _) = skips.quarter.dim();
        let (ch, hh, _) = skips.half.dim();
        let (cf, hf, _) = skips.full.dim();
        let ok = cq == self.config.codec_widths[1]
            && ch == self.config.codec_widths[1]
            && cf == self.config.codec_widths[0]
            && hh == 2 * hq
            && hf == 4 * hq;
        if !ok {
            return Err(DereflectError::DimensionMismatch(
                "skip feature set does not match decoder stages".into(),
            ));
        }
        Ok(())
    }

    /// The fixed fully-noised inference input z_T.
    pub fn inference_z_t(&self) -> LatentTensor {
        let s = self.config.latent_size();
        sample_noise(
            (self.config.latent_channels, s, s),
            &mut rng::stream(self.noise_seed, "inference-zt"),
        )
    }

    /// Full deterministic pipeline: encode, one-step denoise at t = 0 from
    /// the fixed z_T, cross-latent decode.
    pub fn infer(
        &self,
        mixed: &ImageTensor,
        sched: &NoiseSchedule,
    ) -> Result<(ImageTensor, InferStatus)> {
        let (cond_latent, skips) = self.encode(mixed)?;
        let z_t = self.inference_z_t();
        let (pred, _) = self.denoise_one_step(&z_t, Some(&cond_latent), 0, sched)?;
        let out = self.decode_cross_latent(&pred, &skips)?;
        let status = if self.stages_completed.contains("foundation") {
            InferStatus::Trained
        } else {
            InferStatus::UntrainedWarning
        };
        Ok((out, status))
    }
}

/// Bitwise equality of two latents.
pub fn latents_bitwise_equal(a: &Array3<f32>, b: &Array3<f32>) -> bool {
    a.dim() == b.dim()
        && a.iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::textures;
    use crate::nn::AdamW;

    fn toy_model(seed: u64) -> Model {
        Model::new(NetworkConfig::default(), seed)
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let model = toy_model(1);
        let img = textures::transmission_texture(64, 64, &mut rng::stream(2, "img"));
        let (latent, skips) = model.encode(&img).unwrap();
        assert_eq!(latent.dim(), (4, 16, 16));
        assert_eq!(skips.full.dim(), (32, 64, 64));
        assert_eq!(skips.half.dim(), (64, 32, 32));
        assert_eq!(skips.quarter.dim(), (64, 16, 16));
        assert!(latent.iter().all(|v| v.is_finite()));
        let (latent2, _) = model.encode(&img).unwrap();
        assert!(latents_bitwise_equal(&latent, &latent2));

        let odd = textures::transmission_texture(66, 64, &mut rng::stream(3, "img"));
        assert!(model.encode(&odd).is_err());
    }

    #[test]
    fn zero_image_yields_finite_latent() {
        let model = toy_model(4);
        let img = ImageTensor::zeros(64, 64).unwrap();
        let (latent, _) = model.encode(&img).unwrap();
        assert!(latent.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_conv_identity_for_conditioning() {
        let model = toy_model(5);
        let sched = NoiseSchedule::toy().unwrap();
        let img = textures::transmission_texture(64, 64, &mut rng::stream(6, "img"));
        let (cond, _) = model.encode(&img).unwrap();
        let z_t = model.inference_z_t();
        for t in [0usize, 17, 64] {
            let (with, _) = model.denoise_one_step(&z_t, Some(&cond), t, &sched).unwrap();
            let (without, _) = model.denoise_one_step(&z_t, None, t, &sched).unwrap();
            assert!(
                latents_bitwise_equal(&with, &without),
                "conditioned output differs at init, t={t}"
            );
        }
    }

    #[test]
    fn zero_conv_identity_for_cross_latent_decode() {
        let model = toy_model(7);
        let img = textures::transmission_texture(64, 64, &mut rng::stream(8, "img"));
        let (latent, skips) = model.encode(&img).unwrap();
        let fused = model.decode_cross_latent(&latent, &skips).unwrap();
        let plain = model.decode_plain(&latent).unwrap();
        assert!(
            fused
                .data()
                .iter()
                .zip(plain.data().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "cross-latent decode differs from plain decode at init"
        );
    }

    #[test]
    fn decode_output_stays_in_range() {
        let model = toy_model(9);
        let z = crate::diffusion::sample_noise((4, 16, 16), &mut rng::stream(10, "z"));
        let out = model.decode_plain(&(z * 3.0)).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn denoise_is_deterministic() {
        let model = toy_model(11);
        let sched = NoiseSchedule::toy().unwrap();
        let img = textures::transmission_texture(64, 64, &mut rng::stream(12, "img"));
        let (cond, _) = model.encode(&img).unwrap();
        let z_t = model.inference_z_t();
        let (a, _) = model.denoise_one_step(&z_t, Some(&cond), 3, &sched).unwrap();
        let (b, _) = model.denoise_one_step(&z_t, Some(&cond), 3, &sched).unwrap();
        assert!(latents_bitwise_equal(&a, &b));
    }

    #[test]
    fn conditioning_reacts_after_one_phi_step() {
        let mut model = toy_model(13);
        let sched = NoiseSchedule::toy().unwrap();
        let img = textures::transmission_texture(64, 64, &mut rng::stream(14, "img"));
        let (cond, _) = model.encode(&img).unwrap();
        let z_t = model.inference_z_t();

        // One optimizer step on phi with a gradient that reaches the zero convs.
        let (pred, cache) = model.denoise_one_step(&z_t, Some(&cond), 5, &sched).unwrap();
        model.zero_grad_all();
        let g = pred.mapv(|v| 2.0 * v / pred.len() as f32);
        model.denoise_backward(&cache, &g);
        let mut opt = AdamW::new(1e-2, 0.0);
        opt.step(&mut model.select_mut(TrainSelection::PhiOnly));

        let (base, _) = model.denoise_one_step(&z_t, Some(&cond), 5, &sched).unwrap();
        let mut perturbed = cond.clone();
        perturbed += 0.25;
        let (moved, _) = model
            .denoise_one_step(&z_t, Some(&perturbed), 5, &sched)
            .unwrap();
        let delta: f64 = base
            .iter()
            .zip(moved.iter())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        assert!(delta > 0.0, "conditioning has no effect after training phi");
    }

    #[test]
    fn backprop_reaches_selected_partitions_only() {
        let mut model = toy_model(15);
        let sched = NoiseSchedule::toy().unwrap();
        let img = textures::transmission_texture(64, 64, &mut rng::stream(16, "img"));
        let (cond, _) = model.encode(&img).unwrap();
        let z_t = model.inference_z_t();
        let before = model.partition_hashes();

        let (pred, cache) = model.denoise_one_step(&z_t, Some(&cond), 2, &sched).unwrap();
        model.zero_grad_all();
        let g = pred.mapv(|v| 2.0 * v / pred.len() as f32);
        model.denoise_backward(&cache, &g);
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.step(&mut model.select_mut(TrainSelection::UpAndPhi));

        let after = model.partition_hashes();
        assert_ne!(before["theta_up"], after["theta_up"]);
        assert_ne!(before["phi"], after["phi"]);
        for frozen in ["theta_down", "theta_mid", "c", "codec", "fusion"] {
            assert_eq!(before[frozen], after[frozen], "partition {frozen} moved");
        }
    }

    #[test]
    fn infer_is_deterministic_and_flags_untrained() {
        let model = toy_model(17);
        let sched = NoiseSchedule::toy().unwrap();
        let img = textures::transmission_texture(64, 64, &mut rng::stream(18, "img"));
        let (a, status) = model.infer(&img, &sched).unwrap();
        let (b, _) = model.infer(&img, &sched).unwrap();
        assert_eq!(status, InferStatus::UntrainedWarning);
        assert!(a
            .data()
            .iter()
            .zip(b.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
