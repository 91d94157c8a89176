//! Desk-scale toolkit for single-image reflection removal.
//!
//! The pipeline mirrors a one-step-diffusion restoration system end to end:
//!
//! * [`datagen`] — synthetic (transmission, reflection, mixed) triples via a
//!   nonlinear mixing model, with realism scoring and rank filtering.
//! * [`align`] — keypoint matching plus RANSAC homography registration of
//!   mixed images against their ground-truth transmission layers.
//! * [`diffusion`] — noise schedule, forward noising, and the full set of
//!   training objectives (one-step, consistency, reconstruction).
//! * [`network`] — latent codec, conditioned one-step denoiser with a
//!   zero-convolution conditioning branch, and a cross-latent decoder.
//! * [`trainer`] — stage-0 prior pretraining plus the three-stage
//!   progressive schedule with parameter-partition freezing.
//! * [`metrics`] — PSNR/SSIM benchmark evaluation harness.
//! * [`cli`] — the `dereflect` binary wiring everything together.
//!
//! All randomness is drawn from named, seeded streams; sequential runs are
//! bitwise reproducible.

pub mod align;
pub mod cli;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod img;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{DereflectError, Result};
pub use img::ImageTensor;
