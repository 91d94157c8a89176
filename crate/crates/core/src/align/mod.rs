//! Registration of mixed images against ground-truth transmissions.
//!
//! The pipeline is keypoint detection and matching (a compact SIFT-style
//! detector-descriptor), robust homography estimation under RANSAC with a
//! normalized-DLT refit, and bilinear warping into the reference frame.

pub mod features;
pub mod homography;
pub mod warp;

pub use features::{detect_and_match, FeatureParams, KeypointMatch};
pub use homography::{estimate_homography, Homography, RansacParams};
pub use warp::{warp_to_reference, WarpOutput};
