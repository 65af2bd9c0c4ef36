//! Saliency-guided contrastive learning on scene images.
//!
//! The pipeline alternates two steps. Saliency maps are produced by solving a
//! normalized-cut relaxation over the self-similarity graph of encoder
//! features ([`ncut`]); thresholded regions are scored and sampled by saliency
//! ([`regions`]) and turned into positive crop pairs ([`crops`]). A small
//! online/target network ([`model`]) is then trained with a saliency-weighted
//! intra-image plus memory-queue inter-image objective ([`loss`]). The
//! [`harness`] ties the two steps together on synthetic scenes that carry
//! ground-truth masks.

pub mod crops;
pub mod error;
pub mod featmap;
pub mod harness;
pub mod loss;
pub mod model;
pub mod ncut;
pub mod regions;
pub mod rng;

pub use error::{Error, Result};
