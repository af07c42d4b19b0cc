//! Learn grounded STRIPS action models from unlabeled image-pair transitions.
//!
//! The pipeline: a discrete VAE maps images to F-bit propositional states, a
//! cube-space autoencoder constrains latent dynamics to STRIPS-compatible
//! add/delete effects, extraction turns the trained network into grounded
//! PDDL, and a built-in A* solves image-specified instances whose plans are
//! decoded back to images and checked against ground-truth domain rules.

pub mod discrete;
pub mod domains;
pub mod extraction;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod strips;
pub mod tape;
pub mod validate;

pub use discrete::{AnnealSchedule, LatentConfig};
