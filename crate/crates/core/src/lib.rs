//! Visible-infrared person re-identification at desk scale.
//!
//! The pipeline: a dual-stream backbone with modality-specific stems and
//! shared stages ([`backbone`]), multi-scale feature refinement over the
//! shallow stages ([`mpfr`]), a cross-then-self attention cascade
//! ([`sdce`]), GeM pooling with a BN neck, and center-guided metric losses
//! ([`losses`]). [`metrics`] implements CMC/mAP retrieval evaluation and
//! [`harness`] ties everything into training, ablation and checkpointing.

pub mod autograd;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mpfr;
pub mod nn;
pub mod sdce;

pub use error::{Error, Result};
