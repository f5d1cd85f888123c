//! Unified multi-domain 3D volume-to-volume translation.
//!
//! One conditional generator maps a source-domain volume into any requested
//! target domain, guided by an anatomical MR volume and a one-hot domain
//! label volume. An auxiliary-classifier discriminator scores realism and
//! tracer class; training combines paired L1 supervision, adversarial,
//! classification, and cyclic-reconstruction terms. The crate also ships
//! the data pipeline (volume IO, normalization, fold splitting, a synthetic
//! phantom generator), whole-volume sliding-window inference, and the
//! NMSE/SSIM/ROI-bias evaluation harness with report and plot emission.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod train;
pub mod volume;

pub use config::{DuseFusion, TrainConfig};
pub use error::{Error, ErrorKind, Result};
pub use volume::{DomainLabel, NormRecord, Study, TracerId, TranslationTask, Volume};
