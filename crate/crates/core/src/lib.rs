//! srcd-core — bottom-up signet-ring-cell detection with semi-supervised training.
//!
//! The pipeline stages are:
//!
//! 1. **synthgen** – synthetic pathology-like regions with complete ground
//!    truth plus a crowd-biased annotation-omission model.
//! 2. **labelgen** – inscribed-ellipse 3-class pixel targets from box
//!    annotations, and the label-merge rules used by self-training.
//! 3. **segmodel** – two small encoder-decoder variants trained with a
//!    combined cross-entropy / soft-IOU loss; sliding-window inference.
//! 4. **instancer** – random-walker instancing on the 3-class mask (inner
//!    components are seeds, edge pixels are resolved by Dirichlet solves).
//! 5. **semisup** – self-training, self-training-extra and two-model
//!    cooperative-training round protocols.
//! 6. **evalkit** – collective/instance recall, normal-region false
//!    positives, instance FROC, and easy/hard k-fold plans.
//! 7. **datastore** – on-disk dataset, annotation, label, checkpoint and run
//!    formats with content hashing.
//!
//! Numeric kernels are generic over the scalar type via [`scalar::Real`]
//! (f32 for training, f64 for gradient checks and walker solves); the
//! concrete pipeline types are aliased at the crate root.

pub mod datastore;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod imaging;
pub mod instancer;
pub mod labelgen;
pub mod rng;
pub mod scalar;
pub mod segmodel;
pub mod semisup;
pub mod synthgen;

pub use error::{Error, Result};

/// Class-probability map as produced by the segmentation model.
pub type ProbMap = imaging::ProbMapOf<f32>;

/// Model parameters of the concrete (trained, checkpointed) pipeline.
pub type ModelParams = segmodel::ModelParamsOf<f32>;
