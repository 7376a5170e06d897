//! Self-supervised speaker verification at desk scale.
//!
//! The pipeline has three training stages that share one small embedding
//! network:
//!
//! 1. [`dino`]: teacher/student self-distillation over multi-crop views of
//!    unlabeled utterances.
//! 2. [`clustering`]: embeddings from the current model are clustered with
//!    cosine k-means and the cluster indices become pseudo speaker labels for
//!    [`supervised`] AAM-softmax training, repeated for a few iterations.
//! 3. [`supervised::large_margin_finetune`]: post-pooling layers are tuned
//!    with a larger margin on fixed-length chunks.
//!
//! Trials are scored with cosine similarity and summarized by equal error
//! rate ([`scoring`]). A deterministic synthetic corpus ([`corpus`]) makes
//! every stage testable without external data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod corpus;
pub mod dino;
pub mod error;
pub mod features;
pub mod network;
pub mod real;
pub mod rng;
pub mod scoring;
pub mod supervised;
pub mod testkit;
pub mod views;

pub use clustering::{ClusterAssignment, EmbeddingTable, IterationPlan};
pub use corpus::{CorpusManifest, TrialList, UtteranceRecord, Waveform};
pub use dino::{DinoConfig, DinoOutcome};
pub use error::{Error, Result};
pub use features::{FeatureConfig, FeatureMatrix};
pub use network::{Checkpoint, Gradients, NetworkConfig, ParamSet, ProjectionConfig};
pub use real::Real;
pub use scoring::ScoreReport;
pub use supervised::{AamConfig, TrainConfig};
pub use views::{AugmentConfig, CropConfig, ViewSet};
