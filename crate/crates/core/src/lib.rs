//! Multimodal classification when each modality was trained on a different
//! subset of the class space.
//!
//! The pipeline has three stages:
//!
//! - [`osrs`]: per-modality ensembles of mappers into a shared semantic space,
//!   classified by scaled cosine similarity against class embeddings, so that
//!   classes a modality never saw still receive meaningful scores.
//! - [`dmss`]: ensemble entropy statistics that pick the dominant modality for
//!   each sample.
//! - [`csmf`]: fusion that adds the auxiliary modality's logits, reweighted by a
//!   top-k pruned class-similarity matrix, to the dominant modality's logits.
//!
//! [`dataset`], [`training`], [`evaluation`] and [`harness`] provide the
//! synthetic benchmark, the training loop, the evaluation protocol with its
//! baselines and ablations, and the run orchestration used by the `mmhcl` CLI.

pub mod csmf;
pub mod dataset;
pub mod dmss;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod harness;
pub mod numerics;
pub mod osrs;
pub mod semantic_space;
pub mod training;

mod modality;

pub use error::{Error, Result};
pub use exec::Execution;
pub use modality::Modality;
