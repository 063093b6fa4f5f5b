//! Engine for reconstructing calibrated event probabilities from per-factor
//! Shapley contributions estimated through paired queries to an evaluation
//! oracle, plus the baselines and metrics needed to evaluate it.
//!
//! The crate is organized around the estimation pipeline:
//!
//! - [`types`]: factors, instances, background sets, task specs
//! - [`shapley`]: logit transforms, exact and permutation-sampled Shapley
//!   values, probability reconstruction, multi-class extension
//! - [`tabular`]: reference-instance imputation and batched contrast tables
//! - [`oracle`]: the evaluation-oracle contract and its backends
//!   (deterministic, noisy synthetic, transcript replay, live chat HTTP)
//! - [`extraction`]: aspect proposal and per-aspect factor summaries for
//!   unstructured tasks
//! - [`baselines`]: n-shot level/score, contrast, and in-context learning
//! - [`metrics`]: AUROC, AUPRC, best F1, accuracy, weighted reliability and ECE
//! - [`datasets`]: CSV ingestion, task configs, balanced sampling,
//!   base-logit resolution, interaction aggregation
//! - [`runs`]: run orchestration, manifests, attribution reports

pub mod baselines;
pub mod datasets;
pub mod error;
pub mod extraction;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod runs;
pub mod shapley;
pub mod tabular;
pub mod types;

pub use error::{Error, Result};
