//! Group-aware membership-inference auditing.
//!
//! The crate trains small classifiers on synthetic data with a controllable
//! spurious correlation, runs shadow-model likelihood-ratio attacks against
//! them, and breaks the resulting privacy leakage down per data group. The
//! same attack and analysis stack accepts score files produced elsewhere.
//!
//! Module map:
//!
//! - [`domain`]: manifests, samples, validation, deterministic RNG streams
//! - [`synthdata`]: spurious-correlation dataset generator and class merging
//! - [`trainer`]: tiny linear/MLP classifiers with ERM, group-DRO and DFR
//! - [`shadows`]: split plans, shadow/target training, score files
//! - [`attack`]: logit confidence, Gaussian fits, online/offline LiRA
//! - [`metrics`]: ROC curves, TPR at low FPR, per-group reports
//! - [`analysis`]: memorization, KDE, CKA, PCA complexity, cross-config matrix
//! - [`experiments`]: scripted end-to-end runs producing report directories

pub mod analysis;
pub mod attack;
pub mod config;
pub mod domain;
pub mod error;
pub mod experiments;
pub mod fsutil;
pub mod metrics;
pub mod plot;
pub mod shadows;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
