//! Continual-learning benchmark harness for multi-label classifiers.
//!
//! A small fully-connected network is trained over a class-incremental task
//! stream with one of six regimes (fine-tuning, replay, LwF, pseudo-labeling,
//! LwF with replay, joint training), and after every task it is audited for
//! ROC AUC and for equality-of-opportunity gaps across gender and age groups.
//!
//! - [`model`]: classifier, losses, backpropagation, SGD.
//! - [`datastream`]: manifests, task streams with hidden labels, synthetic data.
//! - [`strategies`]: the training regimes.
//! - [`metrics`]: AUC, F1 thresholds, group TPRs, EO gaps, checkpoint reports.
//! - [`runner`]: seeded experiments, result records, tables and plot series.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datastream;
pub mod error;
pub mod metrics;
pub mod model;
mod rng;
pub mod runner;
pub mod strategies;

pub use error::{Error, Result};
pub use rng::{rng_for, Rng};
