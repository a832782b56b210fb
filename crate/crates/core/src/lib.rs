//! Debiased rating prediction when selection bias and user preferences drift
//! with item age.
//!
//! The crate provides the building blocks for the three experiment pipelines
//! exposed by the `dancer` CLI:
//!
//! * [`dataset`] — rating-log ingestion, item-age binning, user presence,
//!   and per-user train/validation/test splits;
//! * [`model`] — the factorization family (MF, TMF, TTF, TTF++, TMTF) plus
//!   the counting baselines (Constant, Pop, T-Pop, Avg, T-Avg);
//! * [`losses`] — full-information, naive, static-IPS, DANCER and SNIPS
//!   estimators, the observation NLL and perplexity;
//! * [`propensity`] — counting and model-based observation-probability
//!   tables with clipping and rescaling;
//! * [`train`] — seeded mini-batch SGD with early stopping and grid search;
//! * [`oracle`] — exact expectations of every estimator over all observation
//!   patterns on small instances (the unbiasedness ground truth);
//! * [`sim`] — the three-step semi-synthetic world generator;
//! * [`metrics`] — evaluation suites, per-age aggregates and the paired
//!   seed comparison;
//! * [`synth`] — structured synthetic rating logs for tests and benches;
//! * [`experiments`] — the end-to-end runners behind the CLI subcommands.

pub mod dataset;
pub mod experiments;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod propensity;
pub mod sim;
pub mod synth;
pub mod train;

mod error;

pub use error::{Error, Result};
