//! Counterfactual outcomes for experiments without a live control group.
//!
//! Treated units' untreated outcomes are predicted from a large pool of
//! untreated donors in two phases: covariate nearest-neighbor filtering
//! ([`matching`]), then a vertical regression on the donors' outcome
//! histories ([`regress`]), tuned on the pre-treatment window ([`tuning`]).
//! [`effects`] turns predictions into average and per-unit effects, and
//! [`validation`] checks the whole procedure against experiments that do
//! have a control group, including synthetic ones.

pub mod effects;
pub mod error;
pub mod matching;
pub mod panel;
pub mod pipeline;
pub mod regress;
pub mod seed;
pub mod tuning;
pub mod validation;

pub use error::{Error, Result};
pub use panel::{CovariateTable, PanelMatrix};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineResult};
pub use regress::{CounterfactualPrediction, ModelSpec};
