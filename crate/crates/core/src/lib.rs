//! Estimation and inference for nonmonotone missing-not-at-random data under
//! the available complete-case missing value (ACCMV) restriction.
//!
//! Records carry a secondary block `X` and a primary block `L`, each with its
//! own missingness pattern. The odds of every incomplete primary pattern
//! against fully observed `L` are modelled by logistic regression on the
//! variables observed in both, which identifies the full-data law. On top of
//! that sit IPW, regression-adjustment and multiply-robust estimators of
//! `E[f(L)]`, a weighted estimating-equation solver for marginal models of
//! `L`, exponential tilting for sensitivity, and the simulation designs used
//! to check all of it.

pub mod analysis;
pub mod data;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod glm;
pub mod inference;
pub mod mpm;
pub mod pattern;
pub mod sensitivity;
pub mod simgen;
pub mod study;

pub use analysis::{Analysis, AnalysisConfig};
pub use data::{build_strata, load_csv, CsvSchema, Dataset, Functional, Record, StratumIndex};
pub use error::{Error, ErrorKind, Result};
pub use estimators::{Method, Odds, OddsSet, Outcome, OutcomeSet, ThetaEstimate};
pub use exec::Execution;
pub use glm::{Basis, FitOptions, ModelFamily};
pub use pattern::{Pattern, PatternPair};
