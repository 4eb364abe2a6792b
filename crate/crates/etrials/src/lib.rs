//! Analysis toolkit for randomized experiments logged in the eight-file
//! E-TRIALS CSV layout.
//!
//! The pipeline runs in four stages:
//!
//! 1. **Ingestion** ([`ingestion`]): parse the per-problem and per-student
//!    log tables, validate them, and join them into one student-level
//!    analysis table with a proximal outcome, an optional distal outcome,
//!    and a covariate matrix.
//! 2. **Cleaning** ([`cleaning`]): drop control-condition rows tagged with
//!    the comparison content code, optionally restrict to students who
//!    requested help, flatten sub-problem rows, and summarize attrition.
//! 3. **Covariate checks** ([`covariates`]): a classification permutation
//!    test for covariate balance between arms, and a near-zero-variance +
//!    pairwise-correlation feature filter.
//! 4. **Estimation** ([`estimators`]): the average treatment effect via a
//!    difference-in-means t-test, a linear mixed-effects regression with a
//!    class random intercept, and the LOOP estimator with leave-one-out
//!    potential-outcome imputation (mean, linear, or random-forest).
//!
//! [`simulation`] generates synthetic trials with known ground truth, and
//! [`report`] assembles the full results tables. Every random procedure
//! takes an explicit seed and produces identical output regardless of the
//! thread count.

pub mod cleaning;
pub mod covariates;
pub mod data_model;
pub mod error;
pub mod estimators;
pub mod forest;
pub mod imputation;
pub mod ingestion;
pub mod report;
pub mod simulation;

pub use data_model::{StudentRecord, TrialDataset};
pub use error::{Error, Result};
pub use estimators::{EstimateResult, EstimatorKind, Outcome};
