//! Continuous-time CUSUM charts for monitoring excess mortality in registry
//! survival data.
//!
//! Total hazard is modelled as a known population hazard from life tables plus
//! an excess hazard `h0(t) exp(beta . x)` attributable to the disease. A chart
//! accumulates the log-likelihood ratio between an out-of-control alternative
//! (proportional, additive or accelerated-time change of the excess hazard)
//! and the in-control model, and signals when its distance above the running
//! minimum exceeds a threshold calibrated by simulation.

// Validation writes `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alternatives;
pub mod calibration;
pub mod chart;
pub mod error;
pub mod excess_model;
pub mod experiments;
pub mod fit;
pub mod lifetable;
pub mod presets;
pub mod records;
pub mod seeding;
pub mod simulate;

pub use alternatives::Alternative;
pub use calibration::{calibrate_threshold, CalibrationResult, MonitoringSetup, SignalSummary};
pub use chart::{run_chart, ChartPath, MonitoringConfig, UpdateScheme};
pub use error::{Error, Result};
pub use excess_model::{
    Baseline, CategoricalVariable, CovariateSchema, CovariateVector, ExcessHazardModel, IndividualExcess,
    PiecewiseBaseline, WeibullBaseline,
};
pub use fit::{fit_excess_model, FitResult, FitSpec};
pub use lifetable::{Demographics, LifeTable, Sex};
pub use records::{EventStatus, PatientRecord};
pub use simulate::{ArrivalProcess, CensoringSpec, CohortSpec, CovariateSource, ShiftScenario};
