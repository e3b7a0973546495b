//! Correlation-assisted missing-data (CAM) estimators.
//!
//! A complete-case estimate is improved by subtracting a weighted difference of
//! statistics computed on the complete cases and on the incompletely observed
//! rows. The crate covers U-statistics, kernel density estimation and
//! local-constant regression, plus a simulation lab.

pub mod combine;
pub mod dataset;
pub mod error;
pub mod kde;
pub mod linalg;
pub mod locreg;
pub mod resample;
pub mod sampling;
pub mod simlab;
pub mod stats;
pub mod ustat;

pub use combine::{combine, mse_difference, optimal_gamma, CamComponents, MseGeometry, OptimalGamma};
pub use dataset::{
    group_by_pattern, ingest_csv, project, select_adjustment_set, AdjustmentSet, CsvSchema,
    MaskedDataset, Pattern, PatternGroups, ProjectedSample, Rec,
};
pub use error::{CamError, Result};
