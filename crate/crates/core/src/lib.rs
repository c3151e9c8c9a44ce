//! Adjustment for unmeasured spatial confounding with hierarchical spatial
//! bases (thin-plate regression splines, Fourier high-pass filters and
//! Daubechies wavelets), with every amount of adjustment translated into a
//! physical distance, the *effective bandwidth*.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] – lattices, fields, cohorts and location bookkeeping.
//! * [`tprs`] – thin-plate regression spline bases and projections.
//! * [`spectral`] – effective-frequency ordering and high-pass filtering.
//! * [`wavelet`] – periodic 2-D Daubechies transforms and level thresholding.
//! * [`bandwidth`] – loess and the effective bandwidth of each basis.
//! * [`inference`] – OLS/WLS fits with sandwich covariance.
//! * [`adjust`] – adjustment paths over a tuning grid for each basis.
//! * [`selection`] – the six rules for choosing the amount of adjustment.
//! * [`simulation`] – surfaces, calibration and the replication harness.

pub mod adjust;
pub mod bandwidth;
pub mod error;
pub mod grid;
pub mod inference;
mod linalg;
pub mod selection;
pub mod simulation;
pub mod spectral;
pub mod tprs;
pub mod wavelet;

pub use adjust::{AdjustmentPath, BasisKind, PathEntry};
pub use bandwidth::{BandwidthResult, LoessConfig};
pub use error::{Error, Result};
pub use grid::{Cohort, Field, Grid, LocationMultiplicity, SamplingScheme};
pub use inference::{Estimate, FitResult};
pub use selection::{Rule, SelectionOutcome};
pub use simulation::{ConfounderKind, ReplicationSummary, SimulationScenario};
pub use tprs::{BasisMatrix, BasisOrdering, SmoothingMatrix};
pub use wavelet::WaveletDecomposition;
