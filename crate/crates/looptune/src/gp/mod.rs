//! Gaussian process regression with calibrated confidence scaling.
//!
//! The pieces here are deliberately plain: ARD kernels, exact conditioning
//! through a jittered Cholesky factorization that supports row appends,
//! evidence maximization for hyperparameters, and the confidence multiplier
//! used to turn posterior standard deviations into error bounds.

mod calibration;
mod fit;
mod kernel;
pub(crate) mod linalg;
mod multi;
mod posterior;
mod serialize;

pub use calibration::{calibration_beta, per_output_confidence, CalibrationConfig};
pub use fit::{fit_hyperparameters, fit_hyperparameters_shared, log_marginal, FitConfig, FitReport};
pub use kernel::{KernelKind, KernelSpec};
pub use multi::{MultiOutputGp, OutputCalibration};
pub use posterior::{GpDataset, GpPosterior, PriorMean};
pub use serialize::{
    dataset_from_lines, dataset_to_lines, kernel_from_line, kernel_to_line,
};
