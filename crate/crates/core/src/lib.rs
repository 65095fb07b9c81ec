//! Identification of process and measurement noise covariances of linear
//! time-varying systems by the measurement difference method.
//!
//! Residuals built from windows of measurements and controls depend only on
//! the noise. Their second moments are linear in the unique entries of `Q`
//! and `R`, which are then estimated by (weighted) least squares, either in
//! batch or recursively.

pub mod error;
pub mod estimators;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod recursive;
pub mod stack_ops;
pub mod vec_maps;

pub use error::{MdmError, Result};
pub use estimators::{EstimateReport, Method, RegressionDesign, RegressionSystem};
pub use model::{InitialState, LtvModel, NoiseSpec, StepMatrices, Trajectory};
pub use stack_ops::{StackKernels, WindowSpec};
pub use vec_maps::{CovLayout, UniqueCovVector};
