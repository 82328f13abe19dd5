//! Latent functional PARAFAC decomposition for sparse, irregularly sampled
//! functional tensors.
//!
//! The pipeline: [`covariance::assemble`] smooths means and pairwise
//! covariance surfaces of a [`data::Dataset`], [`model::fit_with_covariance`]
//! runs the block relaxation from a CP initialization, and
//! [`inference::predict_scores`] gives per-sample scores and trajectories.
//! Tensor modes are zero-based throughout the API.

pub mod covariance;
pub mod cpd;
pub mod data;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod selection;
pub mod simulation;
pub mod smoothing;
pub mod tensor;

pub use covariance::{assemble, CovarianceConfig, CovarianceField, QuadratureRule};
pub use data::{load_csv, write_csv, Dataset, LongitudinalSample};
pub use error::{Error, Result};
pub use inference::{predict_scores, reconstruct, ScorePrediction};
pub use model::{fit, fit_with_covariance, FitConfig, FitReport, LfParafacModel};
pub use tensor::{DenseTensor, FactorSet};
