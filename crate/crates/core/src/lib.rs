//! Layer-wise gradient rescaling for deep physics-informed networks.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense arrays, seeded RNG, power iteration.
//! - [`network`]: MLPs with exact input-derivative channels and reverse-mode
//!   parameter gradients through them.
//! - [`residuals`]: Burgers, Poisson and Helmholtz residual vectors with
//!   `L = ½‖r‖²`, reference solutions and error metrics.
//! - [`optim`]: the StableGrad rescaling rule and its variants, the sign
//!   baseline, SGD/AdamW and learning-rate schedules, the training loop.
//! - [`diagnostics`]: residual Jacobians, effective kernels, Rayleigh
//!   quotients and the local-decrease margin.
//! - [`harness`]: experiment configs, presets, run orchestration and the
//!   on-disk formats.

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod optim;
pub mod residuals;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, DenseVector, SeededRng};
pub use network::{BlockMode, GradientBlocks, MlpNetwork};
pub use residuals::{ProblemSpec, ReferenceField, ResidualVector};
