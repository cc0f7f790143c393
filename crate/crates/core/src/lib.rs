//! Spike-and-slab variational Bayes for sparse linear regression.
//!
//! Two solvers share one model: [`componentwise`] updates one feature at a
//! time, [`batch`] solves for all slab means jointly and freezes inclusion
//! probabilities that reach the truncation bounds. Around them sit
//! cross-validation of the slab variance ([`tuning`]), simulation designs and
//! metrics ([`simgen`], [`bench`]) and large-sample checks ([`consistency`]).

pub mod batch;
pub mod bench;
pub mod cli;
pub mod componentwise;
pub mod consistency;
pub mod elbo;
pub mod error;
pub mod inference;
pub mod model;
pub mod rng;
pub mod simgen;
pub mod solver;
pub mod tuning;

pub use batch::{fit_batch, BatchConfig};
pub use componentwise::{fit_componentwise, ComponentwiseConfig};
pub use error::{Error, Result};
pub use inference::{Algorithm, FitResult};
pub use model::{standardize, Hyperparameters, RawDataset, StandardizedDataset, VariationalState};
pub use solver::{fit, SolverConfig};
