//! Stochastic variational inference for temporal Poisson factorisation.
//!
//! Counts `y_dv` are modelled as `Poisson(sum_k theta_dk * exp(h_kv,t_d))`
//! where each term intensity sequence `h_kv` follows a shifted AR(1) prior.
//! Document intensities and all hyperpriors are fitted by coordinate ascent,
//! the AR sequences by Adam on the exact, closed-form ELBO.

pub mod advi;
pub mod armath;
pub mod cavi;
pub mod corpus;
pub mod dpf;
pub mod elbo;
pub mod error;
pub mod postprocess;
pub mod rng;
pub mod special;
pub mod state;
pub mod synthgen;
pub mod trainer;

pub use corpus::{Batch, Corpus};

pub use error::{Result, TpfError};

