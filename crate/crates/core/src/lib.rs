//! Off-policy evaluation and constrained policy improvement for finite-horizon
//! tabular MDPs with low-rank structure.
//!
//! The estimator runs backward Q-iteration and, at every step, completes the
//! partially observed Q matrix with a max-norm-minimizing matrix estimation
//! program. The crate also ships the operator-discrepancy measures that
//! control its error and seeded experiment harnesses.

pub mod data;
pub mod discrepancy;
pub mod error;
pub mod experiment;
pub mod matrix_estimation;
pub mod mdp;
pub mod ope;
pub mod policy_opt;
pub mod simplex;

pub use error::{Error, Result};
pub use mdp::{LowRankMDP, Mat, OccupancyMeasure, Policy};
