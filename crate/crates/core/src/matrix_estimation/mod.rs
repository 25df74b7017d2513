//! Max-norm matrix estimation and the norm toolbox it relies on.

pub mod norms;
mod solver;

pub use norms::{max_norm_bound, nuclear_norm, operator_norm, MaxNormBounds};
pub use solver::{solve_me, ConstraintMode, MEProblem, MESolution, SolverConfig};
