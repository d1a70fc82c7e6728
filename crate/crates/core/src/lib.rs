//! Learning individual labels from loose aggregate constraints.
//!
//! Instances are grouped into *bags*, and supervision arrives only as
//! bounds on bag label means, bounds on differences between bag means,
//! or bounds on their ratios. The crate provides:
//!
//! - [`problem`]: datasets, bags, constraint sets and their validation.
//! - [`qp`]: closed-form ridge, the hat matrix and an operator-splitting QP solver.
//! - [`regression`]: the two-step and feasibility regression fits, with slack relaxation.
//! - [`classification`]: max-margin binary classification over relaxed latent labels.
//! - [`cvcv`]: label-free selection of the ridge regularizer by held-out constraint violation.
//! - [`crowd`]: aggregation of crowd guesses into constraint sets.
//! - [`synthetic`]: tercile bags, perturbed constraints and linear data generators.
//! - [`eval`]: cross-validated evaluation, ridge baselines and sensitivity sweeps.
//! - [`cli`]: the `ballpark` command-line entry point.

pub mod classification;
pub mod cli;
pub mod crowd;
pub mod cvcv;
pub mod error;
pub mod eval;
pub mod io;
pub mod problem;
pub mod qp;
pub mod regression;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
pub use problem::{
    bag_mean, positive_proportion, validate_problem, Bag, BallparkProblem, BoundConstraint,
    ConstraintSet, Dataset, Diagnostic, DiagnosticKind, DiffConstraint, FeatureMap,
    RatioConstraint, Solution, SolveStatus,
};
pub use qp::{hat_matrix, ridge_closed_form, solve_qp, QuadraticProgram, SolverConfig};
