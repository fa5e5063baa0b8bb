//! Numerical toolkit for infinite-horizon risk-sensitive control of
//! diffusions: Dirichlet principal-eigenvalue approximation of the ergodic
//! HJB equation, optimal stationary selectors, the ground-state (twisted)
//! diffusion and Monte Carlo checks of its recurrence and ergodicity.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod continuation;
pub mod discretize;
pub mod eigensolve;
pub mod error;
pub mod groundstate;
pub mod model;
pub mod montecarlo;

pub use discretize::{apply, assemble, make_grid, Extension, Grid, OperatorMatrix, Policy};
pub use eigensolve::{
    hjb_residual, principal_eigenpair, solve_hjb_dirichlet, EigenOptions, EigenPair, HjbOptions,
    HjbSolution,
};
pub use error::{Error, Result};
pub use model::{builtin, check_near_monotone, ActionSet, BoxRegion, Model, ModelSpec};
pub use continuation::{estimate_lambda_star, sweep, Regime, SweepOptions, SweepResult, SweepRow};
pub use groundstate::{ergodicity_certificate, Certificate, Classification, GroundState};
pub use montecarlo::{fk_lambda, ControlLaw, Controlled, FieldDrift, FkEstimate, SimConfig};
