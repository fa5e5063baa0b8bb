use thiserror::Error;

/// Errors raised by the solvers and the simulators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unknown builtin model `{0}` (expected one of: ou_quadratic, lq_clamped, double_well, bounded_nm)")]
    UnknownModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid has {nodes} nodes, above the cap of {cap}")]
    Resource { nodes: usize, cap: usize },

    #[error("scheme is not monotone at node {node}: {reason}")]
    Monotonicity { node: usize, reason: String },

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e}, tolerance {tol:e})")]
    EigenConvergence {
        iterations: usize,
        residual: f64,
        tol: f64,
        /// Last iterate, normalized at the origin node.
        last: Box<crate::eigensolve::EigenPair>,
    },

    #[error("policy iteration did not settle after {sweeps} sweeps (last change in lambda {delta:e})")]
    PolicyConvergence {
        sweeps: usize,
        delta: f64,
        previous: Box<crate::discretize::Policy>,
        current: Box<crate::discretize::Policy>,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("sweep failed at radius {radius}: {source}")]
    Sweep {
        radius: f64,
        #[source]
        source: Box<Error>,
        partial: Vec<crate::continuation::SweepRow>,
    },

    #[error("estimator undefined: {0}")]
    EstimatorUndefined(String),

    #[error("unreliable estimate: {truncated_fraction:.3} of paths truncated")]
    Unreliable { truncated_fraction: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
