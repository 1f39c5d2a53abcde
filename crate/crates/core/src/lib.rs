//! Construction, certification, and benchmarking of worst-case instances for
//! smooth bilevel optimization with a strongly convex quadratic lower level.
//!
//! The library builds a family of bilevel problems
//!
//! ```text
//!     min_x  H(x) = f(x, y*(x)),      y*(x) = argmin_y g(x, y),
//! ```
//!
//! whose hyper-objective hides a long zero chain: any algorithm that only
//! discovers coordinates through first-order oracle replies must spend a
//! query per chain link before it can reach an eps-stationary point. The
//! crate provides
//!
//! * [`hardness`]: the scalar ramp/integral component functions and
//!   numerically certified bounds on their derivatives,
//! * [`tridiag`]: the shifted discrete-Laplacian linear algebra behind the
//!   lower-level quadratic (Thomas solves, closed-form spectra, resolvent
//!   column bounds),
//! * [`instance`]: parameter derivation and exact evaluation of the upper
//!   and lower objectives,
//! * [`oracle`]: deterministic and randomized first-order oracles together
//!   with the zero-respecting span-tracking protocol,
//! * [`hyper`]: closed forms for the hyper-objective, its gradient, and the
//!   stationarity measures,
//! * [`verify`]: the certification suite that checks every inequality the
//!   construction relies on,
//! * [`harness`]: reference algorithms, chain traces, and scaling-law fits.

// Indexed loops mirror the stencil and block arithmetic they implement,
// and `!(x > 0.0)` guards reject NaN where `x <= 0.0` would admit it.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod hardness;
pub mod harness;
pub mod hyper;
pub mod instance;
pub mod oracle;
pub mod tridiag;
pub mod verify;

pub use hardness::{certify_sups, phi, phi_d, psi, psi_d, SupTable};
pub use harness::{
    chain_trace, fit_scaling, report, run_algorithm, Algorithm, AlgorithmSpec, Report, RunConfig,
    RunSummary, RunTrace, ScalingFit,
};
pub use hyper::{
    gap_bound, grad_floor_witness, hessian_norm_estimate, hyper_eval, lower_level_solution,
    stationarity, GapReport, GradFloor, HyperEval,
};
pub use instance::{
    derive_params, eval_f, eval_g, grad_f, grad_g, project_domain, BilevelPoint,
    DerivedInstanceParams, FunctionClassParams, Mode,
};
pub use oracle::{
    deterministic_query, span_update, stochastic_query, variance_estimate, ActivationEvent,
    OracleReply, SupportState, Trigger, Var,
};
pub use tridiag::{
    build_laplacian, resolvent_last_column, spectral_basis, thomas_solve, ResolventColumn,
    SpectralBasis, TridiagSym,
};
pub use verify::{all_passed, run_class_suite, run_suite, CheckResult, CheckStatus};

use thiserror::Error;

/// Errors surfaced by instance derivation, oracle protocol enforcement, and
/// the benchmarking harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Condition number below the smallest value for which the chain has at
    /// least one lower-level block dimension.
    #[error("condition number {kappa:.6} is below the minimum 5 required for a nonempty chain")]
    KappaTooSmall { kappa: f64 },

    /// The accuracy/budget combination yields a chain of length zero.
    #[error("derived chain length T = {t_float:.6} < 1; increase Delta or decrease eps")]
    EmptyChain { t_float: f64 },

    /// A parameter fails its validity range.
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    /// Vector length disagrees with the instance dimensions.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Near-zero pivot during the tridiagonal forward sweep.
    #[error(
        "tridiagonal solve hit pivot {pivot:.3e} at row {index}; system is singular or indefinite"
    )]
    SingularSystem { index: usize, pivot: f64 },

    /// Supremum certification called with a grid too coarse to trust.
    #[error("grid step {step:.3e} exceeds the maximum 1e-4 allowed for supremum certification")]
    GridStepTooCoarse { step: f64 },

    /// A proposed iterate leaves the span the protocol has granted.
    #[error("zero-respecting violation at query {query}: {variable}[{index}] is outside the granted span")]
    ZeroRespectingViolation {
        variable: &'static str,
        index: usize,
        query: usize,
    },

    /// The queried point touches coordinates the support state has never
    /// activated, so the randomized oracle cannot price its reply.
    #[error("oracle protocol violation: {0}")]
    ProtocolViolation(String),

    /// Scaling-law fit asked for with too few grid points.
    #[error("scaling fit needs at least 4 points, got {got}")]
    NotEnoughPoints { got: usize },

    /// A reference algorithm produced non-finite iterates.
    #[error("algorithm {name} diverged at oracle call {call}: {detail}")]
    Divergence {
        name: String,
        call: usize,
        detail: String,
    },

    /// A zero-respecting run finished the chain earlier than the lower bound
    /// allows, which indicates a defect in the construction itself.
    #[error("lower bound violated: zero-respecting run reached eps-stationarity after {calls} oracle calls, below the certified minimum {minimum}")]
    LowerBoundViolated { calls: usize, minimum: usize },
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
