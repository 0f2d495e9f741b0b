//! Failure modes of the estimation pipeline.
//!
//! Every stage reports through the same enum so that callers can map a
//! failure to the stage that produced it without string matching.

use thiserror::Error;

/// Errors raised by model construction, the numerical stages, and queries.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Denominator of the synchronization signal came within the safety
    /// floor of zero at an evaluation point.
    #[error("singular synchronization denominator at x = {x:?}: |mu - nu'x| = {value:.3e} below floor {floor:.3e}")]
    SingularDenominator {
        x: [f64; 4],
        value: f64,
        floor: f64,
    },

    /// A model failed its structural contract (non-Hurwitz current block,
    /// zero denominator constant, infeasible equilibrium, ...).
    #[error("model invalid: {0}")]
    ModelInvalid(String),

    /// Neither gradient sign candidate matched finite differences.
    #[error("gradient sign gate failed: hand-derived mismatch {mismatch_neg:.3e}, opposite sign mismatch {mismatch_pos:.3e}")]
    GradientGateFailed { mismatch_neg: f64, mismatch_pos: f64 },

    /// The matrix handed to the gauge builder has an eigenvalue with
    /// non-negative real part.
    #[error("matrix is not Hurwitz: spectral abscissa {abscissa:.6e}")]
    NotHurwitz { abscissa: f64 },

    /// Gauge construction produced a matrix that failed its definiteness
    /// checks (ill-conditioned input).
    #[error("gauge infeasible: {0}")]
    GaugeInfeasible(String),

    /// An iterative solve ran out of iterations.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// A stationary-point solve converged onto the branch with the wrong
    /// multiplier sign for the requested sense.
    #[error("extremizer converged to the wrong branch: sense {sense}, multiplier {lambda:.6e}")]
    WrongBranch { sense: &'static str, lambda: f64 },

    /// The requested ellipsoid level reaches the singular hyperplane.
    #[error("level {level:.6e} is not safely inside the singularity clearance {clearance:.6e}")]
    LevelUnsafe { level: f64, clearance: f64 },

    /// Step-size control collapsed below its floor.
    #[error("integrator step failure at t = {t:.6e}: step {h:.3e} below floor {floor:.3e}")]
    StepFailure { t: f64, h: f64, floor: f64 },

    /// The algebraic constraint could not be kept consistent (index loss or
    /// a singular iteration matrix).
    #[error("algebraic constraint violation at t = {t:.6e}: {detail}")]
    IndexViolation { t: f64, detail: String },

    /// No attracting cycle was found at the requested disturbance level.
    #[error("no limit cycle at level V = {level:.6e}: {reason}")]
    NoCycle { level: f64, reason: String },

    /// Continuation produced no valid member at all.
    #[error("cycle family is empty: {0}")]
    EmptyFamily(String),

    /// The level-sensitivity pass failed to settle onto a periodic solution.
    #[error("sensitivity pass diverged at level V = {level:.6e} after {revolutions} revolutions")]
    SensitivityDiverged { level: f64, revolutions: usize },

    /// Too many gradient samples were degenerate to interpolate over.
    #[error("gradient recovery degenerate at level V = {level:.6e}: {degenerate} of {total} samples below the determinant floor")]
    GradientDegenerate {
        level: f64,
        degenerate: usize,
        total: usize,
    },

    /// A query left the tabulated range.
    #[error("query out of range: {0}")]
    OutOfRange(String),

    /// The growth surface stayed positive beyond the tabulated range, so the
    /// budget ODE could not be closed.
    #[error("growth table exhausted: phi = {phi:.6e} still positive at V_cc = {vcc:.6e}")]
    GridExhausted { phi: f64, vcc: f64 },

    /// The budget ODE cannot leave the trivial square (growth non-negative
    /// at the corner); the estimate degenerates to the square itself.
    #[error("no extension beyond the trivial square: growth rate {rate:.6e} non-negative at the corner")]
    NoExtension { rate: f64 },

    /// Configuration value rejected before any computation started.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
