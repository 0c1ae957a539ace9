use thiserror::Error;

/// Errors produced by the numerical toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("empty block list")]
    EmptyBlockList,

    #[error("singular jacobian on the sampled region (condition number {cond:.3e})")]
    SingularJacobian { cond: f64 },

    #[error("step size underflow at t = {t:.6e} (h = {h:.3e})")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("no hit within horizon {horizon}")]
    HorizonExceeded { horizon: f64 },

    #[error("event refinement failed to converge (residual {residual:.3e})")]
    RefinementFailed { residual: f64 },

    #[error("point is not on the target orbit (distance {distance:.3e})")]
    NotOnOrbit { distance: f64 },

    #[error("value is not regular: rank dF = {rank}, expected {expected}")]
    NotRegular { rank: usize, expected: usize },

    #[error("no convergence after {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("converged to rank {got}, target was {target}")]
    WrongRank { got: usize, target: usize },

    #[error("degenerate critical point: {0}")]
    Degenerate(String),

    #[error("eigenvalue solver failure")]
    EigenFailure,

    #[error("critical value: w = 0")]
    CriticalValue,

    #[error("w on the branch cut (arg {arg:.6})")]
    OnBranchCut { arg: f64 },

    #[error("closure residual {residual:.3e} above tolerance {tol:.3e}")]
    ClosureFailed { residual: f64, tol: f64 },

    #[error("grid too small: need at least 3 points per axis")]
    GridTooSmall,

    #[error("integration paths disagree by {residual:.3e} (tolerance {tol:.3e})")]
    PathsDisagree { residual: f64, tol: f64 },

    #[error("ill-conditioned least-squares system (condition number {cond:.3e})")]
    IllConditionedFit { cond: f64 },

    #[error("basis matching ambiguity at loop step {step}: best jump {best:.3e}, runner-up {runner_up:.3e}")]
    MatchingAmbiguity { step: usize, best: f64, runner_up: f64 },

    #[error("monodromy entries not integral: max rounding error {error:.3e}")]
    NotIntegral { error: f64 },

    #[error("monodromy matrix is not unimodular (det = {det})")]
    NotUnimodular { det: i64 },

    #[error("unsupported torus orbit: {0}")]
    UnsupportedOrbit(String),

    #[error("system has no focus-focus pair in the leading components")]
    NoFocusFocusPair,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
