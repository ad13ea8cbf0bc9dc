use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("division by the zero polynomial")]
    DivisionByZeroPoly,

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value {0} cannot be converted to a rational")]
    NonFinite(f64),

    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("jacobian is numerically singular at iterate {iteration}")]
    SingularJacobian { iteration: usize },

    #[error("system is not differentiable at the requested point: {0}")]
    NotDifferentiable(String),

    #[error("stability is indeterminate: characteristic polynomial has a root on the imaginary axis")]
    MarginalStability,

    #[error("unsupported system: diagonal entry {index} ({poly}) has {reason}")]
    UnsupportedLatent {
        index: usize,
        poly: String,
        reason: &'static str,
    },

    #[error("state outside the valid domain: {0}")]
    InvalidState(String),

    #[error("integration produced a non-finite state at t = {t}")]
    Integration { t: f64 },

    #[error("gram matrix could not be factorized even with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("hyperparameter optimization failed: every start point was unfactorizable")]
    OptimizationFailed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("closed loop aborted at t = {t}: {source}")]
    ClosedLoop {
        t: f64,
        #[source]
        source: Box<Error>,
        partial: Box<crate::mpc::ClosedLoopTrace>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
