use thiserror::Error;

/// Errors raised by model construction, solvers and the experiment tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid reward parameters: {0}")]
    InvalidParams(String),

    #[error("invalid generator settings: {0}")]
    InvalidGenerator(String),

    #[error("cannot condition on a miss: all {mass:.3e} of the probability mass lies inside the sensed cells")]
    ImpossibleMiss { mass: f64 },

    #[error("state is terminal; the episode has already finished")]
    TerminalState,

    #[error("state is not active: {0}")]
    InvalidState(String),

    #[error("reachable state closure exceeded the budget of {budget} states")]
    BudgetExceeded { budget: usize },

    #[error("reachable state closure exceeded the budget of {budget} stored state-action pairs")]
    ActionBudgetExceeded { budget: usize },

    #[error("posterior support has {size} cells; exact action enumeration is limited to {limit}")]
    SupportTooLarge { size: usize, limit: usize },

    #[error("iteration did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("the undiscounted problem does not contract: {0}")]
    NonContracting(String),

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("no estimate needed: the safe action fires at this state")]
    EstimateNotNeeded,

    #[error("state not found in the value table")]
    UnknownState,

    #[error("missing policy: {0}")]
    MissingPolicy(String),

    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
