use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("batch must not be empty")]
    InvalidBatch,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("schedule infeasible: k*b = {requested} exceeds dataset size n = {n}")]
    ScheduleInfeasible { requested: usize, n: usize },

    #[error("parameters diverged at step {step}")]
    DivergenceDetected { step: usize },

    #[error("enumeration of {required} items exceeds budget {budget}")]
    EnumerationTooLarge { required: u128, budget: u128 },

    #[error("moment table lacks data for the requested order: {0}")]
    IncompleteMomentTable(String),

    #[error("drift direction has u = 0")]
    NoDriftDirection,

    #[error("lambda = {0} is not negative; not a strict saddle")]
    NotAStrictSaddle(f64),

    #[error("hypothesis not met: {0}")]
    HypothesisNotMet(String),

    #[error("degenerate problem: {0}")]
    DegenerateProblem(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
