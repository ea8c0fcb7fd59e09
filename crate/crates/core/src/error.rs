use thiserror::Error;

/// Errors raised by the solvers, the MPC layer and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("multiplier entry {index} is negative ({value})")]
    NegativeMultiplier { index: usize, value: f64 },

    #[error("point leaves the box at coordinate {index} (value {value})")]
    OutsideBox { index: usize, value: f64 },

    #[error("block index {index} out of range (M = {count})")]
    BlockIndex { index: usize, count: usize },

    #[error("point is not strictly feasible: minimum slack {min_slack}")]
    SlaterViolation { min_slack: f64 },

    #[error("box diameter is infinite; use gap-certified stopping")]
    InfiniteDiameter,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("outer accuracy {eps_out} exceeds the admissible cap {cap}")]
    Admissibility { eps_out: f64, cap: f64 },

    #[error("not converged: {0}")]
    NotConverged(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("shifted input sequence is not strictly feasible at step {step} (min slack {min_slack})")]
    ShiftInfeasible { step: usize, min_slack: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
