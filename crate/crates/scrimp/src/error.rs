use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid grid: {reason}")]
    BadGrid { reason: String },
    #[error("obstacle density {density} outside [0, 1)")]
    BadDensity { density: f64 },
    #[error("no free cell in {size}x{size} map at density {density} after 100 retries")]
    NoFreeCells { size: usize, density: f64 },
    #[error("infeasible instance: {reason}")]
    Infeasible { reason: String },
    #[error("joint action has {got} entries, expected {expected}")]
    BadJointAction { got: usize, expected: usize },
    #[error("invalid scenario: {reason}")]
    BadScenario { reason: String },
}

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("checkpoint format error: {reason}")]
    BadCheckpoint { reason: String },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid config: {reason}")]
    BadConfig { reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
