use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("size error: {what} has {size} points, budget is {budget}")]
    Size {
        what: String,
        size: usize,
        budget: usize,
    },
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("step cap of {cap} exceeded after a path of {} vertices", partial.len())]
    Timeout {
        cap: u64,
        partial: Vec<crate::geometry::LatticePoint>,
    },
    #[error("support error: {0}")]
    Support(String),
    #[error("accuracy error: achieved bound {achieved:e}, requested {requested:e}")]
    Accuracy { achieved: f64, requested: f64 },
    #[error("solver did not converge: residual {residual:e} after {iterations} iterations")]
    Solver { residual: f64, iterations: usize },
    #[error("oracle inconsistency: {0}")]
    Oracle(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("degenerate density: {0}")]
    Degenerate(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("rare event: {0}")]
    RareEvent(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
