use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input {origin}: {message}")]
    Parse { origin: String, message: String },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("Colebrook-White iteration did not converge after {iterations} iterations")]
    FrictionNonConvergence { iterations: usize },

    #[error("loop flow Newton did not converge after {iterations} iterations (relative residual {residual:e})")]
    LoopSolve { iterations: usize, residual: f64 },

    #[error("consumer {consumer}{}: energy difference {difference:e} J/m3 is below the floor {floor:e} J/m3", at_time(*.time_s))]
    EnergyFloor {
        consumer: String,
        difference: f64,
        floor: f64,
        time_s: Option<f64>,
    },

    #[error("operator library has no term for {detail} (pipe {pipe}); extend the offline flux-direction training")]
    UntrainedDirection { pipe: String, detail: String },

    #[error("zero total inflow at node {node} with outflow through pipe {pipe}")]
    DegenerateMixing { node: String, pipe: String },

    #[error("Newton iteration failed at step {step} (t = {time_s} s); residual history {residuals:?}")]
    NewtonDivergence {
        step: usize,
        time_s: f64,
        residuals: Vec<f64>,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("greedy reduction stopped after {iterations} iterations with max transfer error {max_error:e} (tolerance {tolerance:e})")]
    ReductionFailed {
        iterations: usize,
        max_error: f64,
        tolerance: f64,
    },

    #[error("optimization problem infeasible: max violation {max_violation:e}; binding: {}", binding.join(", "))]
    Infeasible {
        max_violation: f64,
        binding: Vec<String>,
    },

    #[error("optimizer failure: {0}")]
    Optimizer(String),
}

fn at_time(t: Option<f64>) -> String {
    t.map(|t| format!(" at t = {t} s")).unwrap_or_default()
}

impl Error {
    /// Broad class of the failure, used by the CLI to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::InvalidNetwork(_) | Error::InvalidConfig(_) => {
                ErrorKind::Input
            }
            Error::Infeasible { .. } => ErrorKind::Infeasible,
            _ => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Numerical,
    Infeasible,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
