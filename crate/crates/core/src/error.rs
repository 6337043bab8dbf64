use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dynamics produced a non-finite state at step {step}")]
    NumericOverflow { step: usize },

    #[error("trajectory is dynamically inconsistent at step {step} (residual {residual:e})")]
    InconsistentTrajectory { step: usize, residual: f64 },

    #[error("malformed trajectory: {0}")]
    MalformedTrajectory(String),

    #[error("unknown preset `{name}`; valid presets: {}", valid.join(", "))]
    UnknownPreset { name: String, valid: Vec<&'static str> },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{0} lies outside its admissible set")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("problem infeasible: no admissible control at layer {layer} ({detail})")]
    Infeasible { layer: usize, detail: String },

    #[error("enumeration of {sequences} control sequences exceeds the limit of {limit}")]
    EnumerationLimit { sequences: f64, limit: f64 },

    #[error("storage candidate rejected: minimum {minimum} is below the declared bound -{bound}")]
    RejectedCandidate { minimum: f64, bound: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("unsupported problem: {0}")]
    Unsupported(String),

    #[error("certificate inconsistency: slack {slack:e} below tolerance")]
    InconsistencyAlarm { slack: f64 },

    #[error("horizon S={requested} exceeds run length {available}")]
    Range { requested: usize, available: usize },

    #[error("MPC lost feasibility at step {step}: {source}")]
    FeasibilityLoss {
        step: usize,
        #[source]
        source: Box<Error>,
        partial: Box<crate::mpc::MpcRun>,
    },

    #[error("run {run}: {source}")]
    Run {
        run: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
