use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("transition P(.|s={state}, a={action}) sums to {sum}, expected 1")]
    TransitionNotNormalized { state: usize, action: usize, sum: f64 },

    #[error("transition P(s'={next}|s={state}, a={action}) = {value} is negative")]
    NegativeTransition {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },

    #[error("reward r(s={state}, a={action}) = {value} lies outside [0, 1]")]
    RewardOutOfRange { state: usize, action: usize, value: f64 },

    #[error("discount gamma = {0} lies outside [0, 1)")]
    Discount(f64),

    #[error("{name} is not a probability vector: {reason}")]
    Distribution { name: &'static str, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("linear system for {0} is singular")]
    Singular(&'static str),

    #[error("optimal actions tied at state {state} (Q* gap {gap:e})")]
    TiedOptimalActions { state: usize, gap: f64 },

    #[error("gradient norm vanished at t={0}")]
    VanishingGradient(u64),

    #[error("direction is not in the feasible update domain at state {0}")]
    InfeasibleDirection(usize),

    #[error("rate window: {0}")]
    Window(String),

    #[error("trace is missing column {0}")]
    MissingColumn(&'static str),

    #[error("unknown {kind} '{name}' (valid: {valid})")]
    UnknownName {
        kind: &'static str,
        name: String,
        valid: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_)
            | Error::Singular(_)
            | Error::VanishingGradient(_)
            | Error::TiedOptimalActions { .. }
            | Error::Window(_) => 2,
            Error::Io(_) | Error::Csv(_) => 3,
            _ => 1,
        }
    }
}
