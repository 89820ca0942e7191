use thiserror::Error;

pub type Result<T, E = FedqError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FedqError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    /// Every suboptimality gap is zero, so every policy is optimal.
    #[error("degenerate MDP: every suboptimality gap is zero")]
    DegenerateMdp,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("inconsistent agent reports: {0}")]
    InconsistentReports(String),

    /// The running variance estimate went negative beyond rounding noise.
    #[error("negative variance estimate {value} at (h={h}, s={s}, a={a})")]
    NegativeVariance { h: usize, s: usize, a: usize, value: f64 },

    #[error("runtime invariant violated in round {round}: {detail}")]
    InvariantViolation { round: u64, detail: String },

    #[error("the MDP is not a G-MDP; round and switching bounds are undefined")]
    NotGmdp,

    #[error("slope fit needs at least 2 points after burn-in, got {0}")]
    InsufficientPoints(usize),

    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl FedqError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        FedqError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            FedqError::InvalidMdp(_) | FedqError::DegenerateMdp | FedqError::NotGmdp => "model",
            FedqError::InvalidParameter(_) | FedqError::Config { .. } => "config",
            FedqError::InsufficientPoints(_) => "data",
            FedqError::InconsistentReports(_)
            | FedqError::NegativeVariance { .. }
            | FedqError::InvariantViolation { .. } => "runtime",
            FedqError::Io(_) | FedqError::Json(_) | FedqError::Csv(_) | FedqError::Toml(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "model" => 4,
            "data" => 5,
            _ => 6,
        }
    }
}
