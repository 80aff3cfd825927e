use rolling_lab::LabError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass = 0,
    Internal = 1,
    ConfigError = 2,
    StatisticalFailure = 3,
    TooManyBlowups = 4,
}

impl Outcome {
    pub fn code(self) -> i32 {
        self as i32
    }

    /// The more severe of two outcomes.
    pub fn worst(self, other: Outcome) -> Outcome {
        let rank = |o: Outcome| match o {
            Outcome::Pass => 0,
            Outcome::StatisticalFailure => 1,
            Outcome::TooManyBlowups => 2,
            Outcome::ConfigError => 3,
            Outcome::Internal => 4,
        };
        if rank(other) > rank(self) {
            other
        } else {
            self
        }
    }
}

impl From<&CliError> for Outcome {
    fn from(e: &CliError) -> Self {
        match e {
            CliError::Config(_) => Outcome::ConfigError,
            CliError::Lab(LabError::Blowup { .. }) => Outcome::TooManyBlowups,
            CliError::Lab(
                LabError::UnknownModel(_)
                | LabError::UnknownName { .. }
                | LabError::InvalidAlgebra(_)
                | LabError::InvalidModel(_)
                | LabError::InvalidArgument(_)
                | LabError::UnsupportedStep(_),
            ) => Outcome::ConfigError,
            _ => Outcome::Internal,
        }
    }
}
