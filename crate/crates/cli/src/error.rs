use std::fmt;

use scvi_core::ScviError;

/// Command failure, grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Malformed or inconsistent configuration, missing referenced files.
    Config(String),
    /// Unreadable, malformed or mismatched input data or checkpoints.
    Data(String),
    /// Non-finite values during training or evaluation.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": { "code": self.exit_code(), "kind": self.kind(), "message": self.message() }
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl From<ScviError> for CliError {
    fn from(e: ScviError) -> Self {
        let m = e.to_string();
        match e {
            ScviError::Parameter(_) => CliError::Config(m),
            ScviError::Numerical(_) | ScviError::Domain(_) => CliError::Numerical(m),
            ScviError::Dimension(_)
            | ScviError::Data(_)
            | ScviError::Checkpoint(_)
            | ScviError::Parse { .. }
            | ScviError::Io { .. } => CliError::Data(m),
        }
    }
}
