use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] tboa_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 2 for bad input, 4 when no start met the level-set constraint, 3 for
    /// any other numerical failure.
    pub fn exit_code(&self) -> u8 {
        use tboa_core::Error as E;
        match self {
            Self::Config(_) | Self::SchemaMismatch(_) | Self::Io { .. } => 2,
            Self::Core(E::Infeasible { .. }) => 4,
            Self::Core(
                E::InvalidParameter(_) | E::InvalidSpec(_) | E::DimensionMismatch { .. } | E::MechanismValidation(_),
            ) => 2,
            Self::Core(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        use tboa_core::Error as E;
        match self {
            Self::Config(_) => "config",
            Self::SchemaMismatch(_) => "schema_mismatch",
            Self::Io { .. } => "io",
            Self::Core(e) => match e {
                E::InvalidMetric(_) => "invalid_metric",
                E::ZeroVector => "zero_vector",
                E::InvalidParameter(_) => "invalid_parameter",
                E::DimensionMismatch { .. } => "dimension_mismatch",
                E::MechanismValidation(_) => "mechanism_validation",
                E::Integration { .. } => "integration",
                E::DomainTruncated { .. } => "domain_truncated",
                E::ZeroField => "zero_field",
                E::EmptyGrid => "empty_grid",
                E::LevelSetNotFound => "level_set_not_found",
                E::Infeasible { .. } => "infeasible",
                E::ObjectiveFailure(_) => "objective_failure",
                E::InvalidSpec(_) => "invalid_spec",
            },
        }
    }

    pub fn report(&self) -> ErrorReport {
        let details = match self {
            Self::Core(tboa_core::Error::MechanismValidation(msgs)) => msgs.clone(),
            _ => Vec::new(),
        };
        ErrorReport { error: self.kind(), message: self.to_string(), exit_code: self.exit_code(), details }
    }
}

/// Machine-readable failure summary, written to stderr and `error.json`.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
    pub exit_code: u8,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
