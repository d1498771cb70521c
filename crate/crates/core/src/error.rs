use std::path::PathBuf;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Data,
    Config,
    Divergence,
    Internal,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Data => "data",
            ErrorCategory::Config => "config",
            ErrorCategory::Divergence => "divergence",
            ErrorCategory::Internal => "internal",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DamError {
    #[error("missing file: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: record `{record}`: field `{field}`: {reason}", path.display())]
    Record {
        path: PathBuf,
        record: String,
        field: String,
        reason: String,
    },

    #[error("dialogue `{dialogue}`: {reason}")]
    Dialogue { dialogue: String, reason: String },

    #[error("instance `{instance}`: {reason}")]
    Encoding { instance: String, reason: String },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("unknown variant `{name}` (valid: {valid})")]
    UnknownVariant { name: String, valid: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("parser: {0}")]
    Parser(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: L={loss} L_e={loss_e} L_dp={loss_dp}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
        loss_e: f64,
        loss_dp: f64,
    },

    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("{0}")]
    Internal(String),
}

impl DamError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            DamError::MissingFile { path }
        } else {
            DamError::Io { path, source }
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        DamError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            DamError::MissingFile { .. }
            | DamError::Io { .. }
            | DamError::Record { .. }
            | DamError::Dialogue { .. }
            | DamError::Encoding { .. }
            | DamError::Checkpoint { .. }
            | DamError::Tokenizer(_) => ErrorCategory::Data,
            DamError::Config { .. } | DamError::UnknownVariant { .. } => ErrorCategory::Config,
            DamError::Divergence { .. } => ErrorCategory::Divergence,
            DamError::Shape(_)
            | DamError::Graph(_)
            | DamError::Parser(_)
            | DamError::Metrics(_)
            | DamError::Internal(_) => ErrorCategory::Internal,
        }
    }
}

pub type Result<T, E = DamError> = std::result::Result<T, E>;
