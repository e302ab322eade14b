//! Error types shared across the crate.

/// Crate-wide error type.
///
/// Variants map onto the failure classes the pipeline distinguishes:
/// shape/structure problems are programming or wiring mistakes, domain
/// errors are bad values fed to otherwise well-formed operations, config
/// errors come from user input, and artifact errors from files on disk.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/graph shape inconsistency.
    #[error("shape error: {0}")]
    Shape(String),

    /// Graph structure violation (bad topology, dangling node index).
    #[error("graph structure error: {0}")]
    Structure(String),

    /// Value outside an operation's domain (zero norm, non-finite logit, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A required artifact (checkpoint, buffer) is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// An artifact exists but is incompatible (wrong shapes, wrong version).
    #[error("incompatible artifact: {0}")]
    IncompatibleArtifact(String),

    /// Training diverged (non-finite loss or gradient).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
