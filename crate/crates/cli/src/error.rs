use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing {what} at {path}; run `{producer}` first")]
    MissingArtifact { what: &'static str, path: PathBuf, producer: &'static str },
    #[error("{0} already exists; pass --force to replace it")]
    Exists(PathBuf),
    #[error("{path} does not match its recorded sha256; it was modified after it was written")]
    HashMismatch { path: PathBuf },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] mtpt_core::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingArtifact { .. } => "missing-dependency",
            CliError::Exists(_) => "output-exists",
            CliError::HashMismatch { .. } => "artifact-modified",
            CliError::Input(_) => "input",
            CliError::Core(mtpt_core::Error::Divergence { .. }) => "divergence",
            CliError::Core(mtpt_core::Error::Config(_)) => "config",
            CliError::Core(_) => "data",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 3,
            "missing-dependency" => 4,
            "output-exists" => 5,
            "artifact-modified" => 6,
            "divergence" => 7,
            _ => 8,
        }
    }
}
