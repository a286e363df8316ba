//! Experiment directory layout, dependency checks and content hashes.
//!
//! ```text
//! <root>/data/                 synth-data: manifest.tsv, features.bin, lexicon.tsv, corpus.json
//! <root>/artifacts/            teacher.json codebook.json bpe.json lm.json units.tsv
//! <root>/<run>/                pretrain, finetune, ...: config.toml, metrics.jsonl, ckpt-*.bin, final.ckpt
//! <root>/decode/               <split>.hyp, <split>.ref
//! <root>/ablate/               report.tsv, report.json
//! ```
//!
//! Every file written here gets a `<file>.sha256` sidecar. Loading checks
//! the sidecar when present.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::CliError;

pub struct ExperimentDir {
    pub root: PathBuf,
    pub force: bool,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ExperimentDir {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.root.join("artifacts").join(name)
    }

    pub fn run(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Fails with the producing subcommand named when `path` is absent, and
    /// checks the recorded hash when there is one.
    pub fn require(&self, path: &Path, what: &'static str, producer: &'static str) -> Result<PathBuf, CliError> {
        if !path.exists() {
            return Err(CliError::MissingArtifact { what, path: path.to_path_buf(), producer });
        }
        verify(path)?;
        Ok(path.to_path_buf())
    }

    /// Refuses to replace an existing output unless forced.
    pub fn claim(&self, path: &Path) -> Result<(), CliError> {
        if path.exists() && !self.force {
            return Err(CliError::Exists(path.to_path_buf()));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::Input(format!("{}: {e}", parent.display())))?;
        }
        Ok(())
    }

    /// Writes `bytes` to a new file (atomically) plus its hash sidecar.
    pub fn write(&self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        self.claim(path)?;
        mtpt_core::artifact::write_atomic(path, bytes)?;
        record(path)
    }
}

/// Writes the hash sidecar of an existing file.
pub fn record(path: &Path) -> Result<(), CliError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let line = format!("{}  {name}\n", sha256_file(path)?);
    mtpt_core::artifact::write_atomic(&sidecar(path), line.as_bytes())?;
    Ok(())
}

pub fn verify(path: &Path) -> Result<(), CliError> {
    let side = sidecar(path);
    if path.is_dir() || !side.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(&side).map_err(|e| CliError::Input(format!("{}: {e}", side.display())))?;
    let want = text.split_whitespace().next().unwrap_or("");
    if want != sha256_file(path)? {
        return Err(CliError::HashMismatch { path: path.to_path_buf() });
    }
    Ok(())
}

pub fn sidecar_exists(path: &Path) -> bool {
    sidecar(path).exists()
}
