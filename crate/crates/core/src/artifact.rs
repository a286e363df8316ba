//! Versioned JSON artifacts with atomic writes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    body: T,
}

/// Writes to a sibling temp file and renames it into place, so readers never
/// observe a partially written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_json<T: Serialize>(path: &Path, format: &str, version: u32, body: &T) -> Result<()> {
    let env = Envelope { format: format.to_string(), version, body };
    let text = serde_json::to_string(&env).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path, format: &str, version: u32) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if env.format != format || env.version != version {
        return Err(Error::Parse {
            file: path.display().to_string(),
            line: 1,
            message: format!("expected {format} v{version}, found {} v{}", env.format, env.version),
        });
    }
    Ok(env.body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_format_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        save_json(&p, "thing", 2, &vec![1u32, 2, 3]).unwrap();
        let v: Vec<u32> = load_json(&p, "thing", 2).unwrap();
        assert_eq!(v, [1, 2, 3]);
        assert!(load_json::<Vec<u32>>(&p, "thing", 3).is_err());
        assert!(load_json::<Vec<u32>>(&p, "other", 2).is_err());
        assert!(!dir.path().join("a/b.json.tmp").exists());
    }
}
