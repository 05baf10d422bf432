//! Stage results stored under `<out>/cache`, keyed by the SHA-256 of the
//! stage name and its serialized inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub struct Cache {
    dir: PathBuf,
}

impl Cache {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            dir: out_dir.join("cache"),
        }
    }

    pub fn key<T: Serialize>(stage: &str, inputs: &T) -> Result<String, CliError> {
        let mut hasher = Sha256::new();
        hasher.update(stage.as_bytes());
        hasher.update([0u8]);
        hasher.update(serde_json::to_vec(inputs)?);
        Ok(hex::encode(hasher.finalize()))
    }

    fn path(&self, stage: &str, key: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{key}.json"))
    }

    /// Cached value for `key`, or `compute` stored under it. `refresh`
    /// ignores an existing entry.
    pub fn get_or_compute<T, F>(&self, stage: &str, key: &str, refresh: bool, compute: F) -> Result<T, CliError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T, CliError>,
    {
        let path = self.path(stage, key);
        if !refresh {
            if let Ok(bytes) = fs::read(&path) {
                if let Ok(value) = serde_json::from_slice(&bytes) {
                    return Ok(value);
                }
            }
        }
        let value = compute()?;
        fs::create_dir_all(&self.dir)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(&value)?)?;
        fs::rename(&tmp, &path)?;
        Ok(value)
    }
}
