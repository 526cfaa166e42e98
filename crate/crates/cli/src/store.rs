//! Content-addressed stage directories.
//!
//! A stage's fingerprint hashes its name, the configuration it reads and the
//! fingerprints of its inputs. Outputs go to `<output>/<stage>/<fp[..12]>/`,
//! every file carries the full fingerprint, and `manifest.json` is written
//! last to mark the directory complete.

use std::fs;
use std::path::{Path, PathBuf};

use fairicl::data::read_csv_comment;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

const MANIFEST: &str = "manifest.json";
const PREFIX: &str = "fingerprint=";

/// SHA-256 over the canonical JSON of `(stage, parts)`. `serde_json` maps keep
/// keys sorted, so equal values always serialize to the same bytes.
pub fn fingerprint(stage: &str, parts: &Value) -> String {
    let doc = serde_json::json!({ "stage": stage, "parts": parts });
    let bytes = serde_json::to_vec(&doc).expect("json value serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// The `#fingerprint=` comment line used in text artifacts.
pub fn comment(fp: &str) -> String {
    format!("{PREFIX}{fp}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub fingerprint: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageDir {
    pub stage: String,
    pub fingerprint: String,
    pub dir: PathBuf,
}

impl StageDir {
    pub fn new(output: &Path, stage: &str, fingerprint: String) -> Self {
        let dir = output.join(stage).join(&fingerprint[..12]);
        Self {
            stage: stage.to_string(),
            fingerprint,
            dir,
        }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn is_complete(&self) -> bool {
        self.read_manifest().is_ok_and(|m| m.fingerprint == self.fingerprint)
    }

    fn read_manifest(&self) -> Result<Manifest> {
        let p = self.path(MANIFEST);
        let text = fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Fail unless the stage finished with this fingerprint.
    pub fn require(&self) -> Result<()> {
        let p = self.path(MANIFEST);
        if !p.is_file() {
            return Err(PipelineError::MissingArtifact {
                stage: self.stage.clone(),
                path: p,
            });
        }
        let m = self.read_manifest()?;
        check(&p, &self.fingerprint, &m.fingerprint)
    }

    /// Create the directory, dropping any stale manifest.
    pub fn begin(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| PipelineError::io(&self.dir, e))?;
        let m = self.path(MANIFEST);
        if m.exists() {
            fs::remove_file(&m).map_err(|e| PipelineError::io(&m, e))?;
        }
        Ok(())
    }

    pub fn finish(&self, files: &[String]) -> Result<()> {
        let m = Manifest {
            stage: self.stage.clone(),
            fingerprint: self.fingerprint.clone(),
            files: files.to_vec(),
        };
        let p = self.path(MANIFEST);
        fs::write(&p, serde_json::to_string_pretty(&m)?).map_err(|e| PipelineError::io(&p, e))
    }

    /// Check the fingerprint comment of a text artifact.
    pub fn verify_comment(&self, file: &str) -> Result<PathBuf> {
        let p = self.path(file);
        if !p.is_file() {
            return Err(PipelineError::MissingArtifact {
                stage: self.stage.clone(),
                path: p,
            });
        }
        let found = read_csv_comment(&p)?
            .and_then(|c| c.strip_prefix(PREFIX).map(str::to_string))
            .unwrap_or_default();
        check(&p, &self.fingerprint, &found)?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<()> {
        let p = self.path(file);
        let mut v = serde_json::to_value(value)?;
        if let Value::Object(m) = &mut v {
            m.insert("fingerprint".into(), Value::String(self.fingerprint.clone()));
        }
        let text = serde_json::to_string_pretty(&v)? + "\n";
        fs::write(&p, text).map_err(|e| PipelineError::io(&p, e))
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, file: &str) -> Result<T> {
        let p = self.path(file);
        let text = fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?;
        let mut v: Value = serde_json::from_str(&text)?;
        let found = v
            .as_object_mut()
            .and_then(|m| m.remove("fingerprint"))
            .and_then(|f| f.as_str().map(str::to_string))
            .unwrap_or_default();
        check(&p, &self.fingerprint, &found)?;
        Ok(serde_json::from_value(v)?)
    }
}

pub fn check(path: &Path, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(fairicl::Error::FingerprintMismatch {
            artifact: path.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
        .into());
    }
    Ok(())
}
