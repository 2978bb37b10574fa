//! Reading and writing artifacts with config stamps, and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Stage};
use crate::failure::Failure;

const STAMP_KEY: &str = "config_hash";

/// Adds the config hash as the first key of a pretty-printed JSON object.
pub fn stamp(bytes: &[u8], hash: &str) -> Result<Vec<u8>, Failure> {
    let body = bytes
        .strip_prefix(b"{\n")
        .ok_or_else(|| Failure::Check("artifact is not a JSON object".into()))?;
    let mut out = format!("{{\n  \"{STAMP_KEY}\": \"{hash}\",\n").into_bytes();
    out.extend_from_slice(body);
    Ok(out)
}

pub fn read_stamp(bytes: &[u8]) -> Option<String> {
    #[derive(Deserialize)]
    struct Header {
        config_hash: Option<String>,
    }
    serde_json::from_slice::<Header>(bytes).ok()?.config_hash
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Failure::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Failure::io(path, e))
}

#[derive(Debug, Default, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    /// Path to SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Path to SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
    pub timings_secs: BTreeMap<String, f64>,
    pub total_secs: f64,
}

pub struct Store<'a> {
    pub cfg: &'a RunConfig,
    force: bool,
    manifest: Manifest,
    started: Instant,
}

impl<'a> Store<'a> {
    pub fn new(cfg: &'a RunConfig, command: &str, force: bool) -> Self {
        Store {
            cfg,
            force,
            manifest: Manifest {
                command: command.to_string(),
                config_hash: cfg.hash(),
                seed: cfg.seed,
                workers: cfg.workers(),
                ..Default::default()
            },
            started: Instant::now(),
        }
    }

    pub fn timed<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.manifest.timings_secs.insert(label.to_string(), t.elapsed().as_secs_f64());
        out
    }

    /// Reads a file some earlier command produced.
    pub fn read(&mut self, path: &Path, what: &'static str, command: &'static str) -> Result<Vec<u8>, Failure> {
        if !path.exists() {
            return Err(Failure::Missing {
                path: path.to_path_buf(),
                what,
                command,
            });
        }
        let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
        self.manifest.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Reads a stamped artifact and checks it against the configuration of
    /// `stage`.
    pub fn read_stamped(
        &mut self,
        path: &Path,
        stage: Stage,
        what: &'static str,
        command: &'static str,
    ) -> Result<Vec<u8>, Failure> {
        let bytes = self.read(path, what, command)?;
        let expected = self.cfg.stage_hash(stage);
        let found = read_stamp(&bytes).unwrap_or_else(|| "none".into());
        if found != expected {
            if !self.force {
                return Err(Failure::Stale {
                    path: path.to_path_buf(),
                    found,
                    expected,
                });
            }
            log::warn!("using {} despite config hash {found} (expected {expected})", path.display());
        }
        Ok(bytes)
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), Failure> {
        write_atomic(path, bytes)?;
        self.manifest.outputs.insert(path.display().to_string(), sha256_hex(bytes));
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn write_stamped(&mut self, path: &Path, stage: Stage, bytes: &[u8]) -> Result<(), Failure> {
        let stamped = stamp(bytes, &self.cfg.stage_hash(stage))?;
        self.write(path, &stamped)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.cfg
            .path(&self.cfg.paths.outputs)
            .join("manifests")
            .join(format!("{}.json", self.manifest.command))
    }

    pub fn finish(mut self) -> Result<PathBuf, Failure> {
        self.manifest.total_secs = self.started.elapsed().as_secs_f64();
        let path = self.manifest_path();
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamp_is_readable_and_transparent() {
        let bytes = b"{\n  \"version\": 1,\n  \"x\": [1, 2]\n}\n";
        let s = stamp(bytes, "abc").unwrap();
        assert_eq!(read_stamp(&s).as_deref(), Some("abc"));
        let v: serde_json::Value = serde_json::from_slice(&s).unwrap();
        assert_eq!(v["x"], serde_json::json!([1, 2]));
        assert_eq!(read_stamp(bytes), None);
        assert!(stamp(b"[1]", "abc").is_err());
    }
}
