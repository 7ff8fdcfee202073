//! Artifact directory: data files, the emitted run file and the manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// SHA-256 of the canonical JSON form of the run file.
    pub config_hash: String,
    pub config_file: String,
    pub seed: u64,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub outputs: Vec<String>,
}

pub struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
    started: f64,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn io(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("cannot write {}: {e}", path.display()))
}

/// Hash of the config with object keys sorted, so field order never matters.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    // serde_json's default map is ordered by key
    let value = serde_json::to_value(config).expect("config serializes");
    let canonical = serde_json::to_string(&value).expect("value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            started: now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str) {
        self.written.push(self.path(name).display().to_string());
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<(), Failure> {
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| io(&p, e))?;
        self.record(name);
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut body = serde_json::to_string_pretty(value).map_err(|e| io(&self.path(name), e))?;
        body.push('\n');
        self.text(name, &body)
    }

    /// One JSON document per line.
    pub fn jsonl<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), Failure> {
        let p = self.path(name);
        let mut out = std::io::BufWriter::new(fs::File::create(&p).map_err(|e| io(&p, e))?);
        for row in rows {
            serde_json::to_writer(&mut out, &row).map_err(|e| io(&p, e))?;
            out.write_all(b"\n").map_err(|e| io(&p, e))?;
        }
        out.flush().map_err(|e| io(&p, e))?;
        self.record(name);
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), Failure> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p).map_err(|e| io(&p, e))?;
        w.write_record(header).map_err(|e| io(&p, e))?;
        for r in rows {
            w.write_record(r).map_err(|e| io(&p, e))?;
        }
        w.flush().map_err(|e| io(&p, e))?;
        self.record(name);
        Ok(())
    }

    /// Writes `config.toml` (re-ingestable with `--config`) and `manifest.json`.
    pub fn finish<T: Serialize>(mut self, command: &str, config: &T, seed: u64) -> Result<PathBuf, Failure> {
        let body = toml::to_string(config).map_err(|e| io(&self.path("config.toml"), e))?;
        self.text("config.toml", &body)?;
        let manifest = Manifest {
            tool: env!("CARGO_BIN_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_hash: config_hash(config),
            config_file: self.path("config.toml").display().to_string(),
            seed,
            started_unix_s: self.started,
            finished_unix_s: now(),
            outputs: self.written.clone(),
        };
        let p = self.path("manifest.json");
        let mut body = serde_json::to_string_pretty(&manifest).map_err(|e| io(&p, e))?;
        body.push('\n');
        fs::write(&p, body).map_err(|e| io(&p, e))?;
        Ok(self.dir)
    }
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a": 1, "b": [2, 3]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b": [2, 3], "a": 1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
