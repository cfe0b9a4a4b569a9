//! Output directory handling: provenance stamps, file writers and the
//! directory lock.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use hat_core::hat::io::Provenance;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const OUTPUT_ROOT_ENV: &str = "HAT_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT: &str = "hat-out";
pub const LOCK_FILE: &str = ".hat.lock";

pub fn tool_version() -> String {
    format!("hat {}", env!("CARGO_PKG_VERSION"))
}

pub fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance { tool_version: tool_version(), config_hash: cfg.hash(), seed: cfg.seed }
}

/// `--out`, else `$HAT_OUTPUT_ROOT`, else `./hat-out`.
pub fn output_dir(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT)),
    }
}

/// The first line of every CSV artifact.
pub fn csv_stamp(p: &Provenance) -> String {
    format!("# tool={} config_sha256={} seed={}\n", p.tool_version, p.config_hash, p.seed)
}

/// `{"provenance": …, <key>: payload}` as pretty JSON.
pub fn stamped_json<T: Serialize>(p: &Provenance, key: &str, payload: &T) -> String {
    let mut v = json!({ "provenance": p });
    v[key] = serde_json::to_value(payload).expect("payload serializes");
    let mut s = serde_json::to_string_pretty(&v).expect("json");
    s.push('\n');
    s
}

pub fn read_stamped_json(path: &Path, key: &str) -> Result<(Provenance, Value), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
    let mut v: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let p: Provenance = serde_json::from_value(v["provenance"].take())
        .map_err(|e| CliError::Validation(format!("{}: provenance: {e}", path.display())))?;
    Ok((p, v[key].take()))
}

/// Rejects artifacts produced under a different configuration.
pub fn check_provenance(found: &Provenance, expected: &Provenance, what: &str) -> Result<(), CliError> {
    if found.config_hash != expected.config_hash {
        return Err(CliError::Validation(format!(
            "{what} was produced with config {} but the current config hashes to {}",
            found.config_hash, expected.config_hash
        )));
    }
    Ok(())
}

pub fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let mut f = File::create(&path)?;
    f.write_all(bytes)?;
    Ok(path)
}

/// Held while a command writes into an output directory.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Other(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
