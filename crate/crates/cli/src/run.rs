//! Config layering and run-directory plumbing.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use scorefusion::config::ConfigMap;
use scorefusion::io::write_atomic;

use crate::error::CliError;
use crate::Common;

pub const RUN_DIR_ENV: &str = "SCOREFUSION_RUN_DIR";
pub const ECHO_FILE: &str = "config.txt";

pub fn require_file(p: &Path) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(p.to_path_buf()))
    }
}

/// Defaults, then the config file, then `--set`, then explicit flags. A flag
/// and a `--set` that disagree on the same key are a conflict.
pub fn resolve(common: &Common, defaults: &[(&str, String)], flags: &[(&str, Option<String>)]) -> Result<ConfigMap, CliError> {
    let mut map = ConfigMap::new();
    for (k, v) in defaults {
        map.set(k, v);
    }
    if let Some(p) = &common.config {
        require_file(p)?;
        map.merge(&ConfigMap::load(p)?);
    }
    let mut sets = ConfigMap::new();
    for s in &common.set {
        sets.set_pair(s).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    map.merge(&sets);
    for (k, v) in flags {
        if let Some(v) = v {
            if let Some(prev) = sets.raw(k) {
                if prev != v {
                    return Err(CliError::Conflict(format!("--{k} {v} contradicts --set {k}={prev}")));
                }
            }
            map.set(k, v);
        }
    }
    Ok(map)
}

pub fn run_dir(common: &Common, map: &ConfigMap, command: &str) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    if let Some(o) = map.raw("out") {
        return PathBuf::from(o);
    }
    let root = std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(command)
}

pub fn set_workers(common: &Common, map: &ConfigMap) -> Result<(), CliError> {
    let n: Option<usize> = match common.workers {
        Some(n) => Some(n),
        None => map.get("workers")?,
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn write_echo(dir: &Path, map: &ConfigMap) -> Result<(), CliError> {
    write_atomic(&dir.join(ECHO_FILE), map.to_text().as_bytes())?;
    Ok(())
}

/// Append-only CSV telemetry with a header on first creation.
pub struct Telemetry {
    file: fs::File,
}

impl Telemetry {
    pub fn open(path: &Path, header: &str) -> Result<Self, CliError> {
        let fresh = !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| scorefusion::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        if fresh {
            writeln!(file, "{header}").map_err(|e| scorefusion::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        }
        Ok(Self { file })
    }

    pub fn line(&mut self, s: &str) {
        let _ = writeln!(self.file, "{s}");
    }
}
