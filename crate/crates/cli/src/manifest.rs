//! Run provenance: a lock that reserves the run directory for this process,
//! a resolved-config snapshot written up front, and a manifest written
//! atomically at the end that lists checksummed inputs and every output
//! file the run produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vaemap_core::util::{atomic_write, sha256_hex};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: RunConfig,
    /// Input label to SHA-256 digest.
    pub input_checksums: BTreeMap<String, String>,
    /// Paths relative to the run directory, sorted.
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub library_version: String,
}

/// Holds the run directory's lock file for the process lifetime.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<RunLock, CliError> {
        let path = dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(
                format!(
                    "run directory {} is locked by another run (remove {} if that run is gone)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(CliError::Data(format!(
                "cannot lock {}: {e}",
                dir.display()
            ))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// One run in progress: the locked directory, the resolved config, and the
/// growing record of inputs and outputs.
pub struct RunContext {
    dir: PathBuf,
    pub config: RunConfig,
    command: String,
    run_id: String,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    _lock: RunLock,
}

impl RunContext {
    /// Creates (or reuses) the run directory, locks it, and snapshots the
    /// resolved config.
    pub fn create(command: &str, config: RunConfig) -> Result<RunContext, CliError> {
        let dir = config.out_dir().to_path_buf();
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
        let lock = RunLock::acquire(&dir)?;
        let resolved = config.to_toml();
        let run_id = sha256_hex(format!("{command}\n{resolved}").as_bytes())[..12].to_string();
        let mut ctx = RunContext {
            dir,
            config,
            command: command.to_string(),
            run_id,
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            _lock: lock,
        };
        let snapshot = ctx.out_file(CONFIG_SNAPSHOT);
        atomic_write(&snapshot, resolved.as_bytes())?;
        Ok(ctx)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Resolves a run-relative path and registers it as an output.
    pub fn out_file(&mut self, rel: &str) -> PathBuf {
        let path = self.dir.join(rel);
        self.outputs.push(path.clone());
        path
    }

    /// Records the digest of one input file.
    pub fn checksum_input(&mut self, label: &str, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Data(format!("cannot read input {}: {e}", path.display())))?;
        self.inputs.insert(label.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Records one digest over a whole directory tree: every file's path and
    /// content hash, folded in sorted order.
    pub fn checksum_tree(&mut self, label: &str, root: &Path) -> Result<(), CliError> {
        let mut acc = String::new();
        for path in walk_files(root)? {
            let bytes = std::fs::read(&path)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
            let rel = path.strip_prefix(root).unwrap_or(&path);
            acc.push_str(&format!(
                "{}:{}\n",
                rel.display().to_string().replace('\\', "/"),
                sha256_hex(&bytes)
            ));
        }
        self.inputs.insert(label.to_string(), sha256_hex(acc.as_bytes()));
        Ok(())
    }

    /// Verifies every registered output exists, then writes the manifest
    /// atomically. Returns the manifest path.
    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        let manifest_path = self.dir.join(MANIFEST_FILE);
        self.outputs.push(manifest_path.clone());
        let mut rel: Vec<String> = Vec::with_capacity(self.outputs.len());
        for path in &self.outputs {
            if *path != manifest_path && !path.is_file() {
                return Err(CliError::Data(format!(
                    "output {} was registered but never written",
                    path.display()
                )));
            }
            rel.push(
                path.strip_prefix(&self.dir)
                    .unwrap_or(path)
                    .display()
                    .to_string()
                    .replace('\\', "/"),
            );
        }
        rel.sort();
        rel.dedup();
        let manifest = RunManifest {
            run_id: self.run_id.clone(),
            command: self.command.clone(),
            config: self.config.clone(),
            input_checksums: self.inputs.clone(),
            outputs: rel,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            library_version: vaemap_core::version().to_string(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        atomic_write(&manifest_path, &json)?;
        Ok(manifest_path)
    }
}

/// Every file under a directory, recursively, sorted by path.
pub fn walk_files(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir)
            .map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry
                .map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?
                .path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}
