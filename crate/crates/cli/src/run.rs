//! Run directories: exclusive lock, manifest and output files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dam_core::DamError;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const LOCK_FILE: &str = "run.lock";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    /// Effective settings, in config-file syntax.
    pub config: Option<String>,
    pub data_dir: Option<PathBuf>,
    /// Path relative to the data directory to SHA-256.
    pub checksums: Vec<(String, String)>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
}

/// An open run directory. The lock file is removed on drop.
pub struct RunDir {
    path: PathBuf,
    pub manifest: Manifest,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunDir {
    pub fn open(path: &Path, command: &str) -> Result<Self, DamError> {
        fs::create_dir_all(path).map_err(|e| DamError::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .and_then(|mut f| writeln!(f, "{}", std::process::id()))
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => DamError::config(
                    "--run-dir",
                    format!("{} is in use by another invocation (remove {} if stale)", path.display(), lock.display()),
                ),
                _ => DamError::io(&lock, e),
            })?;
        let run = RunDir {
            path: path.to_path_buf(),
            manifest: Manifest {
                command: command.into(),
                args: std::env::args().skip(1).collect(),
                version: env!("CARGO_PKG_VERSION").into(),
                seed: None,
                config: None,
                data_dir: None,
                checksums: Vec::new(),
                started_unix: now(),
                finished_unix: None,
                status: "running".into(),
            },
        };
        run.write_manifest()?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), DamError> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| DamError::io(&p, e))
    }

    pub fn create(&self, name: &str) -> Result<LineWriter, DamError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| DamError::io(&path, e))?;
        Ok(LineWriter {
            out: BufWriter::new(file),
            path,
        })
    }

    /// Records the data files of a run by checksum.
    pub fn record_data(&mut self, data_dir: &Path) -> Result<(), DamError> {
        self.manifest.data_dir = Some(data_dir.to_path_buf());
        self.manifest.checksums = checksums(data_dir)?;
        self.write_manifest()
    }

    pub fn write_manifest(&self) -> Result<(), DamError> {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| DamError::Internal(e.to_string()))?;
        self.write(MANIFEST_FILE, &(text + "\n"))
    }

    pub fn finish(&mut self, status: &str) -> Result<(), DamError> {
        self.manifest.finished_unix = Some(now());
        self.manifest.status = status.into();
        self.write_manifest()
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

pub struct LineWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LineWriter {
    pub fn line(&mut self, line: &str) -> Result<(), DamError> {
        writeln!(self.out, "{line}").map_err(|e| DamError::io(&self.path, e))
    }

    pub fn json<T: Serialize>(&mut self, value: &T) -> Result<(), DamError> {
        let s = serde_json::to_string(value).map_err(|e| DamError::Internal(e.to_string()))?;
        self.line(&s)
    }

    pub fn finish(mut self) -> Result<(), DamError> {
        self.out.flush().map_err(|e| DamError::io(&self.path, e))
    }
}

/// SHA-256 of every `.jsonl` file under `dir`, sorted by relative path.
pub fn checksums(dir: &Path) -> Result<Vec<(String, String)>, DamError> {
    let mut files = Vec::new();
    collect(dir, &mut files)?;
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).map_err(|e| DamError::io(&p, e))?;
            let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            Ok((rel, format!("{:x}", Sha256::digest(&bytes))))
        })
        .collect()
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DamError> {
    for entry in fs::read_dir(dir).map_err(|e| DamError::io(dir, e))? {
        let p = entry.map_err(|e| DamError::io(dir, e))?.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "jsonl") {
            out.push(p);
        }
    }
    Ok(())
}
