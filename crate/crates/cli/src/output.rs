//! Output locations: overwrite protection, a lockfile against concurrent
//! writers, and an `artifact.json` sidecar recording the config hash, seed
//! and file digests.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, CliResult};

pub const LOCK_FILE: &str = ".mobgcl.lock";
pub const ARTIFACT_FILE: &str = "artifact.json";

/// Holds the lock of one output directory until dropped.
pub struct OutputDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    /// Creates `path`, refusing a non-empty directory unless `force`.
    pub fn claim(path: &Path, force: bool) -> CliResult<Self> {
        let occupied = path.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
        if occupied && !force {
            return Err(CliError::Usage(format!("{} exists and is not empty; pass --force to overwrite", path.display())));
        }
        std::fs::create_dir_all(path).map_err(|e| io_err(path, e))?;
        let lock = path.join(LOCK_FILE);
        take_lock(&lock)?;
        Ok(OutputDir { path: path.to_path_buf(), lock })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes the sidecar over every regular file in the directory.
    pub fn seal(&self, command: &str, config_hash: &str, seed: u64) -> CliResult<()> {
        let mut files = BTreeMap::new();
        for entry in self.path.read_dir().map_err(|e| io_err(&self.path, e))?.flatten() {
            let name = entry.file_name().to_string_lossy().to_string();
            if name == LOCK_FILE || name == ARTIFACT_FILE || !entry.path().is_file() {
                continue;
            }
            files.insert(name, sha256_file(&entry.path())?);
        }
        write_artifact(&self.join(ARTIFACT_FILE), command, config_hash, seed, files)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

/// Lock on a single output file, `<file>.lock`.
pub struct OutputFile {
    pub path: PathBuf,
    lock: PathBuf,
}

impl OutputFile {
    pub fn claim(path: &Path, force: bool) -> CliResult<Self> {
        if path.exists() && !force {
            return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", path.display())));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let lock = sibling(path, "lock");
        take_lock(&lock)?;
        Ok(OutputFile { path: path.to_path_buf(), lock })
    }

    /// Writes `<file>.artifact.json`.
    pub fn seal(&self, command: &str, config_hash: &str, seed: u64) -> CliResult<()> {
        let name = self.path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        let files = BTreeMap::from([(name, sha256_file(&self.path)?)]);
        write_artifact(&sibling(&self.path, "artifact.json"), command, config_hash, seed, files)
    }
}

impl Drop for OutputFile {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn take_lock(lock: &Path) -> CliResult<()> {
    match OpenOptions::new().write(true).create_new(true).open(lock) {
        Ok(_) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Data(format!(
            "{} is held by another command (remove it if no command is running)",
            lock.display()
        ))),
        Err(e) => Err(io_err(lock, e)),
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Serialize)]
struct Artifact<'a> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    files: BTreeMap<String, String>,
}

fn write_artifact(path: &Path, command: &str, config_hash: &str, seed: u64, files: BTreeMap<String, String>) -> CliResult<()> {
    let a = Artifact { command, config_hash, seed, files };
    Ok(mobgcl::data::write_json(path, &a)?)
}

/// Hash of an ad-hoc parameter set, for commands that run without a config
/// file.
pub fn params_hash<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("parameters serialize")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_and_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let a = OutputDir::claim(&out, false).unwrap();
        std::fs::write(a.join("x.txt"), "1").unwrap();
        assert!(matches!(OutputDir::claim(&out, false), Err(CliError::Usage(_))));
        assert!(matches!(OutputDir::claim(&out, true), Err(CliError::Data(_))));
        drop(a);
        let b = OutputDir::claim(&out, true).unwrap();
        b.seal("test", "h", 1).unwrap();
        let art: serde_json::Value = mobgcl::data::read_json(&b.join(ARTIFACT_FILE)).unwrap();
        assert_eq!(art["files"].as_object().unwrap().len(), 1);
        assert_eq!(art["seed"], 1);
    }
}
