//! Append-only JSONL log of training rounds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// `base` or the continual variant.
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub cities: Vec<u32>,
    /// Parameter fingerprint of the teacher, `None` for base training.
    pub input_checkpoint: Option<String>,
    pub output_checkpoint: String,
    pub output_path: PathBuf,
    pub metrics: BTreeMap<String, f64>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub struct RunLedger {
    path: PathBuf,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunLedger {
    pub fn new(path: &Path) -> Self {
        RunLedger { path: path.to_path_buf() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> CliResult<Vec<LedgerEntry>> {
        let file = match std::fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.path, e)),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(&self.path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", self.path.display(), i + 1)))?);
        }
        Ok(out)
    }

    pub fn append(&self, entry: &LedgerEntry) -> CliResult<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let mut line = serde_json::to_string(entry).expect("entry serializes");
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(|e| io_err(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| io_err(&self.path, e))
    }

    /// Whether some recorded round produced `fingerprint`.
    pub fn produced(&self, fingerprint: &str) -> CliResult<bool> {
        Ok(self.entries()?.iter().any(|e| e.output_checkpoint == fingerprint))
    }

    /// Checks that every round's input was produced by an earlier round.
    pub fn verify(&self) -> CliResult<()> {
        verify_chain(&self.entries()?)
    }
}

pub fn verify_chain(entries: &[LedgerEntry]) -> CliResult<()> {
    let mut seen = BTreeSet::new();
    for (i, e) in entries.iter().enumerate() {
        if let Some(input) = &e.input_checkpoint {
            if !seen.contains(input.as_str()) {
                return Err(CliError::Data(format!("ledger entry {i} consumes {input}, which no earlier entry produced")));
            }
        }
        seen.insert(e.output_checkpoint.as_str());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(input: Option<&str>, output: &str) -> LedgerEntry {
        LedgerEntry {
            kind: "base".into(),
            config_hash: "c".into(),
            seed: 0,
            cities: vec![0],
            input_checkpoint: input.map(String::from),
            output_checkpoint: output.into(),
            output_path: PathBuf::from("x"),
            metrics: BTreeMap::new(),
            started_unix: 0,
            finished_unix: 0,
        }
    }

    #[test]
    fn chain_checks() {
        assert!(verify_chain(&[entry(None, "a"), entry(Some("a"), "b"), entry(Some("a"), "c")]).is_ok());
        assert!(verify_chain(&[entry(Some("b"), "a"), entry(None, "b")]).is_err());
        assert!(verify_chain(&[entry(Some("a"), "a")]).is_err());
    }

    #[test]
    fn append_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let l = RunLedger::new(&dir.path().join("runs/ledger.jsonl"));
        assert!(l.entries().unwrap().is_empty());
        l.append(&entry(None, "a")).unwrap();
        l.append(&entry(Some("a"), "b")).unwrap();
        assert_eq!(l.entries().unwrap().len(), 2);
        assert!(l.produced("b").unwrap() && !l.produced("z").unwrap());
        l.verify().unwrap();
    }
}
