//! Append-only JSONL result store.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use drivescale_core::closed_loop::EtaRow;
use drivescale_core::eval::SweepRow;
use drivescale_core::fit::RunRecord;
use serde::{Deserialize, Serialize};

use crate::config::DataVariant;
use crate::CliError;

/// Environment variable naming the default store path.
pub const STORE_ENV: &str = "DRIVESCALE_STORE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoreRow {
    Run {
        job: String,
        budget: Option<f64>,
        variant: DataVariant,
        record: RunRecord,
    },
    Failed {
        job: String,
        diagnostic: String,
    },
    Inference {
        job: String,
        model: String,
        params: u64,
        rows: Vec<SweepRow>,
    },
    ClosedLoop {
        job: String,
        row: EtaRow,
    },
}

impl StoreRow {
    pub fn job(&self) -> &str {
        match self {
            StoreRow::Run { job, .. }
            | StoreRow::Failed { job, .. }
            | StoreRow::Inference { job, .. }
            | StoreRow::ClosedLoop { job, .. } => job,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    path: PathBuf,
}

impl Store {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    /// The explicit path, else the environment variable.
    pub fn resolve(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Ok(Self::new(p)),
            None => std::env::var_os(STORE_ENV).map(Self::new).ok_or_else(|| {
                CliError::Config(format!("no store given and {STORE_ENV} is unset"))
            }),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Directory for checkpoints written beside the store.
    pub fn checkpoint_dir(&self) -> PathBuf {
        let mut name = self.path.file_name().unwrap_or_default().to_os_string();
        name.push(".ckpt");
        self.path.with_file_name(name)
    }

    /// Complete rows; a trailing line without a newline is a torn write and
    /// is ignored.
    pub fn load(&self) -> Result<Vec<StoreRow>, CliError> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        complete
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| {
                    CliError::Store(format!("{} line {}: {e}", self.path.display(), i + 1))
                })
            })
            .collect()
    }

    /// Keys of successful rows; failed jobs are retried on resume.
    pub fn completed(&self) -> Result<BTreeSet<String>, CliError> {
        Ok(self
            .load()?
            .iter()
            .filter(|r| !matches!(r, StoreRow::Failed { .. }))
            .map(|r| r.job().to_string())
            .collect())
    }

    /// Appends one row, first dropping a torn trailing fragment.
    pub fn append(&self, row: &StoreRow) -> Result<(), CliError> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut line = serde_json::to_string(row).map_err(|e| CliError::Store(e.to_string()))?;
        line.push('\n');
        if let Ok(mut f) = OpenOptions::new().read(true).write(true).open(&self.path) {
            let len = f.metadata()?.len();
            let mut last = [b'\n'];
            if len > 0 {
                f.seek(SeekFrom::Start(len - 1))?;
                f.read_exact(&mut last)?;
            }
            if last[0] != b'\n' {
                let bytes = fs::read(&self.path)?;
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                f.set_len(keep as u64)?;
            }
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}
