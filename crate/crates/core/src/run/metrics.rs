//! Append-only line-delimited metrics stream.
//!
//! One self-describing JSON record per line. Reports are always
//! re-derivable from the per-example records in the stream.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::EvalExampleRecord;
use crate::error::Result;
use crate::eval::EvalReport;
use crate::ord::RefreshEvent;
use crate::robust::RobustEpochMetrics;
use crate::ssl::GenEpochMetrics;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    GenEpoch(GenEpochMetrics),
    RobustEpoch(RobustEpochMetrics),
    Refresh(RefreshEvent),
    EvalExample {
        attack: String,
        #[serde(flatten)]
        record: EvalExampleRecord,
    },
    Report {
        name: String,
        #[serde(flatten)]
        report: EvalReport,
    },
    Note {
        message: String,
    },
}

/// Append-only writer; every record is flushed on write.
pub struct MetricsWriter {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Read every record in stream order.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
