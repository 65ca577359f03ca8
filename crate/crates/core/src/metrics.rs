//! Append-only JSON-lines metric files.
//!
//! Each line is one [`MetricRecord`] preceded by the run's config digest.
//! Lines are flushed as they are written, so a crashed run leaves a
//! parseable prefix; a torn final line is skipped on read.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distiller::MetricRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub digest: String,
    #[serde(flatten)]
    pub record: MetricRecord,
}

pub struct MetricsSink {
    file: File,
    path: PathBuf,
    digest: String,
}

impl MetricsSink {
    /// Opens `path` for appending, creating it if needed.
    pub fn open(path: &Path, digest: &str) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
            digest: digest.to_string(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        let line = MetricLine {
            digest: self.digest.clone(),
            record: record.clone(),
        };
        let mut text = serde_json::to_string(&line)?;
        text.push('\n');
        self.file.write_all(text.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Reads every complete line of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricLine>> {
    let file = File::open(path)?;
    let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    let ends_clean = std::fs::read(path)?.last().is_none_or(|&b| b == b'\n');
    let mut out = Vec::with_capacity(lines.len());
    let n = lines.len();
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(rec) => out.push(rec),
            Err(_) if i + 1 == n && !ends_clean => break,
            Err(e) => {
                return Err(Error::Input(format!(
                    "{}: line {} is not a metric record: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}
