//! Append-only metric log, written as CSV with a header row.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: [&str; 6] = ["step", "wall_ms", "loss", "nats_per_dim", "lr", "extra"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub wall_ms: f64,
    pub loss: f64,
    pub nats_per_dim: Option<f64>,
    pub lr: f64,
    pub extra: BTreeMap<String, f64>,
}

impl MetricRow {
    fn fields(&self) -> [String; 6] {
        let extra: Vec<String> = self.extra.iter().map(|(k, v)| format!("{k}={v}")).collect();
        [
            self.step.to_string(),
            format!("{:.3}", self.wall_ms),
            self.loss.to_string(),
            self.nats_per_dim.map(|v| v.to_string()).unwrap_or_default(),
            self.lr.to_string(),
            extra.join(";"),
        ]
    }

    fn from_record(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        let bad =
            |what: &str| Error::InvalidArgument(format!("metric log line {line}: bad {what}"));
        let num = |i: usize, what: &str| {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad(what))
        };
        let mut extra = BTreeMap::new();
        for item in rec
            .get(5)
            .unwrap_or("")
            .split(';')
            .filter(|s| !s.is_empty())
        {
            let (k, v) = item.split_once('=').ok_or_else(|| bad("extra"))?;
            extra.insert(k.to_string(), v.parse().map_err(|_| bad("extra"))?);
        }
        Ok(MetricRow {
            step: rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("step"))?,
            wall_ms: num(1, "wall_ms")?,
            loss: num(2, "loss")?,
            nats_per_dim: match rec.get(3) {
                Some("") | None => None,
                Some(_) => Some(num(3, "nats_per_dim")?),
            },
            lr: num(4, "lr")?,
            extra,
        })
    }
}

/// Rows in memory, mirrored to a file when one is given.
pub struct MetricLog {
    path: Option<PathBuf>,
    writer: Option<csv::Writer<File>>,
    rows: Vec<MetricRow>,
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("metric log: {e}"))
}

impl MetricLog {
    pub fn in_memory() -> Self {
        MetricLog {
            path: None,
            writer: None,
            rows: Vec::new(),
        }
    }

    /// Starts a fresh log, replacing any file at `path`.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Self::with_rows(path.as_ref(), Vec::new())
    }

    /// Reopens a log for a resumed run, keeping only rows up to `step`.
    pub fn resume(path: impl AsRef<Path>, step: u64) -> Result<Self> {
        let path = path.as_ref();
        let rows = if path.exists() {
            Self::read(path)?
                .into_iter()
                .filter(|r| r.step <= step)
                .collect()
        } else {
            Vec::new()
        };
        Self::with_rows(path, rows)
    }

    fn with_rows(path: &Path, rows: Vec<MetricRow>) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
        writer.write_record(HEADER).map_err(csv_err)?;
        for r in &rows {
            writer.write_record(r.fields()).map_err(csv_err)?;
        }
        writer.flush()?;
        Ok(MetricLog {
            path: Some(path.to_path_buf()),
            writer: Some(writer),
            rows,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Appends and flushes one row; steps must strictly increase.
    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::InvalidArgument(format!(
                    "metric log steps must increase, got {} after {}",
                    row.step, last.step
                )));
            }
        }
        if let Some(w) = self.writer.as_mut() {
            w.write_record(row.fields()).map_err(csv_err)?;
            w.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
        let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = reader.headers().map_err(csv_err)?.clone();
        if header.iter().ne(HEADER) {
            return Err(Error::InvalidArgument(format!(
                "metric log header {header:?}"
            )));
        }
        reader
            .records()
            .enumerate()
            .map(|(i, rec)| MetricRow::from_record(&rec.map_err(csv_err)?, i + 2))
            .collect()
    }
}
