use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub step: usize,
    pub name: String,
    pub value: f64,
}

/// Line-delimited metric log. Records are kept in memory and, when a path is
/// set, appended to the file as they arrive.
pub struct MetricsLog {
    records: Vec<MetricRecord>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            file: None,
        }
    }

    /// Appends to `path`, creating it if needed.
    pub fn append_to(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            file: Some((path.to_path_buf(), BufWriter::new(f))),
        })
    }

    pub fn push(&mut self, stage: &str, step: usize, name: &str, value: f64) -> Result<()> {
        let rec = MetricRecord {
            stage: stage.to_string(),
            step,
            name: name.to_string(),
            value,
        };
        if let Some((path, w)) = &mut self.file {
            // serde_json cannot encode non-finite floats
            let line = if value.is_finite() {
                serde_json::to_string(&rec)?
            } else {
                format!(
                    "{{\"stage\":{},\"step\":{step},\"name\":{},\"value\":null}}",
                    serde_json::to_string(stage)?,
                    serde_json::to_string(name)?
                )
            };
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.file {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    /// Values of one metric in step order.
    pub fn series(&self, name: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.name == name)
            .map(|r| (r.step, r.value))
            .collect()
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        out.push(MetricRecord {
            stage: v["stage"].as_str().unwrap_or_default().to_string(),
            step: v["step"].as_u64().unwrap_or_default() as usize,
            name: v["name"].as_str().unwrap_or_default().to_string(),
            value: v["value"].as_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}
