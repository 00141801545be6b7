//! Newline-delimited JSON training metrics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub losses: BTreeMap<String, f64>,
    pub lrs: BTreeMap<String, f64>,
    pub wall_seconds: f64,
}

/// Collects records in memory and optionally appends them to a file.
#[derive(Debug)]
pub struct MetricSink {
    file: Option<(PathBuf, BufWriter<File>)>,
    records: Vec<MetricRecord>,
    started: Instant,
}

impl Default for MetricSink {
    fn default() -> Self {
        Self::memory()
    }
}

impl MetricSink {
    pub fn memory() -> Self {
        Self { file: None, records: Vec::new(), started: Instant::now() }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(Error::io(path))?;
        Ok(Self { file: Some((path.to_path_buf(), BufWriter::new(f))), ..Self::memory() })
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn log(&mut self, iteration: usize, stage: Stage, losses: &[(&str, f64)], lrs: &[(&str, f64)]) -> Result<()> {
        let record = MetricRecord {
            iteration,
            stage,
            losses: losses.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            lrs: lrs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        if let Some((path, w)) = self.file.as_mut() {
            let line = serde_json::to_string(&record).map_err(Error::json(path.clone()))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(Error::io(path.clone()))?;
        }
        self.records.push(record);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_one_json_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricSink::to_file(&path).unwrap();
        sink.log(0, Stage::Teacher, &[("loss", 0.5)], &[("teacher", 2e-5)]).unwrap();
        sink.log(1, Stage::Teacher, &[("loss", 0.25)], &[("teacher", 2e-5)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: Vec<MetricRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].losses["loss"], 0.25);
        assert_eq!(back[0].stage, Stage::Teacher);
    }
}
