//! Output directory bookkeeping: CSV tables, JSON reports and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use hgl_core::{HglError, Snapshot};

pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
    timings: BTreeMap<String, f64>,
    seeds: BTreeMap<String, u64>,
    violations: Vec<String>,
    clock: Instant,
}

impl Artifacts {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            timings: BTreeMap::new(),
            seeds: BTreeMap::new(),
            violations: Vec::new(),
            clock: Instant::now(),
        })
    }

    fn record(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    /// Writes a CSV table; numbers use the shortest round-trip formatting.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), HglError> {
        let path = self.record(name);
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), HglError> {
        let path = self.record(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| HglError::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<(), HglError> {
        let path = self.record(name);
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn snapshot(&mut self, name: &str, s: &Snapshot) -> Result<(), HglError> {
        let path = self.record(name);
        s.save(&path)
    }

    pub fn seed(&mut self, task: &str, seed: u64) {
        self.seeds.insert(task.to_string(), seed);
    }

    /// Records the time since the previous stage under `stage`.
    pub fn lap(&mut self, stage: &str) {
        let t = self.clock.elapsed().as_secs_f64();
        let before: f64 = self.timings.values().sum();
        self.timings.insert(stage.to_string(), t - before);
    }

    pub fn violation(&mut self, msg: impl Into<String>) {
        self.violations.push(msg.into());
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn seeds(&self) -> &BTreeMap<String, u64> {
        &self.seeds
    }

    pub fn timings(&self) -> &BTreeMap<String, f64> {
        &self.timings
    }
}

fn csv_err(e: csv::Error) -> HglError {
    HglError::Format(format!("csv: {e}"))
}

/// Formats a number for CSV output.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
