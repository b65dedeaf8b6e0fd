//! Append-only JSON-lines metrics and atomic artifact writes
//! (write-temp-then-rename).

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub phase: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub wall_time_s: f64,
}

pub struct MetricsWriter {
    path: PathBuf,
    run_id: String,
    phase: String,
    seed: u64,
    started: Instant,
}

impl MetricsWriter {
    pub fn new(dir: &Path, run_id: &str, phase: &str, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create metrics dir {}", dir.display()))?;
        Ok(MetricsWriter {
            path: dir.join(format!("{phase}.jsonl")),
            run_id: run_id.to_string(),
            phase: phase.to_string(),
            seed,
            started: Instant::now(),
        })
    }

    pub fn log(&self, step: usize, metric: &str, value: f64) -> Result<()> {
        let record = MetricsRecord {
            run_id: self.run_id.clone(),
            phase: self.phase.clone(),
            step,
            metric: metric.to_string(),
            value,
            seed: self.seed,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .with_context(|| format!("cannot append to {}", self.path.display()))?;
        file.write_all(line.as_bytes())?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("missing metrics file {}", path.display()))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).context("bad metrics line"))
        .collect()
}

/// Write-temp-then-rename within the destination directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().context("artifact path has no parent")?;
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create dir {}", dir.display()))?;
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .context("artifact path has no file name")?;
    let tmp = dir.join(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, bytes)
        .with_context(|| format!("cannot write temp file {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("cannot move into place: {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let w = MetricsWriter::new(dir.path(), "run1", "demo", 3).unwrap();
        w.log(0, "loss", 1.5).unwrap();
        w.log(1, "loss", 0.5).unwrap();
        let records = read_metrics(&dir.path().join("demo.jsonl")).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1].step, 1);
        assert_eq!(records[1].value, 0.5);
        assert_eq!(records[0].run_id, "run1");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x/y.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
    }
}
