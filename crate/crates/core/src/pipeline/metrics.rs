//! Append-only step metrics CSV and the end-of-run JSON summary.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::train::{EpochMean, StepRecord};
use crate::error::{bail, Result};

pub const CSV_HEADER: &str = "step,epoch,lr,loss_total,loss_recon,loss_contrastive,pos_sim";

/// Writes one row for every step divisible by the logging interval.
pub struct MetricsWriter {
    out: BufWriter<File>,
    interval: u64,
    rows: usize,
}

impl MetricsWriter {
    /// Creates (or truncates) `path` and writes the header.
    pub fn create(path: &Path, interval: usize) -> Result<Self> {
        if interval == 0 {
            bail!(Config, "log interval must be positive");
        }
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        Ok(MetricsWriter { out, interval: interval as u64, rows: 0 })
    }

    /// Appends to an existing metrics file (resume); a missing or empty file gets a header.
    pub fn append(path: &Path, interval: usize) -> Result<Self> {
        if interval == 0 {
            bail!(Config, "log interval must be positive");
        }
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{CSV_HEADER}")?;
        }
        Ok(MetricsWriter { out, interval: interval as u64, rows: 0 })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        if r.step % self.interval != 0 {
            return Ok(());
        }
        writeln!(
            self.out,
            "{},{},{},{},{},{},{}",
            r.step, r.epoch, r.lr, r.loss.total, r.loss.recon, r.loss.contrastive, r.loss.mean_positive_similarity
        )?;
        self.rows += 1;
        Ok(())
    }

    /// Rows written by this writer (header excluded).
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub lambda_c: f64,
    pub final_loss_total: f64,
    pub final_loss_recon: f64,
    pub final_loss_contrastive: f64,
    pub first_step_contrastive: Option<f64>,
    pub epoch_means: Vec<EpochMean>,
    pub wall_seconds: f64,
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Parsed CSV row, for audits and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    pub recon: f64,
    pub contrastive: f64,
    pub pos_sim: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        bail!(Format, "{}: missing metrics header", path.display());
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            bail!(Format, "{}: row {} has {} fields", path.display(), i + 1, f.len());
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| crate::CmaeError::Format(format!("bad number `{s}`"))) };
        rows.push(MetricsRow {
            step: num(f[0])? as u64,
            epoch: num(f[1])? as u64,
            lr: num(f[2])?,
            total: num(f[3])?,
            recon: num(f[4])?,
            contrastive: num(f[5])?,
            pos_sim: num(f[6])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{total_loss, LossConfig};

    fn rec(step: u64) -> StepRecord {
        let loss = total_loss(1.0 + step as f64, 0.5, &LossConfig { lambda_c: 0.5, ..LossConfig::default() });
        StepRecord { step, epoch: step / 4, lr: 1e-4, loss }
    }

    #[test]
    fn header_and_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path, 10).unwrap();
        for s in 0..25 {
            w.record(&rec(s)).unwrap();
        }
        w.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 3);
        for r in rows {
            assert!((r.total - (r.recon + 0.5 * r.contrastive)).abs() < 1e-12);
        }
    }

    #[test]
    fn append_keeps_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path, 1).unwrap();
        w.record(&rec(0)).unwrap();
        w.flush().unwrap();
        drop(w);
        let mut w = MetricsWriter::append(&path, 1).unwrap();
        w.record(&rec(1)).unwrap();
        w.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("step,").count(), 1);
        assert_eq!(read_metrics(&path).unwrap().len(), 2);
    }
}
