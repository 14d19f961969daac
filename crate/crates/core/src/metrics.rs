//! Per-round metrics rows and their comma-separated serialization.
//!
//! Reals are written with 17 significant digits so that identical runs
//! produce byte-identical files. Accuracy cells are left empty for models
//! without a notion of accuracy.

use std::io::Write;

use crate::error::Result;

pub const METRICS_HEADER: &str =
    "round,train_loss,train_accuracy,test_loss,test_accuracy,alpha,beta_mean,beta_min,beta_max,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    /// Global learning rate applied this round.
    pub alpha: f64,
    /// Statistics over every local learning rate applied this round.
    pub beta_mean: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.train_loss,
            self.test_loss,
            self.alpha,
            self.beta_mean,
            self.beta_min,
            self.beta_max,
        ]
        .iter()
        .chain(self.train_accuracy.iter())
        .chain(self.test_accuracy.iter())
        .all(|v| v.is_finite())
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.round,
            fmt_real(self.train_loss),
            fmt_opt(self.train_accuracy),
            fmt_real(self.test_loss),
            fmt_opt(self.test_accuracy),
            fmt_real(self.alpha),
            fmt_real(self.beta_mean),
            fmt_real(self.beta_min),
            fmt_real(self.beta_max),
            self.wall_ms
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<MetricsRecord> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 10 {
            return None;
        }
        let real = |s: &str| s.parse::<f64>().ok();
        let opt = |s: &str| if s.is_empty() { Some(None) } else { real(s).map(Some) };
        Some(MetricsRecord {
            round: f[0].parse().ok()?,
            train_loss: real(f[1])?,
            train_accuracy: opt(f[2])?,
            test_loss: real(f[3])?,
            test_accuracy: opt(f[4])?,
            alpha: real(f[5])?,
            beta_mean: real(f[6])?,
            beta_min: real(f[7])?,
            beta_max: real(f[8])?,
            wall_ms: f[9].parse().ok()?,
        })
    }
}

/// 17 significant digits in scientific notation.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_default()
}

/// Streams metrics rows to a sink, one line per record, flushing each row.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_csv_row())?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
