use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// A finished training episode.
    Train,
    /// A periodic evaluation episode.
    Eval,
    /// An episode of the closing evaluation.
    Final,
}

/// One row of `metrics.csv`. Empty cells mean "not defined for this row".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: Phase,
    /// Environment steps taken in training when the row was written.
    pub step: usize,
    /// Training episode number, or the index within an evaluation.
    pub episode: usize,
    pub episode_length: usize,
    pub episode_return: f64,
    pub episode_cost: f64,
    /// Train rows: cumulative training cost divided by steps so far.
    /// Evaluation rows: the episode's cost divided by its length.
    pub cost_rate: f64,
    /// Fraction of the episode's steps that executed the plan action;
    /// empty for random warm-up episodes.
    pub balance: Option<f64>,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub model_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub consistency_loss: Option<f64>,
    pub reward_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub cost_loss: Option<f64>,
    pub cost_value_loss: Option<f64>,
}

/// Appends rows to a CSV file, flushing after each one.
pub struct MetricsWriter {
    writer: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { writer: csv::Writer::from_path(path)? })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows: std::result::Result<Vec<MetricsRow>, csv::Error> = reader.deserialize().collect();
    Ok(rows?)
}

/// Sample mean and (population) standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
