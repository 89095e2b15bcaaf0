//! CSV outputs. Every file has a fixed header; floats are written in
//! shortest round-trip form, so reading a file back gives the same values.
//!
//! * `metrics.csv`: `epoch, lr, train_loss, clean_acc, robust, epoch_seconds,
//!   selection_seconds, subset_size, attack_steps, n_outlier, n_boundary,
//!   n_robust`. `robust` holds `eps:acc` pairs joined by `;`. Empty cells
//!   mean "not measured".
//! * `tracking.csv`: `epoch, n_outlier, n_boundary, n_robust`.
//! * `selections.csv`: `epoch, index, weight` (epoch 0 is the random start).
//! * `robustness.csv`: `method, epsilon, clean_acc, robust_acc, examples, seconds`.
//! * `report.csv`: `method, fraction, bullet, epsilon, clean_acc, robust_acc,
//!   time_per_epoch, selection_seconds, speedup`, one row per method and ε.

use std::fs::{self, File};
use std::path::Path;

use advprune_core::bullet::TrackingRow;
use advprune_core::trainer::EpochMetrics;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: Option<f64>,
    pub robust: String,
    pub epoch_seconds: f64,
    pub selection_seconds: f64,
    pub subset_size: usize,
    pub attack_steps: usize,
    pub n_outlier: Option<usize>,
    pub n_boundary: Option<usize>,
    pub n_robust: Option<usize>,
}

impl From<&EpochMetrics> for MetricsRecord {
    fn from(m: &EpochMetrics) -> Self {
        let robust = m
            .robust_acc
            .iter()
            .map(|(e, a)| format!("{e}:{a}"))
            .collect::<Vec<_>>()
            .join(";");
        Self {
            epoch: m.epoch,
            lr: m.lr,
            train_loss: m.train_loss,
            clean_acc: m.clean_acc,
            robust,
            epoch_seconds: m.epoch_seconds,
            selection_seconds: m.selection_seconds,
            subset_size: m.subset_size,
            attack_steps: m.attack_steps,
            n_outlier: m.categories.map(|c| c.outlier),
            n_boundary: m.categories.map(|c| c.boundary),
            n_robust: m.categories.map(|c| c.robust),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingRecord {
    pub epoch: usize,
    pub n_outlier: usize,
    pub n_boundary: usize,
    pub n_robust: usize,
}

impl From<&TrackingRow> for TrackingRecord {
    fn from(r: &TrackingRow) -> Self {
        Self {
            epoch: r.epoch,
            n_outlier: r.n_outlier,
            n_boundary: r.n_boundary,
            n_robust: r.n_robust,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub epoch: usize,
    pub index: usize,
    pub weight: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub method: String,
    pub epsilon: f32,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub examples: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub method: String,
    pub fraction: f64,
    pub bullet: bool,
    pub epsilon: f32,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub time_per_epoch: f64,
    pub selection_seconds: f64,
    pub speedup: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}
