//! Per-round metrics and CSV helpers. Floats are written in shortest
//! round-trip form, so re-reading a file reproduces the values exactly.

use std::path::Path;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::Method;
use crate::objectives::LossBreakdown;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub method: Method,
    pub mean_train_loss: f64,
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub global_test_acc: Option<f64>,
    /// Zero unless timing was requested.
    pub wall_ms: u64,
}

impl RoundMetrics {
    /// Averages per-client mean losses of one round.
    pub fn from_losses(
        round: usize,
        method: Method,
        losses: &[LossBreakdown],
        global_test_acc: Option<f64>,
        wall: Option<Duration>,
    ) -> Self {
        let n = losses.len().max(1) as f64;
        Self {
            round,
            method,
            mean_train_loss: losses.iter().map(|l| l.total).sum::<f64>() / n,
            h: losses.iter().map(|l| l.h).sum::<f64>() / n,
            r: losses.iter().map(|l| l.r).sum::<f64>() / n,
            global_test_acc,
            wall_ms: wall.map_or(0, |d| d.as_millis() as u64),
        }
    }
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}
