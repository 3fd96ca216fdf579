use serde::{Deserialize, Serialize};

use super::{EmbeddingRecord, Task};
use crate::error::{Error, Result};
use crate::model::NUM_TASKS;

/// Per-task z-scoring fitted on training labels, optionally in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub mean: [f64; NUM_TASKS],
    pub std: [f64; NUM_TASKS],
    pub log_space: bool,
}

impl LabelScaler {
    /// Fits on `train` with the sample (n − 1) standard deviation.
    pub fn fit(train: &[&EmbeddingRecord], log_space: bool) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::Config(format!(
                "label scaler needs at least 2 training records, got {}",
                train.len()
            )));
        }
        let n = train.len() as f64;
        let mut mean = [0.0; NUM_TASKS];
        let mut std = [0.0; NUM_TASKS];
        for (t, task) in Task::ALL.iter().enumerate() {
            let vals: Vec<f64> = train
                .iter()
                .map(|r| {
                    let v = r.labels()[t];
                    if log_space {
                        v.ln()
                    } else {
                        v
                    }
                })
                .collect();
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
            if var <= 0.0 {
                return Err(Error::Config(format!(
                    "task {task} has zero variance in the training labels"
                )));
            }
            mean[t] = m;
            std[t] = var.sqrt();
        }
        Ok(Self {
            mean,
            std,
            log_space,
        })
    }

    pub fn normalize(&self, labels: [f64; NUM_TASKS]) -> [f64; NUM_TASKS] {
        std::array::from_fn(|t| {
            let v = if self.log_space {
                labels[t].ln()
            } else {
                labels[t]
            };
            (v - self.mean[t]) / self.std[t]
        })
    }

    pub fn denormalize(&self, z: [f64; NUM_TASKS]) -> [f64; NUM_TASKS] {
        std::array::from_fn(|t| {
            let v = z[t] * self.std[t] + self.mean[t];
            if self.log_space {
                v.exp()
            } else {
                v
            }
        })
    }
}
