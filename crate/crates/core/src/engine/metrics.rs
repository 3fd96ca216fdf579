use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::model::{ModelKind, NUM_TASKS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub rmse: f64,
    pub mae: f64,
}

/// Root mean squared and mean absolute error.
pub fn rmse_mae(pred: &[f64], target: &[f64]) -> Result<Cell> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::Usage(format!(
            "metrics need equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    Ok(Cell {
        rmse: (se / n).sqrt(),
        mae: ae / n,
    })
}

/// Per-task metrics of one test partition, in reporting units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub count: usize,
    pub sr: Cell,
    pub bps: Cell,
    pub q: Cell,
}

impl PartitionMetrics {
    pub fn cells(&self) -> [Cell; NUM_TASKS] {
        [self.sr, self.bps, self.q]
    }

    /// Builds the metrics from native-unit predictions and targets.
    pub fn from_native(preds: &[[f64; NUM_TASKS]], targets: &[[f64; NUM_TASKS]]) -> Result<Self> {
        let cell = |t: usize| {
            let task = Task::ALL[t];
            let p: Vec<f64> = preds.iter().map(|r| task.to_reporting(r[t])).collect();
            let y: Vec<f64> = targets.iter().map(|r| task.to_reporting(r[t])).collect();
            rmse_mae(&p, &y)
        };
        Ok(Self {
            count: preds.len(),
            sr: cell(0)?,
            bps: cell(1)?,
            q: cell(2)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_kind: ModelKind,
    /// `None` when the partition has no records.
    pub closed: Option<PartitionMetrics>,
    pub open: Option<PartitionMetrics>,
    pub val_losses: Vec<f64>,
    /// 1-based epoch of the kept checkpoint.
    pub selected_epoch: usize,
}

fn push_partition(out: &mut String, title: &str, rows: &[(ModelKind, Option<&PartitionMetrics>)]) {
    let _ = writeln!(out, "{title}");
    let mut header = format!("{:<18}", "model");
    for task in Task::ALL {
        let label = format!("{} ({})", task.name(), task.unit());
        let _ = write!(header, " | {label:^19}");
    }
    let _ = writeln!(out, "{header}");
    let mut sub = format!("{:<18}", "");
    for _ in Task::ALL {
        let _ = write!(sub, " | {:>9} {:>9}", "RMSE", "MAE");
    }
    let _ = writeln!(out, "{sub}");
    let _ = writeln!(out, "{}", "-".repeat(sub.len()));
    for (kind, m) in rows {
        let mut line = format!("{:<18}", kind.as_str());
        match m {
            Some(m) => {
                for c in m.cells() {
                    let _ = write!(line, " | {:>9.4} {:>9.4}", c.rmse, c.mae);
                }
            }
            None => {
                for _ in Task::ALL {
                    let _ = write!(line, " | {:>9} {:>9}", "-", "-");
                }
            }
        }
        let _ = writeln!(out, "{line}");
    }
}

/// Plain-text tables: one row per report, SR/BPS/Q × RMSE/MAE columns,
/// closed-set then open-set.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let closed: Vec<_> = reports
        .iter()
        .map(|r| (r.model_kind, r.closed.as_ref()))
        .collect();
    let open: Vec<_> = reports
        .iter()
        .map(|r| (r.model_kind, r.open.as_ref()))
        .collect();
    push_partition(&mut out, "closed-set test", &closed);
    out.push('\n');
    push_partition(&mut out, "open-set test", &open);
    out
}
