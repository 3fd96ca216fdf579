//! Regression loss and the pairwise total-correlation penalty on the
//! per-subspace tangent latents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NUM_TASKS;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_HTC_WEIGHT: f64 = 0.1;
/// Floor on per-dimension standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_sr: f64,
    pub mse_bps: f64,
    pub mse_q: f64,
    pub htc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn mse_sum(&self) -> f64 {
        self.mse_sr + self.mse_bps + self.mse_q
    }
}

/// Mean squared difference.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Usage("mse of an empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape {
            op: "mse",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn mse_var(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Shape {
            op: "mse",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d)?;
    tape.mean(sq, None)
}

/// Centers a `[B, d]` latent and divides each column by its floored
/// standard deviation, so that `nᵢᵀnⱼ / (B−1)` is the correlation matrix.
fn standardize(tape: &mut Tape, u: Var, batch: usize) -> Result<Var> {
    let mean = tape.mean(u, Some(0))?;
    let centered = tape.sub(u, mean)?;
    let sq = tape.square(centered)?;
    let ss = tape.sum(sq, Some(0))?;
    let var = tape.scale(ss, 1.0 / (batch - 1) as f64)?;
    let var = tape.clamp_min(var, SIGMA_FLOOR * SIGMA_FLOOR)?;
    let sigma = tape.sqrt(var)?;
    tape.div(centered, sigma)
}

/// Sum over unordered pairs of the mean squared cross-correlation between
/// latents, each `[B, d_h]`.
pub fn htc_loss(tape: &mut Tape, latents: &[Var]) -> Result<Var> {
    let first = *latents
        .first()
        .ok_or_else(|| Error::Usage("htc loss needs at least one latent".into()))?;
    let shape = tape.shape(first).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "htc_loss",
            lhs: shape,
            rhs: vec![0, 0],
        });
    }
    for &u in latents {
        if tape.shape(u) != shape.as_slice() {
            return Err(Error::Shape {
                op: "htc_loss",
                lhs: shape,
                rhs: tape.shape(u).to_vec(),
            });
        }
    }
    let (batch, dim) = (shape[0], shape[1]);
    if batch < 2 {
        return Err(Error::Usage(format!(
            "htc loss needs a batch of at least 2, got {batch}"
        )));
    }
    let std = latents
        .iter()
        .map(|&u| standardize(tape, u, batch))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / ((batch - 1) as f64 * dim as f64);
    let mut total = tape.scalar(0.0)?;
    for i in 0..std.len() {
        let ti = tape.transpose(std[i])?;
        for &nj in &std[i + 1..] {
            let corr = tape.matmul(ti, nj)?;
            let corr = tape.scale(corr, scale)?;
            let sq = tape.square(corr)?;
            let s = tape.sum(sq, None)?;
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

/// Plain-value evaluation of [`htc_loss`].
pub fn htc_value(latents: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = latents
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let v = htc_loss(&mut tape, &vars)?;
    Ok(tape.value(v).item())
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mse: [Var; NUM_TASKS],
    pub htc: Option<Var>,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown {
            mse_sr: v(self.mse[0]),
            mse_bps: v(self.mse[1]),
            mse_q: v(self.mse[2]),
            htc: self.htc.map_or(0.0, v),
            total: v(self.total),
        }
    }
}

/// `Σ_t mse_t + λ · htc`; pass no latents for the baselines.
pub fn total_loss(
    tape: &mut Tape,
    preds: &[Var],
    targets: &[Var],
    latents: &[Var],
    htc_weight: f64,
) -> Result<LossVars> {
    if preds.len() != NUM_TASKS || targets.len() != NUM_TASKS {
        return Err(Error::Usage(format!(
            "expected {NUM_TASKS} predictions and targets, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let mut mse = [preds[0]; NUM_TASKS];
    for t in 0..NUM_TASKS {
        mse[t] = mse_var(tape, preds[t], targets[t])?;
    }
    let mut total = tape.add(mse[0], mse[1])?;
    total = tape.add(total, mse[2])?;
    let htc = if latents.is_empty() {
        None
    } else {
        let h = htc_loss(tape, latents)?;
        let weighted = tape.scale(h, htc_weight)?;
        total = tape.add(total, weighted)?;
        Some(h)
    };
    Ok(LossVars { total, mse, htc })
}
