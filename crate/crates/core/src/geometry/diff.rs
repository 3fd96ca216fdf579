//! Batched Poincaré-ball ops recorded on a [`Tape`].
//!
//! Points are `[batch, dim]` tensors, one point per row; curvatures are
//! `[1]` tape values so that gradients reach the raw curvature parameters.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{record_atanh_clamps, BALL_EPS, C_MIN, DENOM_EPS, NORM_EPS};

/// `softplus(raw) + C_MIN`.
pub fn curvature(tape: &mut Tape, raw: Var) -> Result<Var> {
    let sp = tape.softplus(raw)?;
    tape.add_scalar(sp, C_MIN)
}

/// Row norms with a 0/1 mask of rows above `NORM_EPS`, the norm floored there.
fn guarded_norm(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let n = tape.l2_norm(x)?;
    let mask = tape.value(n).clone();
    let mask_data: Vec<f64> = mask
        .data()
        .iter()
        .map(|&v| if v >= NORM_EPS { 1.0 } else { 0.0 })
        .collect();
    let mask = tape.constant(Tensor::new(mask.shape().to_vec(), mask_data)?)?;
    let safe = tape.clamp_min(n, NORM_EPS)?;
    Ok((safe, mask))
}

fn clamped_atanh(tape: &mut Tape, a: Var) -> Result<Var> {
    let limit = 1.0 - BALL_EPS;
    let clamps = tape.value(a).data().iter().filter(|&&v| v > limit).count();
    record_atanh_clamps(clamps as u64);
    let ac = tape.clamp_max(a, limit)?;
    tape.atanh(ac)
}

/// Rescales rows with `√c‖x‖ > 1 − BALL_EPS` back onto that sphere.
pub fn ball_project(tape: &mut Tape, x: Var, c: Var) -> Result<Var> {
    let n = tape.l2_norm(x)?;
    let sc = tape.sqrt(c)?;
    let r = tape.mul(n, sc)?;
    let r = tape.scale(r, 1.0 / (1.0 - BALL_EPS))?;
    let r = tape.clamp_min(r, 1.0)?;
    tape.div(x, r)
}

pub fn exp_map0(tape: &mut Tape, v: Var, c: Var) -> Result<Var> {
    let (n, mask) = guarded_norm(tape, v)?;
    let sc = tape.sqrt(c)?;
    let a = tape.mul(n, sc)?;
    let th = tape.tanh(a)?;
    let f = tape.div(th, a)?;
    let f = tape.mul(f, mask)?;
    let out = tape.mul(v, f)?;
    ball_project(tape, out, c)
}

pub fn log_map0(tape: &mut Tape, y: Var, c: Var) -> Result<Var> {
    let (n, mask) = guarded_norm(tape, y)?;
    let sc = tape.sqrt(c)?;
    let a = tape.mul(n, sc)?;
    let at = clamped_atanh(tape, a)?;
    let f = tape.div(at, a)?;
    let f = tape.mul(f, mask)?;
    tape.mul(y, f)
}

/// Row-wise `x ⊕_c y`.
pub fn mobius_add(tape: &mut Tape, x: Var, y: Var, c: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::Shape {
            op: "mobius_add",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(y).to_vec(),
        });
    }
    let last = tape.shape(x).len() - 1;
    let prod = tape.mul(x, y)?;
    let xy = tape.sum(prod, Some(last))?;
    let xsq = tape.square(x)?;
    let x2 = tape.sum(xsq, Some(last))?;
    let ysq = tape.square(y)?;
    let y2 = tape.sum(ysq, Some(last))?;

    let two_c = tape.scale(c, 2.0)?;
    let two_c_xy = tape.mul(two_c, xy)?;
    let c_y2 = tape.mul(c, y2)?;
    let coef_x = tape.add(two_c_xy, c_y2)?;
    let coef_x = tape.add_scalar(coef_x, 1.0)?;
    let c_x2 = tape.mul(c, x2)?;
    let coef_y = tape.scale(c_x2, -1.0)?;
    let coef_y = tape.add_scalar(coef_y, 1.0)?;

    let c2 = tape.square(c)?;
    let x2y2 = tape.mul(x2, y2)?;
    let cross = tape.mul(c2, x2y2)?;
    let den = tape.add(two_c_xy, cross)?;
    let den = tape.add_scalar(den, 1.0)?;
    if let Some(&d) = tape.value(den).data().iter().find(|d| d.abs() < DENOM_EPS) {
        return Err(Error::Degenerate(format!(
            "Möbius addition denominator {d:e}"
        )));
    }

    let tx = tape.mul(coef_x, x)?;
    let ty = tape.mul(coef_y, y)?;
    let num = tape.add(tx, ty)?;
    let out = tape.div(num, den)?;
    ball_project(tape, out, c)
}

/// Row-wise `r ⊗_c x`; `r` broadcasts against `[batch, 1]`.
pub fn mobius_scalar(tape: &mut Tape, r: Var, x: Var, c: Var) -> Result<Var> {
    let (n, mask) = guarded_norm(tape, x)?;
    let sc = tape.sqrt(c)?;
    let a = tape.mul(n, sc)?;
    let at = clamped_atanh(tape, a)?;
    let ra = tape.mul(r, at)?;
    let th = tape.tanh(ra)?;
    let f = tape.div(th, a)?;
    let f = tape.mul(f, mask)?;
    let out = tape.mul(x, f)?;
    ball_project(tape, out, c)
}

/// `exp₀^{c_to}(log₀^{c_from}(x))`; the identity when both curvatures are the
/// same tape value.
pub fn transport(tape: &mut Tape, x: Var, c_from: Var, c_to: Var) -> Result<Var> {
    if c_from == c_to {
        return Ok(x);
    }
    let v = log_map0(tape, x, c_from)?;
    exp_map0(tape, v, c_to)
}

/// Fails if any row has `√c‖x‖ > (1 − BALL_EPS)(1 + tol)`.
pub fn check_contained(tape: &Tape, x: Var, c: Var, context: &str) -> Result<()> {
    let sc = tape.value(c).item().sqrt();
    let t = tape.value(x);
    let dim = *t.shape().last().unwrap();
    let limit = (1.0 - BALL_EPS) * (1.0 + 1e-12);
    for (i, row) in t.data().chunks(dim).enumerate() {
        let s = sc * super::norm(row);
        if s > limit {
            return Err(Error::Domain(format!("{context}: row {i} has √c‖x‖ = {s}")));
        }
    }
    Ok(())
}
