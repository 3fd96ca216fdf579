//! Poincaré-ball operations at the origin.
//!
//! The ball of curvature `c > 0` is `{x : √c‖x‖ < 1}`. Every op that returns
//! a [`BallPoint`] projects onto `√c‖x‖ ≤ 1 − BALL_EPS`. The exponential and
//! logarithmic maps are exact inverses of one another:
//!
//! ```text
//! exp₀(v) = tanh(√c‖v‖) · v / (√c‖v‖)
//! log₀(y) = atanh(√c‖y‖) · y / (√c‖y‖)
//! ```
//!
//! [`diff`] holds the batched, tape-differentiable versions used by the
//! models; this module holds the plain scalar-vector versions.

pub mod diff;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tape::softplus;

/// Distance kept from the ball boundary, in units of the radius.
pub const BALL_EPS: f64 = 1e-5;
/// Norms below this are treated as the origin.
pub const NORM_EPS: f64 = 1e-9;
/// Lower bound added to the softplus curvature parameterization.
pub const C_MIN: f64 = 1e-3;
/// Smallest admissible Möbius-addition denominator.
pub const DENOM_EPS: f64 = 1e-12;

static ATANH_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times an `atanh` argument was clamped at `1 − BALL_EPS`.
pub fn atanh_clamp_count() -> u64 {
    ATANH_CLAMPS.load(Ordering::Relaxed)
}

pub(crate) fn record_atanh_clamps(n: u64) {
    if n > 0 {
        ATANH_CLAMPS.fetch_add(n, Ordering::Relaxed);
    }
}

/// Positive ball curvature `c`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidInput(format!(
                "curvature must be positive and finite, got {value}"
            )));
        }
        Ok(Self(value))
    }

    /// `softplus(raw) + C_MIN`, the learnable parameterization.
    pub fn from_raw(raw: f64) -> Self {
        Self(softplus(raw) + C_MIN)
    }

    /// Raw parameter that maps to `value` under [`Curvature::from_raw`].
    pub fn raw_for(value: f64) -> Result<f64> {
        let s = value - C_MIN;
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "curvature {value} is not above the floor {C_MIN}"
            )));
        }
        // softplus⁻¹(s) = s + ln(1 − e^{−s})
        Ok(s + (-(-s).exp()).ln_1p())
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Largest admissible Euclidean norm, `(1 − BALL_EPS)/√c`.
    pub fn max_norm(self) -> f64 {
        (1.0 - BALL_EPS) / self.sqrt()
    }
}

/// Vector in the tangent space at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite tangent vector".into()));
        }
        Ok(Self(coords))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

/// Point of the Poincaré ball together with the curvature it lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl BallPoint {
    /// Wraps coordinates that already lie strictly inside the ball.
    ///
    /// Points in the thin shell `1 − BALL_EPS < √c‖x‖ < 1` are accepted as is;
    /// [`log_map0`] clamps them.
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite ball point".into()));
        }
        let scaled = curvature.sqrt() * norm(&coords);
        if scaled >= 1.0 {
            return Err(Error::Domain(format!(
                "√c‖x‖ = {scaled} is not inside the unit ball"
            )));
        }
        Ok(Self { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        Self {
            coords: vec![0.0; dim],
            curvature,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Additive inverse `−x`, which is also the Möbius inverse.
    pub fn neg(&self) -> Self {
        Self {
            coords: self.coords.iter().map(|v| -v).collect(),
            curvature: self.curvature,
        }
    }

    /// `√c‖x‖ ≤ 1 − BALL_EPS`.
    pub fn is_contained(&self) -> bool {
        self.curvature.sqrt() * norm(&self.coords) <= 1.0 - BALL_EPS
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn scaled(x: &[f64], s: f64) -> Vec<f64> {
    x.iter().map(|v| v * s).collect()
}

fn ensure_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("non-finite {what}")))
    }
}

/// Rescales `x` onto `√c‖x‖ ≤ 1 − BALL_EPS` if it lies beyond.
pub fn ball_project(x: &[f64], c: Curvature) -> BallPoint {
    let limit = 1.0 - BALL_EPS;
    let sc = c.sqrt();
    let n = norm(x);
    let mut coords = if sc * n > limit {
        scaled(x, limit / (sc * n))
    } else {
        x.to_vec()
    };
    // Rounding can leave the rescaled point one ulp outside.
    while sc * norm(&coords) > limit {
        coords.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
    }
    BallPoint {
        coords,
        curvature: c,
    }
}

/// Exponential map at the origin.
pub fn exp_map0(v: &TangentVector, c: Curvature) -> Result<BallPoint> {
    ensure_finite(v.coords(), "tangent vector")?;
    let n = v.norm();
    if n < NORM_EPS {
        return Ok(BallPoint::origin(v.coords().len(), c));
    }
    let a = c.sqrt() * n;
    Ok(ball_project(&scaled(v.coords(), a.tanh() / a), c))
}

/// Logarithmic map at the origin, the inverse of [`exp_map0`].
pub fn log_map0(y: &BallPoint) -> Result<TangentVector> {
    ensure_finite(y.coords(), "ball point")?;
    let n = norm(y.coords());
    if n < NORM_EPS {
        return Ok(TangentVector::zeros(y.dim()));
    }
    let sc = y.curvature.sqrt();
    let mut a = sc * n;
    if a >= 1.0 {
        return Err(Error::Domain(format!(
            "√c‖y‖ = {a} is on or outside the boundary"
        )));
    }
    if a > 1.0 - BALL_EPS {
        a = 1.0 - BALL_EPS;
        record_atanh_clamps(1);
    }
    TangentVector::new(scaled(y.coords(), a.atanh() / (sc * n)))
}

fn same_ball(x: &BallPoint, y: &BallPoint) -> Result<Curvature> {
    if x.curvature != y.curvature {
        return Err(Error::InvalidInput(format!(
            "points live in different balls (c = {} and c = {})",
            x.curvature.value(),
            y.curvature.value()
        )));
    }
    if x.dim() != y.dim() {
        return Err(Error::Shape {
            op: "mobius_add",
            lhs: vec![x.dim()],
            rhs: vec![y.dim()],
        });
    }
    Ok(x.curvature)
}

/// Möbius addition `x ⊕_c y`.
pub fn mobius_add(x: &BallPoint, y: &BallPoint) -> Result<BallPoint> {
    let c = same_ball(x, y)?;
    ensure_finite(x.coords(), "ball point")?;
    ensure_finite(y.coords(), "ball point")?;
    let cv = c.value();
    let xy = dot(x.coords(), y.coords());
    let x2 = dot(x.coords(), x.coords());
    let y2 = dot(y.coords(), y.coords());
    let coef_x = 1.0 + 2.0 * cv * xy + cv * y2;
    let coef_y = 1.0 - cv * x2;
    let den = 1.0 + 2.0 * cv * xy + cv * cv * x2 * y2;
    if den.abs() < DENOM_EPS {
        return Err(Error::Degenerate(format!(
            "Möbius addition denominator {den:e}"
        )));
    }
    let out: Vec<f64> = x
        .coords()
        .iter()
        .zip(y.coords())
        .map(|(a, b)| (coef_x * a + coef_y * b) / den)
        .collect();
    Ok(ball_project(&out, c))
}

/// Möbius scalar multiplication `r ⊗_c x`.
pub fn mobius_scalar(r: f64, x: &BallPoint) -> Result<BallPoint> {
    if !r.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite scalar {r}")));
    }
    ensure_finite(x.coords(), "ball point")?;
    let n = norm(x.coords());
    if n < NORM_EPS || r == 0.0 {
        return Ok(BallPoint::origin(x.dim(), x.curvature));
    }
    let sc = x.curvature.sqrt();
    let a = sc * n;
    let clamped = a.min(1.0 - BALL_EPS);
    if clamped < a {
        record_atanh_clamps(1);
    }
    let factor = (r * clamped.atanh()).tanh() / a;
    Ok(ball_project(&scaled(x.coords(), factor), x.curvature))
}

/// Moves a point between balls of different curvature through the tangent
/// space at the origin: `exp₀^{c_to}(log₀^{c_from}(x))`.
pub fn transport(x: &BallPoint, c_to: Curvature) -> Result<BallPoint> {
    if x.curvature == c_to {
        return Ok(x.clone());
    }
    exp_map0(&log_map0(x)?, c_to)
}
