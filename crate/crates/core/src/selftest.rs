//! Built-in property suites for geometry, tape gradients and the objective.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{
    ball_project, diff, exp_map0, log_map0, mobius_add, mobius_scalar, norm, transport, BallPoint,
    Curvature, TangentVector,
};
use crate::gradcheck::{check, GradCheckOptions};
use crate::model::{ForwardOptions, Model, ModelConfig, ModelKind};
use crate::objective::{htc_loss, htc_value, total_loss};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const GRAD_TOL: f64 = 1e-4;

/// Deliberate defects used to check that the harness notices failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the logarithmic map's output by `1 + 1e-3`.
    RoundTrip,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round-trip" | "round_trip" => Ok(Fault::RoundTrip),
            _ => Err(Error::Config(format!(
                "unknown fault {s:?} (known: round-trip)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Randomized cases per geometry property.
    pub cases: usize,
    pub fault: Option<Fault>,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: 2_000,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status}  {}::{}  {}",
            self.suite, self.name, self.detail
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelftestReport {
    pub results: Vec<PropertyResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

struct Runner {
    report: SelftestReport,
}

impl Runner {
    fn run(
        &mut self,
        suite: &'static str,
        name: &'static str,
        f: impl FnOnce() -> Result<(bool, String)>,
    ) {
        let (passed, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        self.report.results.push(PropertyResult {
            suite,
            name,
            passed,
            detail,
        });
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn log_with_fault(y: &BallPoint, fault: Option<Fault>) -> Result<TangentVector> {
    let v = log_map0(y)?;
    match fault {
        Some(Fault::RoundTrip) => {
            TangentVector::new(v.coords().iter().map(|x| x * (1.0 + 1e-3)).collect())
        }
        None => Ok(v),
    }
}

fn random_ball_point(rng: &mut ChaCha8Rng, dim: usize, c: Curvature) -> Result<BallPoint> {
    let v = random_vec(rng, dim, 1.0);
    let n = norm(&v).max(1e-12);
    let t = rng.random_range(0.0..0.95);
    BallPoint::new(v.iter().map(|x| x / n * t / c.sqrt()).collect(), c)
}

fn random_curvature(rng: &mut ChaCha8Rng) -> Result<Curvature> {
    Curvature::new(rng.random_range(0.05..4.0))
}

/// Random tangent vector of norm at most `max_norm`.
fn random_tangent(rng: &mut ChaCha8Rng, dim: usize, max_norm: f64) -> Result<TangentVector> {
    let v = random_vec(rng, dim, 1.0);
    let n = norm(&v).max(1e-12);
    let r = rng.random_range(0.0..max_norm);
    TangentVector::new(v.iter().map(|x| x / n * r).collect())
}

fn geometry_suite(r: &mut Runner, opts: &SelftestOptions) {
    let (seed, cases) = (opts.seed, opts.cases);
    r.run("geometry", "exp_log_round_trip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for i in 0..cases {
            let dim = [2, 8, 128][i % 3];
            let c = random_curvature(&mut rng)?;
            let v = random_tangent(&mut rng, dim, 3.0)?;
            let back = log_with_fault(&exp_map0(&v, c)?, opts.fault)?;
            let err = norm(&sub(back.coords(), v.coords())) / v.norm().max(1.0);
            worst = worst.max(err);
        }
        Ok((
            worst <= 1e-5,
            format!("{cases} cases, max scaled error {worst:.3e} (tol 1e-5)"),
        ))
    });
    r.run("geometry", "mobius_left_identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let c = random_curvature(&mut rng)?;
            let x = random_ball_point(&mut rng, 5, c)?;
            let y = mobius_add(&x, &BallPoint::origin(5, c))?;
            worst = worst.max(norm(&sub(y.coords(), x.coords())));
        }
        Ok((
            worst <= 1e-9,
            format!("{cases} cases, max error {worst:.3e} (tol 1e-9)"),
        ))
    });
    r.run("geometry", "mobius_left_inverse", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let c = random_curvature(&mut rng)?;
            let x = random_ball_point(&mut rng, 5, c)?;
            worst = worst.max(norm(mobius_add(&x.neg(), &x)?.coords()));
        }
        Ok((
            worst <= 1e-7,
            format!("{cases} cases, max error {worst:.3e} (tol 1e-7)"),
        ))
    });
    r.run("geometry", "scalar_distributivity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let c = random_curvature(&mut rng)?;
            let x = random_ball_point(&mut rng, 3, c)?;
            let (r1, r2) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let lhs = mobius_scalar(r1 + r2, &x)?;
            let rhs = mobius_add(&mobius_scalar(r1, &x)?, &mobius_scalar(r2, &x)?)?;
            worst = worst.max(norm(&sub(lhs.coords(), rhs.coords())));
        }
        Ok((
            worst <= 1e-6,
            format!("{cases} cases, max error {worst:.3e} (tol 1e-6)"),
        ))
    });
    r.run("geometry", "containment", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        for _ in 0..cases {
            let c = random_curvature(&mut rng)?;
            let v = random_vec(&mut rng, 4, 50.0);
            let x = exp_map0(&TangentVector::new(v.clone())?, c)?;
            let y = random_ball_point(&mut rng, 4, c)?;
            let outs = [
                mobius_scalar(rng.random_range(-20.0..20.0), &x)?,
                mobius_add(&x, &y)?,
                mobius_add(&x, &x)?,
                ball_project(&v, c),
                transport(&x, random_curvature(&mut rng)?)?,
                x,
            ];
            if let Some(bad) = outs.iter().find(|p| !p.is_contained()) {
                return Ok((false, format!("point {:?} left the ball", bad.coords())));
            }
        }
        Ok((true, format!("{cases} cases")))
    });
    r.run("geometry", "euclidean_limit", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let c = Curvature::new(1e-6)?;
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let v = random_tangent(&mut rng, 6, 1.0)?;
            let e = exp_map0(&v, c)?;
            let n = v.norm();
            if n > 0.0 {
                worst = worst.max(norm(&sub(e.coords(), v.coords())) / n);
            }
        }
        Ok((
            worst <= 1e-4,
            format!("{cases} cases, max relative error {worst:.3e} (tol 1e-4)"),
        ))
    });
}

fn grad_result(report: crate::gradcheck::GradCheckReport) -> (bool, String) {
    (
        report.passes(GRAD_TOL),
        format!(
            "{} coords, max rel err {:.3e}",
            report.checked, report.max_rel_err
        ),
    )
}

fn geometry_chain(tape: &mut Tape, v: &[Var]) -> Result<Var> {
    let c1 = diff::curvature(tape, v[1])?;
    let c2 = diff::curvature(tape, v[2])?;
    let e = diff::exp_map0(tape, v[0], c1)?;
    let s = diff::mobius_scalar(tape, v[3], e, c1)?;
    let a = diff::mobius_add(tape, s, e, c1)?;
    let t = diff::transport(tape, a, c1, c2)?;
    let l = diff::log_map0(tape, t, c2)?;
    let sq = tape.square(l)?;
    let w = tape.sum(sq, None)?;
    let big = tape.scale(v[0], 4.0)?;
    let pr = diff::ball_project(tape, big, c2)?;
    let p = tape.add(e, pr)?;
    let p = tape.sum(p, None)?;
    tape.add(w, p)
}

fn conv_chain(tape: &mut Tape, v: &[Var]) -> Result<Var> {
    let h = tape.conv1d(v[0], v[1], v[2])?;
    let h = tape.tanh(h)?;
    let h = tape.maxpool1d(h)?;
    let h = tape.softplus(h)?;
    let s = tape.square(h)?;
    tape.mean(s, None)
}

fn small_model(kind: ModelKind, seed: u64) -> Result<Model> {
    let mut m = Model::new(
        ModelConfig {
            kind,
            input_dim: 32,
            hidden_dim: 8,
            dropout: 0.0,
        },
        seed,
    )?;
    if kind == ModelKind::Hydra {
        for (k, c) in [0.5, 1.0, 2.5].iter().enumerate() {
            let raw = Curvature::raw_for(*c)?;
            m.params_mut()
                .get_mut(&format!("subspace.{k}.curvature_raw"))
                .expect("hydra has three subspaces")
                .data_mut()[0] = raw;
        }
        let logits = m
            .params_mut()
            .get_mut("attention.logits")
            .expect("hydra attention");
        logits
            .data_mut()
            .copy_from_slice(&[0.3, -0.2, 0.7, 1.1, 0.0, -0.4, -0.6, 0.5, 0.2]);
    }
    Ok(m)
}

fn model_gradcheck(kind: ModelKind, seed: u64) -> Result<(bool, String)> {
    let model = small_model(kind, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(vec![4, 32], random_vec(&mut rng, 128, 1.0))?;
    let ys: Vec<Tensor> = (0..3)
        .map(|_| Tensor::new(vec![4, 1], random_vec(&mut rng, 4, 1.0)))
        .collect::<Result<_>>()?;
    let params: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let xv = tape.constant(x.clone())?;
        let bound = model.params().bound_from(vars);
        let out = model.forward_bound(tape, bound, xv, &mut ForwardOptions::eval())?;
        let targets = ys
            .iter()
            .map(|y| tape.constant(y.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(total_loss(tape, &out.preds, &targets, &out.latents, 0.1)?.total)
    };
    let opts = GradCheckOptions {
        max_per_tensor: Some(4),
        seed,
        ..GradCheckOptions::default()
    };
    Ok(grad_result(check(&params, f, &opts)?))
}

fn gradient_suite(r: &mut Runner, opts: &SelftestOptions) {
    let seed = opts.seed;
    r.run("gradients", "geometry_chain", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 10);
        let params = vec![
            Tensor::new(vec![2, 3], random_vec(&mut rng, 6, 0.6))?,
            Tensor::scalar(rng.random_range(-0.5..0.5)),
            Tensor::scalar(rng.random_range(-0.5..0.5)),
            Tensor::scalar(rng.random_range(0.2..1.5)),
        ];
        Ok(grad_result(check(
            &params,
            geometry_chain,
            &GradCheckOptions::default(),
        )?))
    });
    r.run("gradients", "conv_pool_chain", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 11);
        let params = vec![
            Tensor::new(vec![2, 8, 2], random_vec(&mut rng, 32, 1.0))?,
            Tensor::new(vec![3, 2, 3], random_vec(&mut rng, 18, 0.5))?,
            Tensor::new(vec![3], random_vec(&mut rng, 3, 0.1))?,
        ];
        Ok(grad_result(check(
            &params,
            conv_chain,
            &GradCheckOptions::default(),
        )?))
    });
    r.run("gradients", "euclidean_model", || {
        model_gradcheck(ModelKind::Euclidean, seed ^ 12)
    });
    r.run("gradients", "hyperbolic_single_model", || {
        model_gradcheck(ModelKind::HyperbolicSingle, seed ^ 13)
    });
    r.run("gradients", "hydra_model", || {
        model_gradcheck(ModelKind::Hydra, seed ^ 14)
    });
}

fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
    Tensor::new(vec![rows, cols], data)
}

fn objective_suite(r: &mut Runner, opts: &SelftestOptions) {
    let seed = opts.seed;
    r.run("objective", "identical_latents", || {
        let u = t2(4, 2, vec![1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0])?;
        let v = htc_value(&[u.clone(), u])?;
        Ok(((v - 0.5).abs() < 1e-12, format!("value {v} (expected 0.5)")))
    });
    r.run("objective", "independent_latents", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 20);
        let a = t2(4096, 16, normals(&mut rng, 4096 * 16))?;
        let b = t2(4096, 16, normals(&mut rng, 4096 * 16))?;
        let v = htc_value(&[a, b])?;
        Ok((v <= 0.005, format!("value {v:.3e} (bound 0.005)")))
    });
    r.run("objective", "monotone_in_correlation", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 21);
        let (b, d) = (4096, 8);
        let x = normals(&mut rng, b * d);
        let e = normals(&mut rng, b * d);
        let mut vals = Vec::new();
        for rho in [0.0f64, 0.5, 0.9] {
            let y = x
                .iter()
                .zip(&e)
                .map(|(a, n)| rho * a + (1.0 - rho * rho).sqrt() * n)
                .collect();
            vals.push(htc_value(&[t2(b, d, x.clone())?, t2(b, d, y)?])?);
        }
        Ok((
            vals[0] < vals[1] && vals[1] < vals[2],
            format!("{vals:.4?}"),
        ))
    });
    r.run("objective", "affine_invariance_and_symmetry", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 22);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let lat: Vec<Tensor> = (0..3)
                .map(|_| t2(12, 3, random_vec(&mut rng, 36, 3.0)))
                .collect::<Result<_>>()?;
            let v = htc_value(&lat)?;
            let mut moved = lat.clone();
            let scale = random_vec(&mut rng, 3, 10.0);
            let shift = random_vec(&mut rng, 3, 50.0);
            for (i, x) in moved[1].data_mut().iter_mut().enumerate() {
                *x = (scale[i % 3] + 0.5f64.copysign(scale[i % 3])) * *x + shift[i % 3];
            }
            worst = worst.max((htc_value(&moved)? - v).abs());
            let rev: Vec<Tensor> = lat.iter().rev().cloned().collect();
            worst = worst.max((htc_value(&rev)? - v).abs());
        }
        Ok((worst <= 1e-9, format!("max deviation {worst:.3e}")))
    });
    r.run("objective", "zero_weight_total_is_mse_sum", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 23);
        let mut tape = Tape::new();
        let mut leaf = |tape: &mut Tape, cols: usize| {
            tape.constant(t2(6, cols, random_vec(&mut rng, 6 * cols, 1.0))?)
        };
        let preds = (0..3)
            .map(|_| leaf(&mut tape, 1))
            .collect::<Result<Vec<_>>>()?;
        let ys = (0..3)
            .map(|_| leaf(&mut tape, 1))
            .collect::<Result<Vec<_>>>()?;
        let lat = (0..3)
            .map(|_| leaf(&mut tape, 4))
            .collect::<Result<Vec<_>>>()?;
        let b = total_loss(&mut tape, &preds, &ys, &lat, 0.0)?.breakdown(&tape);
        Ok((
            b.total == b.mse_sum(),
            format!("total {} vs mse sum {}", b.total, b.mse_sum()),
        ))
    });
    r.run("objective", "htc_gradient", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 25);
        let mut params: Vec<Tensor> = (0..3)
            .map(|_| t2(8, 3, random_vec(&mut rng, 24, 1.0)))
            .collect::<Result<_>>()?;
        let shared = params[0].data().to_vec();
        for (x, s) in params[1].data_mut().iter_mut().zip(shared) {
            *x += 0.8 * s;
        }
        Ok(grad_result(check(
            &params,
            htc_loss,
            &GradCheckOptions::default(),
        )?))
    });
    r.run("objective", "total_loss_gradient", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 24);
        let mut params: Vec<Tensor> = (0..3)
            .map(|_| t2(6, 1, random_vec(&mut rng, 6, 1.0)))
            .collect::<Result<_>>()?;
        for _ in 0..3 {
            params.push(t2(6, 3, random_vec(&mut rng, 18, 1.0))?);
        }
        let targets: Vec<Tensor> = (0..3)
            .map(|_| t2(6, 1, random_vec(&mut rng, 6, 1.0)))
            .collect::<Result<_>>()?;
        let f = |tape: &mut Tape, v: &[Var]| {
            let ys = targets
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect::<Result<Vec<_>>>()?;
            Ok(total_loss(tape, &v[..3], &ys, &v[3..], 0.5)?.total)
        };
        Ok(grad_result(check(
            &params,
            f,
            &GradCheckOptions::default(),
        )?))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Geometry,
    Gradients,
    Objective,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Geometry, Suite::Gradients, Suite::Objective];
}

/// Runs the given suites in order; failures are reported, never raised.
pub fn run_suites(suites: &[Suite], opts: &SelftestOptions) -> SelftestReport {
    let mut r = Runner {
        report: SelftestReport::default(),
    };
    for suite in suites {
        match suite {
            Suite::Geometry => geometry_suite(&mut r, opts),
            Suite::Gradients => gradient_suite(&mut r, opts),
            Suite::Objective => objective_suite(&mut r, opts),
        }
    }
    r.report
}

pub fn run(opts: &SelftestOptions) -> SelftestReport {
    run_suites(&Suite::ALL, opts)
}
