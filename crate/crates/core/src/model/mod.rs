//! The three regressors: a Euclidean baseline, a single-ball hyperbolic
//! ablation, and the task-specific multi-ball model with attention.
//!
//! All three share the convolutional trunk
//! `conv(64) → relu → maxpool2 → conv(128) → relu → maxpool2 → flatten → dropout`
//! and per-task heads `dense(120) → relu → dropout → dense(30) → relu → dense(1)`.

pub mod checkpoint;
pub mod params;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{diff, Curvature};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use params::{Bound, ParamStore};

/// Sampling rate, bits per second, quantizer count.
pub const NUM_TASKS: usize = 3;
pub const CONV1_FILTERS: usize = 64;
pub const CONV2_FILTERS: usize = 128;
pub const KERNEL_SIZE: usize = 3;
pub const HEAD_HIDDEN: [usize; 2] = [120, 30];

pub const DEFAULT_HIDDEN_DIM: usize = 128;
pub const DEFAULT_DROPOUT: f64 = 0.3;

/// Rows per forward pass when predicting without gradients.
const PREDICT_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Euclidean,
    HyperbolicSingle,
    Hydra,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::Euclidean,
        ModelKind::HyperbolicSingle,
        ModelKind::Hydra,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Euclidean => "euclidean",
            ModelKind::HyperbolicSingle => "hyperbolic_single",
            ModelKind::Hydra => "hydra",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "euclidean" => Ok(ModelKind::Euclidean),
            "hyperbolic_single" => Ok(ModelKind::HyperbolicSingle),
            "hydra" => Ok(ModelKind::Hydra),
            _ => Err(Error::Config(format!(
                "unknown model kind {s:?} (expected euclidean, hyperbolic_single or hydra)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Embedding dimension `d`; must be divisible by 4.
    pub input_dim: usize,
    /// Ball dimension `d_h` (unused by the Euclidean baseline).
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, input_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 4 || !self.input_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "input dimension {} must be a positive multiple of 4",
                self.input_dim
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Trunk output length, `128 · d/4`.
    pub fn flatten_len(&self) -> usize {
        CONV2_FILTERS * (self.input_dim / 4)
    }

    fn head_input(&self) -> usize {
        match self.kind {
            ModelKind::Euclidean => self.flatten_len(),
            _ => self.hidden_dim,
        }
    }

    /// Names and shapes of every learnable tensor, in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let f = self.flatten_len();
        let dh = self.hidden_dim;
        let mut s = vec![
            (
                "trunk.conv1.weight".to_string(),
                vec![CONV1_FILTERS, 1, KERNEL_SIZE],
            ),
            ("trunk.conv1.bias".to_string(), vec![CONV1_FILTERS]),
            (
                "trunk.conv2.weight".to_string(),
                vec![CONV2_FILTERS, CONV1_FILTERS, KERNEL_SIZE],
            ),
            ("trunk.conv2.bias".to_string(), vec![CONV2_FILTERS]),
        ];
        match self.kind {
            ModelKind::Euclidean => {}
            ModelKind::HyperbolicSingle => {
                s.push(("proj.weight".into(), vec![f, dh]));
                s.push(("proj.bias".into(), vec![dh]));
                s.push(("proj.curvature_raw".into(), vec![1]));
            }
            ModelKind::Hydra => {
                for k in 0..NUM_TASKS {
                    s.push((format!("subspace.{k}.weight"), vec![f, dh]));
                    s.push((format!("subspace.{k}.bias"), vec![dh]));
                    s.push((format!("subspace.{k}.curvature_raw"), vec![1]));
                }
                s.push(("attention.logits".into(), vec![NUM_TASKS, NUM_TASKS]));
            }
        }
        let input = self.head_input();
        for t in 0..NUM_TASKS {
            s.push((format!("head.{t}.fc1.weight"), vec![input, HEAD_HIDDEN[0]]));
            s.push((format!("head.{t}.fc1.bias"), vec![HEAD_HIDDEN[0]]));
            s.push((
                format!("head.{t}.fc2.weight"),
                vec![HEAD_HIDDEN[0], HEAD_HIDDEN[1]],
            ));
            s.push((format!("head.{t}.fc2.bias"), vec![HEAD_HIDDEN[1]]));
            s.push((format!("head.{t}.out.weight"), vec![HEAD_HIDDEN[1], 1]));
            s.push((format!("head.{t}.out.bias"), vec![1]));
        }
        s
    }
}

/// Exact number of learnable scalars of the architecture.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    Ok(config
        .param_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// Subspace wiring of the multi-ball model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    /// Order of the left fold `((a₁ ⊕ a₂) ⊕ a₃)` over subspace indices.
    pub fold_order: Vec<usize>,
    /// Subspace whose curvature task `t` aggregates and decodes in.
    pub task_subspace: Vec<usize>,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            fold_order: (0..NUM_TASKS).collect(),
            task_subspace: (0..NUM_TASKS).collect(),
        }
    }
}

impl Topology {
    fn validate(&self) -> Result<()> {
        let is_perm = |v: &[usize]| {
            let mut s = v.to_vec();
            s.sort_unstable();
            s == (0..NUM_TASKS).collect::<Vec<_>>()
        };
        if !is_perm(&self.fold_order) || !is_perm(&self.task_subspace) {
            return Err(Error::Config(format!(
                "topology must permute 0..{NUM_TASKS}: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-call forward settings.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Present in training mode; drives the dropout masks.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Assert ball containment of every intermediate hyperbolic point.
    pub num_check: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            num_check: false,
        }
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub bound: Bound,
    /// One `[batch, 1]` prediction per task, in normalized label space.
    pub preds: Vec<Var>,
    /// Tangent latents `log₀(z⁽ᵏ⁾)` of each subspace (multi-ball model only).
    pub latents: Vec<Var>,
    /// Per-task decoded tangent vectors fed to the heads (hyperbolic models).
    pub task_tangents: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    topology: Topology,
    frozen_attention: Option<Vec<Vec<f64>>>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl Model {
    /// Builds and initializes a model from a seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(config, &mut rng)
    }

    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let f = config.flatten_len() as f64;
        let dh = config.hidden_dim as f64;
        let raw_one = Curvature::raw_for(1.0)?;
        let entries = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") || name == "attention.logits" {
                    Tensor::zeros(&shape)
                } else if name.ends_with("curvature_raw") {
                    Tensor::full(&shape, raw_one)
                } else if name.starts_with("trunk.") {
                    let fan_in = (shape[1] * shape[2]) as f64;
                    uniform(&shape, (6.0 / fan_in).sqrt(), rng)
                } else if name.starts_with("proj.") || name.starts_with("subspace.") {
                    // Keeps ‖Wz‖ of order one so the exponential map starts
                    // away from saturation.
                    uniform(&shape, (3.0 / (f * dh)).sqrt(), rng)
                } else if name.ends_with("out.weight") {
                    uniform(&shape, (6.0 / (shape[0] + shape[1]) as f64).sqrt(), rng)
                } else {
                    uniform(&shape, (6.0 / shape[0] as f64).sqrt(), rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            params: ParamStore::new(entries),
            topology: Topology::default(),
            frozen_attention: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn set_topology(&mut self, topology: Topology) -> Result<()> {
        topology.validate()?;
        self.topology = topology;
        Ok(())
    }

    /// Replaces the softmax attention by fixed weights (rows on the simplex),
    /// or restores it with `None`.
    pub fn freeze_attention(&mut self, weights: Option<Vec<Vec<f64>>>) -> Result<()> {
        if let Some(w) = &weights {
            let ok = w.len() == NUM_TASKS
                && w.iter().all(|r| {
                    r.len() == NUM_TASKS
                        && r.iter().all(|&a| a >= 0.0)
                        && (r.iter().sum::<f64>() - 1.0).abs() < 1e-12
                });
            if !ok {
                return Err(Error::Config(
                    "frozen attention must be 3 rows on the probability simplex".into(),
                ));
            }
        }
        self.frozen_attention = weights;
        Ok(())
    }

    /// Current attention weights `α_t(k)` (multi-ball model only).
    pub fn attention_weights(&self) -> Option<Vec<Vec<f64>>> {
        if self.config.kind != ModelKind::Hydra {
            return None;
        }
        if let Some(w) = &self.frozen_attention {
            return Some(w.clone());
        }
        let logits = self.params.get("attention.logits")?;
        Some(
            logits
                .data()
                .chunks(NUM_TASKS)
                .map(|row| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / s).collect()
                })
                .collect(),
        )
    }

    /// Current curvatures of the model's balls, in subspace order.
    pub fn curvatures(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|(n, _)| n.ends_with("curvature_raw"))
            .map(|(_, t)| Curvature::from_raw(t.item()).value())
            .collect()
    }

    fn dropout(&self, tape: &mut Tape, x: Var, opts: &mut ForwardOptions<'_>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = opts.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?)?;
        tape.mul(x, mask)
    }

    fn dense(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(&format!("{prefix}.weight")))?;
        tape.add(y, bound.var(&format!("{prefix}.bias")))
    }

    /// `[batch, d] → [batch, 128·d/4]`.
    pub fn trunk_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::Shape {
                op: "trunk input",
                lhs: shape,
                rhs: vec![self.config.input_dim],
            });
        }
        let batch = shape[0];
        let h = tape.reshape(x, &[batch, self.config.input_dim, 1])?;
        let h = tape.conv1d(
            h,
            bound.var("trunk.conv1.weight"),
            bound.var("trunk.conv1.bias"),
        )?;
        let h = tape.relu(h)?;
        let h = tape.maxpool1d(h)?;
        let h = tape.conv1d(
            h,
            bound.var("trunk.conv2.weight"),
            bound.var("trunk.conv2.bias"),
        )?;
        let h = tape.relu(h)?;
        let h = tape.maxpool1d(h)?;
        let h = tape.reshape(h, &[batch, self.config.flatten_len()])?;
        self.dropout(tape, h, opts)
    }

    /// Task head `t`: `[batch, in] → [batch, 1]`.
    pub fn head_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        task: usize,
        x: Var,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Var> {
        let h = Self::dense(tape, bound, &format!("head.{task}.fc1"), x)?;
        let h = tape.relu(h)?;
        let h = self.dropout(tape, h, opts)?;
        let h = Self::dense(tape, bound, &format!("head.{task}.fc2"), h)?;
        let h = tape.relu(h)?;
        Self::dense(tape, bound, &format!("head.{task}.out"), h)
    }

    /// Records a full forward pass of `x: [batch, d]` on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let bound = self.params.bind(tape)?;
        self.forward_bound(tape, bound, x, opts)
    }

    /// Like [`Model::forward`] with parameters already bound on `tape`.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: Bound,
        x: Var,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let z = self.trunk_forward(tape, &bound, x, opts)?;
        let mut out = ForwardOutput {
            bound,
            preds: Vec::with_capacity(NUM_TASKS),
            latents: Vec::new(),
            task_tangents: Vec::new(),
        };
        match self.config.kind {
            ModelKind::Euclidean => self.euclidean_tail(tape, z, &mut out, opts)?,
            ModelKind::HyperbolicSingle => self.single_ball_tail(tape, z, &mut out, opts)?,
            ModelKind::Hydra => self.multi_ball_tail(tape, z, &mut out, opts)?,
        }
        Ok(out)
    }

    fn euclidean_tail(
        &self,
        tape: &mut Tape,
        z: Var,
        out: &mut ForwardOutput,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<()> {
        for t in 0..NUM_TASKS {
            let p = self.head_forward(tape, &out.bound, t, z, opts)?;
            out.preds.push(p);
        }
        Ok(())
    }

    fn single_ball_tail(
        &self,
        tape: &mut Tape,
        z: Var,
        out: &mut ForwardOutput,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<()> {
        let pre = Self::dense(tape, &out.bound, "proj", z)?;
        let c = diff::curvature(tape, out.bound.var("proj.curvature_raw"))?;
        let ball = diff::exp_map0(tape, pre, c)?;
        if opts.num_check {
            diff::check_contained(tape, ball, c, "shared ball point")?;
        }
        let tangent = diff::log_map0(tape, ball, c)?;
        out.task_tangents.push(tangent);
        for t in 0..NUM_TASKS {
            let p = self.head_forward(tape, &out.bound, t, tangent, opts)?;
            out.preds.push(p);
        }
        Ok(())
    }

    fn multi_ball_tail(
        &self,
        tape: &mut Tape,
        z: Var,
        out: &mut ForwardOutput,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<()> {
        let bound = out.bound.clone();
        let mut curv = Vec::with_capacity(NUM_TASKS);
        let mut balls = Vec::with_capacity(NUM_TASKS);
        for k in 0..NUM_TASKS {
            let pre = Self::dense(tape, &bound, &format!("subspace.{k}"), z)?;
            let c = diff::curvature(tape, bound.var(&format!("subspace.{k}.curvature_raw")))?;
            let ball = diff::exp_map0(tape, pre, c)?;
            if opts.num_check {
                diff::check_contained(tape, ball, c, &format!("subspace {k} point"))?;
            }
            out.latents.push(diff::log_map0(tape, ball, c)?);
            curv.push(c);
            balls.push(ball);
        }

        let alpha = match &self.frozen_attention {
            Some(w) => tape.constant(Tensor::from_rows(w)?)?,
            None => tape.softmax(bound.var("attention.logits"))?,
        };

        for t in 0..NUM_TASKS {
            let target = self.topology.task_subspace[t];
            let ct = curv[target];
            let row = tape.slice(alpha, 0, t, 1)?;
            let mut agg: Option<Var> = None;
            for &k in &self.topology.fold_order {
                let moved = diff::transport(tape, balls[k], curv[k], ct)?;
                let weight = tape.slice(row, 1, k, 1)?;
                let weight = tape.reshape(weight, &[1])?;
                let term = diff::mobius_scalar(tape, weight, moved, ct)?;
                let next = match agg {
                    None => term,
                    Some(acc) => diff::mobius_add(tape, acc, term, ct)?,
                };
                if opts.num_check {
                    diff::check_contained(
                        tape,
                        moved,
                        ct,
                        &format!("task {t} transported point {k}"),
                    )?;
                    diff::check_contained(tape, next, ct, &format!("task {t} aggregate"))?;
                }
                agg = Some(next);
            }
            let tangent = diff::log_map0(tape, agg.expect("at least one subspace"), ct)?;
            out.task_tangents.push(tangent);
            let p = self.head_forward(tape, &bound, t, tangent, opts)?;
            out.preds.push(p);
        }
        Ok(())
    }

    /// Eval-mode predictions (normalized label space) for each row of `x: [n, d]`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<[f64; NUM_TASKS]>> {
        let d = self.config.input_dim;
        if x.shape().len() != 2 || x.shape()[1] != d {
            return Err(Error::Shape {
                op: "predict",
                lhs: x.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(PREDICT_BATCH) {
            let rows = PREDICT_BATCH.min(n - start);
            let chunk = Tensor::new(
                vec![rows, d],
                x.data()[start * d..(start + rows) * d].to_vec(),
            )?;
            let mut tape = Tape::new();
            let xv = tape.constant(chunk)?;
            let fwd = self.forward(&mut tape, xv, &mut ForwardOptions::eval())?;
            for i in 0..rows {
                let mut r = [0.0; NUM_TASKS];
                for (t, &p) in fwd.preds.iter().enumerate() {
                    r[t] = tape.value(p).data()[i];
                }
                out.push(r);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    /// Loads parameters from a checkpoint, validating every tensor shape.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let entries = checkpoint::load(path)?;
        self.params.assign(entries)
    }
}
