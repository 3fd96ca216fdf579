//! Training, early stopping, evaluation and run artifacts.

pub mod adam;
pub mod metrics;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{features, Dataset, EmbeddingRecord, LabelScaler, SetType, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, ModelConfig, ModelKind, NUM_TASKS};
use crate::objective::{total_loss, LossBreakdown};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use adam::{Adam, AdamConfig};
pub use metrics::{render_table, rmse_mae, Cell, MetricsReport, PartitionMetrics};

/// Rows per forward pass when scoring without gradients.
const EVAL_CHUNK: usize = 256;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MODEL_FILE: &str = "model.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropout: f64,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub lambda_htc: f64,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub hidden_dim: usize,
    /// Regress log-labels instead of raw labels.
    pub log_labels: bool,
    /// Assert ball containment of every hyperbolic intermediate.
    pub num_check: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dropout: 0.3,
            early_stop_patience: 5,
            early_stop_min_delta: 1e-4,
            lambda_htc: 0.1,
            seed: 0,
            model_kind: ModelKind::Hydra,
            hidden_dim: crate::model::DEFAULT_HIDDEN_DIM,
            log_labels: false,
            num_check: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_dim == 0 {
            return bad("epochs, batch_size and hidden_dim must be positive".into());
        }
        if self.batch_size < 2 && self.model_kind == ModelKind::Hydra {
            return bad("the correlation penalty needs batch_size >= 2".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be positive".into());
        }
        if !(self.early_stop_min_delta >= 0.0 && self.lambda_htc >= 0.0) {
            return bad("early_stop_min_delta and lambda_htc must be non-negative".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            kind: self.model_kind,
            input_dim,
            hidden_dim: self.hidden_dim,
            dropout: self.dropout,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub improved: bool,
    pub param_digest: String,
    pub optimizer_digest: String,
}

/// A model together with the label scaler it was trained against.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub scaler: LabelScaler,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trained: Trained,
    pub report: MetricsReport,
    pub log: Vec<EpochLog>,
}

/// Splits `0..n` into batches of `size`, folding a trailing single row into
/// the previous batch so every batch has at least two rows when `n >= 2`.
pub fn batch_ranges(n: usize, size: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Features and normalized targets of a record set.
struct Prepared {
    x: Tensor,
    y: Vec<[f64; NUM_TASKS]>,
}

impl Prepared {
    fn new(records: &[&EmbeddingRecord], scaler: &LabelScaler) -> Result<Self> {
        Ok(Self {
            x: features(records)?,
            y: records
                .iter()
                .map(|r| scaler.normalize(r.labels()))
                .collect(),
        })
    }

    fn len(&self) -> usize {
        self.y.len()
    }

    fn gather(&self, rows: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let d = self.x.shape()[1];
        let mut x = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            x.extend_from_slice(self.x.row(i));
        }
        let ys = (0..NUM_TASKS)
            .map(|t| {
                Tensor::new(
                    vec![rows.len(), 1],
                    rows.iter().map(|&i| self.y[i][t]).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::new(vec![rows.len(), d], x)?, ys))
    }
}

/// Records a forward pass plus loss for the given rows.
fn batch_loss(
    model: &Model,
    data: &Prepared,
    rows: &[usize],
    cfg: &TrainConfig,
    opts: &mut ForwardOptions<'_>,
) -> Result<(
    Tape,
    crate::objective::LossVars,
    crate::model::ForwardOutput,
)> {
    let (x, ys) = data.gather(rows)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let out = model.forward(&mut tape, xv, opts)?;
    let targets = ys
        .into_iter()
        .map(|y| tape.constant(y))
        .collect::<Result<Vec<_>>>()?;
    let loss = total_loss(
        &mut tape,
        &out.preds,
        &targets,
        &out.latents,
        cfg.lambda_htc,
    )?;
    Ok((tape, loss, out))
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown, weight: f64) {
    acc.mse_sr += weight * b.mse_sr;
    acc.mse_bps += weight * b.mse_bps;
    acc.mse_q += weight * b.mse_q;
    acc.htc += weight * b.htc;
    acc.total += weight * b.total;
}

const ZERO_LOSS: LossBreakdown = LossBreakdown {
    mse_sr: 0.0,
    mse_bps: 0.0,
    mse_q: 0.0,
    htc: 0.0,
    total: 0.0,
};

/// Row-weighted mean loss in evaluation mode.
fn eval_loss(model: &Model, data: &Prepared, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut acc = ZERO_LOSS;
    let n = data.len() as f64;
    for r in batch_ranges(data.len(), EVAL_CHUNK) {
        let rows: Vec<usize> = r.collect();
        let mut opts = ForwardOptions {
            dropout_rng: None,
            num_check: cfg.num_check,
        };
        let (tape, loss, _) = batch_loss(model, data, &rows, cfg, &mut opts)?;
        accumulate(&mut acc, &loss.breakdown(&tape), rows.len() as f64 / n);
    }
    Ok(acc)
}

fn require_split(dataset: &Dataset, split: Split) -> Result<Vec<&EmbeddingRecord>> {
    let recs = dataset.split(split);
    if recs.is_empty() {
        return Err(Error::Usage(format!("the {split:?} split is empty")));
    }
    Ok(recs)
}

/// Trains from scratch, keeping the checkpoint with the best validation loss.
/// Each epoch's log line is also written to `log` when given.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_recs = require_split(dataset, Split::Train)?;
    let val_recs = require_split(dataset, Split::Val)?;
    if cfg.model_kind == ModelKind::Hydra && (train_recs.len() < 2 || val_recs.len() < 2) {
        return Err(Error::Usage(
            "train and val splits need at least two records each".into(),
        ));
    }
    let dim = dataset.dim().expect("non-empty dataset");
    let scaler = LabelScaler::fit(&train_recs, cfg.log_labels)?;
    let train_data = Prepared::new(&train_recs, &scaler)?;
    let val_data = Prepared::new(&val_recs, &scaler)?;

    let mut model = Model::init(cfg.model_config(dim), &mut rng_stream(cfg.seed, 0))?;
    let mut shuffle_rng = rng_stream(cfg.seed, 1);
    let mut dropout_rng = rng_stream(cfg.seed, 2);
    let mut adam = Adam::new(cfg.adam(), model.params());

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut best = (f64::INFINITY, model.params().clone(), 0usize);
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut val_losses = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_acc = ZERO_LOSS;
        for r in batch_ranges(order.len(), cfg.batch_size) {
            let rows = &order[r];
            let mut opts = ForwardOptions {
                dropout_rng: Some(&mut dropout_rng),
                num_check: cfg.num_check,
            };
            let (tape, loss, out) = batch_loss(&model, &train_data, rows, cfg, &mut opts)?;
            let mut grads = tape.backward(loss.total)?;
            let grads = model.params().take_gradients(&out.bound, &mut grads);
            accumulate(
                &mut train_acc,
                &loss.breakdown(&tape),
                rows.len() as f64 / order.len() as f64,
            );
            drop(tape);
            adam.step(model.params_mut(), &grads)?;
        }

        let val = eval_loss(&model, &val_data, cfg)?;
        val_losses.push(val.total);
        let improved = val.total < best.0 - cfg.early_stop_min_delta;
        if improved {
            best = (val.total, model.params().clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        let entry = EpochLog {
            epoch,
            train: train_acc,
            val,
            improved,
            param_digest: model.params().digest(),
            optimizer_digest: adam.digest(),
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("log entries serialize");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(LOG_FILE, e))?;
        }
        history.push(entry);
        if since_best >= cfg.early_stop_patience {
            break;
        }
    }

    let (_, best_params, best_epoch) = best;
    *model.params_mut() = best_params;
    let trained = Trained { model, scaler };
    let (closed, open) = evaluate_test(&trained, dataset)?;
    let report = MetricsReport {
        model_kind: cfg.model_kind,
        closed,
        open,
        val_losses,
        selected_epoch: best_epoch,
    };
    Ok(TrainOutcome {
        trained,
        report,
        log: history,
    })
}

/// Native-unit predictions `[sr_hz, bps, q]` for each record.
pub fn predict(trained: &Trained, records: &[&EmbeddingRecord]) -> Result<Vec<[f64; NUM_TASKS]>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let dim = trained.model.config().input_dim;
    if let Some(r) = records.iter().find(|r| r.embedding.len() != dim) {
        return Err(Error::Schema(format!(
            "record {} has dimension {}, the model expects {dim}",
            r.id,
            r.embedding.len()
        )));
    }
    let z = trained.model.predict(&features(records)?)?;
    Ok(z.into_iter()
        .map(|r| trained.scaler.denormalize(r))
        .collect())
}

/// Metrics over `records`, `None` if there are none.
pub fn evaluate(
    trained: &Trained,
    records: &[&EmbeddingRecord],
) -> Result<Option<PartitionMetrics>> {
    if records.is_empty() {
        return Ok(None);
    }
    let preds = predict(trained, records)?;
    let targets: Vec<_> = records.iter().map(|r| r.labels()).collect();
    PartitionMetrics::from_native(&preds, &targets).map(Some)
}

/// Closed-set and open-set metrics over the test split.
pub fn evaluate_test(
    trained: &Trained,
    dataset: &Dataset,
) -> Result<(Option<PartitionMetrics>, Option<PartitionMetrics>)> {
    let test = dataset.split(Split::Test);
    let part = |s: SetType| -> Vec<&EmbeddingRecord> {
        test.iter().copied().filter(|r| r.set_type == s).collect()
    };
    Ok((
        evaluate(trained, &part(SetType::Closed))?,
        evaluate(trained, &part(SetType::Open))?,
    ))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    model: ModelConfig,
    scaler: LabelScaler,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes the checkpoint plus the architecture and scaler description.
pub fn save_trained(trained: &Trained, dir: &Path) -> Result<()> {
    trained.model.save(&dir.join(CHECKPOINT_FILE))?;
    write_json(
        &dir.join(MODEL_FILE),
        &ModelFile {
            model: trained.model.config().clone(),
            scaler: trained.scaler,
        },
    )
}

pub fn load_trained(dir: &Path) -> Result<Trained> {
    let path = dir.join(MODEL_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut model = Model::new(file.model, 0)?;
    model.load_params(&dir.join(CHECKPOINT_FILE))?;
    Ok(Trained {
        model,
        scaler: file.scaler,
    })
}

pub fn save_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    write_json(&dir.join(METRICS_JSON), report)?;
    let path = dir.join(METRICS_TABLE);
    std::fs::write(&path, render_table(std::slice::from_ref(report)))
        .map_err(|e| Error::io(&path, e))
}

/// Trains and writes every artifact (log, checkpoint, metrics) into `dir`.
pub fn train_to_dir(dataset: &Dataset, cfg: &TrainConfig, dir: &Path) -> Result<TrainOutcome> {
    let log_path = dir.join(LOG_FILE);
    let f = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut w = BufWriter::new(f);
    let outcome = train(dataset, cfg, Some(&mut w))?;
    save_trained(&outcome.trained, dir)?;
    save_report(&outcome.report, dir)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests;
