use super::*;
use crate::data::{gen_synth, SynthConfig};
use crate::model::ParamStore;

fn tiny_data(seed: u64) -> Dataset {
    gen_synth(&SynthConfig {
        n_train: 96,
        n_val: 32,
        n_test: 48,
        dim: 32,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn tiny_cfg(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        hidden_dim: 8,
        model_kind: kind,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn scalar_store(v: f64) -> ParamStore {
    ParamStore::new(vec![("w".into(), Tensor::scalar(v))])
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = scalar_store(0.7);
    let mut adam = Adam::new(TrainConfig::default().adam(), &p);
    for _ in 0..3 {
        adam.step(&mut p, &[vec![0.0]]).unwrap();
    }
    assert_eq!(p.get("w").unwrap().item(), 0.7);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = scalar_store(0.0);
    let cfg = TrainConfig::default().adam();
    let mut adam = Adam::new(cfg, &p);
    adam.step(&mut p, &[vec![1.0]]).unwrap();
    let expected = -cfg.learning_rate / (1.0 + cfg.eps);
    assert!((p.get("w").unwrap().item() - expected).abs() < 1e-18);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn adam_rejects_non_finite_gradient_by_name() {
    let mut p = ParamStore::new(vec![
        ("a".into(), Tensor::scalar(1.0)),
        ("head.0.out.bias".into(), Tensor::scalar(2.0)),
    ]);
    let mut adam = Adam::new(TrainConfig::default().adam(), &p);
    let before = adam.digest();
    let err = adam.step(&mut p, &[vec![0.5], vec![f64::NAN]]).unwrap_err();
    assert!(err.to_string().contains("head.0.out.bias"), "{err}");
    assert_eq!(p.get("a").unwrap().item(), 1.0);
    assert_eq!(adam.digest(), before);
}

#[test]
fn rmse_mae_oracle() {
    let c = rmse_mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
    assert!((c.rmse - 3.535_533_905_932_737_6).abs() < 1e-12);
    assert_eq!(c.mae, 3.5);
    let p = rmse_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
    assert_eq!((p.rmse, p.mae), (0.0, 0.0));
    assert!(rmse_mae(&[], &[]).is_err());
}

#[test]
fn batches_cover_everything_without_singletons() {
    assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
    assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
    assert_eq!(batch_ranges(1, 4), vec![0..1]);
    assert_eq!(batch_ranges(0, 4), Vec::<Range<usize>>::new());
    for n in 2..70 {
        for size in 2..9 {
            let b = batch_ranges(n, size);
            assert_eq!(b.first().unwrap().start, 0);
            assert_eq!(b.last().unwrap().end, n);
            assert!(b.windows(2).all(|w| w[0].end == w[1].start));
            assert!(b.iter().all(|r| r.len() >= 2));
        }
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            adam_beta2: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            early_stop_patience: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            dropout: 1.5,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn training_is_bit_deterministic() {
    let ds = tiny_data(1);
    let cfg = tiny_cfg(ModelKind::Hydra);
    let a = train(&ds, &cfg, None).unwrap();
    let b = train(&ds, &cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.report, b.report);
    assert_eq!(a.trained.model.params(), b.trained.model.params());
    let c = train(&ds, &TrainConfig { seed: 6, ..cfg }, None).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn training_matches_across_thread_counts() {
    let ds = tiny_data(9);
    let cfg = tiny_cfg(ModelKind::Hydra);
    let prev = crate::par::set_parallel(false);
    let seq = train(&ds, &cfg, None).unwrap();
    crate::par::set_parallel(true);
    let par = crate::par::with_threads(3, || train(&ds, &cfg, None).unwrap());
    crate::par::set_parallel(prev);
    assert_eq!(seq.log, par.log);
    assert_eq!(seq.trained.model.params(), par.trained.model.params());
}

#[test]
fn every_kind_trains_and_reports() {
    let ds = tiny_data(2);
    for kind in ModelKind::ALL {
        let out = train(&ds, &tiny_cfg(kind), None).unwrap();
        assert_eq!(out.report.model_kind, kind);
        assert!(!out.log.is_empty());
        for part in [&out.report.closed, &out.report.open] {
            let part = part.as_ref().expect("both partitions present");
            for c in part.cells() {
                assert!(c.rmse >= c.mae && c.mae >= 0.0);
            }
        }
        let htc_logged = out.log.iter().any(|e| e.train.htc > 0.0);
        assert_eq!(htc_logged, kind == ModelKind::Hydra);
    }
}

#[test]
fn selected_checkpoint_is_best_so_far() {
    let ds = tiny_data(3);
    let cfg = TrainConfig {
        epochs: 8,
        early_stop_patience: 2,
        ..tiny_cfg(ModelKind::HyperbolicSingle)
    };
    let out = train(&ds, &cfg, None).unwrap();
    let sel = out.report.selected_epoch;
    let losses = &out.report.val_losses;
    assert!(sel >= 1);
    assert!(losses[..sel].iter().all(|&v| losses[sel - 1] <= v));
    let trailing = losses.len() - sel;
    assert!(trailing <= cfg.early_stop_patience);
    if losses.len() < cfg.epochs {
        assert_eq!(trailing, cfg.early_stop_patience);
    }
    let kept = eval_loss(
        &out.trained.model,
        &Prepared::new(&ds.split(Split::Val), &out.trained.scaler).unwrap(),
        &cfg,
    )
    .unwrap();
    assert_eq!(kept.total, losses[sel - 1]);
}

#[test]
fn metrics_equal_denormalized_model_outputs() {
    let ds = tiny_data(4);
    let out = train(&ds, &tiny_cfg(ModelKind::Euclidean), None).unwrap();
    let test: Vec<&EmbeddingRecord> = ds
        .split(Split::Test)
        .into_iter()
        .filter(|r| r.set_type == SetType::Closed)
        .collect();
    let z = out
        .trained
        .model
        .predict(&features(&test).unwrap())
        .unwrap();
    let (mut se, mut ae) = (0.0, 0.0);
    for (zr, r) in z.iter().zip(&test) {
        let hz = zr[0] * out.trained.scaler.std[0] + out.trained.scaler.mean[0];
        let d = (hz - r.sr_hz) / 1000.0;
        se += d * d;
        ae += d.abs();
    }
    let n = test.len() as f64;
    let closed = out.report.closed.unwrap();
    assert!(((se / n).sqrt() - closed.sr.rmse).abs() < 1e-9);
    assert!((ae / n - closed.sr.mae).abs() < 1e-9);
}

#[test]
fn empty_partition_is_absent() {
    let ds = tiny_data(5);
    let closed_only = Dataset::new(
        ds.records()
            .iter()
            .filter(|r| r.set_type == SetType::Closed)
            .cloned()
            .collect(),
    )
    .unwrap();
    let out = train(&closed_only, &tiny_cfg(ModelKind::Euclidean), None).unwrap();
    assert!(out.report.closed.is_some());
    assert!(out.report.open.is_none());
    let table = render_table(&[out.report]);
    assert!(table.contains("open-set"));
}

#[test]
fn missing_split_is_a_usage_error() {
    let ds = tiny_data(6);
    let no_val = Dataset::new(
        ds.records()
            .iter()
            .filter(|r| r.split != Split::Val)
            .cloned()
            .collect(),
    )
    .unwrap();
    assert!(matches!(
        train(&no_val, &tiny_cfg(ModelKind::Hydra), None),
        Err(Error::Usage(_))
    ));
}

#[test]
fn artifacts_round_trip() {
    let ds = tiny_data(7);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..tiny_cfg(ModelKind::Hydra)
    };
    let out = train_to_dir(&ds, &cfg, dir.path()).unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), out.log.len());
    let first: EpochLog = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first, out.log[0]);

    let loaded = load_trained(dir.path()).unwrap();
    assert_eq!(loaded.model.params(), out.trained.model.params());
    assert_eq!(loaded.scaler, out.trained.scaler);
    let (closed, open) = evaluate_test(&loaded, &ds).unwrap();
    assert_eq!(closed, out.report.closed);
    assert_eq!(open, out.report.open);
    let json = std::fs::read_to_string(dir.path().join(METRICS_JSON)).unwrap();
    let report: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(report, out.report);
}

#[test]
fn instrumented_run_passes_containment_checks() {
    let ds = tiny_data(8);
    let cfg = TrainConfig {
        epochs: 1,
        num_check: true,
        ..tiny_cfg(ModelKind::Hydra)
    };
    assert!(train(&ds, &cfg, None).is_ok());
}
