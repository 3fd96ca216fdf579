use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use sha2::{Digest, Sha256};

fn hydra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydra"))
        .args(args)
        .env_remove("HYDRA_NUM_CHECK")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn digest_dir(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let hash = Sha256::digest(fs::read(&path).unwrap());
            let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
            (
                path.file_name().unwrap().to_string_lossy().into_owned(),
                hex,
            )
        })
        .collect();
    out.sort();
    out
}

const SMALL: &str = "n_train = 700\nn_val = 100\nn_test = 200\n";

fn small_dataset(root: &Path) -> std::path::PathBuf {
    let cfg = root.join("synth.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = root.join("data");
    let o = hydra(&[
        "gen-synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn gen_synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = hydra(&["gen-synth", "--out", out.to_str().unwrap(), "--seed", "11"]);
        assert!(o.status.success(), "{}", stderr(&o));
        digest_dir(&out)
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let names: Vec<_> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "COMPLETED",
            "embeddings.hemb",
            "manifest.jsonl",
            "resolved_config.toml"
        ]
    );
}

#[test]
fn gen_synth_rejects_small_dim() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hydra(&[
        "gen-synth",
        "--out",
        tmp.path().to_str().unwrap(),
        "--dim",
        "16",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!tmp.path().join("manifest.jsonl").exists());
}

#[test]
fn completed_runs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let args = ["gen-synth", "--out", out.to_str().unwrap(), "--config"];
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    let mut full: Vec<&str> = args.to_vec();
    full.push(cfg.to_str().unwrap());
    assert!(hydra(&full).status.success());
    let again = hydra(&full);
    assert_eq!(again.status.code(), Some(6));
    assert!(stderr(&again).contains("--force"));
    full.push("--force");
    assert!(hydra(&full).status.success());
}

#[test]
fn bad_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "learning_rat = 0.1\n").unwrap();
    let o = hydra(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        "unused.jsonl",
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere/manifest.jsonl");
    let o = hydra(&[
        "train",
        "--manifest",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stderr(&o).contains(missing.to_str().unwrap()),
        "{}",
        stderr(&o)
    );
}

#[test]
fn smoke_train_eval_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let manifest = data.join("manifest.jsonl");
    let run = tmp.path().join("run");
    let start = Instant::now();
    let o = hydra(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--model-kind",
        "hydra",
        "--epochs",
        "1",
    ]);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(elapsed < 60.0, "smoke run took {elapsed:.1}s");

    let table = fs::read_to_string(run.join("metrics.txt")).unwrap();
    let hydra_rows: Vec<&str> = table.lines().filter(|l| l.starts_with("hydra")).collect();
    assert_eq!(hydra_rows.len(), 2);
    let closed: Vec<f64> = hydra_rows[0]
        .split(|c: char| c == '|' || c.is_whitespace())
        .filter_map(|t| t.parse().ok())
        .collect();
    assert_eq!(closed.len(), 6, "{table}");
    assert!(closed.iter().all(|v| v.is_finite() && *v >= 0.0));
    let resolved = fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("epochs = 1"));
    assert!(resolved.contains("model_kind = \"hydra\""));

    let eval_dir = tmp.path().join("eval");
    let o = hydra(&[
        "eval",
        "--run",
        run.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(eval_dir.join("metrics.json")).unwrap(),
        fs::read_to_string(run.join("metrics.json")).unwrap()
    );

    let pred_dir = tmp.path().join("pred");
    let o = hydra(&[
        "predict",
        "--run",
        run.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = fs::read_to_string(pred_dir.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1001);
    assert!(preds.starts_with("id,sr_hz,bps,q\n"));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let manifest = data.join("manifest.jsonl");
    let first = tmp.path().join("first");
    let o = hydra(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        first.to_str().unwrap(),
        "--model-kind",
        "euclidean",
        "--epochs",
        "1",
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second = tmp.path().join("second");
    let o = hydra(&[
        "train",
        "--config",
        first.join("resolved_config.toml").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(digest_dir(&first), digest_dir(&second));
}

#[test]
fn selftest_passes_and_names_injected_fault() {
    let start = Instant::now();
    let o = hydra(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(start.elapsed().as_secs_f64() < 120.0);
    assert!(!stdout(&o).contains("FAIL"));

    let o = hydra(&["selftest", "--inject-fault", "round-trip", "--cases", "100"]);
    assert_eq!(o.status.code(), Some(1));
    let failing: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with("FAIL"))
        .map(String::from)
        .collect();
    assert_eq!(failing.len(), 1, "{failing:?}");
    assert!(failing[0].contains("geometry::exp_log_round_trip"));
    assert!(stderr(&o).contains("exp_log_round_trip"));
}

#[test]
fn param_count_reports_every_kind() {
    let o = hydra(&["param-count"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("hydra\t9519963"), "{text}");
    let o = hydra(&[
        "param-count",
        "--model-kind",
        "euclidean",
        "--dim",
        "32",
        "--hidden-dim",
        "8",
    ]);
    assert!(stdout(&o).starts_with("euclidean\t"));
    let o = hydra(&["param-count", "--dim", "30"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_model_kind_is_a_usage_error() {
    let o = hydra(&[
        "train",
        "--manifest",
        "m",
        "--out",
        "o",
        "--model-kind",
        "lorentz",
    ]);
    assert_eq!(o.status.code(), Some(6));
}
