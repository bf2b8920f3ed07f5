use std::path::Path;
use std::process::{Command, Output};

use gtfdeer::TrajectorySet;

fn gtfdeer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtfdeer"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn gtfdeer")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn generate_lorenz(dir: &Path, seed: &str, out: &str, length: &str) {
    ok(&gtfdeer(
        &["generate", "lorenz63", "--seed", seed, "-o", out, "--length", length],
        dir,
    ));
}

#[test]
fn generate_is_deterministic_and_header_valid() {
    let dir = tempfile::tempdir().unwrap();
    generate_lorenz(dir.path(), "1", "a", "3000");
    generate_lorenz(dir.path(), "1", "b", "3000");
    for name in ["lorenz63_train.dsrtraj", "lorenz63_test.dsrtraj"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        assert_eq!(&a[..8], b"DSRTRAJ1");
        let set = TrajectorySet::load(dir.path().join("a").join(name)).unwrap();
        assert_eq!((set.len(), set.dim()), (3000, 3));
    }
}

#[test]
fn generate_neuron_drops_gating_variable() {
    let dir = tempfile::tempdir().unwrap();
    ok(&gtfdeer(
        &[
            "generate",
            "bursting-neuron",
            "--seed",
            "2",
            "-o",
            ".",
            "--length",
            "500",
            "--transient",
            "100",
            "--csv",
        ],
        dir.path(),
    ));
    let set = TrajectorySet::load(dir.path().join("bursting_neuron_train.dsrtraj")).unwrap();
    assert_eq!(set.dim(), 2);
    assert_eq!(set.meta.variable_names, vec!["V".to_string(), "n".to_string()]);
    assert!(dir.path().join("bursting_neuron_test.csv").exists());
}

#[test]
fn unknown_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gtfdeer(&["generate", "rossler", "-o", "."], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_are_listed_per_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = gtfdeer(
        &["train", "--dump-config", "--set", "alpha=2", "--set", "batch_size=0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("alpha"), "{err}");
    assert!(err.contains("batch_size"), "{err}");

    let out = gtfdeer(&["train", "--dump-config", "--set", "no_such_key=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dump_config_reflects_precedence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.txt"), "alpha = 0.3\nseq_len = 128\nupdates = 7\n").unwrap();
    let out = gtfdeer(
        &[
            "train",
            "--preset",
            "lorenz63_po",
            "--config",
            "c.txt",
            "--alpha",
            "0.25",
            "--set",
            "updates=9",
            "--quasi",
            "--dump-config",
        ],
        dir.path(),
    );
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = gtfdeer::TrainConfig::parse(&text).unwrap();
    assert_eq!(cfg.alpha, 0.25);
    assert_eq!(cfg.seq_len, 128);
    assert_eq!(cfg.updates, 9);
    assert_eq!(cfg.observed, vec![0]);
    assert_eq!(cfg.deer.jacobian_mode, gtfdeer::JacobianMode::Diagonal);
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    generate_lorenz(p, "3", "data", "4000");
    let out = gtfdeer(
        &[
            "train",
            "--preset",
            "lorenz63_fo",
            "--data",
            "data/lorenz63_train.dsrtraj",
            "-o",
            "run",
            "--updates",
            "150",
            "--seq-len",
            "64",
            "--batch",
            "8",
            "--seed",
            "5",
            "--workers",
            "2",
        ],
        p,
    );
    ok(&out);
    let log = std::fs::read_to_string(p.join("run/train_log.csv")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 150);
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "loss did not decrease: {head} -> {tail}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["updates"], 150);
    assert_eq!(report["updates_run"], 150);

    let out = gtfdeer(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.bin",
            "--test",
            "data/lorenz63_test.dsrtraj",
            "--preset",
            "lorenz63_po",
            "--mc-samples",
            "5000",
            "--truth-len",
            "2000",
            "-o",
            "eval.json",
        ],
        p,
    );
    // The fully observed checkpoint cannot be scored on one observed column.
    assert!(!out.status.success());

    let out = gtfdeer(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.bin",
            "--test",
            "data/lorenz63_test.dsrtraj",
            "--preset",
            "lorenz63_fo",
            "--mc-samples",
            "5000",
            "--truth-len",
            "2000",
            "-o",
            "eval.json",
        ],
        p,
    );
    ok(&out);
    let ev: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("eval.json")).unwrap()).unwrap();
    for key in [
        "dstsp",
        "dstsp_de",
        "rmse_n",
        "lle",
        "diverged",
        "config",
        "rollout_len",
    ] {
        assert!(ev.get(key).is_some(), "missing {key}");
    }
    if ev["diverged"] == false {
        assert!(ev["dstsp"].is_number());
        assert!(ev["rmse_n"].is_number());
        assert!(ev["lle"]["lle_per_step"].is_number());
    }

    let resumed = gtfdeer(
        &[
            "train",
            "--preset",
            "lorenz63_fo",
            "--data",
            "data/lorenz63_train.dsrtraj",
            "-o",
            "run",
            "--updates",
            "160",
            "--seq-len",
            "64",
            "--batch",
            "8",
            "--seed",
            "5",
            "--workers",
            "2",
            "--resume",
            "run/checkpoint.bin",
        ],
        p,
    );
    ok(&resumed);
    let log = std::fs::read_to_string(p.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 160);
}

#[test]
fn ground_truth_self_evaluation_is_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    generate_lorenz(p, "4", ".", "4000");
    let out = gtfdeer(
        &[
            "eval",
            "--ground-truth",
            "--test",
            "lorenz63_test.dsrtraj",
            "--mc-samples",
            "20000",
            "--truth-len",
            "4000",
        ],
        p,
    );
    ok(&out);
    let ev: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let d = ev["dstsp"].as_f64().unwrap();
    assert!(d.abs() < 0.01, "self divergence {d}");
}

#[test]
fn diverged_model_yields_tagged_report() {
    use gtfdeer::model::{ShplrnnDims, ShplrnnParams};
    use gtfdeer::{Checkpoint, Connectivity, DenseMatrix, Model};

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    generate_lorenz(p, "6", ".", "2000");
    let dims = ShplrnnDims {
        latent: 3,
        hidden: 4,
        obs: 3,
        inputs: 0,
        rank: None,
        m_reg: 0,
    };
    let mut params = ShplrnnParams::init(dims, 0.9, &mut gtfdeer::numerics::stream(0, 0)).unwrap();
    // A positive feedback loop of gain 3 makes every rollout blow up.
    params.w = Connectivity::Dense(DenseMatrix::from_fn(3, 4, |i, j| if i == j { 3.0 } else { 0.0 }));
    params.v = DenseMatrix::from_fn(4, 3, |i, j| if i == j { 1.0 } else { 0.0 });
    params.bias = vec![1.0; 4];
    params.h = vec![1.0; 3];
    let ckpt = Checkpoint {
        model: Model::Shplrnn(params),
        kappa: 0.9,
        seed: 0,
        step: 0,
        extra: Vec::new(),
    };
    ckpt.save(p.join("bad.bin")).unwrap();
    let out = gtfdeer(
        &[
            "eval",
            "--checkpoint",
            "bad.bin",
            "--test",
            "lorenz63_test.dsrtraj",
            "--mc-samples",
            "2000",
        ],
        p,
    );
    ok(&out);
    let ev: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ev["diverged"], true);
    assert!(ev["dstsp"].is_null());
}

#[test]
fn bench_emits_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = gtfdeer(
        &[
            "bench",
            "--t-min-exp",
            "6",
            "--t-max-exp",
            "7",
            "--m",
            "4,8",
            "--workers",
            "1,2",
            "--repeats",
            "2",
            "-o",
            "b.csv",
        ],
        dir.path(),
    );
    ok(&out);
    let text = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "T,M,mode,workers,median_ns,mad_ns,iterations");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // 2 lengths × 2 sizes × (1 sequential + 2 parallel)
    assert_eq!(rows.len(), 12);
    for r in &rows {
        assert_eq!(r.len(), 7);
        assert!(r[2] == "sequential" || r[2] == "parallel");
        assert!(r[4].parse::<f64>().unwrap() > 0.0);
        if r[2] == "parallel" {
            assert_eq!(r[6], "2", "alpha = 1 with full observation converges in two iterations");
        }
    }

    let out = gtfdeer(
        &[
            "bench",
            "--t-min-exp",
            "20",
            "--t-max-exp",
            "20",
            "--m",
            "64",
            "--memory-budget-mb",
            "1",
        ],
        dir.path(),
    );
    ok(&out);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
}

#[test]
fn sweep_writes_aggregated_and_raw_tables() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    generate_lorenz(p, "7", ".", "3000");
    let out = gtfdeer(
        &[
            "sweep",
            "--preset",
            "lorenz63_fo",
            "--data",
            "lorenz63_train.dsrtraj",
            "--test",
            "lorenz63_test.dsrtraj",
            "--product",
            "256",
            "--t-min",
            "64",
            "--t-max",
            "128",
            "--seeds",
            "2",
            "--updates",
            "3",
            "--mc-samples",
            "1000",
            "--workers",
            "1",
            "-o",
            "sw",
        ],
        p,
    );
    ok(&out);
    let summary = std::fs::read_to_string(p.join("sw/sweep_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "T,B,seeds,diverged,dstsp_de_median,dstsp_de_mad,rmse_n_median,rmse_n_mad"
    );
    assert!(lines[1].starts_with("64,4,2,"));
    assert!(lines[2].starts_with("128,2,2,"));
    let runs = std::fs::read_to_string(p.join("sw/sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 4);
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("sw/sweep_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["grid"], serde_json::json!([[4, 64], [2, 128]]));
    assert_eq!(cfg["train_configs"][1]["batch_size"], 2);
}
