use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
run_name = "tiny"
seed = 1
n_train = 60
n_eval = 20
n_test = 20
width = 16
ff_width = 32
layers = 1
I = 1
allow_low_threshold = true
pretrain_budget = 60
pretrain_eval_interval = 30
improve_budget = 30
eval_interval = 15
value_steps = 20
"#;

fn rest(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rest"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn rest_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    let out = rest(&["rest", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "config.toml",
        "metrics.csv",
        "improve_report.csv",
        "run.json",
        "run.log",
        "checkpoints/bc.json",
        "checkpoints/final.json",
        "datasets/grow_1.tsv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert!(metrics.lines().nth(1).unwrap().starts_with("pretrain,0,0,"));

    let report = rest(&["report", run.to_str().unwrap(), tmp.path().join("missing").to_str().unwrap()]);
    assert!(report.status.success());
    let table = String::from_utf8(report.stdout).unwrap();
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.starts_with("run,loss,G,I,schedule"));
}

#[test]
fn phase_commands_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let dir = tmp.path().to_str().unwrap();
    let bc = tmp.path().join("bc.json");
    let ds = tmp.path().join("grow.tsv");

    let out = rest(&["pretrain", "--config", &cfg, "--out", dir]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(bc.exists());

    let out = rest(&["grow", "--config", &cfg, "--policy", bc.to_str().unwrap(), "--out", ds.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&ds).unwrap();
    assert!(text.starts_with("#rest-dataset\tv1\tgrow=1"));
    // 60 originals plus 8 samples each
    assert_eq!(text.lines().count(), 1 + 60 * 9);

    let out = rest(&[
        "improve",
        "--config",
        &cfg,
        "--policy",
        bc.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        dir,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("improved.json").exists());

    let out = rest(&["eval", "--config", &cfg, "--policy", bc.to_str().unwrap()]);
    let r: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&r));

    let out = rest(&["best-of-n", "--config", &cfg, "--policy", bc.to_str().unwrap(), "--n", "1,4"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().collect::<Vec<_>>()[0], "n,reward");
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn oracle_sweep_never_decreases() {
    let out = rest(&["oracle", "--instances", "5", "--steps", "3"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<(u64, f64)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[3].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 5 * 4);
    for w in rows.windows(2) {
        if w[0].0 == w[1].0 {
            assert!(w[1].1 >= w[0].1 - 1e-12);
        }
    }
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let out = rest(&["rest", "--set", "thresholds=[0.9,0.8]", "--set", "schedule=global"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("thresholds"));

    let out = rest(&["rest", "--set", "no_such_key=3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_phase_failure() {
    let out = rest(&["eval", "--policy", "/nonexistent/bc.json"]);
    assert_eq!(out.status.code(), Some(2));
}
