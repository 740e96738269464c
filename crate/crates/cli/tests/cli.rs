use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_layersep"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("STANZA_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn digest(dir: &Path) -> String {
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap();
    r["param_digest"].as_str().unwrap().to_string()
}

#[test]
fn run_writes_report_files() {
    let d = tempfile::tempdir().unwrap();
    let cfg = configs().join("ps_tiny.toml");
    let o = run(&["run", cfg.to_str().unwrap(), "--iterations", "3", "--out", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "iterations.csv", "ledger.csv"] {
        assert!(d.path().join(f).exists(), "{f}");
    }
    let rows = std::fs::read_to_string(d.path().join("iterations.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
}

#[test]
fn seed_precedence_is_file_then_env_then_flag() {
    let cfg = configs().join("stanza_tiny.toml");
    let cfg = cfg.to_str().unwrap();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let p = |i: usize| dirs[i].path().to_str().unwrap().to_string();
    let base = ["run", cfg, "--iterations", "2"];
    let st = |mut c: Command| c.status().unwrap().success();
    let mut c = bin();
    c.args(base).args(["--out", &p(0)]).env("STANZA_SEED", "1234");
    assert!(st(c));
    let mut c = bin();
    c.args(base).args(["--out", &p(1), "--seed", "1234"]).env("STANZA_SEED", "99");
    assert!(st(c));
    let mut c = bin();
    c.args(base).args(["--out", &p(2)]).env_remove("STANZA_SEED");
    assert!(st(c));
    assert_eq!(digest(dirs[0].path()), digest(dirs[1].path()));
    assert_ne!(digest(dirs[0].path()), digest(dirs[2].path()));
}

#[test]
fn compare_sweeps_worker_counts() {
    let d = tempfile::tempdir().unwrap();
    let (ps, st) = (configs().join("ps_tiny.toml"), configs().join("stanza_tiny.toml"));
    let o = run(&[
        "compare",
        ps.to_str().unwrap(),
        st.to_str().unwrap(),
        "--workers",
        "2,4",
        "--iterations",
        "2",
        "--out",
        d.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.path().join("comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "workers,speedup,fc_data_ratio,total_data_ratio");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2,") && lines[2].starts_with("4,"));
}

#[test]
fn plan_prints_a_row_per_node_count() {
    let c = configs().join("alexnet_v100.toml");
    let o = run(&["plan", "--constants", c.to_str().unwrap(), "--nodes", "2..5", "--mode", "ps"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 5);
    assert!(out.lines().nth(1).unwrap().starts_with("2,ps,1,1,"));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "mode = \"ps\"\nmodel = \"tiny_cnn\"\n").unwrap();
    assert_eq!(run(&["run", bad.to_str().unwrap()]).status.code(), Some(2));

    let c = configs().join("alexnet_v100.toml");
    let o = run(&["plan", "--constants", c.to_str().unwrap(), "--nodes", "6", "--memory-limit", "10"]);
    assert_eq!(o.status.code(), Some(3));

    let blow = d.path().join("blow.toml");
    std::fs::write(
        &blow,
        "mode = \"ps\"\nmodel = \"tiny_cnn\"\nseed = 1\niterations = 20\nworkers = 2\nlearning_rate = 1e30\n",
    )
    .unwrap();
    assert_eq!(run(&["run", blow.to_str().unwrap()]).status.code(), Some(4));

    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bench_emits_a_constants_file() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("c.toml");
    let o = run(&["bench", "--reps", "3", "--out", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.contains("t_conv") && text.contains("params = 35578"));
    assert_eq!(run(&["bench", "--model", "resnet152"]).status.code(), Some(2));
}
