use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qpi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qpi")).args(args).output().expect("run qpi")
}

fn spin_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/spin.cfg")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn selftest_passes() {
    let out = qpi(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_infer_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = spin_cfg();
    let base = ["--config", s(&cfg), "--out", s(dir), "--grid", "0:400:10"];

    let out = qpi(&[&base[..], &["simulate"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dataset = dir.join("dataset.qpd");
    let truth = dir.join("truth.qpt");
    assert!(dataset.exists() && truth.exists());

    let out = qpi(&[&base[..], &["infer", "--dataset", s(&dataset), "--dimension", "7"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = dir.join("model.qpm");
    assert!(String::from_utf8_lossy(&out.stdout).contains("d = 7"));
    assert!(fs::read_to_string(dir.join("dimension.txt")).unwrap().starts_with("# dimension estimate"));
    assert!(fs::read_to_string(dir.join("infer.log")).unwrap().contains("stage 4"));

    let out =
        qpi(&[&base[..], &["evaluate", "--model", s(&model), "--truth", s(&truth), "--dataset", s(&dataset)]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.join("errors.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,qpi_error,raw_error,qpt_error,n_avg");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 41);
    let worst = rows.iter().map(|r| r[1].parse::<f64>().unwrap()).fold(0.0, f64::max);
    assert!(worst < 5e-2, "worst trace distance {worst}");

    let agg_dir = dir.join("agg");
    let out = qpi(&["--out", s(&agg_dir), "aggregate", s(&dir.join("errors.csv"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(agg_dir.join("aggregate.csv")).unwrap().starts_with("t,qpi_error,qpi_stderr"));
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(qpi(&["no-such-command"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "scenario = \"spin_exchange\"\ngamma = 0.01\nunknown_key = 3\n").unwrap();
    assert_eq!(qpi(&["--config", s(&cfg), "--out", s(tmp.path()), "simulate"]).status.code(), Some(1));
    let good = spin_cfg();
    assert_eq!(
        qpi(&["--config", s(&good), "--grid", "10:0:5", "--out", s(tmp.path()), "simulate"]).status.code(),
        Some(1)
    );
}

#[test]
fn truncated_dataset_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = spin_cfg();
    assert!(qpi(&["--config", s(&cfg), "--out", s(dir), "simulate"]).status.success());
    let dataset = dir.join("dataset.qpd");
    let text = fs::read_to_string(&dataset).unwrap();
    let cut = &text[..text.len() / 2];
    let cut = &cut[..cut.rfind(',').unwrap()];
    fs::write(&dataset, cut).unwrap();
    assert_eq!(qpi(&["--out", s(dir), "infer", "--dataset", s(&dataset)]).status.code(), Some(2));
    assert_eq!(qpi(&["--out", s(dir), "infer", "--dataset", s(&dir.join("missing.qpd"))]).status.code(), Some(2));
}
