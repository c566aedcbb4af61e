use std::path::Path;
use std::process::{Command, Output};

fn ppls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppls")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["simulate", "--p", "12", "--q", "10", "--r", "2", "--n", "300", "--out", out];
    args.extend_from_slice(extra);
    ppls(&args)
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let o = ppls(&[]);
    assert_eq!(o.status.code(), Some(1));
    let text = format!("{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = ppls(&["fit", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn version_names_library_and_format() {
    let o = ppls(&["--version"]);
    assert_eq!(o.status.code(), Some(0));
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.contains("ppls-core") && s.contains("model format"), "{s}");
}

#[test]
fn simulate_is_deterministic_and_sized() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(simulate(a.path(), &[]).status.success());
    assert!(simulate(b.path(), &[]).status.success());
    for f in ["X.csv", "Y.csv", "truth.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let x = std::fs::read_to_string(a.path().join("X.csv")).unwrap();
    assert_eq!(x.lines().count(), 301);
    let c = tempfile::tempdir().unwrap();
    assert!(simulate(c.path(), &["--seed", "7"]).status.success());
    assert_ne!(std::fs::read(a.path().join("X.csv")).unwrap(), std::fs::read(c.path().join("X.csv")).unwrap());
}

#[test]
fn high_noise_preset() {
    let d = tempfile::tempdir().unwrap();
    assert!(simulate(d.path(), &["--noise", "high"]).status.success());
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["sigma_e2"].as_f64(), Some(0.5));
    assert_eq!(truth["sigma_f2"].as_f64(), Some(0.5));
    assert_eq!(truth["sigma_h2"].as_f64(), Some(0.25));
}

#[test]
fn fit_predict_evaluate_round_trip() {
    let d = tempfile::tempdir().unwrap();
    assert!(simulate(d.path(), &[]).status.success());
    let p = |f: &str| d.path().join(f).to_str().unwrap().to_owned();
    let o = ppls(&[
        "fit", "--x", &p("X.csv"), "--y", &p("Y.csv"), "--rank", "2", "--starts", "2", "--with-se", "--out",
        &p("model.json"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("model.json")).unwrap()).unwrap();
    assert_eq!(model["r"].as_u64(), Some(2));
    assert!(model["standard_errors"]["theta_t2"][0].as_f64().unwrap() > 0.0);
    assert!(model["kappa"].as_f64().unwrap() > 0.0);

    let o = ppls(&["predict", "--params", &p("model.json"), "--x", &p("X.csv"), "--out", &p("pred.csv")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = std::fs::read_to_string(p("pred.csv")).unwrap();
    assert_eq!(pred.lines().next(), Some("sample,coord,mean,lo,hi"));
    assert_eq!(pred.lines().count(), 1 + 300 * 10);

    let o = ppls(&[
        "evaluate", "--params", &p("model.json"), "--x", &p("X.csv"), "--y", &p("Y.csv"), "--table", &p("cal.csv"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(metrics["r2"].as_f64().unwrap() > 0.0);
    let cal = std::fs::read_to_string(p("cal.csv")).unwrap();
    assert_eq!(cal.lines().count(), 6);
}

#[test]
fn ragged_csv_reports_row_and_exits_1() {
    let d = tempfile::tempdir().unwrap();
    let x = d.path().join("x.csv");
    std::fs::write(&x, "a,b,c\n1,2,3\n4,5\n").unwrap();
    let o = ppls(&["noise-est", "--x", x.to_str().unwrap(), "--rank", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

#[test]
fn noise_est_prints_structured_estimate() {
    let d = tempfile::tempdir().unwrap();
    assert!(simulate(d.path(), &[]).status.success());
    let x = d.path().join("X.csv");
    let o = ppls(&["noise-est", "--x", x.to_str().unwrap(), "--rank", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["mode"], "subspace");
    assert_eq!(v["r"].as_u64(), Some(2));
    assert!((v["value"].as_f64().unwrap() - 0.1).abs() < 0.03);

    let o = ppls(&["noise-est", "--x", x.to_str().unwrap(), "--rank", "2", "--mp-correct"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mp-correct"));
}

#[test]
fn rank_select_emits_score_table() {
    let d = tempfile::tempdir().unwrap();
    assert!(simulate(d.path(), &[]).status.success());
    let p = |f: &str| d.path().join(f).to_str().unwrap().to_owned();
    let o = ppls(&[
        "rank-select", "--x", &p("X.csv"), "--y", &p("Y.csv"), "--rank-grid", "1..3", "--starts", "1", "--folds", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = String::from_utf8_lossy(&o.stdout);
    let mut lines = s.lines();
    assert_eq!(lines.next(), Some("rank,sigma_e2,sigma_f2,bic,cvnll,cvmse,gap"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn bench_writes_tables() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("ppca.cfg");
    std::fs::write(&cfg, "study = ppca-verify\ntrials = 3 # short run\n").unwrap();
    let o = ppls(&["bench", "--config", cfg.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.path().join("ppca-verify_long.csv").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("spectral,diff_vs_mle"));
}
