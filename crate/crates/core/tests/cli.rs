use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn example2(out: &Path) -> Output {
    mdm(&[
        "example2",
        "--mc",
        "4",
        "--tau",
        "60",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn results_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = example2(out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["results.csv", "estimates.csv", "trace.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs"
        );
    }
    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(lines.next(), Some("method,parameter,true,s_mean,s_cov,est_cov"));
    assert_eq!(lines.count(), 4 * 4);
    assert!(results.contains("sw-nr,\"R(1,2)\",-1e0,") || results.contains("sw-nr,R(1,2),-1e0,"));
    let timing = fs::read_to_string(a.join("timing.csv")).unwrap();
    assert!(timing.lines().any(|l| l.starts_with("uw-nr,") && l.ends_with(",1e0")));
    let trace = fs::read_to_string(a.join("trace.csv")).unwrap();
    assert!(trace.starts_with("k,method,parameter,mean,std\n"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 9);
}

#[test]
fn different_seeds_differ() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    example2(&a);
    let o = mdm(&["example2", "--mc", "4", "--tau", "60", "--seed", "10", "--out", b.to_str().unwrap()]);
    assert!(o.status.success());
    assert_ne!(
        fs::read(a.join("results.csv")).unwrap(),
        fs::read(b.join("results.csv")).unwrap()
    );
}

#[test]
fn run_with_config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example1.toml");
    let out = dir.path().join("o");
    let o = mdm(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--mc",
        "3",
        "--tau",
        "80",
        "--methods",
        "uw-nr,sw-re",
        "--project-psd",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 2);
    assert!(results.contains("sw-re,Q,"));
}

#[test]
fn unobservable_model_reports_module_run_and_time_index() {
    let dir = tempfile::tempdir().unwrap();
    let tau = 12;
    let h: Vec<Vec<Vec<f64>>> = (0..=tau)
        .map(|k| vec![vec![if k == 7 { 0.0 } else { 1.0 }]])
        .collect();
    let model = serde_json::json!({
        "nx": 1, "nw": 1, "nv": 1,
        "f": vec![vec![vec![0.9]]; tau],
        "g": vec![vec![vec![1.0]]; tau],
        "e": vec![vec![vec![1.0]]; tau],
        "h": h,
        "d": vec![vec![vec![1.0]]; tau + 1],
        "q": [[1.0]], "r": [[1.0]],
        "x0_mean": [0.0], "x0_cov": [[1.0]],
        "controls": vec![vec![0.0]; tau],
        "window": {"depth": 1, "steps": 1},
    });
    fs::write(dir.path().join("model.json"), model.to_string()).unwrap();
    fs::write(
        dir.path().join("exp.toml"),
        "model = \"file\"\nmodel_file = \"model.json\"\nmc = 2\nmethods = [\"uw-nr\"]\nout = \"o\"\n",
    )
    .unwrap();
    let o = mdm(&["run", "--config", dir.path().join("exp.toml").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("module=stack_ops"), "{err}");
    assert!(err.contains("k=7"), "{err}");
}

#[test]
fn bad_method_is_rejected() {
    let o = mdm(&["example1", "--methods", "uw-nr,nope"]);
    assert!(!o.status.success());
}
