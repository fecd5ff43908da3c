use std::path::Path;
use std::process::{Command, Output};

use conserva::pipeline::manifest::hash_file;
use conserva::pipeline::RunManifest;

fn conserva(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conserva")).args(args).env("CONSERVA_THREADS", "1").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn out_dir(d: &Path) -> &str {
    d.to_str().unwrap()
}

#[test]
fn config_errors_exit_with_code_two() {
    let d = tempfile::tempdir().unwrap();
    let o = conserva(&["sample", "--system", "hubbard", "-o", out_dir(d.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("hubbard"));
    let o = conserva(&["train", "--system", "iso-ho", "--lambda", "-1", "-o", out_dir(d.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lambda"));
    let o = conserva(&["sample", "--system", "iso-ho", "--set", "rank.epz=0.1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("rank.epz"));
    let cfg = d.path().join("bad.json");
    std::fs::write(&cfg, r#"{"system": "iso-ho", "train": {"lamda": 0.1}}"#).unwrap();
    let o = conserva(&["sample", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lamda"));
}

#[test]
fn missing_ensemble_exits_with_code_four() {
    let d = tempfile::tempdir().unwrap();
    let dir = out_dir(d.path());
    assert_eq!(code(&conserva(&["sample", "--system", "iso-ho", "--points", "100", "-o", dir])), 0);
    let o = conserva(&["rank", "--system", "iso-ho", "-o", dir]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("ensemble"));
    let man = RunManifest::load(d.path()).unwrap();
    let f = man.failure.clone().expect("failure record");
    assert_eq!((f.stage.as_str(), f.exit_code), ("rank", 4));
    assert!(man.stage("sample").is_some());
    let o = conserva(&["report", "--system", "iso-ho", "-o", dir]);
    assert_eq!(code(&o), 4);
}

fn search_run(dir: &str) -> Output {
    conserva(&[
        "search", "--train", "--system", "iso-ho", "-o", dir, "--points", "300", "--epochs", "1", "--nets", "2",
        "--max-len", "5", "--set", "search.verify_points=300",
    ])
}

#[test]
fn stages_cache_and_manifest_is_complete() {
    let d = tempfile::tempdir().unwrap();
    let dir = out_dir(d.path());
    let o = search_run(dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("cached"));
    let o = search_run(dir);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.matches("(cached)").count(), 3, "{text}");
    let o = conserva(&["rank", "--system", "iso-ho", "-o", dir, "--points", "300", "--epochs", "1", "--nets", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = conserva(&["report", "--system", "iso-ho", "-o", dir]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let man = RunManifest::load(d.path()).unwrap();
    assert!(man.failure.is_none());
    let mut listed: Vec<String> = man.stages.iter().flat_map(|s| s.artifacts.iter().map(|a| a.path.clone())).collect();
    for s in &man.stages {
        for a in &s.artifacts {
            assert_eq!(hash_file(&d.path().join(&a.path)).unwrap(), a.sha256, "{}", a.path);
        }
    }
    listed.push("manifest.json".into());
    listed.sort();
    let mut on_disk: Vec<String> =
        std::fs::read_dir(d.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);

    let summary = std::fs::read_to_string(d.path().join("summary.txt")).unwrap();
    assert!(summary.contains("system: iso-ho"));
    assert!(summary.contains("n_c = "));
    assert!(summary.contains("xQp_xQ+") && summary.contains("(x^2) + (p_x^2)"));
    let ev = std::fs::read_to_string(d.path().join("explained_variance.csv")).unwrap();
    assert!(ev.starts_with("component,mean_fraction,min_fraction,max_fraction\n1,"));
    assert!(std::fs::read_to_string(d.path().join("n_eff.csv")).unwrap().starts_with("scale,n_eff\n"));

    let batch = std::fs::read_to_string(d.path().join("batch.csv")).unwrap();
    assert!(!batch.contains('\r'));
    let cell = batch.lines().nth(1).unwrap().split(',').next().unwrap();
    let mantissa = cell.trim_start_matches('-').split('e').next().unwrap();
    assert_eq!(mantissa.replace('.', "").len(), 17);
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = search_run(out_dir(d.path()));
        assert_eq!(code(&o), 0);
        assert_eq!(code(&conserva(&["report", "--system", "iso-ho", "-o", out_dir(d.path())])), 0);
    }
    for f in ["batch.csv", "ensemble.bin", "loss.csv", "search.json", "summary.txt"] {
        assert_eq!(hash_file(&a.path().join(f)).unwrap(), hash_file(&b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn empty_search_is_summarised() {
    let d = tempfile::tempdir().unwrap();
    let dir = out_dir(d.path());
    assert_eq!(code(&conserva(&["sample", "--system", "aniso-ho", "--points", "200", "-o", dir])), 0);
    let o = conserva(&["search", "--system", "aniso-ho", "--points", "200", "--max-len", "3", "-o", dir]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&conserva(&["report", "--system", "aniso-ho", "-o", dir])), 0);
    let s = std::fs::read_to_string(d.path().join("summary.txt")).unwrap();
    assert!(s.contains("no formulas accepted"), "{s}");
}

#[test]
fn lambda_sweep_writes_csv() {
    let d = tempfile::tempdir().unwrap();
    let dir = out_dir(d.path());
    let o = conserva(&[
        "sweep-lambda", "--train", "--system", "damped-ho", "--points", "200", "--epochs", "1", "--nets", "2", "-o",
        dir, "--set", "sweep.lambdas=[0.1,1.0]",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&conserva(&["report", "--system", "damped-ho", "-o", dir])), 0);
    let csv = std::fs::read_to_string(d.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("lambda,l1,l2\n1.0000000000000001e-1,"));
}

#[test]
fn full_pipeline_on_base_threebody_skips_search() {
    let d = tempfile::tempdir().unwrap();
    let dir = out_dir(d.path());
    let o = conserva(&["all", "--system", "threebody", "--points", "200", "--epochs", "1", "--nets", "2", "-o", dir]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let man = RunManifest::load(d.path()).unwrap();
    assert!(man.stage("rank").is_some() && man.stage("search").is_none());
    let o = conserva(&["search", "--system", "threebody", "-o", dir]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("threebody-aug"));
}
