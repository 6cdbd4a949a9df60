use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pgs(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgs"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PGS_OUT_ROOT")
        .output()
        .unwrap()
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = pgs(&["synth", "--n", "2", "--seed", "4", "--dims", "11x11", "--centers", "6x6", "--out", out], tmp.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["sample_000.csv", "sample_001.csv", "truth/sample_001.csv", "manifest.json"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap());
    }
    assert_ne!(
        fs::read(tmp.path().join("a/sample_000.csv")).unwrap(),
        fs::read(tmp.path().join("a/sample_001.csv")).unwrap()
    );
}

#[test]
fn default_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pgs(&["synth", "--n", "1", "--dims", "9x9", "--centers", "5x5"], tmp.path());
    assert_eq!(code(&o), 0);
    assert!(tmp.path().join("pgs-out/synth/sample_000.csv").is_file());
    let o = pgs(&["--out-root", "elsewhere", "synth", "--n", "1", "--dims", "9x9", "--centers", "5x5"], tmp.path());
    assert_eq!(code(&o), 0);
    assert!(tmp.path().join("elsewhere/synth/manifest.json").is_file());
}

#[test]
fn clean_input_skips_refinement() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = ["synth", "--n", "2", "--sigma", "0", "--artifact-amp", "0", "--out", "in"];
    assert_eq!(code(&pgs(&synth, tmp.path())), 0);
    let o = pgs(&["smooth", "--input", "in", "--out", "out"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&tmp.path().join("out/manifest.json"));
    assert_eq!(m["aggregate"]["skipped"], 2);
    for s in m["samples"].as_array().unwrap() {
        assert_eq!(s["report"]["skipped"], true);
        assert_eq!(s["report"]["epochs_run"], 0);
        assert_eq!(s["negative_pgs"], 0);
    }
    assert!(tmp.path().join("out/timings.json").is_file());
    assert!(tmp.path().join("out/fields/sample_000.csv").is_file());
    assert!(tmp.path().join("out/fields/sample_000.summary.json").is_file());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert_eq!(code(&pgs(&["smooth", "--input", "missing"], p)), 2);
    assert_eq!(code(&pgs(&["peri", "--model", "neural", "--input", "x"], p)), 2);
    assert_eq!(code(&pgs(&["report"], p)), 2);
    assert_eq!(code(&pgs(&["synth", "--dims", "1x4"], p)), 2);
    assert_eq!(code(&pgs(&["synth", "--sigma", "-1"], p)), 2);

    fs::create_dir(p.join("empty")).unwrap();
    assert_eq!(code(&pgs(&["smooth", "--input", "empty", "--out", "o"], p)), 2);
    assert_eq!(manifest(&p.join("o/manifest.json"))["status"], "failed");

    fs::create_dir(p.join("bad")).unwrap();
    fs::write(p.join("bad/x.csv"), "not,a,snapshot\n").unwrap();
    let o = pgs(&["smooth", "--input", "bad", "--out", "o2"], p);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("x.csv"));

    fs::write(p.join("cfg.toml"), "[pgs]\nno_such_key = 1\n").unwrap();
    assert_eq!(code(&pgs(&["--config", "cfg.toml", "synth", "--n", "1"], p)), 2);
}

#[test]
fn config_hash_ignores_key_order() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let synth = ["synth", "--n", "1", "--dims", "11x11", "--centers", "6x6", "--sigma", "0", "--artifact-amp", "0", "--out", "in"];
    assert_eq!(code(&pgs(&synth, p)), 0);
    fs::write(p.join("a.toml"), "[pgs]\nbeta_tilde = 50.0\nmax_epochs = 200\n").unwrap();
    fs::write(p.join("b.toml"), "[pgs]\nmax_epochs = 200\nbeta_tilde = 50.0\n").unwrap();
    fs::write(p.join("c.toml"), "[pgs]\nmax_epochs = 200\nbeta_tilde = 60.0\n").unwrap();
    let mut hashes = Vec::new();
    for cfg in ["a", "b", "c"] {
        let o = pgs(&["--config", &format!("{cfg}.toml"), "smooth", "--input", "in", "--out", cfg], p);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        hashes.push(manifest(&p.join(cfg).join("manifest.json"))["config_hash"].as_str().unwrap().to_string());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_ne!(hashes[0], hashes[2]);

    let o = pgs(&["report", "a/manifest.json", "b/manifest.json", "--out", "r1"], p);
    assert_eq!(code(&o), 0);
    assert!(!String::from_utf8_lossy(&o.stderr).contains("warning"));
    let o = pgs(&["report", "a/manifest.json", "c/manifest.json", "--out", "r2"], p);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("different config hashes"));
    let csv = fs::read_to_string(p.join("r2/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(p.join("r2/report.txt").is_file());

    let o = pgs(&["report", "a/manifest.json", "--out", "r3"], p);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("smooth"));
}

#[test]
fn peri_eval_of_zero_field() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let synth = ["synth", "--n", "1", "--sigma", "0", "--artifact-amp", "0", "--stretch", "0", "--out", "zero"];
    assert_eq!(code(&pgs(&synth, p)), 0);
    let o = pgs(&["peri", "--input", "zero/sample_000.csv", "--out", "ev"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&p.join("ev/manifest.json"));
    assert_eq!(m["samples"][0]["g_norm"], 0.0);
    assert_eq!(m["samples"][0]["pk1_average"], serde_json::json!([[0.0, 0.0], [0.0, 0.0]]));

    // a stretched field under the state model gives a positive axial stress
    let synth = ["synth", "--n", "1", "--sigma", "0", "--artifact-amp", "0", "--stretch", "0.01", "--out", "st"];
    assert_eq!(code(&pgs(&synth, p)), 0);
    let o = pgs(&["peri", "--input", "st", "--model", "linear_state", "--a", "0.5", "--loading", "cosine", "--out", "ev2"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&p.join("ev2/manifest.json"));
    assert!(m["samples"][0]["pk1_average"][0][0].as_f64().unwrap() > 0.0);
    assert!(m["samples"][0]["residual_loss"].as_f64().unwrap() > 0.0);
    assert!(p.join("ev2/sample_000.csv").is_file());
}

#[test]
fn peri_solve_writes_history() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let o = pgs(&["peri", "--mode", "solve", "--dims", "11x11", "--spacing", "0.1", "--out", "s"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&p.join("s/manifest.json"));
    let hist = m["aggregate"]["residual_history"].as_array().unwrap();
    assert!(hist.last().unwrap().as_f64().unwrap() < 1e-8);
    assert!(m["samples"][0]["residual_loss"].as_f64().unwrap() < 1e-8);

    let o = pgs(&["peri", "--mode", "solve", "--dims", "11x11", "--spacing", "0.1", "--c", "-1", "--out", "bad"], p);
    assert_eq!(code(&o), 2);
}
