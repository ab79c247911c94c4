use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").canonicalize().unwrap()
}

fn tiltcal(manifest: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tiltcal"))
        .arg("--manifest")
        .arg(manifest)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small manifest over the shipped fixtures, written into a fresh directory.
fn small_run(contrast: (&str, &str)) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    std::fs::write(dir.path().join("boot.toml"), "b_source = 1\nb_target = 1\n").unwrap();
    let text = format!(
        r#"seed = 5
output = "out"
model = "{model}"
trials = ["{mpact}", "{prodige}"]
bootstrap = "boot.toml"
candidates = 3000

[contrast]
source = "{src}"
target = "{tgt}"

[[digitized]]
arm = "MPACT GN"
curve = "{f}/digitized/mpact_km.csv"
at_risk = "{f}/digitized/mpact_at_risk.csv"
total_events = 419

[[digitized]]
arm = "PRODIGE-4 FX"
curve = "{f}/digitized/prodige4_km.csv"
at_risk = "{f}/digitized/prodige4_at_risk.csv"
total_events = 165
"#,
        model = f.join("demo_model.toml").display(),
        mpact = f.join("trials/mpact.toml").display(),
        prodige = f.join("trials/prodige4.toml").display(),
        f = f.display(),
        src = contrast.0,
        tgt = contrast.1,
    );
    let path = dir.path().join("run.toml");
    std::fs::write(&path, text).unwrap();
    (dir, path)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|_| panic!("{} exists", path.display()))).unwrap()
}

#[test]
fn dry_run_accepts_published_trial_specs() {
    let o = tiltcal(&fixtures().join("trials_only.toml"), &["calibrate", "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("ok  MPACT GN"), "{out}");
    assert!(out.contains("ok  PRODIGE-4 FX"), "{out}");
}

#[test]
fn dry_run_with_model_checks_schema() {
    let (_dir, manifest) = small_run(("MPACT GN", "PRODIGE-4 FX"));
    let o = tiltcal(&manifest, &["calibrate", "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!manifest.parent().unwrap().join("out").exists());
}

#[test]
fn missing_model_file_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.toml");
    std::fs::write(&m, format!("model = \"nope.toml\"\ntrials = [\"{}\"]\n", fixtures().join("trials/mpact.toml").display())).unwrap();
    let o = tiltcal(&m, &["calibrate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.toml"), "{}", stderr(&o));
}

#[test]
fn malformed_manifests_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.toml");
    for text in ["trials = [", "trials = []\nunknown_key = 1", "trials = []"] {
        std::fs::write(&m, text).unwrap();
        assert_eq!(tiltcal(&m, &["calibrate"]).status.code(), Some(2), "{text}");
    }
    assert_eq!(tiltcal(&dir.path().join("absent.toml"), &["calibrate"]).status.code(), Some(2));
}

#[test]
fn infeasible_targets_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let spec = std::fs::read_to_string(fixtures().join("trials/mpact.toml")).unwrap();
    // Median age far outside the eligible range.
    let spec = spec.replacen("label = \"MPACT GN\"", "label = \"Impossible\"", 1).replace("max = 65.0", "max = 20.0");
    assert!(spec.contains("Impossible") && spec.contains("max = 20.0"), "fixture layout changed");
    std::fs::write(dir.path().join("bad.toml"), spec).unwrap();
    let m = dir.path().join("m.toml");
    std::fs::write(
        &m,
        format!("model = \"{}\"\ntrials = [\"bad.toml\"]\ncandidates = 2000\n", fixtures().join("demo_model.toml").display()),
    )
    .unwrap();
    let o = tiltcal(&m, &["calibrate"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn diagnose_names_the_missing_artifact() {
    let (_dir, manifest) = small_run(("MPACT GN", "PRODIGE-4 FX"));
    let o = tiltcal(&manifest, &["diagnose"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("arm.json"), "{}", stderr(&o));
}

#[test]
fn full_run_writes_every_artifact() {
    let (dir, manifest) = small_run(("MPACT GN", "PRODIGE-4 FX"));
    let out = dir.path().join("out");

    let o = tiltcal(&manifest, &["calibrate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for arm in ["mpact-gn", "prodige-4-fx"] {
        for f in ["arm.json", "weights.csv", "chains.csv", "lambda.json", "diagnostics.json", "curve.csv"] {
            assert!(out.join("arms").join(arm).join(f).is_file(), "{arm}/{f}");
        }
    }

    let o = tiltcal(&manifest, &["contrast"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = read_json(&out.join("contrast/report.json"));
    assert_eq!(report["arm_a"], "PRODIGE-4 FX");
    assert_eq!(report["arm_b"], "MPACT GN-rebalanced");
    let svg = std::fs::read_to_string(out.join("contrast/km.svg")).unwrap();
    // Target, source as calibrated, source rebalanced.
    assert_eq!(svg.matches("class=\"curve\"").count(), 3);
    for label in ["PRODIGE-4 FX", "MPACT GN", "MPACT GN-rebalanced"] {
        assert!(svg.contains(&format!("data-label=\"{label}\"")), "{label}");
    }

    let o = tiltcal(&manifest, &["bootstrap"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("fan-out: 1 x 1 = 1 replicate pairs"), "{}", stdout(&o));
    let boot = read_json(&out.join("bootstrap/report.json"));
    assert_eq!(boot["bootstrap"]["b_source"], 1);
    assert_eq!(boot["bootstrap"]["b_target"], 1);
    assert!(out.join("bootstrap/ipd_mpact-gn.csv").is_file());

    let o = tiltcal(&manifest, &["diagnose"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = read_json(&out.join("diagnostics/summary.json"));
    assert_eq!(summary["mh"].as_array().unwrap().len(), 2);
    // Two Stage-1 rows plus the cross-trial row.
    assert_eq!(summary["weights"].as_array().unwrap().len(), 3);
    let text = std::fs::read_to_string(out.join("diagnostics/summary.txt")).unwrap();
    assert!(text.contains("ESS/N") && text.contains("Max landmark deviation"));

    let o = tiltcal(&manifest, &["simulate", "--count", "25"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let draws = std::fs::read_to_string(out.join("simulate/draws.csv")).unwrap();
    assert_eq!(draws.lines().filter(|l| !l.starts_with('#')).count(), 26);
}

#[test]
fn self_contrast_is_null() {
    let (dir, manifest) = small_run(("MPACT GN", "MPACT GN"));
    assert_eq!(tiltcal(&manifest, &["calibrate"]).status.code(), Some(0));
    let o = tiltcal(&manifest, &["contrast"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = read_json(&dir.path().join("out/contrast/report.json"));
    let hr = report["point"]["cox"]["hr"].as_f64().unwrap();
    assert!((hr - 1.0).abs() < 1e-6, "{hr}");
    for d in report["point"]["delta_rmst"].as_array().unwrap() {
        // The rebalanced weights equal the originals up to the solver tolerance.
        assert!(d[1].as_f64().unwrap().abs() < 1e-3, "{d}");
    }
}

#[test]
fn seed_override_is_reproducible() {
    let (dir, manifest) = small_run(("MPACT GN", "PRODIGE-4 FX"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = tiltcal(&manifest, &["calibrate", "--seed", "99", "--workers", "1", "--output", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["weights.csv", "chains.csv"] {
        let p = |root: &Path| std::fs::read(root.join("arms/mpact-gn").join(f)).unwrap();
        assert_eq!(p(&a), p(&b), "{f}");
    }
    let written: Value = serde_json::to_value(
        toml::from_str::<toml::Value>(&std::fs::read_to_string(a.join("manifest.toml")).unwrap()).unwrap(),
    )
    .unwrap();
    assert_eq!(written["seed"], 99);
}

#[test]
fn quickstart_calibrates_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let m = fixtures().join("quickstart.toml");
    let out = dir.path().to_str().unwrap();
    assert_eq!(tiltcal(&m, &["calibrate", "--output", out]).status.code(), Some(0));
    assert_eq!(tiltcal(&m, &["contrast", "--output", out]).status.code(), Some(0));
    let took = start.elapsed().as_secs_f64();
    assert!(took < 60.0, "quick start took {took:.1}s");
}
