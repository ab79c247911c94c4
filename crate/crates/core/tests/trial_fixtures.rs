use std::path::PathBuf;

use tiltcal::constraints::Mode;
use tiltcal::model::SyntheticSurvivalModel;
use tiltcal::pipeline::{stage_one, CalibrationSettings, RecodedModel, TrialSpec};
use tiltcal::GenerativeModel;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn load(name: &str) -> TrialSpec {
    TrialSpec::from_toml(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

fn demo() -> SyntheticSurvivalModel {
    SyntheticSurvivalModel::from_toml(&std::fs::read_to_string(fixture("demo_model.toml")).unwrap()).unwrap()
}

fn target(spec: &TrialSpec, label: &str) -> f64 {
    spec.baseline.iter().find(|c| c.label == label).unwrap().target
}

#[test]
fn mpact_targets_match_published_table() {
    let s = load("trials/mpact.toml");
    assert_eq!(target(&s, "age median"), 0.5);
    assert_eq!(target(&s, "age F(65)"), 0.589);
    assert_eq!(target(&s, "sex Male"), 0.569);
    assert_eq!(target(&s, "sex Female"), 0.431);
    assert_eq!(target(&s, "ECOG 0"), 0.161);
    assert_eq!(target(&s, "ECOG 1"), 0.764);
    assert_eq!(target(&s, "ECOG 2"), 0.075);
    assert_eq!(target(&s, "race White"), 0.877);
    assert_eq!(target(&s, "metastatic sites 1"), 0.077);
    assert_eq!(target(&s, "metastatic sites 2"), 0.469);
    assert_eq!(target(&s, "metastatic sites 3"), 0.316);
    assert_eq!(target(&s, "indication PAAD"), 1.0);
    let miss = s.baseline.iter().find(|c| c.label == "any missing").unwrap();
    assert_eq!(miss.mode, Mode::Soft { rho: 1e-3 });
    assert_eq!(miss.target, 0.0);
    let lm: Vec<(f64, f64)> = s.landmarks.iter().map(|l| (l.time, l.survival)).collect();
    assert_eq!(lm, vec![(183.0, 0.67), (365.0, 0.35), (548.0, 0.16), (731.0, 0.09), (913.0, 0.05)]);
    assert_eq!((s.quantiles[0].time, s.quantiles[0].p), (259.0, 0.5));
    let map = &s.recode[0].map;
    assert_eq!(map["100"], "0");
    assert_eq!((map["90"].as_str(), map["80"].as_str()), ("1", "1"));
    assert_eq!((map["70"].as_str(), map["60"].as_str()), ("2", "2"));
}

#[test]
fn prodige_targets_match_published_table() {
    let s = load("trials/prodige4.toml");
    assert_eq!(target(&s, "age median"), 0.5);
    assert_eq!(target(&s, "sex Male"), 0.620);
    assert_eq!(target(&s, "sex Female"), 0.380);
    assert_eq!(target(&s, "ECOG 0"), 0.376);
    assert_eq!(target(&s, "ECOG 1"), 0.624);
    assert_eq!(target(&s, "indication PAAD"), 1.0);
    let lm: Vec<(f64, f64)> = s.landmarks.iter().map(|l| (l.time, l.survival)).collect();
    assert_eq!(lm, vec![(183.0, 0.76), (548.0, 0.19), (731.0, 0.10), (913.0, 0.06)]);
    assert_eq!((s.quantiles[0].time, s.quantiles[0].p), (337.9, 0.5));
}

#[test]
fn fixtures_validate_against_demo_model() {
    let m = demo();
    for name in ["trials/mpact.toml", "trials/prodige4.toml"] {
        let spec = load(name);
        let schema = spec.validate(m.schema(), 10.0).unwrap();
        assert!(schema.index_of("ecog").is_some());
        assert_eq!(spec.outcome_constraints(10.0).unwrap().len(), spec.landmarks.len() + 1);
    }
}

#[test]
fn fixtures_balance_exactly_on_demo_model() {
    let m = demo();
    for (name, seed) in [("trials/mpact.toml", 11), ("trials/prodige4.toml", 12)] {
        let spec = load(name);
        let settings = CalibrationSettings {
            candidates: 20_000,
            ..CalibrationSettings::default()
        };
        let rm = RecodedModel::new(&m, &spec.recode).unwrap();
        let (_, dual) = stage_one(&rm, &spec, &settings, seed).unwrap();
        let dual = dual.unwrap();
        for (k, mode) in dual.modes.iter().enumerate() {
            match mode {
                Mode::Hard => assert!(dual.residuals[k].abs() <= 1e-8, "{name} {}: {}", dual.labels[k], dual.residuals[k]),
                Mode::Soft { rho } => {
                    let rel = (dual.multipliers[k] + rho * dual.residuals[k]).abs();
                    assert!(rel <= 1e-6 * dual.multipliers[k].abs().max(1e-3), "{name}: {rel}");
                }
            }
        }
    }
}
