//! Run manifest: one TOML file naming the model, the trial specs, the
//! sampler and bootstrap settings, and where results go. Relative paths
//! resolve against the manifest's own directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tiltcal::io;
use tiltcal::model::SyntheticSurvivalModel;
use tiltcal::pipeline::{BootstrapSettings, ContrastSettings, TrialSpec};
use tiltcal::sampler::SamplerConfig;

use crate::error::CliError;

fn default_candidates() -> usize {
    10_000
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Synthetic model configuration. Without it only dry runs are possible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub trials: Vec<PathBuf>,
    /// Sampler hyperparameters; defaults apply when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparameters: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<PathBuf>,
    /// Baseline draws per trial before eligibility filtering.
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<ContrastPlan>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub digitized: Vec<DigitizedInput>,
}

/// Which arm is rebalanced onto which population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastPlan {
    /// Label of the arm whose cohort is rebalanced.
    pub source: String,
    /// Label of the arm whose baseline targets define the population.
    pub target: String,
    #[serde(default = "default_horizons")]
    pub rmst_horizons: Vec<f64>,
    #[serde(default = "default_horizons")]
    pub landmarks: Vec<f64>,
    #[serde(default = "default_true")]
    pub cox: bool,
}

fn default_horizons() -> Vec<f64> {
    ContrastSettings::default().rmst_horizons
}

fn default_true() -> bool {
    true
}

impl ContrastPlan {
    pub fn settings(&self) -> ContrastSettings {
        ContrastSettings {
            rmst_horizons: self.rmst_horizons.clone(),
            landmarks: self.landmarks.clone(),
            cox: self.cox,
        }
    }
}

/// Published curve of one arm, already digitized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitizedInput {
    pub arm: String,
    /// `time,survival` rows.
    pub curve: PathBuf,
    /// `time,n` rows.
    pub at_risk: PathBuf,
    pub total_events: u64,
}

/// A manifest with every referenced file read and parsed.
#[derive(Debug)]
pub struct Loaded {
    pub manifest: RunManifest,
    pub model: Option<SyntheticSurvivalModel>,
    pub trials: Vec<TrialSpec>,
    pub sampler: SamplerConfig,
    pub bootstrap: BootstrapSettings,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::parse(format!("{what} `{}` does not exist", path.display())))
    }
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<Loaded, CliError> {
    require(path, "manifest")?;
    let mut manifest: RunManifest = io::read_toml(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if let Some(s) = overrides.seed {
        manifest.seed = s;
    }
    manifest.output = match &overrides.output {
        Some(o) => o.clone(),
        None => resolve(&base, &manifest.output),
    };
    if manifest.trials.is_empty() {
        return Err(CliError::parse("manifest lists no trials"));
    }
    if manifest.candidates == 0 {
        return Err(CliError::parse("candidates must be positive"));
    }

    let model = match &manifest.model {
        Some(p) => {
            let p = resolve(&base, p);
            require(&p, "model file")?;
            manifest.model = Some(p.clone());
            let text = io::read_text(&p)?;
            Some(SyntheticSurvivalModel::from_toml(&text).map_err(|e| CliError::from(e).context(&p.display().to_string()))?)
        }
        None => None,
    };

    let mut trials = Vec::with_capacity(manifest.trials.len());
    let mut labels = HashSet::new();
    for p in manifest.trials.iter_mut() {
        *p = resolve(&base, p);
        require(p, "trial spec")?;
        let spec = TrialSpec::from_toml(&io::read_text(p)?)
            .map_err(|e| CliError::from(e).context(&p.display().to_string()))?;
        if !labels.insert(spec.label.clone()) {
            return Err(CliError::parse(format!("trial label `{}` appears twice", spec.label)));
        }
        trials.push(spec);
    }

    let sampler = match &mut manifest.hyperparameters {
        Some(p) => {
            *p = resolve(&base, p);
            require(p, "hyperparameter file")?;
            SamplerConfig::from_toml(&io::read_text(p)?)
                .map_err(|e| CliError::from(e).context(&p.display().to_string()))?
        }
        None => SamplerConfig::default(),
    };
    let bootstrap = match &mut manifest.bootstrap {
        Some(p) => {
            *p = resolve(&base, p);
            require(p, "bootstrap settings")?;
            io::read_toml(p)?
        }
        None => BootstrapSettings::default(),
    };

    if let Some(c) = &manifest.contrast {
        for l in [&c.source, &c.target] {
            if !labels.contains(l) {
                return Err(CliError::parse(format!("contrast names unknown trial `{l}`")));
            }
        }
    }
    for d in manifest.digitized.iter_mut() {
        if !labels.contains(&d.arm) {
            return Err(CliError::parse(format!("digitized input names unknown trial `{}`", d.arm)));
        }
        d.curve = resolve(&base, &d.curve);
        d.at_risk = resolve(&base, &d.at_risk);
        require(&d.curve, "digitized curve")?;
        require(&d.at_risk, "at-risk table")?;
    }

    Ok(Loaded {
        manifest,
        model,
        trials,
        sampler,
        bootstrap,
    })
}

impl Loaded {
    pub fn model(&self) -> Result<&SyntheticSurvivalModel, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::parse("the manifest names no model; only --dry-run is possible"))
    }

    /// Source and target of the contrast. Without an explicit plan the first
    /// listed trial is rebalanced onto the second.
    pub fn contrast_plan(&self) -> Result<ContrastPlan, CliError> {
        if let Some(c) = &self.manifest.contrast {
            return Ok(c.clone());
        }
        if self.trials.len() < 2 {
            return Err(CliError::parse("a contrast needs two trials or a [contrast] table"));
        }
        let d = ContrastSettings::default();
        Ok(ContrastPlan {
            source: self.trials[0].label.clone(),
            target: self.trials[1].label.clone(),
            rmst_horizons: d.rmst_horizons,
            landmarks: d.landmarks,
            cox: d.cox,
        })
    }

    pub fn digitized(&self, arm: &str) -> Option<&DigitizedInput> {
        self.manifest.digitized.iter().find(|d| d.arm == arm)
    }
}

/// Directory-safe form of an arm label.
pub fn slug(label: &str) -> String {
    let mut s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    s.trim_matches('-').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("MPACT GN"), "mpact-gn");
        assert_eq!(slug("PRODIGE-4 FX"), "prodige-4-fx");
        assert_eq!(slug("  a//b "), "a-b");
    }

    #[test]
    fn manifest_round_trip() {
        let text = r#"
seed = 7
model = "m.toml"
trials = ["a.toml", "b.toml"]
candidates = 500

[contrast]
source = "A"
target = "B"
"#;
        let m: RunManifest = toml::from_str(text).unwrap();
        assert_eq!(m.output, PathBuf::from("run"));
        assert_eq!(m.contrast.as_ref().unwrap().rmst_horizons, vec![365.0, 730.0]);
        let back: RunManifest = toml::from_str(&toml::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(toml::from_str::<RunManifest>("trials = []\nbogus = 1").is_err());
    }
}
