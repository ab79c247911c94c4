//! Generative-model interface and the built-in synthetic survival simulator.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, Weibull};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("record does not conform to schema: {0}")]
    NonConforming(String),
    #[error("model does not support {0}")]
    UnsupportedCapability(&'static str),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("at least one draw must be requested")]
    EmptyDraw,
    #[error("model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous {
        #[serde(default)]
        units: String,
    },
    Categorical {
        levels: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    #[serde(default)]
    pub nullable: bool,
}

impl FeatureSpec {
    pub fn continuous(name: &str, units: &str) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Continuous {
                units: units.to_string(),
            },
            nullable: false,
        }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
            nullable: false,
        }
    }

    pub fn nullable(mut self) -> Self {
        self.nullable = true;
        self
    }

    pub fn levels(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Categorical { levels } => Some(levels),
            FeatureKind::Continuous { .. } => None,
        }
    }
}

/// Ordered feature descriptors for baseline records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureSpec>", into = "Vec<FeatureSpec>")]
pub struct CovariateSchema {
    features: Vec<FeatureSpec>,
}

impl TryFrom<Vec<FeatureSpec>> for CovariateSchema {
    type Error = ModelError;
    fn try_from(features: Vec<FeatureSpec>) -> Result<Self, ModelError> {
        CovariateSchema::new(features)
    }
}

impl From<CovariateSchema> for Vec<FeatureSpec> {
    fn from(s: CovariateSchema) -> Self {
        s.features
    }
}

impl CovariateSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self, ModelError> {
        let mut seen = HashSet::new();
        for f in &features {
            if f.name.is_empty() {
                return Err(ModelError::InvalidSchema("empty feature name".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(ModelError::InvalidSchema(format!(
                    "duplicate feature `{}`",
                    f.name
                )));
            }
            if let FeatureKind::Categorical { levels } = &f.kind {
                if levels.is_empty() {
                    return Err(ModelError::InvalidSchema(format!(
                        "categorical feature `{}` has no levels",
                        f.name
                    )));
                }
                let distinct: HashSet<_> = levels.iter().collect();
                if distinct.len() != levels.len() {
                    return Err(ModelError::InvalidSchema(format!(
                        "categorical feature `{}` repeats a level",
                        f.name
                    )));
                }
            }
        }
        Ok(CovariateSchema { features })
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature(&self, idx: usize) -> &FeatureSpec {
        &self.features[idx]
    }

    pub fn level_index(&self, feature: usize, level: &str) -> Option<u32> {
        self.features[feature]
            .levels()?
            .iter()
            .position(|l| l == level)
            .map(|i| i as u32)
    }

    /// Numeric reading of a present value. Categorical levels count only when
    /// their label parses as a number ("0", "1", "2" for a performance score).
    pub fn numeric(&self, feature: usize, value: Value) -> Option<f64> {
        match (value, &self.features[feature].kind) {
            (Value::Real(v), _) => Some(v),
            (Value::Level(l), FeatureKind::Categorical { levels }) => {
                levels.get(l as usize)?.trim().parse::<f64>().ok()
            }
            (Value::Level(_), FeatureKind::Continuous { .. }) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Real(f64),
    Level(u32),
}

/// One baseline draw; `None` marks a missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    values: Vec<Option<Value>>,
}

impl BaselineRecord {
    pub fn new(values: Vec<Option<Value>>) -> Self {
        BaselineRecord { values }
    }

    pub fn get(&self, idx: usize) -> Option<Value> {
        self.values.get(idx).copied().flatten()
    }

    pub fn values(&self) -> &[Option<Value>] {
        &self.values
    }

    pub fn set(&mut self, idx: usize, value: Option<Value>) {
        self.values[idx] = value;
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(Option::is_none)
    }

    pub fn conforms(&self, schema: &CovariateSchema) -> Result<(), ModelError> {
        if self.values.len() != schema.len() {
            return Err(ModelError::NonConforming(format!(
                "expected {} values, found {}",
                schema.len(),
                self.values.len()
            )));
        }
        for (f, v) in schema.features().iter().zip(&self.values) {
            match (v, &f.kind) {
                (None, _) if !f.nullable => {
                    return Err(ModelError::NonConforming(format!(
                        "`{}` is missing but not nullable",
                        f.name
                    )))
                }
                (None, _) => {}
                (Some(Value::Real(x)), FeatureKind::Continuous { .. }) => {
                    if !x.is_finite() {
                        return Err(ModelError::NonConforming(format!(
                            "`{}` is not finite",
                            f.name
                        )));
                    }
                }
                (Some(Value::Level(l)), FeatureKind::Categorical { levels }) => {
                    if *l as usize >= levels.len() {
                        return Err(ModelError::NonConforming(format!(
                            "`{}` level index {} out of range",
                            f.name, l
                        )));
                    }
                }
                _ => {
                    return Err(ModelError::NonConforming(format!(
                        "`{}` has a value of the wrong kind",
                        f.name
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Time-to-event in days.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Outcome(f64);

impl Outcome {
    pub fn new(days: f64) -> Result<Self, ModelError> {
        if days.is_finite() && days >= 0.0 {
            Ok(Outcome(days))
        } else {
            Err(ModelError::InvalidParameter(format!(
                "outcome must be finite and non-negative, got {days}"
            )))
        }
    }

    pub fn days(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Outcome {
    type Error = ModelError;
    fn try_from(v: f64) -> Result<Self, ModelError> {
        Outcome::new(v)
    }
}

impl From<Outcome> for f64 {
    fn from(o: Outcome) -> f64 {
        o.0
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} d", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub sample_baseline: bool,
    pub sample_conditional: bool,
    pub conditional_density: bool,
}

/// A black-box joint model: a baseline sampler, a conditional outcome
/// sampler and, optionally, the conditional density.
///
/// Implementations must be immutable once built. All randomness comes from
/// the generator handed in, so callers control reproducibility.
pub trait GenerativeModel: Send + Sync {
    fn schema(&self) -> &CovariateSchema;

    fn capabilities(&self) -> Capabilities;

    fn draw_baseline(&self, rng: &mut dyn RngCore) -> Result<BaselineRecord, ModelError>;

    fn draw_outcome(&self, x: &BaselineRecord, rng: &mut dyn RngCore)
        -> Result<Outcome, ModelError>;

    fn conditional_density(&self, _x: &BaselineRecord, _y: f64) -> Result<f64, ModelError> {
        Err(ModelError::UnsupportedCapability("conditional density evaluation"))
    }
}

/// `n` independent baseline draws, reproducible from `seed`.
pub fn sample_baseline(
    model: &dyn GenerativeModel,
    n: usize,
    seed: u64,
) -> Result<Vec<BaselineRecord>, ModelError> {
    if n == 0 {
        return Err(ModelError::EmptyDraw);
    }
    if !model.capabilities().sample_baseline {
        return Err(ModelError::UnsupportedCapability("baseline sampling"));
    }
    let mut rng = rng::seeded(seed, Purpose::Baseline);
    (0..n).map(|_| model.draw_baseline(&mut rng)).collect()
}

pub fn sample_conditional(
    model: &dyn GenerativeModel,
    x: &BaselineRecord,
    seed: u64,
) -> Result<Outcome, ModelError> {
    if !model.capabilities().sample_conditional {
        return Err(ModelError::UnsupportedCapability("conditional sampling"));
    }
    x.conforms(model.schema())?;
    let mut rng = rng::seeded(seed, Purpose::Conditional);
    model.draw_outcome(x, &mut rng)
}

pub fn eval_conditional_density(
    model: &dyn GenerativeModel,
    x: &BaselineRecord,
    y: f64,
) -> Result<f64, ModelError> {
    if !model.capabilities().conditional_density {
        return Err(ModelError::UnsupportedCapability("conditional density evaluation"));
    }
    x.conforms(model.schema())?;
    model.conditional_density(x, y)
}

fn default_one() -> f64 {
    1.0
}

/// Marginal law of one synthetic covariate plus its outcome effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureLaw {
    /// Normal truncated to `[min, max]`; contributes `coefficient * (x - center)`.
    Continuous {
        #[serde(default)]
        units: String,
        mean: f64,
        sd: f64,
        min: f64,
        max: f64,
        #[serde(default)]
        coefficient: f64,
        #[serde(default)]
        center: f64,
    },
    /// Independent categorical; level `k` contributes `effects[k]`.
    Categorical {
        levels: Vec<String>,
        probabilities: Vec<f64>,
        #[serde(default)]
        effects: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub name: String,
    #[serde(flatten)]
    pub law: FeatureLaw,
    #[serde(default)]
    pub missing_rate: f64,
    #[serde(default)]
    pub missing_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AftConfig {
    /// Weibull shape.
    #[serde(default = "default_one")]
    pub shape: f64,
    /// Weibull scale in days at a zero linear predictor.
    pub scale: f64,
}

/// Configuration file contents for [`SyntheticSurvivalModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelConfig {
    pub outcome: AftConfig,
    #[serde(rename = "feature", default)]
    pub features: Vec<FeatureConfig>,
}

impl SyntheticModelConfig {
    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, ModelError> {
        toml::to_string_pretty(self).map_err(|e| ModelError::Config(e.to_string()))
    }
}

/// Independent baseline marginals with an accelerated-failure-time Weibull
/// outcome: `T | x ~ Weibull(shape, scale * exp(eta(x)))`.
#[derive(Debug, Clone)]
pub struct SyntheticSurvivalModel {
    config: SyntheticModelConfig,
    schema: CovariateSchema,
    normals: Vec<Option<Normal<f64>>>,
    cumulative: Vec<Vec<f64>>,
}

impl SyntheticSurvivalModel {
    pub fn new(config: SyntheticModelConfig) -> Result<Self, ModelError> {
        let AftConfig { shape, scale } = config.outcome;
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "Weibull shape must be positive, got {shape}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "Weibull scale must be positive, got {scale}"
            )));
        }
        let mut specs = Vec::with_capacity(config.features.len());
        let mut normals = Vec::with_capacity(config.features.len());
        let mut cumulative = Vec::with_capacity(config.features.len());
        for f in &config.features {
            if !(0.0..1.0).contains(&f.missing_rate) {
                return Err(ModelError::InvalidParameter(format!(
                    "`{}`: missing_rate must lie in [0, 1)",
                    f.name
                )));
            }
            let nullable = f.missing_rate > 0.0;
            match &f.law {
                FeatureLaw::Continuous {
                    units,
                    mean,
                    sd,
                    min,
                    max,
                    coefficient,
                    center,
                } => {
                    if !(min < max) || !(*sd > 0.0) || ![mean, coefficient, center].iter().all(|v| v.is_finite()) {
                        return Err(ModelError::InvalidParameter(format!(
                            "`{}`: need min < max, sd > 0 and finite parameters",
                            f.name
                        )));
                    }
                    if (mean - min) / sd < -6.0 || (max - mean) / sd < -6.0 {
                        return Err(ModelError::InvalidParameter(format!(
                            "`{}`: truncation window carries negligible mass",
                            f.name
                        )));
                    }
                    let mut spec = FeatureSpec::continuous(&f.name, units);
                    spec.nullable = nullable;
                    specs.push(spec);
                    normals.push(Some(Normal::new(*mean, *sd).map_err(|e| {
                        ModelError::InvalidParameter(format!("`{}`: {e}", f.name))
                    })?));
                    cumulative.push(Vec::new());
                }
                FeatureLaw::Categorical {
                    levels,
                    probabilities,
                    effects,
                } => {
                    if probabilities.len() != levels.len()
                        || (!effects.is_empty() && effects.len() != levels.len())
                    {
                        return Err(ModelError::InvalidParameter(format!(
                            "`{}`: probabilities and effects need one entry per level",
                            f.name
                        )));
                    }
                    let total: f64 = probabilities.iter().sum();
                    if probabilities.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                        return Err(ModelError::InvalidParameter(format!(
                            "`{}`: probabilities must be non-negative and sum to 1",
                            f.name
                        )));
                    }
                    let mut spec = FeatureSpec {
                        name: f.name.clone(),
                        kind: FeatureKind::Categorical {
                            levels: levels.clone(),
                        },
                        nullable,
                    };
                    spec.nullable = nullable;
                    specs.push(spec);
                    normals.push(None);
                    let mut acc = 0.0;
                    cumulative.push(
                        probabilities
                            .iter()
                            .map(|p| {
                                acc += p / total;
                                acc
                            })
                            .collect(),
                    );
                }
            }
            if !f.missing_effect.is_finite() {
                return Err(ModelError::InvalidParameter(format!(
                    "`{}`: missing_effect must be finite",
                    f.name
                )));
            }
        }
        let schema = CovariateSchema::new(specs)?;
        Ok(SyntheticSurvivalModel {
            config,
            schema,
            normals,
            cumulative,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        Self::new(SyntheticModelConfig::from_toml(text)?)
    }

    pub fn config(&self) -> &SyntheticModelConfig {
        &self.config
    }

    pub fn shape(&self) -> f64 {
        self.config.outcome.shape
    }

    /// Log-scale shift of the outcome for record `x`.
    pub fn linear_predictor(&self, x: &BaselineRecord) -> f64 {
        let mut eta = 0.0;
        for (idx, f) in self.config.features.iter().enumerate() {
            eta += match (x.get(idx), &f.law) {
                (None, _) => f.missing_effect,
                (Some(Value::Real(v)), FeatureLaw::Continuous { coefficient, center, .. }) => {
                    coefficient * (v - center)
                }
                (Some(Value::Level(l)), FeatureLaw::Categorical { effects, .. }) => {
                    effects.get(l as usize).copied().unwrap_or(0.0)
                }
                _ => 0.0,
            };
        }
        eta
    }

    pub fn scale_for(&self, x: &BaselineRecord) -> f64 {
        self.config.outcome.scale * self.linear_predictor(x).exp()
    }

    /// Survival function of the outcome given `x`.
    pub fn survival(&self, x: &BaselineRecord, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        (-(t / self.scale_for(x)).powf(self.shape())).exp()
    }
}

fn weibull_pdf(shape: f64, scale: f64, y: f64) -> f64 {
    if y < 0.0 {
        return 0.0;
    }
    if y == 0.0 {
        return if shape < 1.0 {
            f64::INFINITY
        } else if shape == 1.0 {
            1.0 / scale
        } else {
            0.0
        };
    }
    let z = y / scale;
    shape / scale * z.powf(shape - 1.0) * (-z.powf(shape)).exp()
}

impl GenerativeModel for SyntheticSurvivalModel {
    fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            sample_baseline: true,
            sample_conditional: true,
            conditional_density: true,
        }
    }

    fn draw_baseline(&self, rng: &mut dyn RngCore) -> Result<BaselineRecord, ModelError> {
        let mut values = Vec::with_capacity(self.config.features.len());
        for (idx, f) in self.config.features.iter().enumerate() {
            let u: f64 = rng.random();
            let value = match &f.law {
                FeatureLaw::Continuous { min, max, .. } => {
                    let normal = self.normals[idx].as_ref().expect("continuous law");
                    let mut v = normal.sample(rng);
                    let mut tries = 0;
                    while !(*min..=*max).contains(&v) && tries < 10_000 {
                        v = normal.sample(rng);
                        tries += 1;
                    }
                    Value::Real(v.clamp(*min, *max))
                }
                FeatureLaw::Categorical { .. } => {
                    let cdf = &self.cumulative[idx];
                    let r: f64 = rng.random();
                    let level = cdf.iter().position(|&c| r < c).unwrap_or(cdf.len() - 1);
                    Value::Level(level as u32)
                }
            };
            values.push(if u < f.missing_rate { None } else { Some(value) });
        }
        Ok(BaselineRecord::new(values))
    }

    fn draw_outcome(
        &self,
        x: &BaselineRecord,
        rng: &mut dyn RngCore,
    ) -> Result<Outcome, ModelError> {
        let scale = self.scale_for(x);
        let law = Weibull::new(scale, self.shape())
            .map_err(|e| ModelError::InvalidParameter(e.to_string()))?;
        Outcome::new(law.sample(rng))
    }

    fn conditional_density(&self, x: &BaselineRecord, y: f64) -> Result<f64, ModelError> {
        Ok(weibull_pdf(self.shape(), self.scale_for(x), y))
    }
}

/// Finite-support conditional law attached to one stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteKernel {
    pub support: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Model with one categorical baseline feature `stratum` and a finite-support
/// outcome law per stratum. Everything about it can be enumerated exactly.
#[derive(Debug, Clone)]
pub struct DiscreteKernelModel {
    schema: CovariateSchema,
    stratum_probs: Vec<f64>,
    kernels: Vec<DiscreteKernel>,
}

impl DiscreteKernelModel {
    pub fn new(stratum_probs: Vec<f64>, kernels: Vec<DiscreteKernel>) -> Result<Self, ModelError> {
        if stratum_probs.len() != kernels.len() || kernels.is_empty() {
            return Err(ModelError::InvalidParameter(
                "one kernel per stratum is required".into(),
            ));
        }
        let check = |p: &[f64]| {
            p.iter().all(|v| *v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if !check(&stratum_probs) {
            return Err(ModelError::InvalidParameter("stratum probabilities".into()));
        }
        for k in &kernels {
            if k.support.is_empty()
                || k.support.len() != k.probs.len()
                || !check(&k.probs)
                || k.support.iter().any(|y| !(y.is_finite() && *y >= 0.0))
            {
                return Err(ModelError::InvalidParameter("kernel support/probabilities".into()));
            }
        }
        let names: Vec<String> = (0..kernels.len()).map(|i| i.to_string()).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let schema = CovariateSchema::new(vec![FeatureSpec::categorical("stratum", &refs)])?;
        Ok(DiscreteKernelModel {
            schema,
            stratum_probs,
            kernels,
        })
    }

    pub fn kernel(&self, stratum: usize) -> &DiscreteKernel {
        &self.kernels[stratum]
    }

    pub fn strata(&self) -> usize {
        self.kernels.len()
    }

    pub fn record(stratum: u32) -> BaselineRecord {
        BaselineRecord::new(vec![Some(Value::Level(stratum))])
    }

    fn stratum_of(&self, x: &BaselineRecord) -> Result<usize, ModelError> {
        match x.get(0) {
            Some(Value::Level(l)) if (l as usize) < self.kernels.len() => Ok(l as usize),
            _ => Err(ModelError::NonConforming("stratum".into())),
        }
    }
}

impl GenerativeModel for DiscreteKernelModel {
    fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            sample_baseline: true,
            sample_conditional: true,
            conditional_density: true,
        }
    }

    fn draw_baseline(&self, rng: &mut dyn RngCore) -> Result<BaselineRecord, ModelError> {
        let r: f64 = rng.random();
        let mut acc = 0.0;
        let mut level = self.stratum_probs.len() - 1;
        for (i, p) in self.stratum_probs.iter().enumerate() {
            acc += p;
            if r < acc {
                level = i;
                break;
            }
        }
        Ok(Self::record(level as u32))
    }

    fn draw_outcome(
        &self,
        x: &BaselineRecord,
        rng: &mut dyn RngCore,
    ) -> Result<Outcome, ModelError> {
        let k = &self.kernels[self.stratum_of(x)?];
        let r: f64 = rng.random();
        let mut acc = 0.0;
        for (y, p) in k.support.iter().zip(&k.probs) {
            acc += p;
            if r < acc {
                return Outcome::new(*y);
            }
        }
        Outcome::new(*k.support.last().expect("non-empty support"))
    }

    /// Probability mass at `y`.
    fn conditional_density(&self, x: &BaselineRecord, y: f64) -> Result<f64, ModelError> {
        let k = &self.kernels[self.stratum_of(x)?];
        Ok(k
            .support
            .iter()
            .zip(&k.probs)
            .filter(|(s, _)| **s == y)
            .map(|(_, p)| p)
            .sum())
    }
}

/// Hides the density of a wrapped model, as a pure simulator would.
#[derive(Debug, Clone)]
pub struct SamplerOnly<M>(pub M);

impl<M: GenerativeModel> GenerativeModel for SamplerOnly<M> {
    fn schema(&self) -> &CovariateSchema {
        self.0.schema()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            conditional_density: false,
            ..self.0.capabilities()
        }
    }

    fn draw_baseline(&self, rng: &mut dyn RngCore) -> Result<BaselineRecord, ModelError> {
        self.0.draw_baseline(rng)
    }

    fn draw_outcome(
        &self,
        x: &BaselineRecord,
        rng: &mut dyn RngCore,
    ) -> Result<Outcome, ModelError> {
        self.0.draw_outcome(x, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_model(scale: f64, shape: f64) -> SyntheticSurvivalModel {
        SyntheticSurvivalModel::new(SyntheticModelConfig {
            outcome: AftConfig { shape, scale },
            features: vec![FeatureConfig {
                name: "ecog".into(),
                law: FeatureLaw::Categorical {
                    levels: vec!["0".into(), "1".into(), "2".into()],
                    probabilities: vec![0.3, 0.5, 0.2],
                    effects: vec![],
                },
                missing_rate: 0.0,
                missing_effect: 0.0,
            }],
        })
        .unwrap()
    }

    #[test]
    fn schema_rejects_duplicates_and_empty_levels() {
        let dup = CovariateSchema::new(vec![
            FeatureSpec::continuous("age", "years"),
            FeatureSpec::continuous("age", "years"),
        ]);
        assert!(matches!(dup, Err(ModelError::InvalidSchema(_))));
        let empty = CovariateSchema::new(vec![FeatureSpec::categorical("sex", &[])]);
        assert!(matches!(empty, Err(ModelError::InvalidSchema(_))));
    }

    #[test]
    fn zero_draws_rejected() {
        let m = exp_model(1.0, 1.0);
        assert_eq!(sample_baseline(&m, 0, 1), Err(ModelError::EmptyDraw));
    }

    #[test]
    fn single_level_marginal_gives_identical_records() {
        let m = SyntheticSurvivalModel::new(SyntheticModelConfig {
            outcome: AftConfig { shape: 1.0, scale: 10.0 },
            features: vec![FeatureConfig {
                name: "indication".into(),
                law: FeatureLaw::Categorical {
                    levels: vec!["PAAD".into()],
                    probabilities: vec![1.0],
                    effects: vec![],
                },
                missing_rate: 0.0,
                missing_effect: 0.0,
            }],
        })
        .unwrap();
        let draws = sample_baseline(&m, 5, 3).unwrap();
        assert_eq!(draws.len(), 5);
        assert!(draws.iter().all(|r| r == &draws[0]));
    }

    #[test]
    fn conditional_draw_is_deterministic() {
        let m = exp_model(100.0, 1.3);
        let x = BaselineRecord::new(vec![Some(Value::Level(1))]);
        assert_eq!(
            sample_conditional(&m, &x, 11).unwrap(),
            sample_conditional(&m, &x, 11).unwrap()
        );
    }

    #[test]
    fn weibull_density_closed_forms() {
        let m = exp_model(1.0, 1.0);
        let x = BaselineRecord::new(vec![Some(Value::Level(0))]);
        assert_eq!(eval_conditional_density(&m, &x, 0.0).unwrap(), 1.0);
        assert_eq!(eval_conditional_density(&m, &x, -1.0).unwrap(), 0.0);
        let m2 = exp_model(1.0, 2.0);
        let d = eval_conditional_density(&m2, &x, 1.0).unwrap();
        assert!((d - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn density_capability_can_be_hidden() {
        let m = SamplerOnly(exp_model(1.0, 1.0));
        let x = BaselineRecord::new(vec![Some(Value::Level(0))]);
        assert!(matches!(
            eval_conditional_density(&m, &x, 1.0),
            Err(ModelError::UnsupportedCapability(_))
        ));
        assert!(sample_conditional(&m, &x, 1).is_ok());
    }

    #[test]
    fn nonconforming_record_rejected() {
        let m = exp_model(1.0, 1.0);
        let bad = BaselineRecord::new(vec![Some(Value::Real(1.0))]);
        assert!(matches!(
            sample_conditional(&m, &bad, 1),
            Err(ModelError::NonConforming(_))
        ));
        let missing = BaselineRecord::new(vec![None]);
        assert!(missing.conforms(m.schema()).is_err());
    }

    #[test]
    fn numeric_reading_of_levels() {
        let m = exp_model(1.0, 1.0);
        assert_eq!(m.schema().numeric(0, Value::Level(2)), Some(2.0));
    }

    #[test]
    fn outcome_rejects_negative() {
        assert!(Outcome::new(-1.0).is_err());
        assert!(Outcome::new(f64::NAN).is_err());
        assert_eq!(Outcome::new(3.0).unwrap().days(), 3.0);
    }
}
