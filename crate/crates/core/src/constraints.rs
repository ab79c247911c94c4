//! Representable statistics, eligibility predicates and constraint specs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BaselineRecord, CovariateSchema, FeatureKind, Value};

/// Default sigmoid scale for time thresholds, in days.
pub const DEFAULT_EPSILON: f64 = 10.0;

const SIGMOID_CLAMP: f64 = 40.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature `{feature}` has no level `{level}`")]
    UnknownLevel { feature: String, level: String },
    #[error("feature `{0}` has no numeric reading")]
    NotNumeric(String),
    #[error("value of `{0}` is missing")]
    MissingValue(String),
    #[error("statistic needs an outcome: {0}")]
    OutcomeRequired(String),
    #[error("baseline statistic was given an outcome: {0}")]
    UnexpectedOutcome(String),
    #[error("invalid statistic: {0}")]
    Invalid(String),
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),
}

/// A test on one covariate, on missingness, or on the outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "test", rename_all = "snake_case")]
pub enum Predicate {
    /// Inclusive numeric bounds.
    Range {
        feature: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
    },
    InSet {
        feature: String,
        levels: Vec<String>,
    },
    NotMissing {
        feature: String,
    },
    IsMissing {
        feature: String,
    },
    /// Any covariate in the record is missing.
    AnyMissing,
    /// `y <= threshold` on the outcome.
    OutcomeAtMost {
        threshold: f64,
    },
}

impl Predicate {
    pub fn range(feature: &str, min: Option<f64>, max: Option<f64>) -> Self {
        Predicate::Range {
            feature: feature.to_string(),
            min,
            max,
        }
    }

    pub fn in_set(feature: &str, levels: &[&str]) -> Self {
        Predicate::InSet {
            feature: feature.to_string(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn is_outcome(&self) -> bool {
        matches!(self, Predicate::OutcomeAtMost { .. })
    }

    pub fn feature(&self) -> Option<&str> {
        match self {
            Predicate::Range { feature, .. }
            | Predicate::InSet { feature, .. }
            | Predicate::NotMissing { feature }
            | Predicate::IsMissing { feature } => Some(feature),
            Predicate::AnyMissing | Predicate::OutcomeAtMost { .. } => None,
        }
    }

    pub fn validate(&self, schema: &CovariateSchema) -> Result<(), ConstraintError> {
        match self {
            Predicate::Range { feature, min, max } => {
                let idx = lookup(schema, feature)?;
                if let FeatureKind::Categorical { levels } = &schema.feature(idx).kind {
                    if levels.iter().any(|l| l.trim().parse::<f64>().is_err()) {
                        return Err(ConstraintError::NotNumeric(feature.clone()));
                    }
                }
                if min.is_none() && max.is_none() {
                    return Err(ConstraintError::Invalid(format!(
                        "range on `{feature}` needs a bound"
                    )));
                }
                if let (Some(a), Some(b)) = (min, max) {
                    if a > b {
                        return Err(ConstraintError::Invalid(format!(
                            "range on `{feature}` has min > max"
                        )));
                    }
                }
                Ok(())
            }
            Predicate::InSet { feature, levels } => {
                let idx = lookup(schema, feature)?;
                for l in levels {
                    if schema.level_index(idx, l).is_none() {
                        return Err(ConstraintError::UnknownLevel {
                            feature: feature.clone(),
                            level: l.clone(),
                        });
                    }
                }
                Ok(())
            }
            Predicate::NotMissing { feature } | Predicate::IsMissing { feature } => {
                lookup(schema, feature).map(|_| ())
            }
            Predicate::AnyMissing => Ok(()),
            Predicate::OutcomeAtMost { threshold } => {
                if threshold.is_finite() {
                    Ok(())
                } else {
                    Err(ConstraintError::Invalid("outcome threshold must be finite".into()))
                }
            }
        }
    }

    /// `None` when the tested covariate is missing.
    pub fn evaluate(
        &self,
        schema: &CovariateSchema,
        x: &BaselineRecord,
        y: Option<f64>,
    ) -> Result<Option<bool>, ConstraintError> {
        Ok(match self {
            Predicate::Range { feature, min, max } => {
                let idx = lookup(schema, feature)?;
                match x.get(idx) {
                    None => None,
                    Some(v) => {
                        let v = schema
                            .numeric(idx, v)
                            .ok_or_else(|| ConstraintError::NotNumeric(feature.clone()))?;
                        Some(min.is_none_or(|m| v >= m) && max.is_none_or(|m| v <= m))
                    }
                }
            }
            Predicate::InSet { feature, levels } => {
                let idx = lookup(schema, feature)?;
                match x.get(idx) {
                    None => None,
                    Some(Value::Level(l)) => {
                        let names = schema.feature(idx).levels().unwrap_or(&[]);
                        let name = names.get(l as usize).map(String::as_str).unwrap_or("");
                        Some(levels.iter().any(|s| s == name))
                    }
                    Some(Value::Real(v)) => {
                        Some(levels.iter().any(|s| s.trim().parse::<f64>() == Ok(v)))
                    }
                }
            }
            Predicate::NotMissing { feature } => Some(x.get(lookup(schema, feature)?).is_some()),
            Predicate::IsMissing { feature } => Some(x.get(lookup(schema, feature)?).is_none()),
            Predicate::AnyMissing => Some(x.has_missing()),
            Predicate::OutcomeAtMost { threshold } => {
                let y = y.ok_or_else(|| {
                    ConstraintError::OutcomeRequired(format!("outcome <= {threshold}"))
                })?;
                Some(y <= *threshold)
            }
        })
    }
}

fn lookup(schema: &CovariateSchema, feature: &str) -> Result<usize, ConstraintError> {
    schema
        .index_of(feature)
        .ok_or_else(|| ConstraintError::UnknownFeature(feature.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    Square,
    Log,
}

impl Transform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Square => v * v,
            Transform::Log => v.ln(),
        }
    }
}

/// A function whose expectation is constrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum StatisticFn {
    Moment {
        feature: String,
        #[serde(default)]
        transform: Transform,
    },
    Indicator {
        predicate: Predicate,
    },
    /// `sigmoid((threshold - y) / scale)`, a smooth stand-in for `1{y <= threshold}`.
    SigmoidQuantile {
        threshold: f64,
        #[serde(default = "default_epsilon")]
        scale: f64,
    },
    /// Inner statistic averaged over the baseline subgroup only.
    Subgroup {
        subgroup: Predicate,
        inner: Box<StatisticFn>,
    },
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// Smooth step used for time thresholds.
#[inline]
pub fn sigmoid_step(threshold: f64, scale: f64, y: f64) -> f64 {
    let z = ((threshold - y) / scale).clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

impl StatisticFn {
    pub fn moment(feature: &str) -> Self {
        StatisticFn::Moment {
            feature: feature.to_string(),
            transform: Transform::Identity,
        }
    }

    pub fn indicator(predicate: Predicate) -> Self {
        StatisticFn::Indicator { predicate }
    }

    pub fn sigmoid(threshold: f64, scale: f64) -> Self {
        StatisticFn::SigmoidQuantile { threshold, scale }
    }

    pub fn is_outcome(&self) -> bool {
        match self {
            StatisticFn::Moment { .. } => false,
            StatisticFn::Indicator { predicate } => predicate.is_outcome(),
            StatisticFn::SigmoidQuantile { .. } => true,
            StatisticFn::Subgroup { inner, .. } => inner.is_outcome(),
        }
    }

    /// Time threshold of an outcome statistic, if it has one.
    pub fn time_threshold(&self) -> Option<f64> {
        match self {
            StatisticFn::SigmoidQuantile { threshold, .. } => Some(*threshold),
            StatisticFn::Indicator {
                predicate: Predicate::OutcomeAtMost { threshold },
            } => Some(*threshold),
            StatisticFn::Subgroup { inner, .. } => inner.time_threshold(),
            _ => None,
        }
    }

    pub fn subgroup(&self) -> Option<&Predicate> {
        match self {
            StatisticFn::Subgroup { subgroup, .. } => Some(subgroup),
            _ => None,
        }
    }

    /// Features whose missingness makes the statistic undefined.
    pub fn referenced_feature(&self) -> Option<&str> {
        match self {
            StatisticFn::Moment { feature, .. } => Some(feature),
            StatisticFn::Indicator { predicate } => match predicate {
                Predicate::Range { feature, .. } | Predicate::InSet { feature, .. } => {
                    Some(feature)
                }
                _ => None,
            },
            StatisticFn::Subgroup { inner, .. } => inner.referenced_feature(),
            StatisticFn::SigmoidQuantile { .. } => None,
        }
    }

    pub fn validate(&self, schema: &CovariateSchema) -> Result<(), ConstraintError> {
        match self {
            StatisticFn::Moment { feature, .. } => {
                let idx = lookup(schema, feature)?;
                if let FeatureKind::Categorical { levels } = &schema.feature(idx).kind {
                    if levels.iter().any(|l| l.trim().parse::<f64>().is_err()) {
                        return Err(ConstraintError::NotNumeric(feature.clone()));
                    }
                }
                Ok(())
            }
            StatisticFn::Indicator { predicate } => predicate.validate(schema),
            StatisticFn::SigmoidQuantile { threshold, scale } => {
                if !threshold.is_finite() {
                    return Err(ConstraintError::Invalid("threshold must be finite".into()));
                }
                if !(*scale > 0.0 && scale.is_finite()) {
                    return Err(ConstraintError::Invalid(format!(
                        "sigmoid scale must be positive, got {scale}"
                    )));
                }
                Ok(())
            }
            StatisticFn::Subgroup { subgroup, inner } => {
                if matches!(**inner, StatisticFn::Subgroup { .. }) {
                    return Err(ConstraintError::Invalid(
                        "subgroup statistics cannot be nested".into(),
                    ));
                }
                if subgroup.is_outcome() {
                    return Err(ConstraintError::Invalid(
                        "subgroup predicate must test baseline covariates".into(),
                    ));
                }
                subgroup.validate(schema)?;
                inner.validate(schema)
            }
        }
    }

    /// Value of the statistic on `(x, y)`. Subgroup statistics return the
    /// inner value for members and 0 otherwise; see [`StatisticFn::member`].
    pub fn evaluate(
        &self,
        schema: &CovariateSchema,
        x: &BaselineRecord,
        y: Option<f64>,
    ) -> Result<f64, ConstraintError> {
        match (self.is_outcome(), y.is_some()) {
            (true, false) => return Err(ConstraintError::OutcomeRequired(format!("{self:?}"))),
            (false, true) => return Err(ConstraintError::UnexpectedOutcome(format!("{self:?}"))),
            _ => {}
        }
        self.eval_inner(schema, x, y)
    }

    fn eval_inner(
        &self,
        schema: &CovariateSchema,
        x: &BaselineRecord,
        y: Option<f64>,
    ) -> Result<f64, ConstraintError> {
        match self {
            StatisticFn::Moment { feature, transform } => {
                let idx = lookup(schema, feature)?;
                let v = x
                    .get(idx)
                    .ok_or_else(|| ConstraintError::MissingValue(feature.clone()))?;
                let v = schema
                    .numeric(idx, v)
                    .ok_or_else(|| ConstraintError::NotNumeric(feature.clone()))?;
                Ok(transform.apply(v))
            }
            StatisticFn::Indicator { predicate } => match predicate.evaluate(schema, x, y)? {
                Some(b) => Ok(if b { 1.0 } else { 0.0 }),
                None => Err(ConstraintError::MissingValue(
                    predicate.feature().unwrap_or("?").to_string(),
                )),
            },
            StatisticFn::SigmoidQuantile { threshold, scale } => {
                let y = y.ok_or_else(|| ConstraintError::OutcomeRequired("sigmoid".into()))?;
                Ok(sigmoid_step(*threshold, *scale, y))
            }
            StatisticFn::Subgroup { inner, .. } => {
                if self.member(schema, x)? {
                    inner.eval_inner(schema, x, y)
                } else {
                    Ok(0.0)
                }
            }
        }
    }

    /// Subgroup membership; records missing the tested covariate are not members.
    pub fn member(&self, schema: &CovariateSchema, x: &BaselineRecord) -> Result<bool, ConstraintError> {
        match self {
            StatisticFn::Subgroup { subgroup, .. } => {
                Ok(subgroup.evaluate(schema, x, None)?.unwrap_or(false))
            }
            _ => Ok(true),
        }
    }
}

pub fn evaluate_statistic(
    f: &StatisticFn,
    schema: &CovariateSchema,
    x: &BaselineRecord,
    y: Option<f64>,
) -> Result<f64, ConstraintError> {
    f.evaluate(schema, x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Hard,
    /// Quadratic penalty with weight `rho`.
    Soft { rho: f64 },
}

impl Mode {
    pub fn rho(self) -> Option<f64> {
        match self {
            Mode::Hard => None,
            Mode::Soft { rho } => Some(rho),
        }
    }

    pub fn is_hard(self) -> bool {
        matches!(self, Mode::Hard)
    }
}

/// What a target represents; landmark and quantile targets are time-typed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    Moment,
    /// Survival at a fixed time, stored as `1 - S(t)`.
    Landmark,
    /// Time at which the event probability reaches the target.
    Quantile,
}

/// One constrained expectation. In configuration files a `rho` key makes
/// the constraint soft; without it the constraint is hard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawConstraint", into = "RawConstraint")]
pub struct ConstraintSpec {
    pub label: String,
    pub statistic: StatisticFn,
    pub target: f64,
    pub mode: Mode,
    pub kind: TargetKind,
}

#[derive(Serialize, Deserialize)]
struct RawConstraint {
    #[serde(default)]
    label: String,
    target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(default)]
    kind: TargetKind,
    statistic: StatisticFn,
}

impl From<RawConstraint> for ConstraintSpec {
    fn from(r: RawConstraint) -> Self {
        ConstraintSpec {
            label: r.label,
            statistic: r.statistic,
            target: r.target,
            mode: r.rho.map_or(Mode::Hard, |rho| Mode::Soft { rho }),
            kind: r.kind,
        }
    }
}

impl From<ConstraintSpec> for RawConstraint {
    fn from(c: ConstraintSpec) -> Self {
        RawConstraint {
            label: c.label,
            target: c.target,
            rho: c.mode.rho(),
            kind: c.kind,
            statistic: c.statistic,
        }
    }
}

impl ConstraintSpec {
    pub fn hard(label: &str, statistic: StatisticFn, target: f64) -> Self {
        ConstraintSpec {
            label: label.to_string(),
            statistic,
            target,
            mode: Mode::Hard,
            kind: TargetKind::Moment,
        }
    }

    pub fn soft(label: &str, statistic: StatisticFn, target: f64, rho: f64) -> Self {
        ConstraintSpec {
            mode: Mode::Soft { rho },
            ..Self::hard(label, statistic, target)
        }
    }

    pub fn validate(&self, schema: &CovariateSchema) -> Result<(), ConstraintError> {
        if !self.target.is_finite() {
            return Err(ConstraintError::Invalid(format!(
                "`{}`: target must be finite",
                self.label
            )));
        }
        if let Mode::Soft { rho } = self.mode {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(ConstraintError::Invalid(format!(
                    "`{}`: rho must be positive",
                    self.label
                )));
            }
        }
        let sigmoid = matches!(self.statistic, StatisticFn::SigmoidQuantile { .. })
            || matches!(&self.statistic, StatisticFn::Subgroup { inner, .. } if matches!(**inner, StatisticFn::SigmoidQuantile { .. }));
        if sigmoid && !(self.target > 0.0 && self.target < 1.0) {
            return Err(ConstraintError::DegenerateTarget(format!(
                "`{}`: sigmoid target must lie in (0, 1)",
                self.label
            )));
        }
        self.statistic.validate(schema)
    }
}

/// Event-probability target `1 - survival` at `time_days`.
pub fn landmark_to_quantile(time_days: f64, survival: f64) -> Result<ConstraintSpec, ConstraintError> {
    landmark_with_scale(time_days, survival, DEFAULT_EPSILON)
}

pub fn landmark_with_scale(
    time_days: f64,
    survival: f64,
    scale: f64,
) -> Result<ConstraintSpec, ConstraintError> {
    if !(survival > 0.0 && survival < 1.0) {
        return Err(ConstraintError::DegenerateTarget(format!(
            "survival {survival} at {time_days} d must lie strictly inside (0, 1)"
        )));
    }
    if !(time_days.is_finite() && time_days >= 0.0) {
        return Err(ConstraintError::Invalid(format!("bad landmark time {time_days}")));
    }
    Ok(ConstraintSpec {
        label: format!("S({time_days})"),
        statistic: StatisticFn::sigmoid(time_days, scale),
        target: 1.0 - survival,
        mode: Mode::Hard,
        kind: TargetKind::Landmark,
    })
}

/// `P(Y <= time_days) = p`, e.g. a published median with `p = 0.5`.
pub fn quantile_constraint(time_days: f64, p: f64, scale: f64) -> Result<ConstraintSpec, ConstraintError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ConstraintError::DegenerateTarget(format!(
            "probability {p} must lie strictly inside (0, 1)"
        )));
    }
    Ok(ConstraintSpec {
        label: format!("q{}({time_days})", p),
        statistic: StatisticFn::sigmoid(time_days, scale),
        target: p,
        mode: Mode::Hard,
        kind: TargetKind::Quantile,
    })
}

/// Inclusion tests are AND-combined, exclusion tests OR-combined.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EligibilitySpec {
    #[serde(default)]
    pub inclusion: Vec<Predicate>,
    #[serde(default)]
    pub exclusion: Vec<Predicate>,
}

impl EligibilitySpec {
    pub fn validate(&self, schema: &CovariateSchema) -> Result<(), ConstraintError> {
        for p in self.inclusion.iter().chain(&self.exclusion) {
            if p.is_outcome() {
                return Err(ConstraintError::Invalid(
                    "eligibility cannot test the outcome".into(),
                ));
            }
            p.validate(schema)?;
        }
        Ok(())
    }
}

/// A missing value on any tested covariate makes the record ineligible.
pub fn check_eligibility(spec: &EligibilitySpec, schema: &CovariateSchema, x: &BaselineRecord) -> bool {
    let included = spec
        .inclusion
        .iter()
        .all(|p| matches!(p.evaluate(schema, x, None), Ok(Some(true))));
    if !included {
        return false;
    }
    spec.exclusion
        .iter()
        .all(|p| matches!(p.evaluate(schema, x, None), Ok(Some(false))))
}
