//! End-to-end orchestration: per-trial calibration, second-pass balancing
//! onto another trial's baselines, the cross-trial contrast and the
//! bootstrap fan-out that turns reconstructed patient data into percentile
//! envelopes.

use std::collections::BTreeMap;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::{
    self, filter_eligible, sorted_quantile, BalanceError, BalanceOptions, BalanceReport, Cohort, DualState,
};
use crate::constraints::{
    check_eligibility, landmark_with_scale, quantile_constraint, ConstraintError, ConstraintSpec, EligibilitySpec,
    Predicate,
};
use crate::model::{
    sample_baseline, BaselineRecord, Capabilities, CovariateSchema, FeatureKind, FeatureSpec, GenerativeModel,
    ModelError, Outcome, Value,
};
use crate::reconstruct::{bootstrap_ipd, recompute_targets, PseudoIPD, ReconstructError, UndefinedPolicy};
use crate::rng::{hash_str, hash_words};
use crate::sampler::{run_chain, ChainBuffer, ChainRun, LambdaState, SamplerConfig, SamplerError, Start};
use crate::survival::{self, CoxFit, SurvivalError, WeightedTimeToEvent};

/// Normal quantile for two-sided 95% intervals.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("trial spec: {0}")]
    Spec(String),
    #[error("stage 1: {0}")]
    Stage1(#[source] BalanceError),
    #[error("stage 2: {0}")]
    Stage2(#[source] SamplerError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("readout: {0}")]
    Survival(#[from] SurvivalError),
    #[error("reconstruction: {0}")]
    Reconstruct(#[from] ReconstructError),
    #[error("bootstrap: {0}")]
    Bootstrap(String),
}

impl From<ConstraintError> for PipelineError {
    fn from(e: ConstraintError) -> Self {
        PipelineError::Spec(e.to_string())
    }
}

/// Maps the levels of a categorical source feature onto a new categorical
/// feature. Unmapped or missing source values give a missing target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recode {
    pub source: String,
    pub target: String,
    pub levels: Vec<String>,
    pub map: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkEntry {
    pub time: f64,
    pub survival: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileEntry {
    pub time: f64,
    pub p: f64,
}

/// Eligibility, baseline targets and outcome targets of one trial arm.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSpec {
    pub label: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recode: Vec<Recode>,
    #[serde(default)]
    pub eligibility: EligibilitySpec,
    /// Arm filter, such as the regimen. Applied with the eligibility
    /// criteria when the arm is calibrated, but not when another arm is
    /// rebalanced onto this trial's population.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub treatment: Vec<Predicate>,
    #[serde(default)]
    pub baseline: Vec<ConstraintSpec>,
    /// Landmark survival targets `S(time) = survival`.
    #[serde(default, rename = "landmark", skip_serializing_if = "Vec::is_empty")]
    pub landmarks: Vec<LandmarkEntry>,
    /// Time at which the event probability reaches `p`, e.g. the median.
    #[serde(default, rename = "quantile", skip_serializing_if = "Vec::is_empty")]
    pub quantiles: Vec<QuantileEntry>,
    /// Further outcome statistics written out in full.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcome: Vec<ConstraintSpec>,
}

impl TrialSpec {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Spec(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("trial spec serializes")
    }

    /// Eligibility criteria plus the treatment filter.
    pub fn arm_filter(&self) -> EligibilitySpec {
        let mut spec = self.eligibility.clone();
        spec.inclusion.extend(self.treatment.iter().cloned());
        spec
    }

    /// Outcome constraints; landmark and quantile entries use sigmoid scale
    /// `epsilon`.
    pub fn outcome_constraints(&self, epsilon: f64) -> Result<Vec<ConstraintSpec>, PipelineError> {
        let mut out = Vec::new();
        for l in &self.landmarks {
            out.push(landmark_with_scale(l.time, l.survival, epsilon)?);
        }
        for q in &self.quantiles {
            out.push(quantile_constraint(q.time, q.p, epsilon)?);
        }
        out.extend(self.outcome.iter().cloned());
        let mut seen = std::collections::HashSet::new();
        for c in &out {
            if !seen.insert(c.label.clone()) {
                return Err(PipelineError::Spec(format!("duplicate outcome label `{}`", c.label)));
            }
        }
        Ok(out)
    }

    /// Checks every reference against the recoded schema of `base`.
    pub fn validate(&self, base: &CovariateSchema, epsilon: f64) -> Result<CovariateSchema, PipelineError> {
        let schema = recoded_schema(base, &self.recode)?;
        self.arm_filter().validate(&schema)?;
        for c in &self.baseline {
            c.validate(&schema)?;
            if c.statistic.is_outcome() {
                return Err(PipelineError::Spec(format!(
                    "baseline constraint `{}` depends on the outcome",
                    c.label
                )));
            }
        }
        for c in self.outcome_constraints(epsilon)? {
            c.validate(&schema)?;
            if !c.statistic.is_outcome() {
                return Err(PipelineError::Spec(format!(
                    "outcome constraint `{}` does not depend on the outcome",
                    c.label
                )));
            }
        }
        Ok(schema)
    }
}

struct CompiledRecode {
    source: usize,
    table: Vec<Option<u32>>,
}

fn compile_recodes(
    base: &CovariateSchema,
    recodes: &[Recode],
) -> Result<(CovariateSchema, Vec<CompiledRecode>), PipelineError> {
    let mut features: Vec<FeatureSpec> = base.features().to_vec();
    let mut compiled = Vec::with_capacity(recodes.len());
    for r in recodes {
        let schema = CovariateSchema::new(features.clone())?;
        let src = schema
            .index_of(&r.source)
            .ok_or_else(|| PipelineError::Spec(format!("recode source `{}` not in schema", r.source)))?;
        let FeatureKind::Categorical { levels } = &schema.feature(src).kind else {
            return Err(PipelineError::Spec(format!("recode source `{}` is not categorical", r.source)));
        };
        for (from, to) in &r.map {
            if !levels.contains(from) {
                return Err(PipelineError::Spec(format!("recode `{}`: unknown source level `{from}`", r.source)));
            }
            if !r.levels.contains(to) {
                return Err(PipelineError::Spec(format!("recode `{}`: unknown target level `{to}`", r.target)));
            }
        }
        let table = levels
            .iter()
            .map(|l| {
                r.map
                    .get(l)
                    .and_then(|to| r.levels.iter().position(|x| x == to))
                    .map(|p| p as u32)
            })
            .collect();
        let levels: Vec<&str> = r.levels.iter().map(String::as_str).collect();
        features.push(FeatureSpec::categorical(&r.target, &levels).nullable());
        compiled.push(CompiledRecode { source: src, table });
    }
    Ok((CovariateSchema::new(features)?, compiled))
}

pub fn recoded_schema(base: &CovariateSchema, recodes: &[Recode]) -> Result<CovariateSchema, PipelineError> {
    Ok(compile_recodes(base, recodes)?.0)
}

/// A model whose baseline records carry extra recoded features. Outcome
/// draws see only the original features.
pub struct RecodedModel<'a> {
    inner: &'a dyn GenerativeModel,
    schema: CovariateSchema,
    rules: Vec<CompiledRecode>,
    base: usize,
}

impl<'a> RecodedModel<'a> {
    pub fn new(inner: &'a dyn GenerativeModel, recodes: &[Recode]) -> Result<Self, PipelineError> {
        let (schema, rules) = compile_recodes(inner.schema(), recodes)?;
        Ok(RecodedModel {
            inner,
            schema,
            rules,
            base: inner.schema().len(),
        })
    }

    /// Extends a record of the inner schema with the recoded features.
    pub fn recode(&self, x: BaselineRecord) -> BaselineRecord {
        if self.rules.is_empty() {
            return x;
        }
        let mut values = x.values().to_vec();
        for r in &self.rules {
            let v = match values[r.source] {
                Some(Value::Level(l)) => r.table.get(l as usize).copied().flatten().map(Value::Level),
                _ => None,
            };
            values.push(v);
        }
        BaselineRecord::new(values)
    }

    fn inner_record<'b>(&self, x: &'b BaselineRecord) -> std::borrow::Cow<'b, BaselineRecord> {
        if x.values().len() == self.base {
            std::borrow::Cow::Borrowed(x)
        } else {
            std::borrow::Cow::Owned(BaselineRecord::new(x.values()[..self.base].to_vec()))
        }
    }
}

impl GenerativeModel for RecodedModel<'_> {
    fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn draw_baseline(&self, rng: &mut dyn RngCore) -> Result<BaselineRecord, ModelError> {
        Ok(self.recode(self.inner.draw_baseline(rng)?))
    }

    fn draw_outcome(&self, x: &BaselineRecord, rng: &mut dyn RngCore) -> Result<Outcome, ModelError> {
        self.inner.draw_outcome(&self.inner_record(x), rng)
    }

    fn conditional_density(&self, x: &BaselineRecord, y: f64) -> Result<f64, ModelError> {
        self.inner.conditional_density(&self.inner_record(x), y)
    }
}

/// Settings for one calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    /// Baseline draws before eligibility filtering.
    pub candidates: usize,
    pub sampler: SamplerConfig,
    #[serde(skip)]
    pub balance: BalanceOptions,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            candidates: 10_000,
            sampler: SamplerConfig::default(),
            balance: BalanceOptions::default(),
        }
    }
}

/// Stage-1 weights plus Stage-2 chains for one trial arm.
#[derive(Debug, Clone)]
pub struct CalibratedArm {
    pub spec: TrialSpec,
    pub schema: CovariateSchema,
    pub candidates: usize,
    pub cohort: Cohort,
    pub stage1: Option<DualState>,
    pub weight_report: BalanceReport,
    pub targets: Vec<ConstraintSpec>,
    pub run: ChainRun,
}

impl CalibratedArm {
    pub fn label(&self) -> &str {
        &self.spec.label
    }

    /// Pooled chain samples as weighted events under `weights`.
    pub fn samples(&self, weights: &[f64]) -> Result<Vec<WeightedTimeToEvent>, PipelineError> {
        chain_samples(&self.run.ensemble.chains, weights)
    }
}

/// Every stored sample of particle `i` carries weight `w_i / depth`.
pub fn chain_samples(chains: &ChainBuffer, weights: &[f64]) -> Result<Vec<WeightedTimeToEvent>, PipelineError> {
    if !chains.is_full() {
        return Err(PipelineError::Bootstrap(format!(
            "chain buffers hold {} of {} samples",
            chains.filled(),
            chains.depth
        )));
    }
    if weights.len() != chains.particles() {
        return Err(PipelineError::Spec(format!(
            "{} weights for {} particles",
            weights.len(),
            chains.particles()
        )));
    }
    Ok(crate::sampler::pooled(chains, weights)
        .into_iter()
        .map(|(y, w, _)| WeightedTimeToEvent::event(y, w))
        .collect())
}

/// Eligible, balanced cohort for `spec` drawn from `model`.
pub fn stage_one(
    model: &RecodedModel<'_>,
    spec: &TrialSpec,
    settings: &CalibrationSettings,
    seed: u64,
) -> Result<(Cohort, Option<DualState>), PipelineError> {
    let draws = sample_baseline(model, settings.candidates, seed)?;
    let cohort = filter_eligible(&draws, model.schema(), &spec.arm_filter()).map_err(PipelineError::Stage1)?;
    if spec.baseline.is_empty() {
        return Ok((cohort, None));
    }
    let (balanced, dual) =
        balance::solve_entropy_balance_with(&cohort, model.schema(), &spec.baseline, &settings.balance)
            .map_err(PipelineError::Stage1)?;
    Ok((balanced, Some(dual)))
}

/// Stage 1 then Stage 2 for one trial. The Stage-1 weights go to Stage 2
/// unchanged. A chain that hits its iteration cap is returned with
/// `converged = false`.
pub fn calibrate_arm(
    model: &dyn GenerativeModel,
    spec: &TrialSpec,
    settings: &CalibrationSettings,
    seed: u64,
) -> Result<CalibratedArm, PipelineError> {
    let schema = spec.validate(model.schema(), settings.sampler.epsilon)?;
    let recoded = RecodedModel::new(model, &spec.recode)?;
    let (cohort, stage1) = stage_one(&recoded, spec, settings, seed)?;
    let targets = spec.outcome_constraints(settings.sampler.epsilon)?;
    let run = run_chain(&recoded, &cohort, &targets, &settings.sampler, seed, Start::Cold)
        .map_err(PipelineError::Stage2)?;
    Ok(CalibratedArm {
        spec: spec.clone(),
        schema,
        candidates: settings.candidates,
        weight_report: balance::weight_diagnostics(cohort.weights()),
        cohort,
        stage1,
        targets,
        run,
    })
}

/// Weights of a source arm rebalanced onto another population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondPass {
    pub weights: Vec<f64>,
    pub dual: DualState,
    pub report: BalanceReport,
    /// Particles given zero reference weight by the target's eligibility.
    pub excluded: usize,
}

/// Entropy balancing of `source` onto `target_baseline` with the source's
/// Stage-1 weights as the reference measure. With `target_eligibility`,
/// particles outside the target's eligible set get zero reference weight.
pub fn second_pass_eb(
    source: &CalibratedArm,
    target_baseline: &[ConstraintSpec],
    target_eligibility: Option<&EligibilitySpec>,
    options: &BalanceOptions,
) -> Result<SecondPass, PipelineError> {
    let mut reference = source.cohort.weights().to_vec();
    let mut excluded = 0;
    if let Some(spec) = target_eligibility {
        spec.validate(&source.schema)?;
        for (w, x) in reference.iter_mut().zip(source.cohort.records()) {
            if !check_eligibility(spec, &source.schema, x) {
                *w = 0.0;
                excluded += 1;
            }
        }
    }
    let cohort = source.cohort.with_weights(reference).map_err(PipelineError::Stage1)?;
    let (balanced, dual) = balance::solve_entropy_balance_with(&cohort, &source.schema, target_baseline, options)
        .map_err(PipelineError::Stage1)?;
    Ok(SecondPass {
        report: balance::weight_diagnostics(balanced.weights()),
        weights: balanced.weights().to_vec(),
        dual,
        excluded,
    })
}

/// Horizons and landmarks read off each contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastSettings {
    pub rmst_horizons: Vec<f64>,
    pub landmarks: Vec<f64>,
    pub cox: bool,
}

impl Default for ContrastSettings {
    fn default() -> Self {
        ContrastSettings {
            rmst_horizons: vec![365.0, 730.0],
            landmarks: vec![365.0, 730.0],
            cox: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReadout {
    pub label: String,
    pub median: Option<f64>,
    /// (time, survival)
    pub landmarks: Vec<(f64, f64)>,
    /// (horizon, restricted mean)
    pub rmst: Vec<(f64, f64)>,
}

pub fn arm_readout(
    label: &str,
    samples: &[WeightedTimeToEvent],
    settings: &ContrastSettings,
) -> Result<ArmReadout, PipelineError> {
    let curve = survival::weighted_km(samples)?;
    let mut rmst = Vec::with_capacity(settings.rmst_horizons.len());
    for &tau in &settings.rmst_horizons {
        rmst.push((tau, survival::rmst(&curve, tau)?));
    }
    Ok(ArmReadout {
        label: label.to_string(),
        median: survival::median(&curve).ok(),
        landmarks: settings
            .landmarks
            .iter()
            .map(|&t| (t, survival::curve_landmark(&curve, t)))
            .collect(),
        rmst,
    })
}

/// One evaluation of the contrast between arm A and arm B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastPoint {
    pub arm_a: ArmReadout,
    pub arm_b: ArmReadout,
    /// (horizon, RMST of A minus RMST of B)
    pub delta_rmst: Vec<(f64, f64)>,
    /// Hazard ratio of A relative to B.
    pub cox: Option<CoxFit>,
}

fn contrast_from(
    a: ArmReadout,
    b: ArmReadout,
    samples_a: &[WeightedTimeToEvent],
    samples_b: &[WeightedTimeToEvent],
    settings: &ContrastSettings,
) -> Result<ContrastPoint, PipelineError> {
    let delta_rmst = a.rmst.iter().zip(&b.rmst).map(|(x, y)| (x.0, x.1 - y.1)).collect();
    let cox = if settings.cox {
        Some(survival::weighted_cox_hr(samples_a, samples_b)?)
    } else {
        None
    };
    Ok(ContrastPoint {
        arm_a: a,
        arm_b: b,
        delta_rmst,
        cox,
    })
}

/// Weighted Kaplan-Meier comparison of two pooled sample sets.
pub fn contrast_samples(
    label_a: &str,
    samples_a: &[WeightedTimeToEvent],
    label_b: &str,
    samples_b: &[WeightedTimeToEvent],
    settings: &ContrastSettings,
) -> Result<ContrastPoint, PipelineError> {
    let a = arm_readout(label_a, samples_a, settings)?;
    let b = arm_readout(label_b, samples_b, settings)?;
    contrast_from(a, b, samples_a, samples_b, settings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    None,
    /// Percentile envelope over bootstrap replicates or pairs.
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub quantity: String,
    pub estimate: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub interval: IntervalKind,
    /// Replicates or pairs behind the interval.
    pub support: usize,
}

/// Envelope summary of a bootstrap fan-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub b_source: usize,
    pub b_target: usize,
    pub pairs: usize,
    pub excluded_source: Vec<u64>,
    pub excluded_target: Vec<u64>,
    /// (arm, replicate, constraint label) for each dropped target.
    pub dropped_constraints: Vec<(String, u64, String)>,
    /// (horizon, share of pairs with A ahead of B)
    pub positive_fraction: Vec<(f64, f64)>,
    /// Share of pairs whose robust 95% interval for the hazard ratio lies below 1.
    pub significant_fraction: Option<f64>,
    pub delta_rmst_pairs: Vec<Vec<f64>>,
    pub hr_pairs: Vec<f64>,
}

/// Cross-trial readouts. Rows follow the layout: per-arm medians and
/// landmarks, then RMST differences and the hazard ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub arm_a: String,
    pub arm_b: String,
    pub point: ContrastPoint,
    pub rows: Vec<ReportRow>,
    pub second_pass: Option<BalanceReport>,
    pub bootstrap: Option<BootstrapSummary>,
}

fn days(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{t:.0} d")
    } else {
        format!("{t} d")
    }
}

fn point_rows(p: &ContrastPoint) -> Vec<ReportRow> {
    let plain = |quantity: String, estimate: Option<f64>| ReportRow {
        quantity,
        estimate,
        lower: None,
        upper: None,
        interval: IntervalKind::None,
        support: 1,
    };
    let mut rows = Vec::new();
    for arm in [&p.arm_a, &p.arm_b] {
        rows.push(plain(format!("Median OS, {}", arm.label), arm.median));
        for (t, s) in &arm.landmarks {
            rows.push(plain(format!("S({}), {}", days(*t), arm.label), Some(*s)));
        }
    }
    for (tau, d) in &p.delta_rmst {
        rows.push(plain(
            format!("dRMST({}), {} vs {}", days(*tau), p.arm_a.label, p.arm_b.label),
            Some(*d),
        ));
    }
    if let Some(c) = &p.cox {
        // Pooled chain samples are correlated within a particle, so the
        // Wald interval is too narrow; intervals come from the bootstrap.
        rows.push(plain(
            format!("HR ({} vs {})", p.arm_a.label, p.arm_b.label),
            Some(c.hr),
        ));
    }
    rows
}

/// Contrast of arm A under its own weights against the source arm under
/// its rebalanced weights.
pub fn cross_trial_contrast(
    arm_a: &CalibratedArm,
    arm_b: &CalibratedArm,
    rebalanced: &SecondPass,
    settings: &ContrastSettings,
) -> Result<ContrastReport, PipelineError> {
    let label_b = format!("{}-rebalanced", arm_b.label());
    let sa = arm_a.samples(arm_a.cohort.weights())?;
    let sb = arm_b.samples(&rebalanced.weights)?;
    let point = contrast_samples(arm_a.label(), &sa, &label_b, &sb, settings)?;
    Ok(ContrastReport {
        arm_a: arm_a.label().to_string(),
        arm_b: label_b,
        rows: point_rows(&point),
        point,
        second_pass: Some(rebalanced.report.clone()),
        bootstrap: None,
    })
}

/// Bootstrap settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSettings {
    pub b_source: usize,
    pub b_target: usize,
    pub policy: UndefinedPolicy,
    /// Lower and upper envelope probabilities.
    pub envelope: (f64, f64),
    /// Iteration cap for warm-started replicate chains.
    pub replicate_max_iterations: Option<u64>,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        BootstrapSettings {
            b_source: 100,
            b_target: 100,
            policy: UndefinedPolicy::DropConstraint,
            envelope: (0.025, 0.975),
            replicate_max_iterations: None,
        }
    }
}

/// Result of one replicate chain.
#[derive(Debug, Clone)]
pub struct ReplicateRun {
    pub index: u64,
    pub seed: u64,
    pub targets: Vec<ConstraintSpec>,
    pub dropped: Vec<String>,
    pub run: Option<ChainRun>,
    pub error: Option<String>,
}

impl ReplicateRun {
    pub fn usable(&self) -> bool {
        self.run.as_ref().is_some_and(|r| r.diagnostics.converged)
    }
}

/// Seed for replicate `index` of the arm labelled `label`.
pub fn replicate_seed(seed: u64, label: &str, index: u64) -> u64 {
    hash_words(&[seed, hash_str(label), index])
}

fn warm_start(arm: &CalibratedArm, targets: &[ConstraintSpec]) -> Start {
    let same = targets.len() == arm.targets.len() && targets.iter().zip(&arm.targets).all(|(a, b)| a.label == b.label);
    let values: Vec<f64> = targets
        .iter()
        .map(|t| {
            arm.targets
                .iter()
                .position(|r| r.label == t.label)
                .map_or(0.0, |k| arm.run.lambda.values[k])
        })
        .collect();
    Start::Warm {
        outcomes: arm.run.ensemble.outcomes.clone(),
        lambda: LambdaState {
            values,
            modes: targets.iter().map(|t| t.mode).collect(),
            t: arm.run.lambda.t,
        },
        history: same.then(|| arm.run.history.clone()),
    }
}

/// Perturbed targets and warm-started chains for `b` replicates of one arm.
/// Replicates are independent; results come back in index order.
pub fn replicate_runs(
    model: &dyn GenerativeModel,
    arm: &CalibratedArm,
    ipd: &PseudoIPD,
    b: usize,
    settings: &BootstrapSettings,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<ReplicateRun>, PipelineError> {
    let recoded = RecodedModel::new(model, &arm.spec.recode)?;
    let arm_seed = replicate_seed(seed, arm.label(), u64::MAX);
    let reps = bootstrap_ipd(ipd, b, arm_seed);
    let mut cfg = sampler.clone();
    if let Some(m) = settings.replicate_max_iterations {
        cfg.max_iterations = m;
    }
    let runs = reps
        .par_iter()
        .enumerate()
        .map(|(r, rep)| {
            let index = r as u64;
            let rseed = replicate_seed(seed, arm.label(), index);
            let perturbed = match recompute_targets(index, arm_seed, rep, &arm.targets, settings.policy) {
                Ok(p) => p,
                Err(e) => {
                    return ReplicateRun {
                        index,
                        seed: rseed,
                        targets: Vec::new(),
                        dropped: Vec::new(),
                        run: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            let start = warm_start(arm, &perturbed.targets);
            let outcome = run_chain(&recoded, &arm.cohort, &perturbed.targets, &cfg, rseed, start);
            let (run, error) = match outcome {
                Ok(run) if run.diagnostics.converged => (Some(run), None),
                Ok(run) => (
                    Some(run),
                    Some(format!("no convergence within {} iterations", cfg.max_iterations)),
                ),
                Err(e) => (None, Some(e.to_string())),
            };
            ReplicateRun {
                index,
                seed: rseed,
                targets: perturbed.targets,
                dropped: perturbed.dropped,
                run,
                error,
            }
        })
        .collect();
    Ok(runs)
}

fn envelope(values: &[f64], probs: (f64, f64)) -> (Option<f64>, Option<f64>) {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (None, None);
    }
    v.sort_by(|a, b| a.total_cmp(b));
    (Some(sorted_quantile(&v, probs.0)), Some(sorted_quantile(&v, probs.1)))
}

struct ArmReplicates {
    readouts: Vec<ArmReadout>,
    samples: Vec<Vec<WeightedTimeToEvent>>,
    excluded: Vec<u64>,
}

fn collect_replicates(
    label: &str,
    runs: &[ReplicateRun],
    weights: &[f64],
    settings: &ContrastSettings,
    dropped: &mut Vec<(String, u64, String)>,
) -> Result<ArmReplicates, PipelineError> {
    let mut out = ArmReplicates {
        readouts: Vec::new(),
        samples: Vec::new(),
        excluded: Vec::new(),
    };
    for r in runs {
        for d in &r.dropped {
            dropped.push((label.to_string(), r.index, d.clone()));
        }
        if !r.usable() {
            out.excluded.push(r.index);
            continue;
        }
        let run = r.run.as_ref().expect("usable replicate has a run");
        let s = chain_samples(&run.ensemble.chains, weights)?;
        out.readouts.push(arm_readout(label, &s, settings)?);
        out.samples.push(s);
    }
    Ok(out)
}

/// Cartesian fan-out over replicate pairs. Arm A is the target trial under
/// its own weights; arm B is the source trial under the rebalanced weights.
/// Point estimates come from the reference runs; per-arm rows use that
/// arm's own replicates and cross-arm rows use all pairs.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_fanout(
    model: &dyn GenerativeModel,
    target: &CalibratedArm,
    target_ipd: &PseudoIPD,
    source: &CalibratedArm,
    source_ipd: &PseudoIPD,
    rebalanced: &SecondPass,
    settings: &BootstrapSettings,
    contrast: &ContrastSettings,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(ContrastReport, Vec<ReplicateRun>, Vec<ReplicateRun>), PipelineError> {
    if settings.b_source == 0 || settings.b_target == 0 {
        return Err(PipelineError::Bootstrap("replicate counts must be positive".into()));
    }
    let mut report = cross_trial_contrast(target, source, rebalanced, contrast)?;
    let target_runs = replicate_runs(model, target, target_ipd, settings.b_target, settings, sampler, seed)?;
    let source_runs = replicate_runs(model, source, source_ipd, settings.b_source, settings, sampler, seed)?;
    let mut dropped = Vec::new();
    let a = collect_replicates(&report.arm_a, &target_runs, target.cohort.weights(), contrast, &mut dropped)?;
    let b = collect_replicates(&report.arm_b, &source_runs, &rebalanced.weights, contrast, &mut dropped)?;
    if a.readouts.is_empty() || b.readouts.is_empty() {
        return Err(PipelineError::Bootstrap(format!(
            "every replicate of {} was excluded",
            if a.readouts.is_empty() { &report.arm_a } else { &report.arm_b }
        )));
    }

    let pairs: Vec<(usize, usize)> = (0..a.readouts.len())
        .flat_map(|i| (0..b.readouts.len()).map(move |j| (i, j)))
        .collect();
    let h = contrast.rmst_horizons.len();
    let mut delta: Vec<Vec<f64>> = vec![Vec::with_capacity(pairs.len()); h];
    for &(i, j) in &pairs {
        for k in 0..h {
            delta[k].push(a.readouts[i].rmst[k].1 - b.readouts[j].rmst[k].1);
        }
    }
    let fits: Vec<Option<CoxFit>> = if contrast.cox {
        pairs
            .par_iter()
            .map(|&(i, j)| survival::weighted_cox_hr(&a.samples[i], &b.samples[j]).ok())
            .collect()
    } else {
        Vec::new()
    };
    let hr: Vec<f64> = fits.iter().map(|f| f.map_or(f64::NAN, |f| f.hr)).collect();
    let significant = contrast.cox.then(|| {
        let hits = fits
            .iter()
            .filter(|f| f.is_some_and(|f| f.interval(Z95, true).1 < 1.0))
            .count();
        hits as f64 / pairs.len() as f64
    });

    let env = settings.envelope;
    for row in report.rows.iter_mut() {
        let values: Option<(Vec<f64>, usize)> = if let Some(rest) = row.quantity.strip_prefix("Median OS, ") {
            let side = if rest == report.arm_a { &a } else { &b };
            Some((side.readouts.iter().map(|r| r.median.unwrap_or(f64::NAN)).collect(), side.readouts.len()))
        } else if row.quantity.starts_with("S(") {
            let side = if row.quantity.ends_with(&format!(", {}", report.arm_a)) { &a } else { &b };
            let pos = row_landmark_index(&row.quantity, contrast);
            pos.map(|k| (side.readouts.iter().map(|r| r.landmarks[k].1).collect(), side.readouts.len()))
        } else if row.quantity.starts_with("dRMST(") {
            let k = contrast
                .rmst_horizons
                .iter()
                .position(|t| row.quantity.starts_with(&format!("dRMST({})", days(*t))));
            k.map(|k| (delta[k].clone(), pairs.len()))
        } else if row.quantity.starts_with("HR ") {
            Some((hr.clone(), pairs.len()))
        } else {
            None
        };
        if let Some((v, support)) = values {
            let (lo, hi) = envelope(&v, env);
            row.lower = lo;
            row.upper = hi;
            row.interval = IntervalKind::Percentile;
            row.support = support;
        }
    }
    report.bootstrap = Some(BootstrapSummary {
        b_source: settings.b_source,
        b_target: settings.b_target,
        pairs: pairs.len(),
        excluded_source: b.excluded,
        excluded_target: a.excluded,
        dropped_constraints: dropped,
        positive_fraction: contrast
            .rmst_horizons
            .iter()
            .zip(&delta)
            .map(|(t, d)| (*t, d.iter().filter(|v| **v > 0.0).count() as f64 / d.len() as f64))
            .collect(),
        significant_fraction: significant,
        delta_rmst_pairs: delta,
        hr_pairs: hr,
    });
    Ok((report, target_runs, source_runs))
}

fn row_landmark_index(quantity: &str, contrast: &ContrastSettings) -> Option<usize> {
    contrast
        .landmarks
        .iter()
        .position(|t| quantity.starts_with(&format!("S({}),", days(*t))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{Mode, StatisticFn};
    use crate::model::{DiscreteKernel, DiscreteKernelModel, SyntheticSurvivalModel};

    const SPEC: &str = r#"
label = "demo"

[[recode]]
source = "grade"
target = "band"
levels = ["low", "high"]
map = { "1" = "low", "2" = "low", "3" = "high" }

[eligibility]
inclusion = [{ test = "range", feature = "age", min = 40.0 }]
exclusion = [{ test = "in_set", feature = "band", levels = ["high"] }]

[[baseline]]
label = "mean age"
target = 62.0
statistic = { fn = "moment", feature = "age" }

[[baseline]]
label = "missing"
target = 0.0
rho = 0.001
statistic = { fn = "indicator", predicate = { test = "any_missing" } }

[[landmark]]
time = 180.0
survival = 0.6

[[quantile]]
time = 250.0
p = 0.5
"#;

    const MODEL: &str = r#"
[outcome]
shape = 1.2
scale = 320.0

[[feature]]
name = "age"
kind = "continuous"
units = "years"
mean = 60.0
sd = 10.0
min = 18.0
max = 90.0
coefficient = -0.01
center = 60.0

[[feature]]
name = "grade"
kind = "categorical"
levels = ["1", "2", "3"]
probabilities = [0.3, 0.5, 0.2]
effects = [0.1, 0.0, -0.2]
missing_rate = 0.05
"#;

    fn model() -> SyntheticSurvivalModel {
        SyntheticSurvivalModel::from_toml(MODEL).unwrap()
    }

    #[test]
    fn spec_parses_and_validates() {
        let spec = TrialSpec::from_toml(SPEC).unwrap();
        assert_eq!(spec.baseline[1].mode, Mode::Soft { rho: 0.001 });
        let m = model();
        let schema = spec.validate(m.schema(), 10.0).unwrap();
        assert_eq!(schema.len(), 3);
        let outcome = spec.outcome_constraints(10.0).unwrap();
        assert_eq!(outcome.len(), 2);
        assert!((outcome[0].target - 0.4).abs() < 1e-15);
        let back = TrialSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let m = model();
        let spec = TrialSpec::from_toml(&SPEC.replace("\"3\" = \"high\"", "\"4\" = \"high\"")).unwrap();
        assert!(spec.validate(m.schema(), 10.0).is_err());
        let spec = TrialSpec::from_toml(&SPEC.replace("feature = \"age\" }", "feature = \"weight\" }")).unwrap();
        assert!(spec.validate(m.schema(), 10.0).is_err());
        assert!(TrialSpec::from_toml("label = \"x\"\nunknown = 1").is_err());
    }

    #[test]
    fn recode_follows_map() {
        let m = model();
        let spec = TrialSpec::from_toml(SPEC).unwrap();
        let rm = RecodedModel::new(&m, &spec.recode).unwrap();
        let band = rm.schema().index_of("band").unwrap();
        let grade = rm.schema().index_of("grade").unwrap();
        let draws = sample_baseline(&rm, 500, 3).unwrap();
        for x in &draws {
            let expect = match x.get(grade) {
                Some(Value::Level(2)) => Some(Value::Level(1)),
                Some(Value::Level(_)) => Some(Value::Level(0)),
                _ => None,
            };
            assert_eq!(x.get(band), expect);
        }
    }

    fn fast_settings() -> CalibrationSettings {
        let mut s = CalibrationSettings {
            candidates: 600,
            ..CalibrationSettings::default()
        };
        s.sampler.alpha = 0.02;
        s.sampler.partitions = 8;
        s.sampler.snapshot_interval = 25;
        s.sampler.rhat_window = 40;
        s.sampler.spacing = 10;
        s.sampler.chain_depth = 8;
        s.sampler.max_iterations = 40_000;
        s
    }

    #[test]
    fn no_outcome_targets_leaves_draws_uncalibrated() {
        let m = model();
        let mut spec = TrialSpec::from_toml(SPEC).unwrap();
        spec.landmarks.clear();
        spec.quantiles.clear();
        let arm = calibrate_arm(&m, &spec, &fast_settings(), 1).unwrap();
        assert!(arm.targets.is_empty());
        assert!(arm.run.diagnostics.converged);
        assert!(arm.run.lambda.values.is_empty());
        let dual = arm.stage1.as_ref().unwrap();
        assert!(dual.residuals[0].abs() < 1e-8);
    }

    #[test]
    fn identical_inputs_give_identical_weights() {
        let m = model();
        let spec = TrialSpec::from_toml(SPEC).unwrap();
        let mut other = spec.clone();
        other.label = "other".into();
        other.landmarks[0].survival = 0.5;
        let rm = RecodedModel::new(&m, &spec.recode).unwrap();
        let (a, _) = stage_one(&rm, &spec, &fast_settings(), 9).unwrap();
        let (b, _) = stage_one(&rm, &other, &fast_settings(), 9).unwrap();
        assert_eq!(a.weights(), b.weights());
    }

    fn two_group_arm() -> CalibratedArm {
        let m = DiscreteKernelModel::new(
            vec![0.5, 0.5],
            vec![
                DiscreteKernel { support: vec![10.0, 20.0], probs: vec![0.5, 0.5] },
                DiscreteKernel { support: vec![30.0, 40.0], probs: vec![0.5, 0.5] },
            ],
        )
        .unwrap();
        let spec = TrialSpec {
            label: "g".into(),
            ..TrialSpec::default()
        };
        let mut settings = fast_settings();
        settings.candidates = 200;
        let recs: Vec<BaselineRecord> = (0..200).map(|i| DiscreteKernelModel::record(i % 2)).collect();
        let cohort = Cohort::uniform(recs).unwrap();
        let run = run_chain(&m, &cohort, &[], &settings.sampler, 4, Start::Cold).unwrap();
        CalibratedArm {
            spec,
            schema: m.schema().clone(),
            candidates: 200,
            weight_report: balance::weight_diagnostics(cohort.weights()),
            cohort,
            stage1: None,
            targets: vec![],
            run,
        }
    }

    #[test]
    fn second_pass_two_group_ratio() {
        let arm = two_group_arm();
        let stat = StatisticFn::indicator(Predicate::in_set("stratum", &["1"]));
        let target = vec![ConstraintSpec::hard("s1", stat, 0.6)];
        let sp = second_pass_eb(&arm, &target, None, &BalanceOptions::default()).unwrap();
        // Equal groups moved to 0.6 / 0.4: weights 1.2 and 0.8.
        for (i, w) in sp.weights.iter().enumerate() {
            let expect = if i % 2 == 1 { 1.2 } else { 0.8 };
            assert!((w - expect).abs() < 1e-9, "{i}: {w}");
        }
        let same = vec![ConstraintSpec::hard(
            "s1",
            StatisticFn::indicator(Predicate::in_set("stratum", &["1"])),
            0.5,
        )];
        let sp = second_pass_eb(&arm, &same, None, &BalanceOptions::default()).unwrap();
        assert!(sp.weights.iter().all(|w| (w - 1.0).abs() < 1e-8));
    }

    #[test]
    fn target_eligibility_zeroes_reference() {
        let arm = two_group_arm();
        let elig = EligibilitySpec {
            inclusion: vec![Predicate::in_set("stratum", &["0"])],
            exclusion: vec![],
        };
        let sp = second_pass_eb(&arm, &[], Some(&elig), &BalanceOptions::default()).unwrap();
        assert_eq!(sp.excluded, 100);
        for (i, w) in sp.weights.iter().enumerate() {
            assert_eq!(*w == 0.0, i % 2 == 1);
        }
    }

    #[test]
    fn self_contrast_is_null() {
        let arm = two_group_arm();
        let sp = second_pass_eb(&arm, &[], None, &BalanceOptions::default()).unwrap();
        let report = cross_trial_contrast(&arm, &arm, &sp, &ContrastSettings::default()).unwrap();
        let cox = report.point.cox.unwrap();
        assert!((cox.hr - 1.0).abs() < 1e-6);
        assert!(report.point.delta_rmst.iter().all(|d| d.1.abs() < 1e-9));
        assert!(report.rows.iter().any(|r| r.quantity.starts_with("HR (g vs g-rebalanced)")));
        let labels: Vec<&str> = report.rows.iter().map(|r| r.quantity.as_str()).collect();
        assert!(labels.contains(&"dRMST(365 d), g vs g-rebalanced"));
        assert!(labels.contains(&"S(730 d), g-rebalanced"));
    }

    #[test]
    fn envelope_of_constant_collapses() {
        let (lo, hi) = envelope(&[3.0; 7], (0.025, 0.975));
        assert_eq!((lo, hi), (Some(3.0), Some(3.0)));
        assert_eq!(envelope(&[f64::NAN], (0.1, 0.9)), (None, None));
    }

    #[test]
    fn replicate_seeds_differ() {
        assert_ne!(replicate_seed(1, "a", 0), replicate_seed(1, "a", 1));
        assert_ne!(replicate_seed(1, "a", 0), replicate_seed(1, "b", 0));
        assert_eq!(replicate_seed(1, "a", 0), replicate_seed(1, "a", 0));
    }
}
