//! Stage-2 calibration of the outcome kernel.
//!
//! Each particle `i` carries an outcome `y_i`. Each iteration draws a random
//! block of particles, proposes fresh outcomes from the reference kernel and
//! accepts the whole block with probability `min(1, e^Δ)`. `Δ` is the change
//! in the tilt exponent. The reference density cancels, so it is never
//! evaluated. Multipliers follow Robbins-Monro steps toward the targets.

mod config;
mod state;

pub use config::{Reducer, SamplerConfig, StepSchedule};
pub use state::{
    compile_terms, estimate_constraints, rm_update, ChainBuffer, EnsembleState, LambdaState,
    OutcomeFn, OutcomeTerm, Proposal, Stage2, StepOutcome,
};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::Cohort;
use crate::constraints::{ConstraintError, ConstraintSpec};
use crate::model::{GenerativeModel, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("sampler configuration: {0}")]
    Config(String),
    #[error("constraint `{0}` is not an outcome statistic the sampler can tilt")]
    Unsupported(String),
    #[error("subgroup of `{0}` carries zero weight")]
    EmptySubgroup(String),
    #[error("diagnostics not ready: {0}")]
    NotReady(String),
    #[error("warm start does not match the cohort: {0}")]
    WarmStart(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// Ring of partition-local estimate snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionHistory {
    pub partitions: usize,
    pub terms: usize,
    pub capacity: usize,
    snapshots: VecDeque<Vec<f64>>,
}

impl PartitionHistory {
    pub fn new(partitions: usize, terms: usize, capacity: usize) -> Self {
        PartitionHistory {
            partitions,
            terms,
            capacity,
            snapshots: VecDeque::with_capacity(capacity),
        }
    }

    /// Adds one snapshot laid out `partitions × terms`.
    pub fn push(&mut self, snapshot: Vec<f64>) {
        debug_assert_eq!(snapshot.len(), self.partitions * self.terms);
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(snapshot);
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Trace of term `k` in partition `p` over the last `window` snapshots.
    pub fn trace(&self, p: usize, k: usize, window: usize) -> Vec<f64> {
        let skip = self.snapshots.len().saturating_sub(window);
        self.snapshots
            .iter()
            .skip(skip)
            .map(|s| s[p * self.terms + k])
            .collect()
    }
}

/// Between/within variance ratio over parallel traces of equal length.
/// Zero within-variance with zero between-variance gives 1.
pub fn gelman_rubin(traces: &[Vec<f64>]) -> Result<f64, SamplerError> {
    let m = traces.len();
    if m < 2 {
        return Err(SamplerError::NotReady("fewer than two chains".into()));
    }
    let n = traces[0].len();
    if n < 10 || traces.iter().any(|t| t.len() != n) {
        return Err(SamplerError::NotReady("each chain needs at least 10 points".into()));
    }
    let nf = n as f64;
    let means: Vec<f64> = traces.iter().map(|t| t.iter().sum::<f64>() / nf).collect();
    let w = traces
        .iter()
        .zip(&means)
        .map(|(t, mu)| t.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = nf * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    // Variances at rounding level count as zero.
    let floor = 1e-28 * (1.0 + grand * grand);
    if w <= floor {
        return Ok(if b <= nf * floor { 1.0 } else { f64::INFINITY });
    }
    let v = (nf - 1.0) / nf * w + b / nf;
    Ok((v / w).sqrt())
}

/// Per-term ratio over the last `window` snapshots. Partitions with no
/// member of a subgroup are left out for that term.
pub fn compute_diagnostics(history: &PartitionHistory, window: usize) -> Result<Vec<f64>, SamplerError> {
    if history.partitions < 2 {
        return Err(SamplerError::NotReady("fewer than two partitions".into()));
    }
    if history.len() < 10 {
        return Err(SamplerError::NotReady(format!("{} snapshots recorded", history.len())));
    }
    (0..history.terms)
        .map(|k| {
            let traces: Vec<Vec<f64>> = (0..history.partitions)
                .map(|p| history.trace(p, k, window))
                .filter(|t| t.iter().all(|v| v.is_finite()))
                .collect();
            gelman_rubin(&traces)
        })
        .collect()
}

/// Smallest `y` whose weighted cumulative share reaches `p`.
/// `samples` must be sorted by outcome.
pub fn weighted_quantile_sorted(samples: &[(f64, f64)], p: f64) -> Option<f64> {
    let total: f64 = samples.iter().map(|s| s.1).sum();
    if total <= 0.0 || !(p > 0.0 && p < 1.0) {
        return None;
    }
    let goal = p * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (y, w) in samples {
        acc += w;
        if acc >= goal {
            return Some(*y);
        }
    }
    samples.last().map(|s| s.0)
}

/// `|Q(c_j) − threshold_j|` in days for each time-typed term; `None` otherwise.
/// `samples` are `(outcome, weight, particle)` triples.
pub fn landmark_deviations(terms: &[OutcomeTerm], samples: &[(f64, f64, usize)]) -> Vec<Option<f64>> {
    let mut sorted: Vec<(f64, f64, usize)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    terms
        .iter()
        .map(|t| {
            if !t.time_typed() {
                return None;
            }
            let pairs: Vec<(f64, f64)> = sorted
                .iter()
                .filter(|s| t.member(s.2))
                .map(|s| (s.0, s.1))
                .collect();
            weighted_quantile_sorted(&pairs, t.target).map(|q| (q - t.f.threshold()).abs())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub labels: Vec<String>,
    pub targets: Vec<f64>,
    pub estimates: Vec<f64>,
    /// Acceptance over the last `acceptance_window` steps at the stop.
    pub acceptance_rate: f64,
    pub acceptance_min: f64,
    pub acceptance_max: f64,
    pub overall_acceptance: f64,
    pub rhat: Vec<f64>,
    pub max_rhat: f64,
    pub max_soft_violation: f64,
    /// Per-term deviation in days, from the stored chains when available.
    pub landmark_deviation_days: Vec<Option<f64>>,
    pub max_landmark_deviation_days: f64,
    pub aggregate_residual: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub burn_in: Option<u64>,
    pub stop_iteration: u64,
    pub proposals: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: u64,
    pub lambda: Vec<f64>,
    pub estimates: Vec<f64>,
    pub acceptance: f64,
}

/// Initial state of a run.
#[derive(Debug, Clone, Default)]
pub enum Start {
    /// Fresh conditional draws and zero multipliers.
    #[default]
    Cold,
    /// Continue from an earlier run's outcomes, multipliers (including the
    /// step counter) and diagnostic history.
    Warm {
        outcomes: Vec<f64>,
        lambda: LambdaState,
        history: Option<PartitionHistory>,
    },
}

#[derive(Debug, Clone)]
pub struct ChainRun {
    pub ensemble: EnsembleState,
    pub lambda: LambdaState,
    pub diagnostics: ChainDiagnostics,
    pub trace: Vec<TracePoint>,
    pub history: PartitionHistory,
}

impl ChainRun {
    /// Stored samples with weight `w_i / depth`, as `(outcome, weight, particle)`.
    pub fn pooled_samples(&self, weights: &[f64]) -> Vec<(f64, f64, usize)> {
        pooled(&self.ensemble.chains, weights)
    }
}

pub fn pooled(chains: &ChainBuffer, weights: &[f64]) -> Vec<(f64, f64, usize)> {
    let mut out = Vec::with_capacity(chains.particles() * chains.filled());
    for (i, w) in weights.iter().enumerate().take(chains.particles()) {
        let row = chains.particle(i);
        let share = w / row.len().max(1) as f64;
        out.extend(row.into_iter().map(|y| (y, share, i)));
    }
    out
}

struct Predicate {
    rhat: Option<Vec<f64>>,
    soft: f64,
    aggregate: f64,
}

impl Predicate {
    fn holds(&self, cfg: &SamplerConfig) -> bool {
        self.rhat
            .as_ref()
            .is_some_and(|r| r.iter().all(|v| *v < cfg.rhat_threshold))
            && self.soft < cfg.soft_tolerance
            && self.aggregate < cfg.theta
    }
}

fn soft_violation(terms: &[OutcomeTerm], estimates: &[f64], lambda: &LambdaState) -> f64 {
    terms
        .iter()
        .zip(estimates)
        .zip(&lambda.values)
        .filter_map(|((t, g), l)| t.mode.rho().map(|rho| (t.target - g - l / rho).abs()))
        .fold(0.0, f64::max)
}

fn aggregate_residual(
    cfg: &SamplerConfig,
    terms: &[OutcomeTerm],
    estimates: &[f64],
    samples: &[(f64, f64, usize)],
) -> f64 {
    let days = landmark_deviations(terms, samples);
    let parts = terms.iter().zip(estimates).zip(&days).filter(|((t, _), _)| t.mode.is_hard()).map(
        |((t, g), d)| match d {
            Some(d) => *d,
            None if t.time_typed() => f64::INFINITY,
            None => (g - t.target).abs() * cfg.probability_scale,
        },
    );
    match cfg.reducer {
        Reducer::Sum => parts.sum(),
        Reducer::Max => parts.fold(0.0, f64::max),
    }
}

fn ensemble_samples(outcomes: &[f64], weights: &[f64]) -> Vec<(f64, f64, usize)> {
    outcomes
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (y, w))| (*y, *w, i))
        .collect()
}

/// Runs block Metropolis-Hastings with Robbins-Monro multipliers until the
/// stopping rule holds with full chain buffers, or `max_iterations`.
///
/// The stopping rule needs every partition ratio below `rhat_threshold`, the
/// largest soft violation `|c − ĝ − λ/ρ|` below `soft_tolerance`, and the
/// aggregate hard residual below `theta`. Time-typed targets count their
/// quantile deviation in days. Other targets count
/// `|ĝ − c| × probability_scale`. With adaptive burn-in the buffers restart
/// the first time the rule holds.
pub fn run_chain(
    model: &dyn GenerativeModel,
    cohort: &Cohort,
    targets: &[ConstraintSpec],
    cfg: &SamplerConfig,
    seed: u64,
    start: Start,
) -> Result<ChainRun, SamplerError> {
    cfg.validate()?;
    let stage = Stage2::new(model, cohort, targets, cfg.alpha, cfg.partitions, seed)?;
    let n = cohort.len();
    let j = stage.terms.len();
    let target_values = stage.targets();
    let schedule = cfg.schedule();
    let weights = cohort.weights();

    let (mut state, mut lambda, mut history) = match start {
        Start::Cold => (
            stage.init_ensemble(cfg.chain_depth)?,
            LambdaState::for_targets(targets),
            None,
        ),
        Start::Warm {
            outcomes,
            lambda,
            history,
        } => {
            if outcomes.len() != n {
                return Err(SamplerError::WarmStart(format!(
                    "{} outcomes for {} particles",
                    outcomes.len(),
                    n
                )));
            }
            if lambda.values.len() != j {
                return Err(SamplerError::WarmStart(format!(
                    "{} multipliers for {} constraints",
                    lambda.values.len(),
                    j
                )));
            }
            let lambda = LambdaState {
                modes: targets.iter().map(|c| c.mode).collect(),
                ..lambda
            };
            (stage.ensemble_from(outcomes, cfg.chain_depth), lambda, history)
        }
    };
    let partitions = state.partitions();
    let mut history = match history.take() {
        Some(h) if h.partitions == partitions && h.terms == j => {
            let mut h = h;
            h.capacity = cfg.rhat_window;
            while h.len() > h.capacity {
                h.snapshots.pop_front();
            }
            h
        }
        _ => PartitionHistory::new(partitions, j, cfg.rhat_window),
    };

    let mut window: VecDeque<bool> = VecDeque::with_capacity(cfg.acceptance_window);
    let mut window_accepts = 0usize;
    let mut acc_min = f64::INFINITY;
    let mut acc_max = f64::NEG_INFINITY;
    let mut lam_min = f64::INFINITY;
    let mut lam_max = f64::NEG_INFINITY;
    let mut trace = Vec::new();
    let mut burn_at: Option<u64> = cfg.burn_in;
    let mut converged = false;
    let mut last = Predicate {
        rhat: None,
        soft: f64::INFINITY,
        aggregate: f64::INFINITY,
    };
    let first = state.iteration + 1;
    let proposals_before = state.proposed;
    let accepts_before = state.accepted;
    let mut it = state.iteration;

    for iteration in first..first + cfg.max_iterations {
        it = iteration;
        let step = stage.mh_step(&mut state, &lambda, iteration)?;
        if window.len() == cfg.acceptance_window && window.pop_front() == Some(true) {
            window_accepts -= 1;
        }
        window.push_back(step.accepted);
        window_accepts += step.accepted as usize;

        lambda = rm_update(&lambda, &state.estimates(), &target_values, &schedule);
        if (iteration - first + 1) % cfg.resync_interval == 0 {
            stage.resync(&mut state);
        }
        let rel = iteration - first + 1;
        let rec_from = burn_at.unwrap_or(0);
        if rel > rec_from && (rel - rec_from).is_multiple_of(cfg.spacing) {
            state.chains.push(&state.outcomes);
        }
        if rel % cfg.snapshot_interval != 0 {
            continue;
        }

        let estimates = state.estimates();
        history.push(state.partition_estimates());
        let acceptance = window_accepts as f64 / window.len() as f64;
        trace.push(TracePoint {
            iteration,
            lambda: lambda.values.clone(),
            estimates: estimates.clone(),
            acceptance,
        });
        let past_burn = burn_at.is_some_and(|b| rel >= b);
        if window.len() == cfg.acceptance_window && (past_burn || burn_at.is_none()) {
            acc_min = acc_min.min(acceptance);
            acc_max = acc_max.max(acceptance);
        }
        for l in &lambda.values {
            lam_min = lam_min.min(*l);
            lam_max = lam_max.max(*l);
        }

        let rhat = compute_diagnostics(&history, cfg.rhat_window).ok();
        let soft = soft_violation(&stage.terms, &estimates, &lambda);
        let ready = rhat
            .as_ref()
            .is_some_and(|r| r.iter().all(|v| *v < cfg.rhat_threshold))
            && soft < cfg.soft_tolerance;
        let aggregate = if ready {
            aggregate_residual(cfg, &stage.terms, &estimates, &ensemble_samples(&state.outcomes, weights))
        } else {
            f64::INFINITY
        };
        last = Predicate { rhat, soft, aggregate };
        if !last.holds(cfg) {
            continue;
        }
        match burn_at {
            None => {
                burn_at = Some(rel);
                state.chains.clear();
            }
            Some(b) if rel >= b && state.chains.is_full() => {
                converged = true;
                break;
            }
            _ => {}
        }
    }
    stage.resync(&mut state);

    let estimates = state.estimates();
    let rhat = match &last.rhat {
        Some(r) => r.clone(),
        None => compute_diagnostics(&history, cfg.rhat_window).unwrap_or_else(|_| vec![f64::NAN; j]),
    };
    let samples = if state.chains.filled() > 0 {
        pooled(&state.chains, weights)
    } else {
        ensemble_samples(&state.outcomes, weights)
    };
    let deviations = landmark_deviations(&stage.terms, &samples);
    let aggregate = aggregate_residual(cfg, &stage.terms, &estimates, &samples);
    let steps = window.len().max(1);
    let acceptance_rate = window_accepts as f64 / steps as f64;
    if !acc_min.is_finite() {
        acc_min = acceptance_rate;
        acc_max = acceptance_rate;
    }
    for l in &lambda.values {
        lam_min = lam_min.min(*l);
        lam_max = lam_max.max(*l);
    }
    let run_steps = (it + 1 - first).max(1);
    let diagnostics = ChainDiagnostics {
        labels: stage.terms.iter().map(|t| t.label.clone()).collect(),
        targets: target_values,
        estimates: estimates.clone(),
        acceptance_rate,
        acceptance_min: acc_min,
        acceptance_max: acc_max,
        overall_acceptance: (state.accepted - accepts_before) as f64 / run_steps as f64,
        max_rhat: rhat.iter().copied().fold(f64::NAN, f64::max),
        rhat,
        max_soft_violation: soft_violation(&stage.terms, &estimates, &lambda),
        max_landmark_deviation_days: deviations.iter().flatten().copied().fold(0.0, f64::max),
        landmark_deviation_days: deviations,
        aggregate_residual: aggregate,
        lambda_min: if lam_min.is_finite() { lam_min } else { 0.0 },
        lambda_max: if lam_max.is_finite() { lam_max } else { 0.0 },
        burn_in: burn_at,
        stop_iteration: it + 1 - first,
        proposals: state.proposed - proposals_before,
        converged,
    };
    Ok(ChainRun {
        ensemble: state,
        lambda,
        diagnostics,
        trace,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiscreteKernel, DiscreteKernelModel};
    use crate::constraints::{Predicate as P, StatisticFn};

    fn two_point() -> DiscreteKernelModel {
        DiscreteKernelModel::new(
            vec![1.0],
            vec![DiscreteKernel {
                support: vec![1.0, 3.0],
                probs: vec![0.5, 0.5],
            }],
        )
        .unwrap()
    }

    fn cohort(n: usize) -> Cohort {
        Cohort::uniform((0..n).map(|_| DiscreteKernelModel::record(0)).collect()).unwrap()
    }

    fn at_most(t: f64, c: f64) -> ConstraintSpec {
        ConstraintSpec::hard("le", StatisticFn::indicator(P::OutcomeAtMost { threshold: t }), c)
    }

    #[test]
    fn constant_traces_give_unit_ratio() {
        let traces = vec![vec![0.3; 20]; 4];
        assert_eq!(gelman_rubin(&traces).unwrap(), 1.0);
        assert!(matches!(gelman_rubin(&[vec![1.0; 20]]), Err(SamplerError::NotReady(_))));
        assert!(matches!(gelman_rubin(&vec![vec![1.0; 5]; 3]), Err(SamplerError::NotReady(_))));
    }

    #[test]
    fn rm_update_examples() {
        let s = StepSchedule {
            gamma0: 1.0,
            decay: 0.6,
            offset: 0.0,
            clip: 0.5,
        };
        let hard = LambdaState::zeros(vec![crate::constraints::Mode::Hard]);
        let next = rm_update(&hard, &[0.7], &[0.5], &s);
        assert!((next.values[0] + 0.2).abs() < 1e-15);
        assert_eq!(next.t, 1);
        let soft = LambdaState {
            values: vec![1.0],
            modes: vec![crate::constraints::Mode::Soft { rho: 1.0 }],
            t: 0,
        };
        assert_eq!(rm_update(&soft, &[0.4], &[0.4], &s).values[0], 0.5);
        let fixed = LambdaState {
            values: vec![0.8],
            modes: vec![crate::constraints::Mode::Hard],
            t: 10,
        };
        assert_eq!(rm_update(&fixed, &[0.5], &[0.5], &s).values[0], 0.8);
    }

    #[test]
    fn zero_multipliers_always_accept() {
        let m = two_point();
        let c = cohort(50);
        let stage = Stage2::new(&m, &c, &[at_most(2.0, 0.5)], 0.1, 5, 3).unwrap();
        let mut st = stage.init_ensemble(4).unwrap();
        let lam = LambdaState::zeros(vec![crate::constraints::Mode::Hard]);
        for it in 1..200 {
            assert!(stage.mh_step(&mut st, &lam, it).unwrap().accepted);
        }
    }

    #[test]
    fn delta_matches_hand_example() {
        let m = two_point();
        let c = cohort(1);
        let stage = Stage2::new(&m, &c, &[at_most(2.0, 0.5)], 1.0, 2, 3).unwrap();
        let st = stage.ensemble_from(vec![3.0], 2);
        let lam = LambdaState {
            values: vec![0.5],
            modes: vec![crate::constraints::Mode::Hard],
            t: 0,
        };
        let prop = Proposal {
            indices: vec![0],
            outcomes: vec![1.0],
            uniform: 0.999,
        };
        let d = stage.delta(&st, &lam, &prop);
        assert_eq!(d, 0.5);
        assert!(Stage2::decide(prop.uniform, d));
        let empty = Proposal {
            indices: vec![],
            outcomes: vec![],
            uniform: 0.5,
        };
        assert_eq!(stage.delta(&st, &lam, &empty), 0.0);
    }

    #[test]
    fn incremental_estimates_track_exact_sums() {
        let m = two_point();
        let c = cohort(300);
        let targets = [at_most(2.0, 0.3)];
        let stage = Stage2::new(&m, &c, &targets, 0.05, 10, 9).unwrap();
        let mut st = stage.init_ensemble(4).unwrap();
        let lam = LambdaState {
            values: vec![-0.4],
            modes: vec![crate::constraints::Mode::Hard],
            t: 0,
        };
        for it in 1..2000 {
            stage.mh_step(&mut st, &lam, it).unwrap();
            let exact = estimate_constraints(&st.outcomes, &c, m.schema(), &targets).unwrap();
            assert!((exact[0] - st.estimates()[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn chain_buffer_orders_oldest_first() {
        let mut b = ChainBuffer::new(1, 3);
        for v in 0..5 {
            b.push(&[v as f64]);
        }
        assert_eq!(b.particle(0), vec![2.0, 3.0, 4.0]);
        b.clear();
        b.push(&[9.0]);
        assert_eq!(b.particle(0), vec![9.0]);
    }

    #[test]
    fn weighted_quantile_examples() {
        let s = vec![(1.0, 1.0), (2.0, 1.0), (3.0, 2.0)];
        assert_eq!(weighted_quantile_sorted(&s, 0.25), Some(1.0));
        assert_eq!(weighted_quantile_sorted(&s, 0.5), Some(2.0));
        assert_eq!(weighted_quantile_sorted(&s, 0.51), Some(3.0));
    }
}
