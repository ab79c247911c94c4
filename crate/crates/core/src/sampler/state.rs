use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SamplerError;
use crate::balance::Cohort;
use crate::constraints::{sigmoid_step, ConstraintSpec, Mode, Predicate, StatisticFn, TargetKind};
use crate::model::{CovariateSchema, GenerativeModel};
use crate::rng::{self, Purpose};

/// Outcome function of one Stage-2 constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutcomeFn {
    Sigmoid { threshold: f64, scale: f64 },
    AtMost { threshold: f64 },
}

impl OutcomeFn {
    #[inline]
    pub fn eval(&self, y: f64) -> f64 {
        match *self {
            OutcomeFn::Sigmoid { threshold, scale } => sigmoid_step(threshold, scale, y),
            OutcomeFn::AtMost { threshold } => {
                if y <= threshold {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn threshold(&self) -> f64 {
        match *self {
            OutcomeFn::Sigmoid { threshold, .. } | OutcomeFn::AtMost { threshold } => threshold,
        }
    }
}

/// A constraint resolved against a concrete cohort.
#[derive(Debug, Clone)]
pub struct OutcomeTerm {
    pub label: String,
    pub f: OutcomeFn,
    /// Subgroup membership per particle; `None` for population-wide constraints.
    pub members: Option<Vec<bool>>,
    pub target: f64,
    pub mode: Mode,
    pub kind: TargetKind,
}

impl OutcomeTerm {
    #[inline]
    pub fn member(&self, i: usize) -> bool {
        self.members.as_ref().is_none_or(|m| m[i])
    }

    pub fn time_typed(&self) -> bool {
        matches!(self.kind, TargetKind::Landmark | TargetKind::Quantile)
            || matches!(self.f, OutcomeFn::AtMost { .. })
    }
}

fn outcome_fn(stat: &StatisticFn) -> Option<OutcomeFn> {
    match stat {
        StatisticFn::SigmoidQuantile { threshold, scale } => Some(OutcomeFn::Sigmoid {
            threshold: *threshold,
            scale: *scale,
        }),
        StatisticFn::Indicator {
            predicate: Predicate::OutcomeAtMost { threshold },
        } => Some(OutcomeFn::AtMost {
            threshold: *threshold,
        }),
        _ => None,
    }
}

/// Resolves outcome constraints, including subgroup membership, for `cohort`.
pub fn compile_terms(
    cohort: &Cohort,
    schema: &CovariateSchema,
    targets: &[ConstraintSpec],
) -> Result<Vec<OutcomeTerm>, SamplerError> {
    let mut out = Vec::with_capacity(targets.len());
    for c in targets {
        c.validate(schema)?;
        let (f, members) = match &c.statistic {
            StatisticFn::Subgroup { inner, .. } => {
                let f = outcome_fn(inner).ok_or_else(|| SamplerError::Unsupported(c.label.clone()))?;
                let members = cohort
                    .records()
                    .iter()
                    .map(|x| c.statistic.member(schema, x))
                    .collect::<Result<Vec<_>, _>>()?;
                (f, Some(members))
            }
            other => (
                outcome_fn(other).ok_or_else(|| SamplerError::Unsupported(c.label.clone()))?,
                None,
            ),
        };
        let term = OutcomeTerm {
            label: c.label.clone(),
            f,
            members,
            target: c.target,
            mode: c.mode,
            kind: c.kind,
        };
        let den: f64 = cohort
            .weights()
            .iter()
            .enumerate()
            .filter(|(i, _)| term.member(*i))
            .map(|(_, w)| w)
            .sum();
        if den <= 0.0 {
            return Err(SamplerError::EmptySubgroup(c.label.clone()));
        }
        out.push(term);
    }
    Ok(out)
}

/// Multipliers of the outcome tilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaState {
    pub values: Vec<f64>,
    pub modes: Vec<Mode>,
    /// Robbins-Monro updates applied so far.
    pub t: u64,
}

impl LambdaState {
    pub fn zeros(modes: Vec<Mode>) -> Self {
        LambdaState {
            values: vec![0.0; modes.len()],
            modes,
            t: 0,
        }
    }

    pub fn for_targets(targets: &[ConstraintSpec]) -> Self {
        Self::zeros(targets.iter().map(|c| c.mode).collect())
    }
}

/// `λ_j ← λ_j + clip(γ_t (c_j − ĝ_j − 1{soft} λ_j/ρ_j), ±δ_max)`, then `t ← t + 1`.
pub fn rm_update(
    lambda: &LambdaState,
    estimates: &[f64],
    targets: &[f64],
    schedule: &super::StepSchedule,
) -> LambdaState {
    let t = lambda.t + 1;
    let gamma = schedule.gamma(t);
    let values = lambda
        .values
        .iter()
        .zip(&lambda.modes)
        .zip(estimates.iter().zip(targets))
        .map(|((l, mode), (g, c))| {
            let shrink = mode.rho().map_or(0.0, |rho| l / rho);
            l + (gamma * (c - g - shrink)).clamp(-schedule.clip, schedule.clip)
        })
        .collect();
    LambdaState {
        values,
        modes: lambda.modes.clone(),
        t,
    }
}

/// Thinned per-particle samples in a ring of fixed depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainBuffer {
    pub depth: usize,
    particles: usize,
    samples: Vec<f64>,
    writes: u64,
}

impl ChainBuffer {
    pub fn new(particles: usize, depth: usize) -> Self {
        ChainBuffer {
            depth,
            particles,
            samples: vec![0.0; particles * depth],
            writes: 0,
        }
    }

    pub fn push(&mut self, outcomes: &[f64]) {
        let slot = (self.writes % self.depth as u64) as usize;
        for (i, y) in outcomes.iter().enumerate() {
            self.samples[i * self.depth + slot] = *y;
        }
        self.writes += 1;
    }

    pub fn clear(&mut self) {
        self.writes = 0;
    }

    pub fn filled(&self) -> usize {
        self.writes.min(self.depth as u64) as usize
    }

    pub fn is_full(&self) -> bool {
        self.filled() == self.depth
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    /// Stored samples of particle `i`, oldest first.
    pub fn particle(&self, i: usize) -> Vec<f64> {
        let filled = self.filled();
        let row = &self.samples[i * self.depth..(i + 1) * self.depth];
        if (self.writes as usize) <= self.depth {
            row[..filled].to_vec()
        } else {
            let start = (self.writes % self.depth as u64) as usize;
            row[start..].iter().chain(&row[..start]).copied().collect()
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let depth = rows.first().map_or(1, |r| r.len()).max(1);
        let particles = rows.len();
        let mut buf = ChainBuffer::new(particles, depth);
        for k in 0..depth {
            let col: Vec<f64> = rows.iter().map(|r| r.get(k).copied().unwrap_or(f64::NAN)).collect();
            buf.push(&col);
        }
        buf
    }
}

/// Current particle outcomes, running constraint estimates and stored chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    pub outcomes: Vec<f64>,
    /// `f_j(y_i)` row-major by particle.
    values: Vec<f64>,
    terms: usize,
    /// `Σ_{i in G_j} w_i f_j(y_i)`.
    sums: Vec<f64>,
    /// `Σ_{i in G_j} w_i`.
    denominators: Vec<f64>,
    partitions: usize,
    part_sums: Vec<f64>,
    part_den: Vec<f64>,
    pub chains: ChainBuffer,
    pub iteration: u64,
    pub accepted: u64,
    pub proposed: u64,
}

impl EnsembleState {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    /// Running `ĝ_j`.
    pub fn estimates(&self) -> Vec<f64> {
        self.sums.iter().zip(&self.denominators).map(|(s, d)| s / d).collect()
    }

    pub fn partitions(&self) -> usize {
        self.partitions
    }

    /// Partition-local estimates, `partitions × terms`; NaN where a partition
    /// holds no member of a subgroup.
    pub fn partition_estimates(&self) -> Vec<f64> {
        self.part_sums
            .iter()
            .zip(&self.part_den)
            .map(|(s, d)| if *d > 0.0 { s / d } else { f64::NAN })
            .collect()
    }
}

/// A proposed block: particle indices, fresh outcomes and the block uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub indices: Vec<usize>,
    pub outcomes: Vec<f64>,
    pub uniform: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    pub proposed: usize,
    pub delta: f64,
}

/// Everything fixed during one Stage-2 run.
pub struct Stage2<'a> {
    model: &'a dyn GenerativeModel,
    cohort: &'a Cohort,
    pub terms: Vec<OutcomeTerm>,
    thresholds: Vec<u64>,
    partitions: usize,
    mask_key: [u8; 32],
    proposal_key: [u8; 32],
    accept_key: [u8; 32],
    init_key: [u8; 32],
}

const PARALLEL_BLOCK: usize = 64;

impl<'a> Stage2<'a> {
    pub fn new(
        model: &'a dyn GenerativeModel,
        cohort: &'a Cohort,
        targets: &[ConstraintSpec],
        alpha: f64,
        partitions: usize,
        seed: u64,
    ) -> Result<Self, SamplerError> {
        if !model.capabilities().sample_conditional {
            return Err(SamplerError::Model(crate::model::ModelError::UnsupportedCapability(
                "conditional sampling",
            )));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(SamplerError::Config(format!("alpha = {alpha} outside (0, 1]")));
        }
        let terms = compile_terms(cohort, model.schema(), targets)?;
        let scale = (1u64 << 32) as f64;
        let thresholds = cohort
            .weights()
            .iter()
            .map(|w| ((alpha * w).min(1.0) * scale).round() as u64)
            .collect();
        Ok(Stage2 {
            model,
            cohort,
            terms,
            thresholds,
            partitions: partitions.clamp(1, cohort.len().max(1)),
            mask_key: rng::key(seed, Purpose::Mask),
            proposal_key: rng::key(seed, Purpose::Proposal),
            accept_key: rng::key(seed, Purpose::Accept),
            init_key: rng::key(seed, Purpose::Init),
        })
    }

    pub fn cohort(&self) -> &Cohort {
        self.cohort
    }

    pub fn targets(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.target).collect()
    }

    fn draw(&self, key: &[u8; 32], stream: u64, i: usize) -> Result<f64, SamplerError> {
        let mut rng = rng::stream(key, stream, i as u64 + 1);
        Ok(self
            .model
            .draw_outcome(&self.cohort.records()[i], &mut rng as &mut dyn RngCore)?
            .days())
    }

    /// One conditional draw per particle.
    pub fn init_ensemble(&self, chain_depth: usize) -> Result<EnsembleState, SamplerError> {
        let n = self.cohort.len();
        let outcomes = (0..n)
            .into_par_iter()
            .with_min_len(256)
            .map(|i| self.draw(&self.init_key, 0, i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.ensemble_from(outcomes, chain_depth))
    }

    /// Ensemble seeded with given outcomes, e.g. the tail of an earlier run.
    pub fn ensemble_from(&self, outcomes: Vec<f64>, chain_depth: usize) -> EnsembleState {
        let n = outcomes.len();
        let j = self.terms.len();
        let mut st = EnsembleState {
            outcomes,
            values: vec![0.0; n * j],
            terms: j,
            sums: vec![0.0; j],
            denominators: vec![0.0; j],
            partitions: self.partitions,
            part_sums: vec![0.0; self.partitions * j],
            part_den: vec![0.0; self.partitions * j],
            chains: ChainBuffer::new(n, chain_depth),
            iteration: 0,
            accepted: 0,
            proposed: 0,
        };
        self.resync(&mut st);
        st
    }

    /// Recomputes all running sums from scratch in a fixed order.
    pub fn resync(&self, st: &mut EnsembleState) {
        let j = self.terms.len();
        let w = self.cohort.weights();
        st.sums.iter_mut().for_each(|v| *v = 0.0);
        st.denominators.iter_mut().for_each(|v| *v = 0.0);
        st.part_sums.iter_mut().for_each(|v| *v = 0.0);
        st.part_den.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..st.outcomes.len() {
            let p = i % self.partitions;
            for (k, term) in self.terms.iter().enumerate() {
                let v = term.f.eval(st.outcomes[i]);
                st.values[i * j + k] = v;
                if term.member(i) {
                    st.sums[k] += w[i] * v;
                    st.denominators[k] += w[i];
                    st.part_sums[p * j + k] += w[i] * v;
                    st.part_den[p * j + k] += w[i];
                }
            }
        }
    }

    /// Draws the inclusion mask, the block proposals and the block uniform for `iteration`.
    pub fn propose(&self, iteration: u64) -> Result<Proposal, SamplerError> {
        let mut mask_rng = rng::stream(&self.mask_key, iteration, 0);
        let indices: Vec<usize> = self
            .thresholds
            .iter()
            .enumerate()
            .filter_map(|(i, thr)| ((mask_rng.next_u32() as u64) < *thr).then_some(i))
            .collect();
        let outcomes = if indices.len() >= PARALLEL_BLOCK {
            indices
                .par_iter()
                .map(|&i| self.draw(&self.proposal_key, iteration, i))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            indices
                .iter()
                .map(|&i| self.draw(&self.proposal_key, iteration, i))
                .collect::<Result<Vec<_>, _>>()?
        };
        let uniform = rng::unit_f64(rng::stream(&self.accept_key, iteration, 0).next_u64());
        Ok(Proposal {
            indices,
            outcomes,
            uniform,
        })
    }

    /// `Δ = Σ_{i in S} Σ_j λ_j [f_j(ỹ_i) − f_j(y_i)]`.
    pub fn delta(&self, st: &EnsembleState, lambda: &LambdaState, proposal: &Proposal) -> f64 {
        let j = self.terms.len();
        let mut delta = 0.0;
        for (&i, &y_new) in proposal.indices.iter().zip(&proposal.outcomes) {
            for (k, term) in self.terms.iter().enumerate() {
                if term.member(i) {
                    delta += lambda.values[k] * (term.f.eval(y_new) - st.values[i * j + k]);
                }
            }
        }
        delta
    }

    /// Accept iff `u < min(1, e^Δ)`.
    #[inline]
    pub fn decide(uniform: f64, delta: f64) -> bool {
        delta >= 0.0 || uniform < delta.exp()
    }

    pub fn apply(&self, st: &mut EnsembleState, proposal: &Proposal) {
        let j = self.terms.len();
        let w = self.cohort.weights();
        for (&i, &y_new) in proposal.indices.iter().zip(&proposal.outcomes) {
            let p = i % self.partitions;
            for (k, term) in self.terms.iter().enumerate() {
                let v = term.f.eval(y_new);
                let old = st.values[i * j + k];
                st.values[i * j + k] = v;
                if term.member(i) {
                    let d = w[i] * (v - old);
                    st.sums[k] += d;
                    st.part_sums[p * j + k] += d;
                }
            }
            st.outcomes[i] = y_new;
        }
    }

    /// One block Metropolis-Hastings step with the reference kernel as proposal.
    pub fn mh_step(
        &self,
        st: &mut EnsembleState,
        lambda: &LambdaState,
        iteration: u64,
    ) -> Result<StepOutcome, SamplerError> {
        let proposal = self.propose(iteration)?;
        let delta = self.delta(st, lambda, &proposal);
        let accepted = Self::decide(proposal.uniform, delta);
        if accepted {
            self.apply(st, &proposal);
        }
        st.iteration = iteration;
        st.proposed += proposal.indices.len() as u64;
        st.accepted += accepted as u64;
        Ok(StepOutcome {
            accepted,
            proposed: proposal.indices.len(),
            delta,
        })
    }
}

/// Exact constraint estimates of the current ensemble: population-wide terms
/// average over all particles, subgroup terms over members only.
pub fn estimate_constraints(
    outcomes: &[f64],
    cohort: &Cohort,
    schema: &CovariateSchema,
    targets: &[ConstraintSpec],
) -> Result<Vec<f64>, SamplerError> {
    let terms = compile_terms(cohort, schema, targets)?;
    let w = cohort.weights();
    Ok(terms
        .iter()
        .map(|t| {
            let (mut num, mut den) = (0.0, 0.0);
            for (i, y) in outcomes.iter().enumerate() {
                if t.member(i) {
                    num += w[i] * t.f.eval(*y);
                    den += w[i];
                }
            }
            num / den
        })
        .collect())
}
