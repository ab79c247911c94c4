//! Entropy balancing of baseline draws.
//!
//! Weights take the form `w_i ∝ r_i exp(ν·φ(x_i))` where `r` is the reference
//! weight of each record. The multipliers `ν` minimize the convex dual
//!
//! ```text
//! Λ(ν) = log Σ_i r_i exp(ν·φ_i) − ν·b + Σ_{k soft} ν_k² / (2ρ_k)
//! ```
//!
//! whose gradient is `E_w[φ] − b + ν/ρ` on the soft block. At the optimum,
//! hard moments match their targets and soft ones satisfy `ν = −ρ (m − b)`.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

use crate::constraints::{check_eligibility, ConstraintError, ConstraintSpec, EligibilitySpec, Mode, StatisticFn};
use crate::model::{BaselineRecord, CovariateSchema};

const CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalanceError {
    #[error("no record passed the eligibility criteria")]
    EmptyCohort,
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("target of `{constraint}` lies outside the relative interior of the achievable moments (separating direction {witness:?})")]
    Infeasible { constraint: String, witness: Vec<f64> },
    #[error("dual solver did not converge after {iterations} iterations; residuals {residuals:?}")]
    Divergence { iterations: usize, residuals: Vec<f64> },
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// Weighted baseline records. Weights always sum to the record count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    records: Vec<BaselineRecord>,
    weights: Vec<f64>,
}

impl Cohort {
    pub fn uniform(records: Vec<BaselineRecord>) -> Result<Self, BalanceError> {
        if records.is_empty() {
            return Err(BalanceError::EmptyCohort);
        }
        let n = records.len();
        Ok(Cohort {
            records,
            weights: vec![1.0; n],
        })
    }

    /// Rescales `weights` so they sum to `records.len()`.
    pub fn new(records: Vec<BaselineRecord>, weights: Vec<f64>) -> Result<Self, BalanceError> {
        if records.is_empty() {
            return Err(BalanceError::EmptyCohort);
        }
        if weights.len() != records.len() {
            return Err(BalanceError::InvalidWeights(format!(
                "{} weights for {} records",
                weights.len(),
                records.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(BalanceError::InvalidWeights("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(BalanceError::InvalidWeights("weights sum to zero".into()));
        }
        let scale = records.len() as f64 / total;
        let weights = weights.into_iter().map(|w| w * scale).collect();
        Ok(Cohort { records, weights })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[BaselineRecord] {
        &self.records
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self, BalanceError> {
        Cohort::new(self.records.clone(), weights)
    }

    /// Weighted mean of a baseline statistic; records where it is undefined count as 0.
    pub fn weighted_mean(&self, schema: &CovariateSchema, f: &StatisticFn) -> Result<f64, BalanceError> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (x, w) in self.records.iter().zip(&self.weights) {
            if !f.member(schema, x)? {
                continue;
            }
            den += w;
            let inner = match f {
                StatisticFn::Subgroup { inner, .. } => inner.as_ref(),
                other => other,
            };
            match inner.evaluate(schema, x, None) {
                Ok(v) => num += w * v,
                Err(ConstraintError::MissingValue(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(if den > 0.0 { num / den } else { f64::NAN })
    }
}

/// Keeps eligible draws with unit weight.
pub fn filter_eligible(
    samples: &[BaselineRecord],
    schema: &CovariateSchema,
    spec: &EligibilitySpec,
) -> Result<Cohort, BalanceError> {
    spec.validate(schema)?;
    let kept: Vec<BaselineRecord> = samples
        .iter()
        .filter(|x| check_eligibility(spec, schema, x))
        .cloned()
        .collect();
    Cohort::uniform(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    None,
    Newton,
    QuasiNewton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub labels: Vec<String>,
    pub modes: Vec<Mode>,
    pub targets: Vec<f64>,
    pub multipliers: Vec<f64>,
    /// Weighted statistic (subgroup-normalized for subgroup constraints).
    pub achieved: Vec<f64>,
    /// Mean of the balanced column minus its target; zero for hard constraints.
    pub residuals: Vec<f64>,
    /// Records whose value was missing and entered as 0.
    pub missing: Vec<usize>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub method: SolverMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub multiplier_cap: f64,
    pub condition_limit: f64,
    pub check_feasibility: bool,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        BalanceOptions {
            max_iterations: 500,
            gradient_tolerance: 1e-11,
            multiplier_cap: 50.0,
            condition_limit: 1e12,
            check_feasibility: true,
        }
    }
}

/// Balancing columns: row-major values, per-column targets and missing counts.
#[derive(Debug, Clone)]
pub struct StatisticMatrix {
    pub n: usize,
    pub k: usize,
    pub values: Vec<f64>,
    pub targets: Vec<f64>,
    pub missing: Vec<usize>,
}

impl StatisticMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }
}

/// Evaluates every constraint on every record. Subgroup constraints become
/// `1{x in G} (φ(x) − b)` with target 0.
pub fn statistic_matrix(
    cohort: &Cohort,
    schema: &CovariateSchema,
    constraints: &[ConstraintSpec],
) -> Result<StatisticMatrix, BalanceError> {
    for c in constraints {
        if c.statistic.is_outcome() {
            return Err(ConstraintError::Invalid(format!(
                "`{}` is an outcome statistic and cannot balance baselines",
                c.label
            ))
            .into());
        }
        c.validate(schema)?;
    }
    let n = cohort.len();
    let k = constraints.len();
    let mut values = vec![0.0; n * k];
    let mut missing = vec![0usize; k];
    for (i, x) in cohort.records().iter().enumerate() {
        for (j, c) in constraints.iter().enumerate() {
            let v = match &c.statistic {
                StatisticFn::Subgroup { inner, .. } => {
                    if c.statistic.member(schema, x)? {
                        match inner.evaluate(schema, x, None) {
                            Ok(v) => v - c.target,
                            Err(ConstraintError::MissingValue(_)) => {
                                missing[j] += 1;
                                0.0
                            }
                            Err(e) => return Err(e.into()),
                        }
                    } else {
                        0.0
                    }
                }
                f => match f.evaluate(schema, x, None) {
                    Ok(v) => v,
                    Err(ConstraintError::MissingValue(_)) => {
                        missing[j] += 1;
                        0.0
                    }
                    Err(e) => return Err(e.into()),
                },
            };
            if !v.is_finite() {
                return Err(ConstraintError::Invalid(format!(
                    "`{}` is not finite on record {i}",
                    c.label
                ))
                .into());
            }
            values[i * k + j] = v;
        }
    }
    let targets = constraints
        .iter()
        .map(|c| match c.statistic {
            StatisticFn::Subgroup { .. } => 0.0,
            _ => c.target,
        })
        .collect();
    Ok(StatisticMatrix {
        n,
        k,
        values,
        targets,
        missing,
    })
}

/// Column centering and scaling under the reference weights.
struct Standardizer {
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(m: &StatisticMatrix, reference: &[f64]) -> Self {
        let total: f64 = reference.iter().sum();
        let mut center = vec![0.0; m.k];
        for i in 0..m.n {
            for (c, v) in center.iter_mut().zip(m.row(i)) {
                *c += reference[i] * v;
            }
        }
        center.iter_mut().for_each(|c| *c /= total);
        let mut var = vec![0.0; m.k];
        for i in 0..m.n {
            for j in 0..m.k {
                let d = m.row(i)[j] - center[j];
                var[j] += reference[i] * d * d;
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let s = (v / total).sqrt();
                if s > 1e-300 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { center, scale }
    }

    fn apply(&self, m: &StatisticMatrix) -> (Vec<f64>, Vec<f64>) {
        let k = m.k;
        let mut out = vec![0.0; m.values.len()];
        for i in 0..m.n {
            for j in 0..k {
                out[i * k + j] = (m.values[i * k + j] - self.center[j]) / self.scale[j];
            }
        }
        let b = (0..k).map(|j| (m.targets[j] - self.center[j]) / self.scale[j]).collect();
        (out, b)
    }
}

/// Verdict of the relative-interior test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// Direction `d` (in constraint units, max-norm 1) with `d·(φ_i − b) <= 0`
    /// for every record and strict inequality for some.
    pub witness: Option<Vec<f64>>,
    /// Constraint with the largest witness component.
    pub violating: Option<usize>,
    /// `false` when the LP could not be solved and the verdict is provisional.
    pub decided: bool,
}

/// Tests whether the hard targets lie in the relative interior of the convex
/// hull of the per-record statistic vectors (records with positive weight).
///
/// The target is interior exactly when no direction `d` separates it weakly
/// from every record while separating it strictly from some. The LP
/// maximizes `Σ_i −d·(φ_i − b)` over `d ∈ [−1, 1]^K` subject to
/// `d·(φ_i − b) <= 0`; a positive optimum certifies infeasibility.
pub fn feasibility_check(
    cohort: &Cohort,
    schema: &CovariateSchema,
    hard_constraints: &[ConstraintSpec],
) -> Result<Feasibility, BalanceError> {
    let m = statistic_matrix(cohort, schema, hard_constraints)?;
    Ok(feasibility_of(&m, cohort.weights()))
}

pub(crate) fn feasibility_of(m: &StatisticMatrix, reference: &[f64]) -> Feasibility {
    let k = m.k;
    if k == 0 {
        return Feasibility {
            feasible: true,
            witness: None,
            violating: None,
            decided: true,
        };
    }
    let st = Standardizer::fit(m, reference);
    let (phi, b) = st.apply(m);
    // Distinct centered rows with multiplicities.
    let mut rows: HashMap<Vec<u64>, (Vec<f64>, f64)> = HashMap::new();
    for i in 0..m.n {
        if reference[i] <= 0.0 {
            continue;
        }
        let r: Vec<f64> = (0..k).map(|j| phi[i * k + j] - b[j]).collect();
        let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
        rows.entry(key).or_insert((r, 0.0)).1 += 1.0;
    }
    let mut distinct: Vec<(Vec<f64>, f64)> = rows.into_values().collect();
    distinct.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut sum = vec![0.0; k];
    let mut mass = 0.0;
    for (r, c) in &distinct {
        for j in 0..k {
            sum[j] += c * r[j];
        }
        mass += c * r.iter().map(|v| v.abs()).sum::<f64>();
    }
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = (0..k).map(|j| lp.add_var(-sum[j], (-1.0, 1.0))).collect();
    for (r, _) in &distinct {
        let expr: Vec<_> = vars.iter().zip(r).map(|(v, c)| (*v, *c)).collect();
        lp.add_constraint(&expr[..], ComparisonOp::Le, 0.0);
    }
    let solution = lp.solve().ok().and_then(|o| o.into_solution().ok());
    let Some(sol) = solution else {
        return Feasibility {
            feasible: true,
            witness: None,
            violating: None,
            decided: false,
        };
    };
    let tol = 1e-9 * mass.max(1.0);
    if sol.objective() <= tol {
        return Feasibility {
            feasible: true,
            witness: None,
            violating: None,
            decided: true,
        };
    }
    let mut d: Vec<f64> = vars
        .iter()
        .enumerate()
        .map(|(j, v)| sol.var_value(*v) / st.scale[j])
        .collect();
    let norm = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    d.iter_mut().for_each(|v| *v /= norm);
    let violating = d
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(j, _)| j);
    Feasibility {
        feasible: false,
        witness: Some(d),
        violating,
        decided: true,
    }
}

struct Dual<'a> {
    n: usize,
    k: usize,
    phi: &'a [f64],
    b: &'a [f64],
    soft_inv: &'a [f64],
    log_ref: &'a [f64],
}

struct DualEval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl Dual<'_> {
    fn scores(&self, nu: &[f64]) -> (Vec<f64>, f64) {
        let k = self.k;
        let s: Vec<f64> = (0..self.n)
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|i| {
                let row = &self.phi[i * k..(i + 1) * k];
                self.log_ref[i] + row.iter().zip(nu).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (s, m)
    }

    fn penalty(&self, nu: &[f64]) -> f64 {
        let lin: f64 = nu.iter().zip(self.b).map(|(a, b)| a * b).sum();
        let quad: f64 = nu.iter().zip(self.soft_inv).map(|(v, r)| 0.5 * r * v * v).sum();
        quad - lin
    }

    fn value(&self, nu: &[f64]) -> f64 {
        let (s, m) = self.scores(nu);
        let z: f64 = fixed_sum(s.par_chunks(CHUNK).map(|c| c.iter().map(|v| (v - m).exp()).sum()).collect());
        m + z.ln() + self.penalty(nu)
    }

    fn probabilities(&self, nu: &[f64]) -> Vec<f64> {
        let (s, m) = self.scores(nu);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z = fixed_sum(e.par_chunks(CHUNK).map(|c| c.iter().sum()).collect());
        e.into_iter().map(|v| v / z).collect()
    }

    fn eval(&self, nu: &[f64]) -> DualEval {
        let k = self.k;
        let (s, m) = self.scores(nu);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z = fixed_sum(e.par_chunks(CHUNK).map(|c| c.iter().sum()).collect());
        let means: Vec<Vec<f64>> = e
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut acc = vec![0.0; k];
                for (o, ei) in chunk.iter().enumerate() {
                    let i = c * CHUNK + o;
                    for j in 0..k {
                        acc[j] += ei * self.phi[i * k + j];
                    }
                }
                acc
            })
            .collect();
        let mut mean = vec![0.0; k];
        for part in &means {
            for j in 0..k {
                mean[j] += part[j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= z);
        let covs: Vec<Vec<f64>> = e
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut acc = vec![0.0; k * k];
                let mut d = vec![0.0; k];
                for (o, ei) in chunk.iter().enumerate() {
                    if *ei == 0.0 {
                        continue;
                    }
                    let i = c * CHUNK + o;
                    for j in 0..k {
                        d[j] = self.phi[i * k + j] - mean[j];
                    }
                    for a in 0..k {
                        let da = ei * d[a];
                        for bb in a..k {
                            acc[a * k + bb] += da * d[bb];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut hess = DMatrix::zeros(k, k);
        for part in &covs {
            for a in 0..k {
                for bb in a..k {
                    hess[(a, bb)] += part[a * k + bb];
                }
            }
        }
        for a in 0..k {
            for bb in a..k {
                let v = hess[(a, bb)] / z;
                hess[(a, bb)] = v;
                hess[(bb, a)] = v;
            }
            hess[(a, a)] += self.soft_inv[a];
        }
        let grad = DVector::from_fn(k, |j, _| mean[j] - self.b[j] + self.soft_inv[j] * nu[j]);
        DualEval {
            value: m + z.ln() + self.penalty(nu),
            grad,
            hess,
        }
    }
}

fn fixed_sum(parts: Vec<f64>) -> f64 {
    parts.into_iter().sum()
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Hard columns that are affine combinations of earlier hard columns carry
/// no information once their targets agree; they are left out of the dual
/// with a zero multiplier. Disagreeing targets are infeasible.
#[allow(clippy::too_many_arguments)]
fn independent_columns(
    phi: &[f64],
    b: &[f64],
    n: usize,
    k: usize,
    modes: &[Mode],
    reference: &[f64],
    labels: &[String],
    st: &Standardizer,
) -> Result<Vec<usize>, BalanceError> {
    let hard: Vec<usize> = (0..k).filter(|&j| modes[j].is_hard()).collect();
    if hard.is_empty() {
        return Ok((0..k).collect());
    }
    let total: f64 = reference.iter().sum();
    let h = hard.len();
    let mut gram = DMatrix::<f64>::zeros(h, h);
    for i in 0..n {
        let r = reference[i];
        if r == 0.0 {
            continue;
        }
        for (a, &ja) in hard.iter().enumerate() {
            let va = r * phi[i * k + ja];
            for (c, &jc) in hard.iter().enumerate().skip(a) {
                gram[(a, c)] += va * phi[i * k + jc];
            }
        }
    }
    for a in 0..h {
        for c in a..h {
            let v = gram[(a, c)] / total;
            gram[(a, c)] = v;
            gram[(c, a)] = v;
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = vec![false; k];
    for a in 0..h {
        let (resid, beta) = if kept.is_empty() {
            (gram[(a, a)], DVector::zeros(0))
        } else {
            let gkk = DMatrix::from_fn(kept.len(), kept.len(), |x, y| gram[(kept[x], kept[y])]);
            let gka = DVector::from_fn(kept.len(), |x, _| gram[(kept[x], a)]);
            match gkk.cholesky() {
                Some(ch) => {
                    let beta = ch.solve(&gka);
                    (gram[(a, a)] - gka.dot(&beta), beta)
                }
                None => (gram[(a, a)], DVector::zeros(kept.len())),
            }
        };
        if resid > 1e-9 {
            kept.push(a);
            continue;
        }
        let ja = hard[a];
        let implied: f64 = kept.iter().zip(beta.iter()).map(|(&x, bx)| bx * b[hard[x]]).sum();
        let gap = b[ja] - implied;
        if gap.abs() > 1e-7 {
            let mut witness = vec![0.0; k];
            let sign = gap.signum();
            witness[ja] = sign / st.scale[ja];
            for (&x, bx) in kept.iter().zip(beta.iter()) {
                witness[hard[x]] = -sign * bx / st.scale[hard[x]];
            }
            let norm = witness.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            witness.iter_mut().for_each(|v| *v /= norm);
            return Err(BalanceError::Infeasible {
                constraint: labels[ja].clone(),
                witness,
            });
        }
        dropped[ja] = true;
    }
    Ok((0..k).filter(|&j| !dropped[j]).collect())
}

/// Entropy balancing with the cohort's current weights as the reference
/// measure. Returns the rebalanced cohort and the dual solution.
pub fn solve_entropy_balance(
    cohort: &Cohort,
    schema: &CovariateSchema,
    constraints: &[ConstraintSpec],
) -> Result<(Cohort, DualState), BalanceError> {
    solve_entropy_balance_with(cohort, schema, constraints, &BalanceOptions::default())
}

pub fn solve_entropy_balance_with(
    cohort: &Cohort,
    schema: &CovariateSchema,
    constraints: &[ConstraintSpec],
    options: &BalanceOptions,
) -> Result<(Cohort, DualState), BalanceError> {
    let m = statistic_matrix(cohort, schema, constraints)?;
    let reference = cohort.weights();
    let k = m.k;
    let labels: Vec<String> = constraints.iter().map(|c| c.label.clone()).collect();
    let modes: Vec<Mode> = constraints.iter().map(|c| c.mode).collect();

    if options.check_feasibility {
        let hard: Vec<usize> = (0..k).filter(|&j| modes[j].is_hard()).collect();
        if !hard.is_empty() {
            let sub = StatisticMatrix {
                n: m.n,
                k: hard.len(),
                values: (0..m.n).flat_map(|i| hard.iter().map(move |&j| (i, j))).map(|(i, j)| m.values[i * k + j]).collect(),
                targets: hard.iter().map(|&j| m.targets[j]).collect(),
                missing: hard.iter().map(|&j| m.missing[j]).collect(),
            };
            let verdict = feasibility_of(&sub, reference);
            if !verdict.feasible {
                let v = verdict.violating.unwrap_or(0);
                let mut witness = vec![0.0; k];
                for (pos, &j) in hard.iter().enumerate() {
                    witness[j] = verdict.witness.as_ref().map_or(0.0, |w| w[pos]);
                }
                return Err(BalanceError::Infeasible {
                    constraint: labels[hard[v]].clone(),
                    witness,
                });
            }
        }
    }

    let st = Standardizer::fit(&m, reference);
    let (phi, b) = st.apply(&m);
    let soft_inv: Vec<f64> = (0..k)
        .map(|j| match modes[j] {
            Mode::Hard => 0.0,
            Mode::Soft { rho } => 1.0 / (rho * st.scale[j] * st.scale[j]),
        })
        .collect();
    let total_ref: f64 = reference.iter().sum();
    let log_ref: Vec<f64> = reference
        .iter()
        .map(|r| if *r > 0.0 { (r / total_ref).ln() } else { f64::NEG_INFINITY })
        .collect();
    let active = independent_columns(&phi, &b, m.n, k, &modes, reference, &labels, &st)?;
    let ka = active.len();
    let phi_a: Vec<f64> = (0..m.n)
        .flat_map(|i| active.iter().map(move |&j| (i, j)))
        .map(|(i, j)| phi[i * k + j])
        .collect();
    let b_a: Vec<f64> = active.iter().map(|&j| b[j]).collect();
    let soft_a: Vec<f64> = active.iter().map(|&j| soft_inv[j]).collect();
    let scale_a: Vec<f64> = active.iter().map(|&j| st.scale[j]).collect();
    let dual = Dual {
        n: m.n,
        k: ka,
        phi: &phi_a,
        b: &b_a,
        soft_inv: &soft_a,
        log_ref: &log_ref,
    };
    let mut nu = vec![0.0; ka];
    let mut method = if ka == 0 { SolverMethod::None } else { SolverMethod::Newton };
    let mut iterations = 0;
    let mut state = dual.eval(&nu);
    let mut inv_approx: Option<DMatrix<f64>> = None;
    let mut converged = ka == 0;
    while !converged && iterations < options.max_iterations {
        if inf_norm(&state.grad) <= options.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let direction = match method {
            SolverMethod::Newton => {
                let eig = state.hess.clone().symmetric_eigenvalues();
                let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = eig.iter().copied().fold(0.0f64, f64::max);
                match state.hess.clone().cholesky() {
                    Some(ch) if lo > 0.0 && hi / lo <= options.condition_limit => -ch.solve(&state.grad),
                    _ => {
                        method = SolverMethod::QuasiNewton;
                        let h = inv_approx.get_or_insert_with(|| DMatrix::identity(ka, ka));
                        -(&*h * &state.grad)
                    }
                }
            }
            _ => {
                let h = inv_approx.get_or_insert_with(|| DMatrix::identity(ka, ka));
                -(&*h * &state.grad)
            }
        };
        let slope = direction.dot(&state.grad);
        let direction = if slope >= 0.0 { -state.grad.clone() } else { direction };
        let slope = direction.dot(&state.grad);
        let mut step = 1.0;
        let mut moved = false;
        let base: Vec<f64> = nu.clone();
        if -slope < 1e-12 * (1.0 + state.value.abs()) {
            // The decrease is below the resolution of the dual value; inside
            // the basin the full step is safe.
            nu = base.iter().zip(direction.iter()).map(|(a, d)| a + d).collect();
            moved = true;
        }
        while !moved && step > 1e-14 {
            let cand: Vec<f64> = base.iter().zip(direction.iter()).map(|(a, d)| a + step * d).collect();
            let v = dual.value(&cand);
            if v.is_finite() && v <= state.value + 1e-4 * step * slope {
                nu = cand;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            // No further decrease is representable in floating point.
            let g = inf_norm(&state.grad);
            if g <= 1e3 * options.gradient_tolerance {
                converged = true;
                break;
            }
            if method == SolverMethod::Newton {
                method = SolverMethod::QuasiNewton;
                continue;
            }
            break;
        }
        let next = dual.eval(&nu);
        if method == SolverMethod::QuasiNewton {
            let s = DVector::from_fn(ka, |j, _| nu[j] - base[j]);
            let y = &next.grad - &state.grad;
            let sy = s.dot(&y);
            if sy > 1e-300 {
                let h = inv_approx.get_or_insert_with(|| DMatrix::identity(ka, ka));
                let rho = 1.0 / sy;
                let eye = DMatrix::<f64>::identity(ka, ka);
                let left = &eye - rho * &s * y.transpose();
                let right = &eye - rho * &y * s.transpose();
                *h = &left * &*h * &right + rho * &s * s.transpose();
            }
        }
        state = next;
        let raw_max = nu
            .iter()
                .zip(&scale_a)
            .fold(0.0f64, |a, (v, s)| a.max((v / s).abs()));
        if raw_max > options.multiplier_cap {
            break;
        }
    }
    if !converged && inf_norm(&state.grad) <= options.gradient_tolerance {
        converged = true;
    }

    let probs = dual.probabilities(&nu);
    let n = m.n as f64;
    let weights: Vec<f64> = probs.iter().map(|p| p * n).collect();
    let mut raw_nu = vec![0.0; k];
    for (pos, &j) in active.iter().enumerate() {
        raw_nu[j] = nu[pos] / st.scale[j];
    }
    let mut column_mean = vec![0.0; k];
    for i in 0..m.n {
        for j in 0..k {
            column_mean[j] += weights[i] * m.values[i * k + j];
        }
    }
    column_mean.iter_mut().for_each(|v| *v /= n);
    let residuals: Vec<f64> = (0..k).map(|j| column_mean[j] - m.targets[j]).collect();
    let raw_grad = (0..k).fold(0.0f64, |a, j| {
        let soft = modes[j].rho().map_or(0.0, |rho| raw_nu[j] / rho);
        a.max((residuals[j] + soft).abs())
    });
    if !converged || raw_nu.iter().any(|v| v.abs() > options.multiplier_cap) {
        return Err(BalanceError::Divergence {
            iterations,
            residuals,
        });
    }
    let balanced = cohort.with_weights(weights)?;
    let mut achieved = Vec::with_capacity(k);
    for c in constraints {
        achieved.push(balanced.weighted_mean(schema, &c.statistic)?);
    }
    Ok((
        balanced,
        DualState {
            labels,
            modes,
            targets: constraints.iter().map(|c| c.target).collect(),
            multipliers: raw_nu,
            achieved,
            residuals,
            missing: m.missing,
            iterations,
            gradient_norm: raw_grad,
            method,
        },
    ))
}

/// Effective sample size and concentration of a weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub n: usize,
    pub ess: f64,
    pub ess_fraction: f64,
    pub max_ratio: f64,
    pub top5_share: f64,
    pub top10_share: f64,
    pub quantiles: WeightQuantiles,
}

/// Quantiles of `w / mean(w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightQuantiles {
    pub q01: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
    pub q99: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn weight_diagnostics(weights: &[f64]) -> BalanceReport {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    let ess = if sq > 0.0 { total * total / sq } else { 0.0 };
    let mean = total / n as f64;
    let mut rel: Vec<f64> = weights.iter().map(|w| w / mean).collect();
    rel.sort_by(|a, b| a.total_cmp(b));
    let share = |frac: f64| {
        let k = frac * n as f64;
        let whole = k.floor() as usize;
        let mut s: f64 = rel.iter().rev().take(whole).sum();
        if whole < n {
            s += (k - whole as f64) * rel[n - 1 - whole];
        }
        s / n as f64
    };
    BalanceReport {
        n,
        ess,
        ess_fraction: ess / n as f64,
        max_ratio: rel.last().copied().unwrap_or(f64::NAN),
        top5_share: share(0.05),
        top10_share: share(0.10),
        quantiles: WeightQuantiles {
            q01: sorted_quantile(&rel, 0.01),
            q05: sorted_quantile(&rel, 0.05),
            q25: sorted_quantile(&rel, 0.25),
            q50: sorted_quantile(&rel, 0.50),
            q75: sorted_quantile(&rel, 0.75),
            q95: sorted_quantile(&rel, 0.95),
            q99: sorted_quantile(&rel, 0.99),
        },
    }
}
