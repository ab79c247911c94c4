//! Pseudo patient-level data from published Kaplan-Meier curves, and the
//! bootstrap that turns it into perturbed outcome targets.
//!
//! Reconstruction walks the at-risk table interval by interval. Events come
//! from the drops of the digitized curve, censorings are spread evenly over
//! each interval so that the next published at-risk count is met, and the
//! interval event totals are finally shifted so the grand total matches the
//! reported number of events.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{ConstraintError, ConstraintSpec, Predicate, StatisticFn, TargetKind};
use crate::rng::{self, Purpose};
use crate::survival::{self, SurvivalCurve, SurvivalError, WeightedTimeToEvent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructError {
    #[error("digitized curve: {0}")]
    InvalidCurve(String),
    #[error("at-risk table: {0}")]
    InvalidTable(String),
    #[error("interval {interval} [{start}, {end}) days: {reason}")]
    Inconsistent {
        interval: usize,
        start: f64,
        end: f64,
        reason: String,
    },
    #[error("cannot reach {requested} events: {reason}")]
    EventTotal { requested: u64, reason: String },
    #[error("constraint '{label}': survival level {p} not reached in replicate")]
    UndefinedQuantile { label: String, p: f64 },
    #[error("constraint '{0}' is neither a landmark nor a quantile target")]
    NotPercentile(String),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// Digitized survival coordinates for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitizedCurve {
    pub arm: String,
    /// (time in days, survival), sorted by time with distinct times.
    pub points: Vec<(f64, f64)>,
    pub total_events: Option<u64>,
}

impl DigitizedCurve {
    /// Sorts the points, merges repeated times to their mean survival and
    /// rejects curves that rise.
    pub fn new(arm: &str, points: &[(f64, f64)], total_events: Option<u64>) -> Result<Self, ReconstructError> {
        if points.is_empty() {
            return Err(ReconstructError::InvalidCurve("no points".into()));
        }
        let mut pts = points.to_vec();
        for &(t, s) in &pts {
            if !(t.is_finite() && t >= 0.0) || !(0.0..=1.0).contains(&s) {
                return Err(ReconstructError::InvalidCurve(format!("bad point ({t}, {s})")));
            }
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
        let mut i = 0;
        while i < pts.len() {
            let t = pts[i].0;
            let mut j = i;
            let mut sum = 0.0;
            while j < pts.len() && pts[j].0 == t {
                sum += pts[j].1;
                j += 1;
            }
            merged.push((t, sum / (j - i) as f64));
            i = j;
        }
        for w in merged.windows(2) {
            if w[1].1 > w[0].1 + 1e-12 {
                return Err(ReconstructError::InvalidCurve(format!(
                    "survival rises from {} at {} d to {} at {} d",
                    w[0].1, w[0].0, w[1].1, w[1].0
                )));
            }
        }
        Ok(DigitizedCurve {
            arm: arm.to_string(),
            points: merged,
            total_events,
        })
    }

    /// Survival just after `t` by linear scan of the digitized steps.
    pub fn survival_at(&self, t: f64) -> f64 {
        let idx = self.points.partition_point(|p| p.0 <= t);
        if idx == 0 {
            1.0
        } else {
            self.points[idx - 1].1
        }
    }
}

/// Published numbers at risk at the start of each reporting interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtRiskTable {
    pub rows: Vec<(f64, u64)>,
}

impl AtRiskTable {
    pub fn new(rows: &[(f64, u64)]) -> Result<Self, ReconstructError> {
        if rows.is_empty() {
            return Err(ReconstructError::InvalidTable("no rows".into()));
        }
        for (k, w) in rows.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(ReconstructError::InvalidTable(format!("times not increasing at row {}", k + 1)));
            }
            if w[1].1 > w[0].1 {
                return Err(ReconstructError::InvalidTable(format!(
                    "number at risk grows from {} to {} at row {}",
                    w[0].1,
                    w[1].1,
                    k + 1
                )));
            }
        }
        if !(rows[0].0.is_finite() && rows[0].0 >= 0.0) {
            return Err(ReconstructError::InvalidTable("first time must be non-negative".into()));
        }
        if rows[0].1 == 0 {
            return Err(ReconstructError::InvalidTable("nobody at risk at the start".into()));
        }
        Ok(AtRiskTable { rows: rows.to_vec() })
    }

    pub fn initial(&self) -> u64 {
        self.rows[0].1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpdRow {
    pub time: f64,
    pub event: bool,
}

/// Reconstructed (time, event) rows, sorted by time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoIPD {
    pub rows: Vec<IpdRow>,
}

impl PseudoIPD {
    pub fn new(mut rows: Vec<IpdRow>) -> Self {
        rows.sort_by(|a, b| a.time.total_cmp(&b.time).then(b.event.cmp(&a.event)));
        PseudoIPD { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn events(&self) -> u64 {
        self.rows.iter().filter(|r| r.event).count() as u64
    }

    pub fn to_weighted(&self) -> Vec<WeightedTimeToEvent> {
        self.rows
            .iter()
            .map(|r| WeightedTimeToEvent::new(r.time, r.event, 1.0))
            .collect()
    }

    pub fn km(&self) -> Result<SurvivalCurve, SurvivalError> {
        survival::weighted_km(&self.to_weighted())
    }
}

/// Integer apportionment of `total` in proportion to `weights` by largest
/// remainder. Ties go to the earlier index.
fn apportion(weights: &[f64], total: u64) -> Option<Vec<u64>> {
    let mut out = vec![0u64; weights.len()];
    if total == 0 {
        return Some(out);
    }
    let sum: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    if !(sum > 0.0) {
        return None;
    }
    let mut rem: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0u64;
    for (i, w) in weights.iter().enumerate() {
        let q = w.max(0.0) * total as f64 / sum;
        let f = q.floor();
        out[i] = f as u64;
        assigned += out[i];
        rem.push((q - f, i));
    }
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut k = 0;
    while assigned < total {
        out[rem[k % rem.len()].1] += 1;
        assigned += 1;
        k += 1;
    }
    while assigned > total {
        // Floating error can only overshoot by a unit or so.
        let i = rem[rem.len() - 1 - (k % rem.len())].1;
        if out[i] > 0 {
            out[i] -= 1;
            assigned -= 1;
        }
        k += 1;
    }
    Some(out)
}

/// Apportion `need` units across slots in proportion to `weights`, never
/// exceeding `caps`. Overflow from capped slots moves to the others.
fn spread(need: u64, weights: &[f64], caps: &[u64]) -> Option<Vec<u64>> {
    if need > caps.iter().sum::<u64>() {
        return None;
    }
    let mut out = vec![0u64; caps.len()];
    let mut left = need;
    while left > 0 {
        let w: Vec<f64> = (0..caps.len())
            .map(|k| if out[k] < caps[k] { weights[k].max(1e-9) } else { 0.0 })
            .collect();
        let share = apportion(&w, left)?;
        let mut moved = 0;
        for k in 0..caps.len() {
            let add = share[k].min(caps[k] - out[k]);
            out[k] += add;
            moved += add;
        }
        if moved == 0 {
            return None;
        }
        left -= moved;
    }
    Some(out)
}

struct Interval {
    start: f64,
    end: f64,
    n_start: u64,
    /// Indices into the curve points falling in `[start, end)`.
    first: usize,
    last: usize,
    censored: u64,
    events: u64,
}

fn censor_times(start: f64, end: f64, c: u64) -> impl Iterator<Item = f64> {
    let step = (end - start) / (c + 1) as f64;
    (1..=c).map(move |j| start + j as f64 * step)
}

/// Fractional events at each digitized point when `c` censorings are spread
/// evenly over the interval.
fn fractional_events(pts: &[(f64, f64)], iv: &Interval, s_start: f64, c: u64) -> Vec<f64> {
    let mut risk = iv.n_start as f64;
    let mut s_prev = s_start;
    let mut cens = censor_times(iv.start, iv.end, c).peekable();
    let mut out = Vec::with_capacity(iv.last - iv.first);
    for &(t, s) in &pts[iv.first..iv.last] {
        while cens.peek().is_some_and(|&ct| ct < t) {
            cens.next();
            risk -= 1.0;
        }
        let d = if s_prev > 0.0 && risk > 0.0 {
            (risk * (1.0 - s / s_prev)).clamp(0.0, risk)
        } else {
            0.0
        };
        risk -= d;
        s_prev = s;
        out.push(d);
    }
    out
}

/// Censoring count in `0..=max_c` whose fractional event total best matches
/// `target(c)`.
fn best_censoring(
    pts: &[(f64, f64)],
    iv: &Interval,
    s_start: f64,
    max_c: u64,
    target: impl Fn(u64) -> f64,
) -> u64 {
    let mut best = (f64::INFINITY, 0);
    for c in 0..=max_c {
        let e: f64 = fractional_events(pts, iv, s_start, c).iter().sum();
        let gap = (target(c) - e).abs();
        if gap < best.0 - 1e-12 {
            best = (gap, c);
        }
    }
    best.1
}

/// Integer events per point, and the reconstructed survival after the interval.
fn materialize(
    pts: &[(f64, f64)],
    iv: &Interval,
    k: usize,
    s_start: f64,
) -> Result<(Vec<u64>, f64), ReconstructError> {
    let frac = fractional_events(pts, iv, s_start, iv.censored);
    let counts = apportion(&frac, iv.events).ok_or_else(|| ReconstructError::Inconsistent {
        interval: k,
        start: iv.start,
        end: iv.end,
        reason: format!("{} events required but the curve does not drop", iv.events),
    })?;
    let mut risk = iv.n_start as f64;
    let mut s = s_start;
    let mut cens = censor_times(iv.start, iv.end, iv.censored).peekable();
    for (&(t, _), &d) in pts[iv.first..iv.last].iter().zip(&counts) {
        while cens.peek().is_some_and(|&ct| ct < t) {
            cens.next();
            risk -= 1.0;
        }
        if d > 0 {
            if d as f64 > risk {
                return Err(ReconstructError::Inconsistent {
                    interval: k,
                    start: iv.start,
                    end: iv.end,
                    reason: format!("{d} events at {t} d with only {risk} at risk"),
                });
            }
            s *= 1.0 - d as f64 / risk;
            risk -= d as f64;
        }
    }
    Ok((counts, s))
}

/// Pseudo patient rows whose Kaplan-Meier fit follows `curve`, whose risk
/// set meets every row of `at_risk`, and whose event count is `total_events`.
pub fn guyot_reconstruct(
    curve: &DigitizedCurve,
    at_risk: &AtRiskTable,
    total_events: u64,
) -> Result<PseudoIPD, ReconstructError> {
    let pts = &curve.points;
    let tab = &at_risk.rows;
    if pts[0].0 < tab[0].0 {
        return Err(ReconstructError::InvalidTable(format!(
            "table starts at {} d after the first curve point at {} d",
            tab[0].0, pts[0].0
        )));
    }
    let n0 = at_risk.initial();
    if total_events > n0 {
        return Err(ReconstructError::EventTotal {
            requested: total_events,
            reason: format!("only {n0} patients at risk"),
        });
    }
    let t_end = pts[pts.len() - 1].0.max(tab[tab.len() - 1].0);
    let kk = tab.len();

    let mut ivs: Vec<Interval> = Vec::with_capacity(kk);
    let mut p = 0;
    for k in 0..kk {
        let start = tab[k].0;
        let end = if k + 1 < kk { tab[k + 1].0 } else { t_end };
        let first = p;
        while p < pts.len() && (pts[p].0 < end || k + 1 == kk) {
            p += 1;
        }
        ivs.push(Interval {
            start,
            end,
            n_start: tab[k].1,
            first,
            last: p,
            censored: 0,
            events: 0,
        });
    }

    // First pass: censorings that reconcile each published count.
    let mut s_hat = 1.0;
    for k in 0..kk - 1 {
        let cap = ivs[k].n_start - tab[k + 1].1;
        let iv = &ivs[k];
        if iv.first > 0 && pts[iv.first - 1].1 <= 0.0 && cap > 0 {
            return Err(ReconstructError::Inconsistent {
                interval: k,
                start: iv.start,
                end: iv.end,
                reason: "curve already reached zero".into(),
            });
        }
        let c = best_censoring(pts, iv, s_hat, cap, |c| (cap - c) as f64);
        let drop: f64 = fractional_events(pts, iv, s_hat, c).iter().sum();
        let gap = (drop - (cap - c) as f64).abs();
        if gap > (0.2 * iv.n_start as f64).max(2.0) {
            return Err(ReconstructError::Inconsistent {
                interval: k,
                start: iv.start,
                end: iv.end,
                reason: format!(
                    "curve implies {drop:.1} events but the table allows at most {cap} departures"
                ),
            });
        }
        ivs[k].censored = c;
        ivs[k].events = cap - c;
        if drop <= 0.0 {
            ivs[k].censored = cap;
            ivs[k].events = 0;
        }
        s_hat = materialize(pts, &ivs[k], k, s_hat)?.1;
    }

    // Last interval takes whatever the reported total leaves over.
    let last = kk - 1;
    let prior: u64 = ivs[..last].iter().map(|iv| iv.events).sum();
    let n_last = ivs[last].n_start;
    let last_drops = fractional_events(pts, &ivs[last], s_hat, 0).iter().sum::<f64>() > 0.0;
    let last_cap = if last_drops { n_last } else { 0 };
    let wanted = total_events as i64 - prior as i64;
    let e_last = wanted.clamp(0, last_cap as i64) as u64;
    let shift = wanted - e_last as i64;
    if shift != 0 {
        let weights: Vec<f64> = ivs[..last].iter().map(|iv| iv.events as f64 + 0.5).collect();
        if shift > 0 {
            let caps: Vec<u64> = ivs[..last]
                .iter()
                .map(|iv| {
                    let drops = iv.last > iv.first;
                    if drops { iv.censored } else { 0 }
                })
                .collect();
            let add = spread(shift as u64, &weights, &caps).ok_or(ReconstructError::EventTotal {
                requested: total_events,
                reason: "not enough censorings to convert into events".into(),
            })?;
            for (iv, a) in ivs.iter_mut().zip(add) {
                iv.events += a;
                iv.censored -= a;
            }
        } else {
            let caps: Vec<u64> = ivs[..last].iter().map(|iv| iv.events).collect();
            let cut = spread((-shift) as u64, &weights, &caps).ok_or(ReconstructError::EventTotal {
                requested: total_events,
                reason: "not enough events to convert into censorings".into(),
            })?;
            for (iv, c) in ivs.iter_mut().zip(cut) {
                iv.events -= c;
                iv.censored += c;
            }
        }
    }

    // Second pass: place rows with the settled counts.
    let mut rows = Vec::with_capacity(n0 as usize);
    let mut s_hat = 1.0;
    for k in 0..kk {
        if k == last {
            let iv = &ivs[k];
            let c = best_censoring(pts, iv, s_hat, n_last - e_last, |_| e_last as f64);
            ivs[k].censored = c;
            ivs[k].events = e_last;
        }
        let (counts, s_next) = materialize(pts, &ivs[k], k, s_hat)?;
        let iv = &ivs[k];
        for t in censor_times(iv.start, iv.end, iv.censored) {
            rows.push(IpdRow { time: t, event: false });
        }
        for (&(t, _), &d) in pts[iv.first..iv.last].iter().zip(&counts) {
            for _ in 0..d {
                rows.push(IpdRow { time: t, event: true });
            }
        }
        if k == last {
            for _ in 0..(n_last - iv.events - iv.censored) {
                rows.push(IpdRow { time: t_end, event: false });
            }
        }
        s_hat = s_next;
    }
    Ok(PseudoIPD::new(rows))
}

/// Replicate `index` of a subject-level bootstrap, seeded independently of
/// every other replicate.
pub fn bootstrap_replicate(ipd: &PseudoIPD, seed: u64, index: u64) -> PseudoIPD {
    let key = rng::key(seed, Purpose::Bootstrap);
    let mut g = rng::stream(&key, index, 0);
    let n = ipd.len();
    let rows = (0..n).map(|_| ipd.rows[g.random_range(0..n)]).collect();
    PseudoIPD::new(rows)
}

/// `b` with-replacement resamples of the rows, each of the original size.
pub fn bootstrap_ipd(ipd: &PseudoIPD, b: usize, seed: u64) -> Vec<PseudoIPD> {
    if ipd.is_empty() {
        return vec![PseudoIPD::default(); b];
    }
    (0..b as u64)
        .into_par_iter()
        .map(|r| bootstrap_replicate(ipd, seed, r))
        .collect()
}

/// What to do when a replicate curve cannot supply a target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedPolicy {
    /// Drop the offending constraint for that replicate only.
    #[default]
    DropConstraint,
    /// Reject the whole replicate.
    DropReplicate,
}

/// Outcome targets recomputed on one bootstrap replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedTargets {
    pub replicate: u64,
    pub seed: u64,
    pub targets: Vec<ConstraintSpec>,
    /// Labels of reference constraints the replicate could not supply.
    pub dropped: Vec<String>,
}

fn with_threshold(stat: &StatisticFn, t: f64) -> Option<StatisticFn> {
    match stat {
        StatisticFn::SigmoidQuantile { scale, .. } => Some(StatisticFn::SigmoidQuantile {
            threshold: t,
            scale: *scale,
        }),
        StatisticFn::Indicator {
            predicate: Predicate::OutcomeAtMost { .. },
        } => Some(StatisticFn::Indicator {
            predicate: Predicate::OutcomeAtMost { threshold: t },
        }),
        _ => None,
    }
}

/// Refit the replicate curve and replace each landmark target by its
/// survival and each quantile threshold by its time.
pub fn recompute_targets(
    replicate_index: u64,
    seed: u64,
    replicate: &PseudoIPD,
    reference: &[ConstraintSpec],
    policy: UndefinedPolicy,
) -> Result<PerturbedTargets, ReconstructError> {
    let curve = replicate.km()?;
    let mut targets = Vec::with_capacity(reference.len());
    let mut dropped = Vec::new();
    for spec in reference {
        if spec.statistic.subgroup().is_some() {
            return Err(ReconstructError::NotPercentile(spec.label.clone()));
        }
        let outcome = match spec.kind {
            TargetKind::Landmark => {
                let t = spec
                    .statistic
                    .time_threshold()
                    .ok_or_else(|| ReconstructError::NotPercentile(spec.label.clone()))?;
                let s = survival::curve_landmark(&curve, t);
                if s > 0.0 && s < 1.0 {
                    Ok(ConstraintSpec {
                        target: 1.0 - s,
                        ..spec.clone()
                    })
                } else {
                    Err(1.0 - s)
                }
            }
            TargetKind::Quantile => match survival::curve_quantile(&curve, spec.target) {
                Ok(t) => {
                    let statistic = with_threshold(&spec.statistic, t)
                        .ok_or_else(|| ReconstructError::NotPercentile(spec.label.clone()))?;
                    Ok(ConstraintSpec {
                        statistic,
                        ..spec.clone()
                    })
                }
                Err(SurvivalError::UndefinedQuantile(p)) => Err(p),
                Err(e) => return Err(e.into()),
            },
            TargetKind::Moment => return Err(ReconstructError::NotPercentile(spec.label.clone())),
        };
        match outcome {
            Ok(c) => targets.push(c),
            Err(p) => match policy {
                UndefinedPolicy::DropConstraint => dropped.push(spec.label.clone()),
                UndefinedPolicy::DropReplicate => {
                    return Err(ReconstructError::UndefinedQuantile {
                        label: spec.label.clone(),
                        p,
                    });
                }
            },
        }
    }
    Ok(PerturbedTargets {
        replicate: replicate_index,
        seed,
        targets,
        dropped,
    })
}
