//! Weighted Kaplan-Meier, landmark and quantile readouts, RMST and a
//! two-arm Cox model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurvivalError {
    #[error("no observations")]
    Empty,
    #[error("total weight is zero")]
    ZeroWeight,
    #[error("invalid observation: {0}")]
    InvalidInput(String),
    #[error("survival never falls to {0}; quantile undefined")]
    UndefinedQuantile(f64),
    #[error("hazard ratio not identifiable: {0}")]
    NotIdentifiable(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedTimeToEvent {
    pub time: f64,
    pub event: bool,
    pub weight: f64,
}

impl WeightedTimeToEvent {
    pub fn new(time: f64, event: bool, weight: f64) -> Self {
        WeightedTimeToEvent { time, event, weight }
    }

    pub fn event(time: f64, weight: f64) -> Self {
        Self::new(time, true, weight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub time: f64,
    /// Survival just after `time`.
    pub survival: f64,
    /// Weighted number at risk just before `time`.
    pub at_risk: f64,
    pub events: f64,
    pub censored: f64,
}

/// Right-continuous step function starting at 1 at time 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub points: Vec<CurvePoint>,
}

impl SurvivalCurve {
    /// Curve from (time, survival) steps without risk-set information.
    pub fn from_steps(steps: &[(f64, f64)]) -> Result<Self, SurvivalError> {
        let mut last_t = f64::NEG_INFINITY;
        let mut last_s = 1.0;
        let mut points = Vec::with_capacity(steps.len());
        for &(time, survival) in steps {
            if !(time > last_t) || !(0.0..=last_s).contains(&survival) {
                return Err(SurvivalError::InvalidInput(format!(
                    "step ({time}, {survival}) breaks monotonicity"
                )));
            }
            last_t = time;
            last_s = survival;
            points.push(CurvePoint {
                time,
                survival,
                at_risk: f64::NAN,
                events: f64::NAN,
                censored: f64::NAN,
            });
        }
        Ok(SurvivalCurve { points })
    }

    pub fn last_time(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.time)
    }
}

fn validate(data: &[WeightedTimeToEvent]) -> Result<f64, SurvivalError> {
    if data.is_empty() {
        return Err(SurvivalError::Empty);
    }
    let mut total = 0.0;
    for d in data {
        if !(d.time.is_finite() && d.time >= 0.0) || !(d.weight.is_finite() && d.weight >= 0.0) {
            return Err(SurvivalError::InvalidInput(format!("{d:?}")));
        }
        total += d.weight;
    }
    if total <= 0.0 {
        return Err(SurvivalError::ZeroWeight);
    }
    Ok(total)
}

fn sorted(data: &[WeightedTimeToEvent]) -> Vec<WeightedTimeToEvent> {
    let mut v = data.to_vec();
    v.sort_by(|a, b| a.time.total_cmp(&b.time));
    v
}

/// Product-limit estimator with weighted risk sets. At a tied time, events
/// leave the risk set first and censorings after them.
pub fn weighted_km(data: &[WeightedTimeToEvent]) -> Result<SurvivalCurve, SurvivalError> {
    let total = validate(data)?;
    let rows = sorted(data);
    let mut at_risk = total;
    let mut survival = 1.0;
    let mut points = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let t = rows[i].time;
        let (mut d, mut c) = (0.0, 0.0);
        while i < rows.len() && rows[i].time == t {
            if rows[i].event {
                d += rows[i].weight;
            } else {
                c += rows[i].weight;
            }
            i += 1;
        }
        if d == 0.0 && c == 0.0 {
            continue;
        }
        if d > 0.0 {
            survival *= if d >= at_risk { 0.0 } else { 1.0 - d / at_risk };
        }
        points.push(CurvePoint {
            time: t,
            survival,
            at_risk,
            events: d,
            censored: c,
        });
        at_risk -= d + c;
        if at_risk < 0.0 {
            at_risk = 0.0;
        }
    }
    Ok(SurvivalCurve { points })
}

/// `S(t)`, right-continuous.
pub fn curve_landmark(curve: &SurvivalCurve, t: f64) -> f64 {
    let idx = curve.points.partition_point(|p| p.time <= t);
    if idx == 0 {
        1.0
    } else {
        curve.points[idx - 1].survival
    }
}

/// Smallest time with `S <= 1 - p`.
pub fn curve_quantile(curve: &SurvivalCurve, p: f64) -> Result<f64, SurvivalError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SurvivalError::InvalidArgument(format!("p = {p} outside (0, 1)")));
    }
    let level = 1.0 - p;
    curve
        .points
        .iter()
        .find(|pt| pt.survival <= level + 1e-12)
        .map(|pt| pt.time)
        .ok_or(SurvivalError::UndefinedQuantile(p))
}

pub fn median(curve: &SurvivalCurve) -> Result<f64, SurvivalError> {
    curve_quantile(curve, 0.5)
}

/// Area under the step function on `[0, tau]`. A curve ending before `tau`
/// is extended at its last value; [`rmst_extrapolates`] reports when.
pub fn rmst(curve: &SurvivalCurve, tau: f64) -> Result<f64, SurvivalError> {
    rmst_between(curve, 0.0, tau)
}

pub fn rmst_extrapolates(curve: &SurvivalCurve, tau: f64) -> bool {
    curve.last_time() < tau
}

/// Integral of `S` over `[a, b]`.
pub fn rmst_between(curve: &SurvivalCurve, a: f64, b: f64) -> Result<f64, SurvivalError> {
    if !(b > a && a >= 0.0 && b.is_finite()) {
        return Err(SurvivalError::InvalidArgument(format!("bad interval [{a}, {b}]")));
    }
    let mut area = 0.0;
    let mut t0 = a;
    let mut s = curve_landmark(curve, a);
    let start = curve.points.partition_point(|p| p.time <= a);
    for pt in &curve.points[start..] {
        if pt.time >= b {
            break;
        }
        area += s * (pt.time - t0);
        t0 = pt.time;
        s = pt.survival;
    }
    area += s * (b - t0);
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    /// Log hazard ratio of arm A relative to arm B.
    pub log_hr: f64,
    pub hr: f64,
    /// Inverse observed information.
    pub se_model: f64,
    /// Sandwich estimate that treats weights as sampling weights.
    pub se_robust: f64,
    pub iterations: usize,
}

impl CoxFit {
    /// Wald interval on the hazard-ratio scale.
    pub fn interval(&self, z: f64, robust: bool) -> (f64, f64) {
        let se = if robust { self.se_robust } else { self.se_model };
        ((self.log_hr - z * se).exp(), (self.log_hr + z * se).exp())
    }
}

struct EventTime {
    time: f64,
    d_total: f64,
    d_a: f64,
    r_a: f64,
    r_b: f64,
}

fn event_table(rows: &[(f64, bool, f64, bool)], total_a: f64, total_b: f64) -> Vec<EventTime> {
    let mut out = Vec::new();
    let (mut r_a, mut r_b) = (total_a, total_b);
    let mut i = 0;
    while i < rows.len() {
        let t = rows[i].0;
        let (mut d_a, mut d_b, mut leave_a, mut leave_b) = (0.0, 0.0, 0.0, 0.0);
        while i < rows.len() && rows[i].0 == t {
            let (_, event, w, in_a) = rows[i];
            if in_a {
                leave_a += w;
                if event {
                    d_a += w;
                }
            } else {
                leave_b += w;
                if event {
                    d_b += w;
                }
            }
            i += 1;
        }
        if d_a + d_b > 0.0 {
            out.push(EventTime {
                time: t,
                d_total: d_a + d_b,
                d_a,
                r_a,
                r_b,
            });
        }
        r_a -= leave_a;
        r_b -= leave_b;
    }
    out
}

fn cox_terms(table: &[EventTime], beta: f64) -> (f64, f64, f64) {
    let e = beta.exp();
    let (mut ll, mut score, mut info) = (0.0, 0.0, 0.0);
    for et in table {
        let s0 = et.r_b + et.r_a * e;
        let zbar = et.r_a * e / s0;
        ll += et.d_a * beta - et.d_total * s0.ln();
        score += et.d_a - et.d_total * zbar;
        info += et.d_total * zbar * (1.0 - zbar);
    }
    (ll, score, info)
}

/// Weighted Cox model with a single arm indicator (A = 1, B = 0) and
/// Breslow handling of ties, maximized by Newton's method.
pub fn weighted_cox_hr(
    arm_a: &[WeightedTimeToEvent],
    arm_b: &[WeightedTimeToEvent],
) -> Result<CoxFit, SurvivalError> {
    let total_a = validate(arm_a)?;
    let total_b = validate(arm_b)?;
    let events = |d: &[WeightedTimeToEvent]| d.iter().filter(|r| r.event).map(|r| r.weight).sum::<f64>();
    if events(arm_a) <= 0.0 || events(arm_b) <= 0.0 {
        return Err(SurvivalError::NotIdentifiable(
            "each arm needs at least one weighted event".into(),
        ));
    }
    let mut rows: Vec<(f64, bool, f64, bool)> = arm_a
        .iter()
        .map(|r| (r.time, r.event, r.weight, true))
        .chain(arm_b.iter().map(|r| (r.time, r.event, r.weight, false)))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let table = event_table(&rows, total_a, total_b);

    let mut beta = 0.0;
    let (mut ll, mut score, mut info) = cox_terms(&table, beta);
    let mut iterations = 0;
    for _ in 0..200 {
        iterations += 1;
        if info <= 0.0 {
            return Err(SurvivalError::NotIdentifiable("zero information".into()));
        }
        let mut step = score / info;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = beta + step;
            let (ll_c, s_c, i_c) = cox_terms(&table, cand);
            if ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                ll = ll_c;
                score = s_c;
                info = i_c;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() < 1e-13 || score.abs() < 1e-12 * (1.0 + info) {
            break;
        }
        if beta.abs() > 50.0 {
            return Err(SurvivalError::NotIdentifiable("log hazard ratio diverged".into()));
        }
    }
    let se_model = 1.0 / info.sqrt();

    // Score residuals for the sandwich estimate.
    let e = beta.exp();
    let mut times = Vec::with_capacity(table.len());
    let mut cum_a = Vec::with_capacity(table.len());
    let mut cum_b = Vec::with_capacity(table.len());
    let (mut acc_a, mut acc_b) = (0.0, 0.0);
    let mut zbar_at = Vec::with_capacity(table.len());
    for et in &table {
        let s0 = et.r_b + et.r_a * e;
        let zbar = et.r_a * e / s0;
        let dlambda = et.d_total / s0;
        acc_a += e * (1.0 - zbar) * dlambda;
        acc_b += (0.0 - zbar) * dlambda;
        times.push(et.time);
        cum_a.push(acc_a);
        cum_b.push(acc_b);
        zbar_at.push(zbar);
    }
    let mut meat = 0.0;
    for &(t, event, w, in_a) in &rows {
        if w == 0.0 {
            continue;
        }
        let k = times.partition_point(|&s| s <= t);
        let z = if in_a { 1.0 } else { 0.0 };
        let mut u = 0.0;
        if event {
            // t is an event time, so it sits at index k - 1.
            u += z - zbar_at[k - 1];
        }
        if k > 0 {
            u -= if in_a { cum_a[k - 1] } else { cum_b[k - 1] };
        }
        meat += w * w * u * u;
    }
    let se_robust = meat.sqrt() / info;
    Ok(CoxFit {
        log_hr: beta,
        hr: e,
        se_model,
        se_robust,
        iterations,
    })
}

/// Weighted partial log-likelihood, Breslow ties.
pub fn cox_partial_loglik(
    arm_a: &[WeightedTimeToEvent],
    arm_b: &[WeightedTimeToEvent],
    beta: f64,
) -> f64 {
    let total_a: f64 = arm_a.iter().map(|r| r.weight).sum();
    let total_b: f64 = arm_b.iter().map(|r| r.weight).sum();
    let mut rows: Vec<(f64, bool, f64, bool)> = arm_a
        .iter()
        .map(|r| (r.time, r.event, r.weight, true))
        .chain(arm_b.iter().map(|r| (r.time, r.event, r.weight, false)))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    cox_terms(&event_table(&rows, total_a, total_b), beta).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<WeightedTimeToEvent> {
        vec![
            WeightedTimeToEvent::new(1.0, true, 1.0),
            WeightedTimeToEvent::new(2.0, false, 1.0),
            WeightedTimeToEvent::new(3.0, true, 1.0),
        ]
    }

    #[test]
    fn hand_computed_km() {
        let c = weighted_km(&fixture()).unwrap();
        assert!((curve_landmark(&c, 1.0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((curve_landmark(&c, 2.0) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(curve_landmark(&c, 3.0), 0.0);
        assert_eq!(curve_landmark(&c, 0.5), 1.0);
        assert_eq!(median(&c).unwrap(), 3.0);
        assert!((rmst(&c, 3.0).unwrap() - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn no_events_means_flat_curve() {
        let data: Vec<_> = (1..5).map(|t| WeightedTimeToEvent::new(t as f64, false, 1.0)).collect();
        let c = weighted_km(&data).unwrap();
        assert!(c.points.iter().all(|p| p.survival == 1.0));
        assert_eq!(curve_landmark(&c, 100.0), 1.0);
        assert_eq!(rmst(&c, 10.0).unwrap(), 10.0);
        assert_eq!(median(&c), Err(SurvivalError::UndefinedQuantile(0.5)));
    }

    #[test]
    fn weight_scaling_leaves_curve_unchanged() {
        let a = weighted_km(&fixture()).unwrap();
        let doubled: Vec<_> = fixture()
            .into_iter()
            .map(|r| WeightedTimeToEvent { weight: 2.0 * r.weight, ..r })
            .collect();
        let b = weighted_km(&doubled).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            assert_eq!(p.survival, q.survival);
        }
    }

    #[test]
    fn events_precede_censorings_at_ties() {
        let data = vec![
            WeightedTimeToEvent::new(1.0, true, 1.0),
            WeightedTimeToEvent::new(1.0, false, 1.0),
            WeightedTimeToEvent::new(2.0, true, 1.0),
        ];
        let c = weighted_km(&data).unwrap();
        assert!((curve_landmark(&c, 1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(curve_landmark(&c, 2.0), 0.0);
    }

    #[test]
    fn zero_weights_rejected() {
        let data = vec![WeightedTimeToEvent::new(1.0, true, 0.0)];
        assert_eq!(weighted_km(&data), Err(SurvivalError::ZeroWeight));
        assert_eq!(weighted_km(&[]), Err(SurvivalError::Empty));
    }

    #[test]
    fn single_drop_rmst() {
        let c = SurvivalCurve::from_steps(&[(5.0, 0.0)]).unwrap();
        assert_eq!(rmst(&c, 10.0).unwrap(), 5.0);
    }

    #[test]
    fn identical_arms_give_unit_hr() {
        let data = vec![
            WeightedTimeToEvent::new(2.0, true, 1.5),
            WeightedTimeToEvent::new(3.0, false, 0.5),
            WeightedTimeToEvent::new(5.0, true, 1.0),
            WeightedTimeToEvent::new(7.0, true, 2.0),
        ];
        let fit = weighted_cox_hr(&data, &data).unwrap();
        assert!((fit.hr - 1.0).abs() < 1e-6);
        assert!(fit.se_model > 0.0 && fit.se_robust > 0.0);
    }

    #[test]
    fn relabeling_inverts_hr() {
        let a = vec![
            WeightedTimeToEvent::new(1.0, true, 1.0),
            WeightedTimeToEvent::new(4.0, true, 1.2),
            WeightedTimeToEvent::new(6.0, false, 0.7),
        ];
        let b = vec![
            WeightedTimeToEvent::new(2.0, true, 0.9),
            WeightedTimeToEvent::new(4.0, true, 1.0),
            WeightedTimeToEvent::new(8.0, true, 1.1),
            WeightedTimeToEvent::new(9.0, false, 1.0),
        ];
        let ab = weighted_cox_hr(&a, &b).unwrap();
        let ba = weighted_cox_hr(&b, &a).unwrap();
        assert!((ab.hr * ba.hr - 1.0).abs() < 1e-9);
        assert!((ab.se_model - ba.se_model).abs() < 1e-9);
    }

    #[test]
    fn arm_without_events_is_not_identifiable() {
        let a = vec![WeightedTimeToEvent::new(1.0, false, 1.0)];
        let b = vec![WeightedTimeToEvent::new(1.0, true, 1.0)];
        assert!(matches!(weighted_cox_hr(&a, &b), Err(SurvivalError::NotIdentifiable(_))));
    }
}
