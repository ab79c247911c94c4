//! Human-readable tables and their machine-readable twins.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use tiltcal::balance::BalanceReport;
use tiltcal::pipeline::{ContrastReport, IntervalKind};
use tiltcal::sampler::ChainDiagnostics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub step: String,
    pub report: BalanceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub label: String,
    pub target: f64,
    pub estimate: f64,
    pub residual: f64,
    pub rhat: f64,
    pub deviation_days: Option<f64>,
}

/// One column of the sampler diagnostics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhColumn {
    pub arm: String,
    pub acceptance_at_stop: f64,
    pub acceptance_min: f64,
    pub acceptance_max: f64,
    pub max_rhat: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub max_soft_violation: f64,
    pub max_landmark_deviation_days: f64,
    pub stop_iteration: u64,
    pub burn_in: Option<u64>,
    pub converged: bool,
    pub constraints: Vec<ConstraintRow>,
}

impl MhColumn {
    pub fn from_diagnostics(arm: &str, d: &ChainDiagnostics) -> Self {
        MhColumn {
            arm: arm.to_string(),
            acceptance_at_stop: d.acceptance_rate,
            acceptance_min: d.acceptance_min,
            acceptance_max: d.acceptance_max,
            max_rhat: d.max_rhat,
            lambda_min: d.lambda_min,
            lambda_max: d.lambda_max,
            max_soft_violation: d.max_soft_violation,
            max_landmark_deviation_days: d.max_landmark_deviation_days,
            stop_iteration: d.stop_iteration,
            burn_in: d.burn_in,
            converged: d.converged,
            constraints: (0..d.labels.len())
                .map(|k| ConstraintRow {
                    label: d.labels[k].clone(),
                    target: d.targets[k],
                    estimate: d.estimates[k],
                    residual: d.estimates[k] - d.targets[k],
                    rhat: d.rhat[k],
                    deviation_days: d.landmark_deviation_days[k],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub weights: Vec<WeightRow>,
    pub mh: Vec<MhColumn>,
}

fn grid(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width = vec![0; cols];
    for r in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        for (k, c) in r.iter().enumerate() {
            width[k] = width[k].max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, r: &[String]| {
        for (k, c) in r.iter().enumerate() {
            if k == 0 {
                let _ = write!(out, "{c:<w$}", w = width[k]);
            } else {
                let _ = write!(out, "  {c:>w$}", w = width[k]);
            }
        }
        out.push('\n');
    };
    line(&mut out, header);
    let _ = writeln!(out, "{}", "-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
    for r in rows {
        line(&mut out, r);
    }
    out
}

fn s(v: impl Into<String>) -> String {
    v.into()
}

pub fn render_diagnostics(d: &DiagnosticsSummary) -> String {
    let mut out = String::from("Weight diagnostics\n\n");
    let header: Vec<String> = ["Step", "N", "ESS", "ESS/N", "w_max/w_mean", "top-5%", "top-10%"]
        .map(s)
        .to_vec();
    let rows: Vec<Vec<String>> = d
        .weights
        .iter()
        .map(|w| {
            let r = &w.report;
            vec![
                w.step.clone(),
                r.n.to_string(),
                format!("{:.0}", r.ess),
                format!("{:.2}", r.ess_fraction),
                format!("{:.2}", r.max_ratio),
                format!("{:.1}%", 100.0 * r.top5_share),
                format!("{:.1}%", 100.0 * r.top10_share),
            ]
        })
        .collect();
    out += &grid(&header, &rows);

    out += "\nQuantiles of w / mean(w)\n\n";
    let header: Vec<String> = ["Step", "q01", "q05", "q25", "q50", "q75", "q95", "q99"].map(s).to_vec();
    let rows: Vec<Vec<String>> = d
        .weights
        .iter()
        .map(|w| {
            let q = &w.report.quantiles;
            std::iter::once(w.step.clone())
                .chain([q.q01, q.q05, q.q25, q.q50, q.q75, q.q95, q.q99].map(|v| format!("{v:.3}")))
                .collect()
        })
        .collect();
    out += &grid(&header, &rows);

    if d.mh.is_empty() {
        return out;
    }
    out += "\nSampler diagnostics\n\n";
    let mut header = vec![s("Diagnostic")];
    header.extend(d.mh.iter().map(|c| c.arm.clone()));
    let row = |name: &str, f: &dyn Fn(&MhColumn) -> String| {
        std::iter::once(s(name)).chain(d.mh.iter().map(f)).collect::<Vec<_>>()
    };
    let rows = vec![
        row("Acceptance rate at stop", &|c| format!("{:.2}", c.acceptance_at_stop)),
        row("Acceptance rate min/max over run", &|c| {
            format!("{:.2}/{:.2}", c.acceptance_min, c.acceptance_max)
        }),
        row("Max R-hat across constraints", &|c| format!("{:.3}", c.max_rhat)),
        row("Min / max lambda at stop", &|c| format!("{:+.2} / {:+.2}", c.lambda_min, c.lambda_max)),
        row("Max post-burn soft violation", &|c| format!("{:.4}", c.max_soft_violation)),
        row("Max landmark deviation (days)", &|c| format!("{:.2}", c.max_landmark_deviation_days)),
        row("Stopping iteration", &|c| {
            if c.converged {
                c.stop_iteration.to_string()
            } else {
                format!("{} (cap)", c.stop_iteration)
            }
        }),
    ];
    out += &grid(&header, &rows);

    for c in &d.mh {
        let _ = write!(out, "\nConstraints, {}\n\n", c.arm);
        let header: Vec<String> = ["Constraint", "Target", "Estimate", "Residual", "R-hat", "Deviation (d)"]
            .map(s)
            .to_vec();
        let rows: Vec<Vec<String>> = c
            .constraints
            .iter()
            .map(|k| {
                vec![
                    k.label.clone(),
                    format!("{:.4}", k.target),
                    format!("{:.4}", k.estimate),
                    format!("{:+.2e}", k.residual),
                    format!("{:.3}", k.rhat),
                    k.deviation_days.map_or(s("-"), |v| format!("{v:.2}")),
                ]
            })
            .collect();
        out += &grid(&header, &rows);
    }
    out
}

fn num(v: Option<f64>, quantity: &str) -> String {
    match v {
        None => s("-"),
        Some(v) if quantity.starts_with("Median") || quantity.starts_with("dRMST") => format!("{v:.1}"),
        Some(v) => format!("{v:.3}"),
    }
}

pub fn render_report(r: &ContrastReport) -> String {
    let header: Vec<String> = ["Quantity", "Estimate", "95% CI", "Interval"].map(s).to_vec();
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|row| {
            let ci = match (row.lower, row.upper) {
                (Some(l), Some(u)) => format!("({}, {})", num(Some(l), &row.quantity), num(Some(u), &row.quantity)),
                _ => s("-"),
            };
            let kind = match row.interval {
                IntervalKind::None => s("-"),
                IntervalKind::Percentile => format!("percentile, n={}", row.support),
            };
            vec![row.quantity.clone(), num(row.estimate, &row.quantity), ci, kind]
        })
        .collect();
    let mut out = grid(&header, &rows);
    if let Some(b) = &r.bootstrap {
        let _ = writeln!(
            out,
            "\nReplicate pairs: {} x {} = {}",
            b.b_target - b.excluded_target.len(),
            b.b_source - b.excluded_source.len(),
            b.pairs
        );
        let _ = writeln!(
            out,
            "Excluded replicates: {} of {} ({}), {} of {} ({})",
            b.excluded_target.len(),
            b.b_target,
            r.arm_a,
            b.excluded_source.len(),
            b.b_source,
            r.arm_b
        );
        for (t, f) in &b.positive_fraction {
            let _ = writeln!(out, "Pairs with dRMST({t:.0} d) > 0: {:.1}%", 100.0 * f);
        }
        if let Some(f) = b.significant_fraction {
            let _ = writeln!(out, "Pairs with HR < 1 and upper bound < 1: {:.1}%", 100.0 * f);
        }
        if !b.dropped_constraints.is_empty() {
            let _ = writeln!(out, "Dropped replicate constraints: {}", b.dropped_constraints.len());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tiltcal::balance::weight_diagnostics;

    #[test]
    fn uniform_weights_give_unit_ess_row() {
        let d = DiagnosticsSummary {
            weights: vec![WeightRow {
                step: "uniform".into(),
                report: weight_diagnostics(&[1.0; 50]),
            }],
            mh: vec![],
        };
        let text = render_diagnostics(&d);
        let row = text.lines().find(|l| l.starts_with("uniform")).unwrap();
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cells[1..5], ["50", "50", "1.00", "1.00"]);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<DiagnosticsSummary>(&json).unwrap(), d);
    }
}
