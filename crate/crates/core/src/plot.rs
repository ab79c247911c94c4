//! SVG step plots of survival curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::survival::SurvivalCurve;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlotError {
    #[error("a plot needs at least one curve")]
    NoCurves,
    #[error("invalid axis range {0:?}")]
    Range((f64, f64)),
    #[error("curve `{0}` has a non-finite point")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotCurve {
    pub label: String,
    /// Right-continuous steps `(time, survival)`; the curve starts at (0, 1).
    pub steps: Vec<(f64, f64)>,
}

impl PlotCurve {
    pub fn from_curve(label: &str, curve: &SurvivalCurve) -> Self {
        PlotCurve {
            label: label.to_string(),
            steps: curve.points.iter().map(|p| (p.time, p.survival)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub curves: Vec<PlotCurve>,
    /// Defaults to zero through the last step time.
    pub x_range: Option<(f64, f64)>,
    pub y_range: (f64, f64),
    pub title: String,
    pub x_label: String,
    pub y_label: String,
}

impl PlotSpec {
    pub fn survival(curves: Vec<PlotCurve>) -> Self {
        PlotSpec {
            curves,
            x_range: None,
            y_range: (0.0, 1.0),
            title: String::new(),
            x_label: "Days".into(),
            y_label: "Survival probability".into(),
        }
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const W: f64 = 720.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

fn label_num(v: f64) -> String {
    let r = (v * 1000.0).round() / 1000.0;
    if r.fract() == 0.0 {
        format!("{r:.0}")
    } else {
        format!("{r}")
    }
}

/// Overlaid step curves with axes, ticks and a legend.
pub fn render_svg(spec: &PlotSpec) -> Result<String, PlotError> {
    if spec.curves.is_empty() {
        return Err(PlotError::NoCurves);
    }
    for c in &spec.curves {
        if c.steps.iter().any(|(t, s)| !t.is_finite() || !s.is_finite()) {
            return Err(PlotError::NonFinite(c.label.clone()));
        }
    }
    let last = spec
        .curves
        .iter()
        .flat_map(|c| c.steps.iter().map(|p| p.0))
        .fold(0.0, f64::max);
    let (x0, x1) = spec.x_range.unwrap_or((0.0, if last > 0.0 { last } else { 1.0 }));
    let (y0, y1) = spec.y_range;
    for r in [(x0, x1), (y0, y1)] {
        if !(r.0.is_finite() && r.1.is_finite() && r.1 > r.0) {
            return Err(PlotError::Range(r));
        }
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |t: f64| LEFT + (t.clamp(x0, x1) - x0) / (x1 - x0) * pw;
    let sy = |s: f64| TOP + (1.0 - (s.clamp(y0, y1) - y0) / (y1 - y0)) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    if !spec.title.is_empty() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            W / 2.0,
            escape(&spec.title)
        );
    }
    let _ = writeln!(
        out,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    let step = nice_step(x1 - x0);
    let mut t = (x0 / step).ceil() * step;
    while t <= x1 + 1e-9 * step {
        let x = sx(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#333"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 19.0,
            label_num(t)
        );
        t += step;
    }
    let ystep = nice_step(y1 - y0);
    let mut s = (y0 / ystep).ceil() * ystep;
    while s <= y1 + 1e-9 * ystep {
        let y = sy(s);
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#333"/><line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT - 5.0,
            LEFT + pw,
            LEFT - 8.0,
            y + 4.0,
            label_num(s)
        );
        s += ystep;
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 15.0,
        escape(&spec.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        TOP + ph / 2.0,
        escape(&spec.y_label)
    );

    for (k, c) in spec.curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = format!("M{:.2},{:.2}", sx(x0.max(0.0)), sy(1.0));
        for &(t, s) in c.steps.iter().filter(|p| p.0 <= x1) {
            let _ = write!(d, " H{:.2} V{:.2}", sx(t), sy(s));
        }
        let _ = write!(d, " H{:.2}", sx(x1.min(last.max(x0))));
        let _ = writeln!(
            out,
            r#"<path class="curve" data-label="{}" d="{d}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
            escape(&c.label)
        );
        let ly = TOP + 16.0 + 18.0 * k as f64;
        let lx = LEFT + pw - 170.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
