use std::path::{Path, PathBuf};

use tiltcal::balance::{weight_diagnostics, BalanceOptions};
use tiltcal::io::{self, arm_files};
use tiltcal::model::{sample_baseline, GenerativeModel};
use tiltcal::pipeline::{
    bootstrap_fanout, calibrate_arm, cross_trial_contrast, second_pass_eb, CalibratedArm, CalibrationSettings,
    ReplicateRun, SecondPass,
};
use tiltcal::plot::{render_svg, PlotCurve, PlotSpec};
use tiltcal::reconstruct::{guyot_reconstruct, PseudoIPD};
use tiltcal::rng::{self, Purpose};
use tiltcal::survival::{weighted_km, SurvivalCurve};

use crate::error::{CliError, Status};
use crate::manifest::{slug, Loaded};
use crate::tables::{render_diagnostics, render_report, DiagnosticsSummary, MhColumn, WeightRow};

pub fn arm_dir(out: &Path, label: &str) -> PathBuf {
    out.join("arms").join(slug(label))
}

fn load_arm(out: &Path, label: &str) -> Result<CalibratedArm, CliError> {
    let dir = arm_dir(out, label);
    io::load_arm(&dir).map_err(|e| CliError::from(e).context(&format!("arm `{label}` (run `calibrate` first)")))
}

fn arm_curve(arm: &CalibratedArm, weights: &[f64]) -> Result<SurvivalCurve, CliError> {
    let s = arm.samples(weights)?;
    weighted_km(&s).map_err(|e| CliError::new(Status::Other, format!("readout: {e}")))
}

fn check_writable(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::new(Status::Io, format!("{}: {e}", out.display())))?;
    let probe = out.join(".write-probe");
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| CliError::new(Status::Io, format!("{} is not writable: {e}", out.display())))
}

/// Checks every spec without running anything. With a model the specs are
/// also checked against its recoded schema.
pub fn dry_run(l: &Loaded) -> Result<Status, CliError> {
    let eps = l.sampler.epsilon;
    for spec in &l.trials {
        let outcome = spec.outcome_constraints(eps)?;
        match &l.model {
            Some(m) => {
                spec.validate(m.schema(), eps)?;
            }
            None => {
                for c in spec.baseline.iter().chain(&outcome) {
                    if !c.target.is_finite() {
                        return Err(CliError::parse(format!("{}: `{}` has no finite target", spec.label, c.label)));
                    }
                }
            }
        }
        println!(
            "ok  {}: {} baseline, {} outcome constraints, {} inclusion / {} exclusion criteria",
            spec.label,
            spec.baseline.len(),
            outcome.len(),
            spec.eligibility.inclusion.len(),
            spec.eligibility.exclusion.len()
        );
    }
    if l.model.is_none() {
        println!("no model given; schema references were not checked");
    }
    Ok(Status::Ok)
}

pub fn calibrate(l: &Loaded) -> Result<Status, CliError> {
    let model = l.model()?;
    let out = &l.manifest.output;
    check_writable(out)?;
    io::write_text(&out.join("manifest.toml"), &toml::to_string(&l.manifest).expect("manifest serializes"))?;
    let settings = CalibrationSettings {
        candidates: l.manifest.candidates,
        sampler: l.sampler.clone(),
        balance: BalanceOptions::default(),
    };
    let mut status = Status::Ok;
    for spec in &l.trials {
        let arm = calibrate_arm(model, spec, &settings, l.manifest.seed)
            .map_err(|e| CliError::from(e).context(&spec.label))?;
        let d = &arm.run.diagnostics;
        let curve = arm_curve(&arm, arm.cohort.weights())?;
        io::save_arm(&arm_dir(out, &spec.label), &arm, Some(&curve))?;
        println!(
            "{}: {} eligible of {} draws, ESS/N {:.2}; {} at iteration {}, max landmark deviation {:.2} d, max R-hat {:.3}",
            spec.label,
            arm.cohort.len(),
            arm.candidates,
            arm.weight_report.ess_fraction,
            if d.converged { "converged" } else { "NOT converged" },
            d.stop_iteration,
            d.max_landmark_deviation_days,
            d.max_rhat
        );
        if !d.converged {
            eprintln!("{}: stage 2 reached its iteration cap without meeting the stopping rule", spec.label);
            status = Status::NoConvergence;
        }
    }
    println!("artifacts in {}", out.display());
    Ok(status)
}

fn second_pass(source: &CalibratedArm, target: &CalibratedArm) -> Result<SecondPass, CliError> {
    if source.schema != target.schema {
        return Err(CliError::parse(format!(
            "schema mismatch: `{}` and `{}` were calibrated on different covariate schemas",
            source.label(),
            target.label()
        )));
    }
    Ok(second_pass_eb(
        source,
        &target.spec.baseline,
        Some(&target.spec.eligibility),
        &BalanceOptions::default(),
    )?)
}

fn overlay(
    path: &Path,
    title: &str,
    curves: Vec<PlotCurve>,
    x_max: Option<f64>,
) -> Result<(), CliError> {
    let mut spec = PlotSpec::survival(curves);
    spec.title = title.to_string();
    spec.x_range = x_max.map(|x| (0.0, x));
    io::write_text(path, &render_svg(&spec)?)?;
    Ok(())
}

pub fn contrast(l: &Loaded) -> Result<Status, CliError> {
    let plan = l.contrast_plan()?;
    let out = &l.manifest.output;
    let source = load_arm(out, &plan.source)?;
    let target = load_arm(out, &plan.target)?;
    let sp = second_pass(&source, &target)?;
    let report = cross_trial_contrast(&target, &source, &sp, &plan.settings())?;

    let dir = out.join("contrast");
    io::write_weights(&dir.join("rebalanced_weights.csv"), &sp.weights)?;
    io::write_json(&dir.join("second_pass.json"), &sp)?;
    io::write_json(&dir.join("report.json"), &report)?;
    let text = render_report(&report);
    io::write_text(&dir.join("report.txt"), &text)?;

    let ca = arm_curve(&target, target.cohort.weights())?;
    let cs = arm_curve(&source, source.cohort.weights())?;
    let cb = arm_curve(&source, &sp.weights)?;
    io::write_curve(&dir.join(format!("curve_{}.csv", slug(&report.arm_a))), &ca)?;
    io::write_curve(&dir.join(format!("curve_{}.csv", slug(source.label()))), &cs)?;
    io::write_curve(&dir.join(format!("curve_{}.csv", slug(&report.arm_b))), &cb)?;
    let mut curves = vec![PlotCurve::from_curve(&report.arm_a, &ca)];
    if plan.source != plan.target {
        curves.push(PlotCurve::from_curve(source.label(), &cs));
    }
    curves.push(PlotCurve::from_curve(&report.arm_b, &cb));
    let horizon = plan.rmst_horizons.iter().copied().fold(0.0, f64::max) * 1.5;
    overlay(
        &dir.join("km.svg"),
        &format!("{} vs {}", report.arm_a, report.arm_b),
        curves,
        (horizon > 0.0).then_some(horizon),
    )?;
    print!("{text}");
    println!(
        "second pass: ESS/N {:.2}, w_max/w_mean {:.2}, {} particles outside the target eligibility",
        sp.report.ess_fraction, sp.report.max_ratio, sp.excluded
    );
    println!("report in {}", dir.display());
    Ok(Status::Ok)
}

fn reconstruct_arm(l: &Loaded, label: &str, dir: &Path) -> Result<PseudoIPD, CliError> {
    let input = l
        .digitized(label)
        .ok_or_else(|| CliError::parse(format!("no digitized curve for `{label}` in the manifest")))?;
    let curve = io::read_digitized(&input.curve, label, Some(input.total_events))?;
    let table = io::read_at_risk(&input.at_risk)?;
    let ipd = guyot_reconstruct(&curve, &table, input.total_events)
        .map_err(|e| CliError::from(e).context(label))?;
    io::write_ipd(&dir.join(format!("ipd_{}.csv", slug(label))), &ipd)?;
    Ok(ipd)
}

struct ExclusionRow {
    arm: String,
    replicate: u64,
    seed: u64,
    reason: String,
}

fn exclusions<'a>(label: &'a str, runs: &'a [ReplicateRun]) -> impl Iterator<Item = ExclusionRow> + 'a {
    runs.iter().filter(|r| !r.usable()).map(move |r| ExclusionRow {
        arm: label.to_string(),
        replicate: r.index,
        seed: r.seed,
        reason: r.error.clone().unwrap_or_default(),
    })
}

pub fn bootstrap(l: &Loaded) -> Result<Status, CliError> {
    let model = l.model()?;
    let plan = l.contrast_plan()?;
    let out = &l.manifest.output;
    let dir = out.join("bootstrap");
    let source = load_arm(out, &plan.source)?;
    let target = load_arm(out, &plan.target)?;
    let ipd_t = reconstruct_arm(l, &plan.target, &dir)?;
    let ipd_s = reconstruct_arm(l, &plan.source, &dir)?;
    let sp = second_pass(&source, &target)?;
    let settings = &l.bootstrap;
    println!(
        "fan-out: {} x {} = {} replicate pairs",
        settings.b_target,
        settings.b_source,
        settings.b_target * settings.b_source
    );
    let (report, runs_t, runs_s) = bootstrap_fanout(
        model,
        &target,
        &ipd_t,
        &source,
        &ipd_s,
        &sp,
        settings,
        &plan.settings(),
        &l.sampler,
        l.manifest.seed,
    )?;
    io::write_json(&dir.join("report.json"), &report)?;
    let text = render_report(&report);
    io::write_text(&dir.join("report.txt"), &text)?;
    let rows: Vec<ExclusionRow> = exclusions(&plan.target, &runs_t)
        .chain(exclusions(&plan.source, &runs_s))
        .collect();
    for r in &rows {
        eprintln!("excluded {} replicate {}: {}", r.arm, r.replicate, r.reason);
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.arm.clone(), r.replicate.to_string(), r.seed.to_string(), r.reason.clone()])
        .collect();
    io::write_table(&dir.join("exclusions.csv"), &["arm", "replicate", "seed", "reason"], &table)?;
    print!("{text}");
    println!("report in {}", dir.display());
    Ok(Status::Ok)
}

pub fn diagnose(l: &Loaded) -> Result<Status, CliError> {
    let out = &l.manifest.output;
    let mut weights = Vec::new();
    let mut mh = Vec::new();
    for spec in &l.trials {
        let dir = arm_dir(out, &spec.label);
        let path = dir.join(arm_files::STATE);
        if !path.exists() {
            return Err(CliError::new(
                Status::Io,
                format!("missing artifact {} for `{}`", path.display(), spec.label),
            ));
        }
        let arm = io::load_arm(&dir)?;
        weights.push(WeightRow {
            step: format!("Stage 1 {}", spec.label),
            report: weight_diagnostics(arm.cohort.weights()),
        });
        mh.push(MhColumn::from_diagnostics(&spec.label, &arm.run.diagnostics));
    }
    let sp_path = out.join("contrast").join("second_pass.json");
    if sp_path.exists() {
        let sp: SecondPass = io::read_json(&sp_path)?;
        let plan = l.contrast_plan()?;
        weights.push(WeightRow {
            step: format!("Cross-trial {} -> {}", plan.source, plan.target),
            report: sp.report,
        });
    }
    let summary = DiagnosticsSummary { weights, mh };
    let dir = out.join("diagnostics");
    io::write_json(&dir.join("summary.json"), &summary)?;
    let text = render_diagnostics(&summary);
    io::write_text(&dir.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(Status::Ok)
}

pub fn simulate(l: &Loaded, count: usize) -> Result<Status, CliError> {
    let model = l.model()?;
    let out = &l.manifest.output;
    check_writable(out)?;
    let records = sample_baseline(model, count, l.manifest.seed)?;
    let mut rng = rng::seeded(l.manifest.seed, Purpose::Conditional);
    let days = records
        .iter()
        .map(|x| model.draw_outcome(x, &mut rng).map(|y| y.days()))
        .collect::<Result<Vec<f64>, _>>()?;
    let path = out.join("simulate").join("draws.csv");
    io::write_records(&path, model.schema(), &records, Some(&days))?;
    println!("{count} draws written to {}", path.display());
    Ok(Status::Ok)
}
