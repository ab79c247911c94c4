//! File formats. Tabular data goes to comma-separated files with a header
//! row; reports and state go to pretty-printed JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::{BalanceReport, Cohort, DualState};
use crate::constraints::ConstraintSpec;
use crate::model::{BaselineRecord, CovariateSchema, FeatureKind, Value};
use crate::pipeline::{CalibratedArm, TrialSpec};
use crate::reconstruct::{AtRiskTable, DigitizedCurve, IpdRow, PseudoIPD};
use crate::sampler::{ChainBuffer, ChainDiagnostics, ChainRun, EnsembleState, LambdaState, PartitionHistory, TracePoint};
use crate::survival::SurvivalCurve;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn parse(path: &Path, message: impl ToString) -> Self {
        IoError::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn is_parse(&self) -> bool {
        matches!(self, IoError::Parse { .. })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> IoError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => IoError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        let line = e.position().map(|p| p.line());
        match line {
            Some(l) => IoError::parse(path, format!("line {l}: {e}")),
            None => IoError::parse(path, e),
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| IoError::parse(path, e))?;
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| IoError::parse(path, format!("line {}: {e}", e.line())))
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| IoError::parse(path, e))
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

fn read_rows<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>, IoError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

#[derive(Serialize, Deserialize)]
struct WeightRow {
    record: usize,
    weight: f64,
}

pub fn write_weights(path: &Path, weights: &[f64]) -> Result<(), IoError> {
    write_rows(
        path,
        weights.iter().enumerate().map(|(record, &weight)| WeightRow { record, weight }),
    )
}

pub fn read_weights(path: &Path) -> Result<Vec<f64>, IoError> {
    let rows: Vec<WeightRow> = read_rows(path)?;
    for (i, r) in rows.iter().enumerate() {
        if r.record != i {
            return Err(IoError::parse(path, format!("record ids must run 0..n, found {} at row {i}", r.record)));
        }
    }
    Ok(rows.into_iter().map(|r| r.weight).collect())
}

#[derive(Serialize, Deserialize)]
struct ChainRow {
    particle: usize,
    chain: usize,
    days: f64,
}

/// One row per stored sample, oldest sample first within each particle.
pub fn write_chains(path: &Path, chains: &ChainBuffer) -> Result<(), IoError> {
    let rows = (0..chains.particles()).flat_map(|i| {
        chains
            .particle(i)
            .into_iter()
            .enumerate()
            .map(move |(chain, days)| ChainRow { particle: i, chain, days })
    });
    write_rows(path, rows)
}

pub fn read_chains(path: &Path) -> Result<ChainBuffer, IoError> {
    let rows: Vec<ChainRow> = read_rows(path)?;
    let mut out: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        if r.particle == out.len() {
            out.push(Vec::new());
        }
        if r.particle + 1 != out.len() {
            return Err(IoError::parse(path, format!("particle {} out of order", r.particle)));
        }
        let row = out.last_mut().expect("pushed above");
        if r.chain != row.len() {
            return Err(IoError::parse(path, format!("particle {}: chain {} out of order", r.particle, r.chain)));
        }
        row.push(r.days);
    }
    if let Some(d) = out.first().map(Vec::len) {
        if out.iter().any(|r| r.len() != d) {
            return Err(IoError::parse(path, "particles hold different chain depths"));
        }
    }
    Ok(ChainBuffer::from_rows(out))
}

#[derive(Serialize, Deserialize)]
struct CurveRow {
    time: f64,
    survival: f64,
    at_risk: f64,
}

pub fn write_curve(path: &Path, curve: &SurvivalCurve) -> Result<(), IoError> {
    write_rows(
        path,
        curve.points.iter().map(|p| CurveRow {
            time: p.time,
            survival: p.survival,
            at_risk: p.at_risk,
        }),
    )
}

/// `(time, survival, at_risk)` rows of a written curve.
pub fn read_curve(path: &Path) -> Result<Vec<(f64, f64, f64)>, IoError> {
    let rows: Vec<CurveRow> = read_rows(path)?;
    Ok(rows.into_iter().map(|r| (r.time, r.survival, r.at_risk)).collect())
}

#[derive(Serialize, Deserialize)]
struct StepRow {
    time: f64,
    survival: f64,
}

pub fn write_digitized(path: &Path, curve: &DigitizedCurve) -> Result<(), IoError> {
    write_rows(
        path,
        curve.points.iter().map(|&(time, survival)| StepRow { time, survival }),
    )
}

pub fn read_digitized(path: &Path, arm: &str, total_events: Option<u64>) -> Result<DigitizedCurve, IoError> {
    let rows: Vec<StepRow> = read_rows(path)?;
    let pts: Vec<(f64, f64)> = rows.into_iter().map(|r| (r.time, r.survival)).collect();
    DigitizedCurve::new(arm, &pts, total_events).map_err(|e| IoError::parse(path, e))
}

#[derive(Serialize, Deserialize)]
struct AtRiskRow {
    time: f64,
    n: u64,
}

pub fn write_at_risk(path: &Path, table: &AtRiskTable) -> Result<(), IoError> {
    write_rows(path, table.rows.iter().map(|&(time, n)| AtRiskRow { time, n }))
}

pub fn read_at_risk(path: &Path) -> Result<AtRiskTable, IoError> {
    let rows: Vec<AtRiskRow> = read_rows(path)?;
    AtRiskTable::new(&rows.into_iter().map(|r| (r.time, r.n)).collect::<Vec<_>>()).map_err(|e| IoError::parse(path, e))
}

#[derive(Serialize, Deserialize)]
struct IpdCsvRow {
    time: f64,
    event: u8,
}

pub fn write_ipd(path: &Path, ipd: &PseudoIPD) -> Result<(), IoError> {
    write_rows(
        path,
        ipd.rows.iter().map(|r| IpdCsvRow {
            time: r.time,
            event: u8::from(r.event),
        }),
    )
}

pub fn read_ipd(path: &Path) -> Result<PseudoIPD, IoError> {
    let rows: Vec<IpdCsvRow> = read_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        if r.event > 1 || !(r.time.is_finite() && r.time >= 0.0) {
            return Err(IoError::parse(path, format!("bad row ({}, {})", r.time, r.event)));
        }
        out.push(IpdRow {
            time: r.time,
            event: r.event == 1,
        });
    }
    Ok(PseudoIPD::new(out))
}

fn format_value(schema: &CovariateSchema, k: usize, v: Option<Value>) -> String {
    match (v, &schema.feature(k).kind) {
        (None, _) => String::new(),
        (Some(Value::Real(x)), _) => x.to_string(),
        (Some(Value::Level(l)), FeatureKind::Categorical { levels }) => {
            levels.get(l as usize).cloned().unwrap_or_default()
        }
        (Some(Value::Level(l)), FeatureKind::Continuous { .. }) => l.to_string(),
    }
}

/// Baseline records by feature name, with an optional `days` outcome
/// column. Categorical values are written as level labels and missing
/// values as empty fields.
pub fn write_records(
    path: &Path,
    schema: &CovariateSchema,
    records: &[BaselineRecord],
    outcomes: Option<&[f64]>,
) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = schema.features().iter().map(|f| f.name.clone()).collect();
    if outcomes.is_some() {
        header.push("days".into());
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (i, x) in records.iter().enumerate() {
        let mut row: Vec<String> = (0..schema.len()).map(|k| format_value(schema, k, x.get(k))).collect();
        if let Some(y) = outcomes {
            row.push(y[i].to_string());
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Reads what [`write_records`] wrote. The second element holds the
/// outcome column when present.
pub fn read_records(
    path: &Path,
    schema: &CovariateSchema,
) -> Result<(Vec<BaselineRecord>, Option<Vec<f64>>), IoError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<&str> = schema.features().iter().map(|f| f.name.as_str()).collect();
    let has_days = header.len() == names.len() + 1 && header.get(names.len()) == Some("days");
    if !header.iter().take(names.len()).eq(names.iter().copied()) || !(has_days || header.len() == names.len()) {
        return Err(IoError::parse(path, "header does not match the schema"));
    }
    let mut records = Vec::new();
    let mut days = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let mut values = Vec::with_capacity(names.len());
        for (k, field) in row.iter().take(names.len()).enumerate() {
            let v = if field.is_empty() {
                None
            } else {
                match &schema.feature(k).kind {
                    FeatureKind::Continuous { .. } => Some(Value::Real(field.parse().map_err(|_| {
                        IoError::parse(path, format!("line {}: `{field}` is not a number", line + 2))
                    })?)),
                    FeatureKind::Categorical { .. } => Some(Value::Level(schema.level_index(k, field).ok_or_else(
                        || IoError::parse(path, format!("line {}: unknown level `{field}` of {}", line + 2, names[k])),
                    )?)),
                }
            };
            values.push(v);
        }
        records.push(BaselineRecord::new(values));
        if has_days {
            let f = row.get(names.len()).unwrap_or("");
            days.push(f.parse().map_err(|_| IoError::parse(path, format!("line {}: bad days `{f}`", line + 2)))?);
        }
    }
    Ok((records, has_days.then_some(days)))
}

/// Plain table with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Multiplier and estimate trajectory, one column per constraint.
pub fn write_trace(path: &Path, labels: &[String], trace: &[TracePoint]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["iteration".to_string(), "acceptance".to_string()];
    header.extend(labels.iter().map(|l| format!("lambda {l}")));
    header.extend(labels.iter().map(|l| format!("estimate {l}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for p in trace {
        let mut row = vec![p.iteration.to_string(), p.acceptance.to_string()];
        row.extend(p.lambda.iter().map(f64::to_string));
        row.extend(p.estimates.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Everything needed to reload a calibrated arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub spec: TrialSpec,
    pub schema: CovariateSchema,
    pub candidates: usize,
    pub cohort: Cohort,
    pub stage1: Option<DualState>,
    pub weight_report: BalanceReport,
    pub targets: Vec<ConstraintSpec>,
    pub ensemble: EnsembleState,
    pub lambda: LambdaState,
    pub diagnostics: ChainDiagnostics,
    pub history: PartitionHistory,
}

/// Files of a calibrated arm under its run directory.
pub mod arm_files {
    pub const STATE: &str = "arm.json";
    pub const WEIGHTS: &str = "weights.csv";
    pub const WEIGHT_REPORT: &str = "weight_report.json";
    pub const STAGE1: &str = "stage1.json";
    pub const CHAINS: &str = "chains.csv";
    pub const LAMBDA: &str = "lambda.json";
    pub const TRACE: &str = "trace.csv";
    pub const DIAGNOSTICS: &str = "diagnostics.json";
    pub const CURVE: &str = "curve.csv";
}

/// Writes the arm's artifacts under `dir` and returns the written paths.
pub fn save_arm(dir: &Path, arm: &CalibratedArm, curve: Option<&SurvivalCurve>) -> Result<Vec<PathBuf>, IoError> {
    use arm_files::*;
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let state = ArmState {
        spec: arm.spec.clone(),
        schema: arm.schema.clone(),
        candidates: arm.candidates,
        cohort: arm.cohort.clone(),
        stage1: arm.stage1.clone(),
        weight_report: arm.weight_report.clone(),
        targets: arm.targets.clone(),
        ensemble: arm.run.ensemble.clone(),
        lambda: arm.run.lambda.clone(),
        diagnostics: arm.run.diagnostics.clone(),
        history: arm.run.history.clone(),
    };
    let mut written = Vec::new();
    let mut put = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    write_json(&put(STATE), &state)?;
    write_weights(&put(WEIGHTS), arm.cohort.weights())?;
    write_json(&put(WEIGHT_REPORT), &arm.weight_report)?;
    if let Some(d) = &arm.stage1 {
        write_json(&put(STAGE1), d)?;
    }
    write_chains(&put(CHAINS), &arm.run.ensemble.chains)?;
    write_json(&put(LAMBDA), &arm.run.lambda)?;
    write_trace(&put(TRACE), &arm.run.diagnostics.labels, &arm.run.trace)?;
    write_json(&put(DIAGNOSTICS), &arm.run.diagnostics)?;
    if let Some(c) = curve {
        write_curve(&put(CURVE), c)?;
    }
    Ok(written)
}

/// Reloads an arm written by [`save_arm`]. The trace is not restored.
pub fn load_arm(dir: &Path) -> Result<CalibratedArm, IoError> {
    let path = dir.join(arm_files::STATE);
    if !path.exists() {
        return Err(IoError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "calibrated arm state not found"),
        ));
    }
    let s: ArmState = read_json(&path)?;
    Ok(CalibratedArm {
        spec: s.spec,
        schema: s.schema,
        candidates: s.candidates,
        cohort: s.cohort,
        stage1: s.stage1,
        weight_report: s.weight_report,
        targets: s.targets,
        run: ChainRun {
            ensemble: s.ensemble,
            lambda: s.lambda,
            diagnostics: s.diagnostics,
            trace: Vec::new(),
            history: s.history,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FeatureSpec;

    fn dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn weights_round_trip() {
        let d = dir();
        let p = d.path().join("w.csv");
        let w = vec![0.25, 1.0 / 3.0, 2.5e-7, 7.0];
        write_weights(&p, &w).unwrap();
        assert_eq!(read_weights(&p).unwrap(), w);
        assert!(read_text(&p).unwrap().starts_with("record,weight\n"));
    }

    #[test]
    fn chains_round_trip() {
        let d = dir();
        let p = d.path().join("c.csv");
        let mut buf = ChainBuffer::new(3, 2);
        for k in 0..5 {
            buf.push(&[k as f64, 10.0 + k as f64, 100.5 + k as f64]);
        }
        write_chains(&p, &buf).unwrap();
        let back = read_chains(&p).unwrap();
        for i in 0..3 {
            assert_eq!(back.particle(i), buf.particle(i));
        }
        assert!(back.is_full());
    }

    #[test]
    fn step_files_round_trip() {
        let d = dir();
        let curve = DigitizedCurve::new("a", &[(0.0, 1.0), (10.0, 0.8), (20.5, 0.5)], Some(7)).unwrap();
        let p = d.path().join("km.csv");
        write_digitized(&p, &curve).unwrap();
        assert_eq!(read_digitized(&p, "a", Some(7)).unwrap(), curve);

        let table = AtRiskTable::new(&[(0.0, 40), (10.0, 31), (20.0, 12)]).unwrap();
        let p = d.path().join("risk.csv");
        write_at_risk(&p, &table).unwrap();
        assert_eq!(read_at_risk(&p).unwrap(), table);

        let ipd = PseudoIPD::new(vec![
            IpdRow { time: 3.0, event: true },
            IpdRow { time: 1.5, event: false },
        ]);
        let p = d.path().join("ipd.csv");
        write_ipd(&p, &ipd).unwrap();
        assert_eq!(read_ipd(&p).unwrap(), ipd);
    }

    #[test]
    fn survival_curve_written_with_risk_sets() {
        let d = dir();
        let samples = vec![
            crate::survival::WeightedTimeToEvent::event(2.0, 1.0),
            crate::survival::WeightedTimeToEvent::event(5.0, 1.0),
        ];
        let km = crate::survival::weighted_km(&samples).unwrap();
        let p = d.path().join("curve.csv");
        write_curve(&p, &km).unwrap();
        assert_eq!(read_curve(&p).unwrap(), vec![(2.0, 0.5, 2.0), (5.0, 0.0, 1.0)]);
    }

    #[test]
    fn records_round_trip_with_missing() {
        let d = dir();
        let schema = CovariateSchema::new(vec![
            FeatureSpec::continuous("age", "years"),
            FeatureSpec::categorical("ecog", &["0", "1", "2"]).nullable(),
        ])
        .unwrap();
        let recs = vec![
            BaselineRecord::new(vec![Some(Value::Real(61.5)), Some(Value::Level(2))]),
            BaselineRecord::new(vec![Some(Value::Real(40.0)), None]),
        ];
        let p = d.path().join("r.csv");
        write_records(&p, &schema, &recs, Some(&[12.0, 400.25])).unwrap();
        let (back, days) = read_records(&p, &schema).unwrap();
        assert_eq!(back, recs);
        assert_eq!(days.unwrap(), vec![12.0, 400.25]);
        write_records(&p, &schema, &recs, None).unwrap();
        assert!(read_records(&p, &schema).unwrap().1.is_none());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let d = dir();
        let p = d.path().join("w.csv");
        write_text(&p, "record,weight\n0,1.0\n1,abc\n").unwrap();
        let e = read_weights(&p).unwrap_err();
        assert!(e.is_parse());
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = read_weights(&d.path().join("absent.csv")).unwrap_err();
        assert!(matches!(e, IoError::Io { .. }));
    }

    #[test]
    fn json_round_trip() {
        let d = dir();
        let p = d.path().join("r.json");
        let report = crate::balance::weight_diagnostics(&[1.0, 2.0, 3.0]);
        write_json(&p, &report).unwrap();
        let back: BalanceReport = read_json(&p).unwrap();
        assert_eq!(back, report);
    }
}
