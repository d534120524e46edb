//! Report emission: a JSON result tree and a CSV of band curves with data.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use super::data::qoi_label;
use super::run::{json_err, Propagation, Scenario, ScenarioRun};
use crate::error::{IuqError, Result};
use crate::model::{ExperimentRecord, Model};

pub const SCHEMA_VERSION: &str = "1";
pub const REPORT_FILE: &str = "report.json";
pub const BANDS_FILE: &str = "bands.csv";

fn propagation_block(p: &Propagation) -> Result<Value> {
    Ok(json!({
        "fuq": { "n_samples": p.bands.n_samples, "n_failed": p.bands.n_failed },
        "envelope": serde_json::to_value(&p.envelope).map_err(json_err)?,
    }))
}

/// Header fields shared by every artifact of a scenario run.
pub fn stamp(sc: &Scenario) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    m.insert("scenario".into(), json!(sc.config.name));
    m.insert("config_sha256".into(), json!(sc.config_sha256));
    m.insert("seed".into(), json!(sc.seed));
    m
}

pub fn build_report(sc: &Scenario, run: &ScenarioRun) -> Result<Value> {
    let mut root = stamp(sc);
    root.insert("coverage_target".into(), json!(sc.config.envelope.target));
    root.insert(
        "generation".into(),
        json!({
            "model": sc.model.name(),
            "param_labels": sc.model.param_labels(),
            "data_source": if sc.config.data.csv.is_some() { "csv" } else { "synthetic" },
            "n_experiments": run.experiments.len(),
            "experiment_labels": run.experiments.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(),
            "truth": sc.config.truth,
        }),
    );
    root.insert("baseline".into(), run.baseline.as_ref().map(propagation_block).transpose()?.unwrap_or(Value::Null));
    let mut methods = Map::new();
    for m in &run.methods {
        let mut block = propagation_block(&m.propagation)?;
        block["result"] = m.outcome.result.clone();
        methods.insert(m.outcome.method.name().into(), block);
    }
    root.insert("methods".into(), Value::Object(methods));
    Ok(Value::Object(root))
}

/// Canonical text of a report tree (sorted keys, two-space indent, trailing newline).
pub fn render(report: &Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(json_err)?;
    s.push('\n');
    Ok(s)
}

pub fn load_report(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| IuqError::invalid(format!("cannot read {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(json_err)?;
    if v.get("schema_version") != Some(&json!(SCHEMA_VERSION)) {
        return Err(IuqError::invalid(format!("{}: unsupported schema_version", path.display())));
    }
    Ok(v)
}

fn io_err(path: &Path, e: std::io::Error) -> IuqError {
    IuqError::invalid(format!("cannot write {}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Rows `source,design_label,time_s,qoi_label,lower,median,upper,data`.
pub fn bands_csv(model: &dyn Model, run: &ScenarioRun) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| IuqError::invalid(format!("bands csv: {e}"));
    w.write_record(["source", "design_label", "time_s", "qoi_label", "lower", "median", "upper", "data"]).map_err(e)?;
    let mut emit = |source: &str, p: &Propagation, recs: &[ExperimentRecord]| -> Result<()> {
        for (b, r) in p.bands.bands.iter().zip(recs) {
            for j in 0..b.lower.len() {
                let t = b.times.as_ref().map(|t| t[j].to_string()).unwrap_or_default();
                w.write_record([
                    source.to_string(),
                    b.design_label.clone(),
                    t,
                    qoi_label(model, j, b.lower.len()),
                    b.lower[j].to_string(),
                    b.median[j].to_string(),
                    b.upper[j].to_string(),
                    r.observed.values[j].to_string(),
                ])
                .map_err(e)?;
            }
        }
        Ok(())
    };
    if let Some(p) = &run.baseline {
        emit("truth", p, &run.experiments)?;
    }
    for m in &run.methods {
        emit(m.outcome.method.name(), &m.propagation, &run.experiments)?;
    }
    let bytes = w.into_inner().map_err(|x| IuqError::invalid(format!("bands csv: {x}")))?;
    String::from_utf8(bytes).map_err(|x| IuqError::invalid(format!("bands csv: {x}")))
}

/// Writes `report.json` and `bands.csv` into `dir`; returns their paths.
pub fn emit_report(sc: &Scenario, run: &ScenarioRun, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let report = build_report(sc, run)?;
    let rp = dir.join(REPORT_FILE);
    write_text(&rp, &render(&report)?)?;
    let bp = dir.join(BANDS_FILE);
    write_text(&bp, &bands_csv(sc.model.as_ref(), run)?)?;
    Ok((rp, bp))
}
