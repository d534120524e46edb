//! Experiment data as comma-separated text:
//! `design_label,time_s,qoi_label,value,noise_sd` (`time_s` empty for scalar QoIs).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{IuqError, Result};
use crate::model::{DesignPoint, ExperimentRecord, Model, OutputKind, QoiVector};

pub const HEADER: [&str; 5] = ["design_label", "time_s", "qoi_label", "value", "noise_sd"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Row {
    design_label: String,
    time_s: Option<f64>,
    qoi_label: String,
    value: f64,
    noise_sd: f64,
}

/// Label of QoI `j` for a model: the bare QoI label for time series or a
/// single scalar, otherwise the label with the index appended.
pub fn qoi_label(model: &dyn Model, j: usize, n_qoi: usize) -> String {
    let base = model.qoi_label();
    if model.output_kind() == OutputKind::TimeSeries || n_qoi == 1 {
        base
    } else {
        format!("{base}{j}")
    }
}

fn csv_err(e: csv::Error) -> IuqError {
    IuqError::invalid(format!("experiment csv: {e}"))
}

/// The header row comes from the field names of the row type.
pub fn write_experiments<W: Write>(model: &dyn Model, records: &[ExperimentRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        let sd = r.noise_sd();
        for j in 0..r.observed.len() {
            w.serialize(Row {
                design_label: r.label.clone(),
                time_s: r.observed.times.as_ref().map(|t| t[j]),
                qoi_label: qoi_label(model, j, r.observed.len()),
                value: r.observed.values[j],
                noise_sd: sd[j],
            })
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| IuqError::invalid(format!("experiment csv: {e}")))?;
    Ok(())
}

/// Reads experiments and attaches design points.
///
/// Records are grouped by `design_label` in order of first appearance and
/// matched positionally to `designs`.
pub fn read_experiments<R: Read>(input: R, designs: &[DesignPoint]) -> Result<Vec<ExperimentRecord>> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(IuqError::invalid(format!("experiment csv: header must be `{}`", HEADER.join(","))));
    }
    let mut groups: Vec<(String, Vec<Row>)> = Vec::new();
    for (line, row) in rd.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| IuqError::invalid(format!("experiment csv row {}: {e}", line + 2)))?;
        match groups.iter_mut().find(|(l, _)| *l == row.design_label) {
            Some((_, rows)) => rows.push(row),
            None => groups.push((row.design_label.clone(), vec![row])),
        }
    }
    if groups.len() != designs.len() {
        return Err(IuqError::DimensionMismatch { what: "experiment csv designs", expected: designs.len(), got: groups.len() });
    }
    groups
        .into_iter()
        .zip(designs)
        .map(|((label, rows), design)| {
            let values = rows.iter().map(|r| r.value).collect();
            let times: Vec<Option<f64>> = rows.iter().map(|r| r.time_s).collect();
            let observed = if times.iter().all(Option::is_some) {
                QoiVector::series(times.into_iter().flatten().collect(), values)
            } else if times.iter().all(Option::is_none) {
                QoiVector::scalars(values)
            } else {
                return Err(IuqError::invalid(format!("experiment csv: design `{label}` mixes timed and untimed rows")));
            };
            let noise_var = rows.iter().map(|r| r.noise_sd * r.noise_sd).collect();
            ExperimentRecord::new(label, design.clone(), observed, noise_var)
        })
        .collect()
}
