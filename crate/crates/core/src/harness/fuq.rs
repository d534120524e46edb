//! Forward propagation of a parameter law to percentile bands, and the
//! envelope check of data against those bands.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IuqError, Result};
use crate::model::{evaluate, DesignPoint, ExperimentRecord, Model};
use crate::stats::{draw_mvn, latin_hypercube, quantile_sorted, CovMatrix, GaussianParamSpec, RngStream};

pub const MIN_FUQ_SAMPLES: usize = 200;
/// Failed evaluations tolerated, as a fraction of all evaluations.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;
pub const BAND_LEVELS: [f64; 3] = [0.025, 0.5, 0.975];

/// Law of the model inputs to propagate.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSource {
    /// Centred Gaussian spec; inputs via `spec.to_input(nominal, θ)`.
    Gaussian { spec: GaussianParamSpec, nominal: Vec<f64> },
    /// Gaussian directly on the model inputs.
    MvNormal { mean: Vec<f64>, cov: CovMatrix },
    /// Independent uniforms on `[lo, hi]` per input (degenerate ranges allowed).
    Uniform { ranges: Vec<(f64, f64)> },
    /// Posterior draws of the model inputs, thinned evenly to the sample count.
    Draws(Vec<Vec<f64>>),
}

impl ParamSource {
    pub fn dim(&self) -> usize {
        match self {
            ParamSource::Gaussian { spec, .. } => spec.dim(),
            ParamSource::MvNormal { mean, .. } => mean.len(),
            ParamSource::Uniform { ranges } => ranges.len(),
            ParamSource::Draws(d) => d.first().map_or(0, Vec::len),
        }
    }

    /// `n` model-input vectors.
    pub fn sample(&self, n: usize, rng: RngStream) -> Result<Vec<Vec<f64>>> {
        let mut r = rng.rng();
        match self {
            ParamSource::Gaussian { spec, nominal } => {
                spec.validate()?;
                if nominal.len() != spec.dim() {
                    return Err(IuqError::DimensionMismatch { what: "nominal", expected: spec.dim(), got: nominal.len() });
                }
                let sd = spec.sd();
                Ok((0..n)
                    .map(|_| {
                        let theta: Vec<f64> = spec
                            .mean
                            .iter()
                            .zip(&sd)
                            .map(|(m, s)| m + s * r.sample::<f64, _>(rand_distr::StandardNormal))
                            .collect();
                        spec.to_input(nominal, &theta)
                    })
                    .collect())
            }
            ParamSource::MvNormal { mean, cov } => {
                let m = draw_mvn(mean, cov, &mut r, n)?;
                Ok((0..n).map(|k| m.row(k).iter().copied().collect()).collect())
            }
            ParamSource::Uniform { ranges } => {
                if ranges.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
                    return Err(IuqError::invalid("uniform ranges must be finite with lo <= hi"));
                }
                Ok((0..n).map(|_| ranges.iter().map(|(lo, hi)| lo + (hi - lo) * r.random::<f64>()).collect()).collect())
            }
            ParamSource::Draws(d) => {
                if d.is_empty() {
                    return Err(IuqError::invalid("no posterior draws to propagate"));
                }
                if d.len() <= n {
                    return Ok(d.clone());
                }
                Ok((0..n).map(|k| d[k * d.len() / n].clone()).collect())
            }
        }
    }
}

/// Percentile band of one design's QoIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub design_label: String,
    pub times: Option<Vec<f64>>,
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuqBands {
    pub bands: Vec<Band>,
    pub n_samples: usize,
    pub n_failed: usize,
}

/// Bands for model-input draws already in hand; one draw per row.
pub fn bands_from_inputs(model: &dyn Model, inputs: &[Vec<f64>], designs: &[(String, DesignPoint)]) -> Result<FuqBands> {
    if let Some(bad) = inputs.iter().find(|v| v.len() != model.param_dim()) {
        return Err(IuqError::DimensionMismatch { what: "propagated parameter vector", expected: model.param_dim(), got: bad.len() });
    }
    // One task per draw; each evaluates every design.
    let runs: Vec<Vec<Option<crate::model::QoiVector>>> = inputs
        .par_iter()
        .map(|theta| designs.iter().map(|(_, d)| evaluate(model, &d.values, theta).ok()).collect())
        .collect();
    let total = inputs.len() * designs.len();
    let failed = runs.iter().flatten().filter(|r| r.is_none()).count();
    if failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(IuqError::TooManyFailures { failed, total });
    }
    let mut bands = Vec::with_capacity(designs.len());
    for (k, (label, d)) in designs.iter().enumerate() {
        let ok: Vec<&crate::model::QoiVector> = runs.iter().filter_map(|r| r[k].as_ref()).collect();
        let first = ok.first().ok_or_else(|| IuqError::ModelFailure {
            model: model.name().to_string(),
            x: d.values.clone(),
            theta: Vec::new(),
            reason: "every propagated sample failed".into(),
        })?;
        let n_out = first.len();
        let mut lower = Vec::with_capacity(n_out);
        let mut median = Vec::with_capacity(n_out);
        let mut upper = Vec::with_capacity(n_out);
        for j in 0..n_out {
            let mut v: Vec<f64> = ok.iter().map(|q| q.values[j]).collect();
            v.sort_by(f64::total_cmp);
            lower.push(quantile_sorted(&v, BAND_LEVELS[0]));
            median.push(quantile_sorted(&v, BAND_LEVELS[1]));
            upper.push(quantile_sorted(&v, BAND_LEVELS[2]));
        }
        bands.push(Band { design_label: label.clone(), times: first.times.clone(), lower, median, upper });
    }
    Ok(FuqBands { bands, n_samples: inputs.len(), n_failed: failed })
}

/// Samples `source`, runs the model at every design and returns 2.5/50/97.5% bands.
pub fn forward_uq(
    model: &dyn Model,
    source: &ParamSource,
    designs: &[(String, DesignPoint)],
    n_samples: usize,
    rng: RngStream,
) -> Result<FuqBands> {
    if n_samples < MIN_FUQ_SAMPLES {
        return Err(IuqError::invalid(format!("forward UQ needs at least {MIN_FUQ_SAMPLES} samples")));
    }
    if source.dim() != model.param_dim() {
        return Err(IuqError::DimensionMismatch { what: "parameter source", expected: model.param_dim(), got: source.dim() });
    }
    let inputs = source.sample(n_samples, rng)?;
    bands_from_inputs(model, &inputs, designs)
}

/// `(label, design)` pairs of a record set, the alignment key for bands.
pub fn record_designs(records: &[ExperimentRecord]) -> Vec<(String, DesignPoint)> {
    records.iter().map(|r| (r.label.clone(), r.design.clone())).collect()
}

/// Uniform samples on the unit cube, stratified per coordinate.
pub fn unit_design(n: usize, dim: usize, rng: RngStream) -> Vec<Vec<f64>> {
    latin_hypercube(n, dim, &mut rng.rng())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiCoverage {
    pub qoi_label: String,
    pub inside: usize,
    pub total: usize,
    pub fraction: f64,
    pub mean_band_width: f64,
    pub max_band_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordCoverage {
    pub design_label: String,
    pub inside: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub per_qoi: Vec<QoiCoverage>,
    pub per_record: Vec<RecordCoverage>,
    pub inside: usize,
    pub total: usize,
    pub fraction: f64,
    pub target: f64,
    pub pass: bool,
}

/// Where each data point sits relative to its band: -1 below, 0 inside, +1 above.
pub fn escapes(bands: &FuqBands, records: &[ExperimentRecord]) -> Result<Vec<Vec<i8>>> {
    if bands.bands.len() != records.len() {
        return Err(IuqError::DimensionMismatch { what: "bands vs experiments", expected: records.len(), got: bands.bands.len() });
    }
    bands
        .bands
        .iter()
        .zip(records)
        .map(|(b, r)| {
            if b.design_label != r.label {
                return Err(IuqError::invalid(format!("band `{}` is not aligned with experiment `{}`", b.design_label, r.label)));
            }
            if b.lower.len() != r.observed.len() {
                return Err(IuqError::DimensionMismatch { what: "band length", expected: r.observed.len(), got: b.lower.len() });
            }
            Ok(r.observed
                .values
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    if *v < b.lower[j] {
                        -1
                    } else if *v > b.upper[j] {
                        1
                    } else {
                        0
                    }
                })
                .collect())
        })
        .collect()
}

/// Pointwise coverage of the data by the bands, per QoI, per record and overall.
pub fn envelope_check(model: &dyn Model, bands: &FuqBands, records: &[ExperimentRecord], target: f64) -> Result<EnvelopeReport> {
    if !(0.0..=1.0).contains(&target) {
        return Err(IuqError::invalid("coverage target must lie in [0, 1]"));
    }
    let pos = escapes(bands, records)?;
    let mut per_qoi: Vec<QoiCoverage> = Vec::new();
    let mut widths: Vec<Vec<f64>> = Vec::new();
    let mut per_record = Vec::with_capacity(records.len());
    for ((b, r), p) in bands.bands.iter().zip(records).zip(&pos) {
        for (j, s) in p.iter().enumerate() {
            let label = super::data::qoi_label(model, j, p.len());
            let k = match per_qoi.iter().position(|q| q.qoi_label == label) {
                Some(k) => k,
                None => {
                    per_qoi.push(QoiCoverage { qoi_label: label, inside: 0, total: 0, fraction: 0.0, mean_band_width: 0.0, max_band_width: 0.0 });
                    widths.push(Vec::new());
                    per_qoi.len() - 1
                }
            };
            per_qoi[k].total += 1;
            per_qoi[k].inside += usize::from(*s == 0);
            widths[k].push(b.upper[j] - b.lower[j]);
        }
        let inside = p.iter().filter(|s| **s == 0).count();
        per_record.push(RecordCoverage { design_label: r.label.clone(), inside, total: p.len(), fraction: ratio(inside, p.len()) });
    }
    for (q, w) in per_qoi.iter_mut().zip(&widths) {
        q.fraction = ratio(q.inside, q.total);
        q.mean_band_width = w.iter().sum::<f64>() / w.len() as f64;
        q.max_band_width = w.iter().copied().fold(0.0, f64::max);
    }
    let inside = per_record.iter().map(|r| r.inside).sum();
    let total = per_record.iter().map(|r| r.total).sum();
    let fraction = ratio(inside, total);
    Ok(EnvelopeReport { per_qoi, per_record, inside, total, fraction, target, pass: fraction >= target })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_synthetic_experiments, AffineModel};
    use nalgebra::{DMatrix, DVector};

    fn affine() -> AffineModel {
        AffineModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]), DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), DVector::from_vec(vec![0.2, -1.0]))
            .unwrap()
    }

    fn designs(n: usize) -> Vec<(String, DesignPoint)> {
        (0..n).map(|k| (format!("d{k}"), DesignPoint::unlabeled(vec![k as f64]))).collect()
    }

    #[test]
    fn zero_variance_bands_collapse() {
        let m = affine();
        let spec = GaussianParamSpec::additive(vec![0.3, -0.2], vec![0.0, 0.0]).unwrap();
        let src = ParamSource::Gaussian { spec, nominal: vec![0.0, 0.0] };
        let b = forward_uq(&m, &src, &designs(3), 200, RngStream::new(1)).unwrap();
        for (k, band) in b.bands.iter().enumerate() {
            let y = evaluate(&m, &[k as f64], &[0.3, -0.2]).unwrap();
            assert_eq!(band.lower, y.values);
            assert_eq!(band.median, y.values);
            assert_eq!(band.upper, y.values);
        }
    }

    #[test]
    fn affine_band_matches_analytic_half_width() {
        let m = affine();
        let var = [0.04, 0.09];
        let spec = GaussianParamSpec::additive(vec![0.0, 0.0], var.to_vec()).unwrap();
        let src = ParamSource::Gaussian { spec, nominal: vec![0.0, 0.0] };
        let b = forward_uq(&m, &src, &designs(2), 10_000, RngStream::new(7)).unwrap();
        let s = &m.sensitivity;
        for band in &b.bands {
            for j in 0..2 {
                let sd = (s[(j, 0)].powi(2) * var[0] + s[(j, 1)].powi(2) * var[1]).sqrt();
                let half = 0.5 * (band.upper[j] - band.lower[j]);
                assert!((half / (1.96 * sd) - 1.0).abs() < 0.05, "half {half} vs {}", 1.96 * sd);
            }
        }
    }

    #[test]
    fn thinned_draws_are_stable() {
        let m = affine();
        let cov = CovMatrix::from_diag(&[0.04, 0.01]);
        let mut r = RngStream::new(11).rng();
        let draws = draw_mvn(&[1.0, 2.0], &cov, &mut r, 50_000).unwrap();
        let rows: Vec<Vec<f64>> = (0..draws.nrows()).map(|k| draws.row(k).iter().copied().collect()).collect();
        let src = ParamSource::Draws(rows);
        let few = forward_uq(&m, &src, &designs(2), 500, RngStream::new(0)).unwrap();
        let many = forward_uq(&m, &src, &designs(2), 5000, RngStream::new(0)).unwrap();
        for (a, b) in few.bands.iter().zip(&many.bands) {
            for j in 0..2 {
                assert!((a.upper[j] / b.upper[j] - 1.0).abs() < 0.03);
                assert!((a.lower[j] / b.lower[j] - 1.0).abs() < 0.03);
            }
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let m = affine();
        let src = ParamSource::Uniform { ranges: vec![(0.0, 1.0); 2] };
        assert!(forward_uq(&m, &src, &designs(1), 199, RngStream::new(0)).is_err());
    }

    #[test]
    fn failures_beyond_one_percent_abort() {
        let m = crate::model::FnModel::scalar("sqrt", 1, vec![1.0], |_x: &[f64], t: &[f64]| vec![t[0].sqrt()]);
        let src = ParamSource::Uniform { ranges: vec![(-0.1, 1.0)] };
        let err = forward_uq(&m, &src, &designs(1), 1000, RngStream::new(2)).unwrap_err();
        assert!(matches!(err, IuqError::TooManyFailures { .. }), "{err}");
    }

    #[test]
    fn wide_and_collapsed_bands() {
        let m = affine();
        let truth = GaussianParamSpec::additive(vec![0.0, 0.0], vec![0.01, 0.01]).unwrap();
        let d: Vec<DesignPoint> = designs(20).into_iter().map(|(_, d)| d).collect();
        let recs = generate_synthetic_experiments(&m, &truth, &d, &[0.1], RngStream::new(5)).unwrap();
        let mk = |lo: f64, hi: f64, collapse: bool| FuqBands {
            bands: recs
                .iter()
                .map(|r| {
                    let y = evaluate(&m, &r.design.values, &[0.0, 0.0]).unwrap().values;
                    let (l, u) = if collapse { (y.clone(), y.clone()) } else { (vec![lo; 2], vec![hi; 2]) };
                    Band { design_label: r.label.clone(), times: None, lower: l, median: y, upper: u }
                })
                .collect(),
            n_samples: 0,
            n_failed: 0,
        };
        let wide = envelope_check(&m, &mk(-1e300, 1e300, false), &recs, 0.95).unwrap();
        assert_eq!(wide.fraction, 1.0);
        assert!(wide.pass);
        assert_eq!(wide.per_qoi.len(), 2);
        let narrow = envelope_check(&m, &mk(0.0, 0.0, true), &recs, 0.95).unwrap();
        assert!(narrow.fraction < 0.05);
        assert!(!narrow.pass);
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let m = affine();
        let b = FuqBands { bands: vec![], n_samples: 0, n_failed: 0 };
        let rec = ExperimentRecord::new("d0", DesignPoint::unlabeled(vec![0.0]), crate::model::QoiVector::scalars(vec![0.0, 0.0]), vec![0.0, 0.0]).unwrap();
        assert!(envelope_check(&m, &b, &[rec], 0.95).is_err());
    }

    #[test]
    fn truth_spec_baseline_covers_noise_free_data() {
        let m = affine();
        let truth = GaussianParamSpec::additive(vec![0.1, -0.1], vec![0.02, 0.05]).unwrap();
        let d: Vec<DesignPoint> = designs(400).into_iter().map(|(_, d)| d).collect();
        let recs = generate_synthetic_experiments(&m, &truth, &d, &[0.0], RngStream::new(9)).unwrap();
        let src = ParamSource::Gaussian { spec: truth, nominal: vec![0.0, 0.0] };
        let b = forward_uq(&m, &src, &record_designs(&recs), 4000, RngStream::new(10)).unwrap();
        let env = envelope_check(&m, &b, &recs, 0.95).unwrap();
        // 800 points at nominal 95%: binomial sd is about 0.8%.
        assert!(env.fraction >= 0.95 - 3.0 * 0.0077, "{}", env.fraction);
    }
}
