//! Coverage-rate quantification: per-run data coverage fractions, the
//! resulting pseudo-CDF over a one-parameter grid and its percentile bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IuqError, Result};
use crate::model::{evaluate, ExperimentRecord, Model};

pub const MONOTONE_BAND: f64 = 0.02;
pub const MIN_GRID_NODES: usize = 5;
pub const DEFAULT_LEVELS: (f64, f64) = (0.025, 0.975);

/// Fraction of data points strictly above the simulated value at the same index.
pub fn coverage_rate(sim: &[f64], data: &[f64]) -> Result<f64> {
    if sim.is_empty() || data.is_empty() {
        return Err(IuqError::invalid("coverage rate needs non-empty vectors"));
    }
    if sim.len() != data.len() {
        return Err(IuqError::DimensionMismatch { what: "coverage data", expected: sim.len(), got: data.len() });
    }
    let above = sim.iter().zip(data).filter(|(s, d)| d > s).count();
    Ok(above as f64 / sim.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub param: usize,
    pub theta: Vec<f64>,
    pub coverage: Vec<f64>,
    pub monotone: bool,
}

/// Monotone in either direction up to `band`.
pub fn is_monotone_within(p: &[f64], band: f64) -> bool {
    let non_decreasing = {
        let mut hi = f64::NEG_INFINITY;
        p.iter().all(|v| {
            hi = hi.max(*v);
            *v >= hi - band
        })
    };
    let non_increasing = {
        let mut lo = f64::INFINITY;
        p.iter().all(|v| {
            lo = lo.min(*v);
            *v <= lo + band
        })
    };
    non_decreasing || non_increasing
}

impl CoverageCurve {
    pub fn new(param: usize, theta: Vec<f64>, coverage: Vec<f64>) -> Result<Self> {
        if theta.len() != coverage.len() {
            return Err(IuqError::DimensionMismatch { what: "coverage values", expected: theta.len(), got: coverage.len() });
        }
        if theta.windows(2).any(|w| w[1] <= w[0]) {
            return Err(IuqError::invalid("theta grid must be strictly increasing"));
        }
        if coverage.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(IuqError::invalid("coverage values must lie in [0, 1]"));
        }
        let monotone = is_monotone_within(&coverage, MONOTONE_BAND);
        Ok(CoverageCurve { param, theta, coverage, monotone })
    }
}

fn model_input(model: &dyn Model, param: usize, value: f64) -> Vec<f64> {
    let mut theta = model.nominal();
    theta[param] = value;
    theta
}

fn averaged_coverage(model: &dyn Model, experiments: &[ExperimentRecord], theta: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for rec in experiments {
        let y = evaluate(model, &rec.design.values, theta)?;
        total += coverage_rate(&y.values, &rec.observed.values)?;
    }
    Ok(total / experiments.len() as f64)
}

/// Coverage averaged over experiments at each grid value of parameter `param`
/// (other parameters at their nominal values).
pub fn dipe_pseudo_cdf(model: &dyn Model, experiments: &[ExperimentRecord], param: usize, grid: &[f64]) -> Result<CoverageCurve> {
    if grid.len() < MIN_GRID_NODES {
        return Err(IuqError::invalid(format!("theta grid needs at least {MIN_GRID_NODES} nodes")));
    }
    if experiments.is_empty() {
        return Err(IuqError::invalid("at least one experiment is required"));
    }
    if param >= model.param_dim() {
        return Err(IuqError::invalid(format!("parameter index {param} out of range")));
    }
    let coverage = grid
        .par_iter()
        .map(|v| averaged_coverage(model, experiments, &model_input(model, param, *v)))
        .collect::<Result<Vec<_>>>()?;
    let curve = CoverageCurve::new(param, grid.to_vec(), coverage)?;
    if !curve.monotone {
        log::warn!("dipe: pseudo-CDF for parameter {param} is not monotone");
    }
    Ok(curve)
}

/// Parameter value where the curve equals `level`, by linear interpolation.
fn invert(curve: &CoverageCurve, level: f64) -> Result<f64> {
    let p = &curve.coverage;
    let t = &curve.theta;
    let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if level < lo || level > hi {
        return Err(IuqError::LevelNotBracketed { level, min: lo, max: hi });
    }
    let mut hits: Vec<f64> = Vec::new();
    for k in 0..p.len() - 1 {
        let (a, b) = (p[k] - level, p[k + 1] - level);
        if a == 0.0 {
            hits.push(t[k]);
        }
        if b == 0.0 {
            hits.push(t[k + 1]);
        } else if a != 0.0 && a.signum() != b.signum() {
            hits.push(t[k] + (t[k + 1] - t[k]) * a / (a - b));
        }
    }
    hits.sort_by(f64::total_cmp);
    hits.dedup();
    // Distinct crossings form one region only if every node between them sits on the level.
    for w in hits.windows(2) {
        let gap = t.iter().zip(p).any(|(x, v)| *x > w[0] && *x < w[1] && *v != level);
        if gap {
            return Err(IuqError::NonInjective { level });
        }
    }
    Ok(0.5 * (hits[0] + hits[hits.len() - 1]))
}

/// Parameter values at the two coverage levels, returned in ascending order.
pub fn dipe_bounds(curve: &CoverageCurve, levels: (f64, f64)) -> Result<(f64, f64)> {
    if !curve.monotone {
        return Err(IuqError::NonMonotone);
    }
    if !(0.0..=1.0).contains(&levels.0) || !(0.0..=1.0).contains(&levels.1) {
        return Err(IuqError::invalid("levels must lie in [0, 1]"));
    }
    let a = invert(curve, levels.0)?;
    let b = invert(curve, levels.1)?;
    Ok((a.min(b), a.max(b)))
}

/// Coverage over a two-parameter grid. This is a raster of coverage values,
/// not a joint CDF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRaster {
    pub params: (usize, usize),
    pub first_grid: Vec<f64>,
    pub second_grid: Vec<f64>,
    /// `values[a][b]` at `(first_grid[a], second_grid[b])`.
    pub values: Vec<Vec<f64>>,
    pub note: String,
}

pub fn coverage_raster(
    model: &dyn Model,
    experiments: &[ExperimentRecord],
    first: (usize, &[f64]),
    second: (usize, &[f64]),
) -> Result<CoverageRaster> {
    if first.0 == second.0 || first.0 >= model.param_dim() || second.0 >= model.param_dim() {
        return Err(IuqError::invalid("raster needs two distinct valid parameter indices"));
    }
    if experiments.is_empty() {
        return Err(IuqError::invalid("at least one experiment is required"));
    }
    let values = first
        .1
        .par_iter()
        .map(|a| {
            second
                .1
                .iter()
                .map(|b| {
                    let mut theta = model.nominal();
                    theta[first.0] = *a;
                    theta[second.0] = *b;
                    averaged_coverage(model, experiments, &theta)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageRaster {
        params: (first.0, second.0),
        first_grid: first.1.to_vec(),
        second_grid: second.1.to_vec(),
        values,
        note: "coverage raster, not a joint CDF".into(),
    })
}

/// Fraction of data points within `2ε` of the simulation, i.e. whose
/// above/below status could flip under measurement error. Diagnostic only.
pub fn flip_fraction(sim: &[f64], data: &[f64], noise_sd: &[f64]) -> Result<f64> {
    if sim.len() != data.len() || noise_sd.len() != data.len() {
        return Err(IuqError::DimensionMismatch { what: "flip diagnostic inputs", expected: sim.len(), got: data.len().min(noise_sd.len()) });
    }
    if sim.is_empty() {
        return Err(IuqError::invalid("flip diagnostic needs non-empty vectors"));
    }
    let n = sim.iter().zip(data).zip(noise_sd).filter(|((s, d), e)| (*d - *s).abs() <= 2.0 * **e).count();
    Ok(n as f64 / sim.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineModel, DesignPoint, QoiVector};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage_rate(&[0.0; 3], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(coverage_rate(&[5.0; 3], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let data: Vec<f64> = (0..10).map(|k| k as f64).collect();
        assert_eq!(coverage_rate(&[4.5; 10], &data).unwrap(), 0.5);
        // ties count as not above
        assert_eq!(coverage_rate(&[1.0], &[1.0]).unwrap(), 0.0);
        assert!(coverage_rate(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn mirrored_coverage_complements(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..50)) {
            prop_assume!(pairs.iter().all(|(s, d)| s != d));
            let sim: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let data: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
            let total = coverage_rate(&sim, &data).unwrap() + coverage_rate(&neg(&sim), &neg(&data)).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_curve_bounds() {
        let t: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let c = CoverageCurve::new(0, t.clone(), t).unwrap();
        let (lo, hi) = dipe_bounds(&c, DEFAULT_LEVELS).unwrap();
        assert!((lo - 0.025).abs() < 1e-12 && (hi - 0.975).abs() < 1e-12);
    }

    #[test]
    fn non_monotone_refused() {
        let c = CoverageCurve::new(0, vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![0.0, 0.6, 0.2, 0.8, 1.0]).unwrap();
        assert!(!c.monotone);
        assert_eq!(dipe_bounds(&c, DEFAULT_LEVELS), Err(IuqError::NonMonotone));
    }

    #[test]
    fn small_wiggles_tolerated() {
        assert!(is_monotone_within(&[0.0, 0.3, 0.29, 0.5, 1.0], 0.02));
        assert!(!is_monotone_within(&[0.0, 0.3, 0.25, 0.5, 1.0], 0.02));
        assert!(is_monotone_within(&[1.0, 0.5, 0.51, 0.0], 0.02));
    }

    #[test]
    fn unbracketed_level_reports_range() {
        let c = CoverageCurve::new(0, vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![0.1, 0.3, 0.5, 0.7, 0.9]).unwrap();
        match dipe_bounds(&c, DEFAULT_LEVELS) {
            Err(IuqError::LevelNotBracketed { min, max, .. }) => assert_eq!((min, max), (0.1, 0.9)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn disjoint_crossings_refused() {
        // plateau wiggle inside the band crossing the level twice in separate segments
        let c = CoverageCurve::new(0, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], vec![0.0, 0.03, 0.02, 0.03, 0.5, 1.0]).unwrap();
        assert!(c.monotone);
        assert_eq!(dipe_bounds(&c, (0.025, 0.975)), Err(IuqError::NonInjective { level: 0.025 }));
    }

    fn shift_model(j: usize) -> AffineModel {
        AffineModel::linear(DMatrix::from_element(j, 1, 1.0), DVector::zeros(j)).unwrap()
    }

    fn record(values: Vec<f64>) -> ExperimentRecord {
        let n = values.len();
        ExperimentRecord::new("e", DesignPoint::unlabeled(vec![0.0]), QoiVector::scalars(values), vec![0.0; n]).unwrap()
    }

    #[test]
    fn duplicate_experiments_leave_curve_unchanged() {
        let m = shift_model(4);
        let r = record(vec![0.1, -0.3, 0.7, 0.2]);
        let grid: Vec<f64> = (0..9).map(|k| -1.0 + 0.25 * k as f64).collect();
        let one = dipe_pseudo_cdf(&m, std::slice::from_ref(&r), 0, &grid).unwrap();
        let two = dipe_pseudo_cdf(&m, &[r.clone(), r], 0, &grid).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn all_simulations_above_data_give_zero_curve() {
        let m = shift_model(3);
        let grid: Vec<f64> = (0..6).map(|k| 10.0 + k as f64).collect();
        let c = dipe_pseudo_cdf(&m, &[record(vec![0.0, 1.0, 2.0])], 0, &grid).unwrap();
        assert!(c.coverage.iter().all(|p| *p == 0.0));
        assert!(dipe_pseudo_cdf(&m, &[record(vec![0.0, 1.0, 2.0])], 0, &grid[..4]).is_err());
    }

    #[test]
    fn raster_is_labelled() {
        let m = AffineModel::linear(DMatrix::from_element(2, 2, 1.0), DVector::zeros(2)).unwrap();
        let g = [0.0, 0.5, 1.0];
        let r = coverage_raster(&m, &[record(vec![0.4, 1.2])], (0, &g), (1, &g)).unwrap();
        assert_eq!(r.values.len(), 3);
        assert!(r.note.contains("not a joint CDF"));
        assert_eq!(r.values[0][0], 1.0);
        assert_eq!(r.values[2][2], 0.0);
    }

    #[test]
    fn flip_fraction_counts_close_points() {
        let f = flip_fraction(&[0.0; 4], &[0.05, 0.5, -0.1, 3.0], &[0.05; 4]).unwrap();
        assert_eq!(f, 0.5);
    }
}
