//! Empirical range adjustment: widen uniform input ranges until the
//! propagated band envelops the data.

use serde::{Deserialize, Serialize};

use super::fuq::{bands_from_inputs, escapes, record_designs, unit_design};
use crate::error::{IuqError, Result};
use crate::model::{finite_difference_sensitivity, ExperimentRecord, Model};
use crate::stats::RngStream;

pub const DEFAULT_SAMPLES_PER_ROUND: usize = 125;
pub const EXPANSION_FACTOR: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAdjustConfig {
    pub n_samples: usize,
    pub max_rounds: usize,
    /// Pointwise coverage fraction that ends the loop.
    pub target: f64,
    /// Distance from the initial centre to a bound is multiplied by this on expansion.
    pub factor: f64,
    pub fd_rel_step: f64,
}

impl Default for SampleAdjustConfig {
    fn default() -> Self {
        SampleAdjustConfig { n_samples: DEFAULT_SAMPLES_PER_ROUND, max_rounds: 10, target: 0.95, factor: EXPANSION_FACTOR, fd_rel_step: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustRound {
    pub round: usize,
    pub ranges: Vec<(f64, f64)>,
    pub coverage: f64,
    pub points_below: usize,
    pub points_above: usize,
    pub expanded_lower: Vec<usize>,
    pub expanded_upper: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAdjustResult {
    pub ranges: Vec<(f64, f64)>,
    pub center: Vec<f64>,
    pub rounds: Vec<AdjustRound>,
    pub converged: bool,
    pub target: f64,
}

fn map_unit(unit: &[Vec<f64>], ranges: &[(f64, f64)]) -> Vec<Vec<f64>> {
    unit.iter().map(|u| u.iter().zip(ranges).map(|(v, (lo, hi))| lo + v * (hi - lo)).collect()).collect()
}

/// Runs the adjustment loop.
///
/// Every round reuses one stratified unit-cube design mapped onto the current
/// ranges, so a change in coverage comes only from the change in ranges.
/// Where a data point lies above (below) its band, each input whose
/// finite-difference sensitivity at the range centre is positive has its
/// upper (lower) bound pushed out, and the reverse for negative
/// sensitivities. Bounds move away from the initial centre by `factor`.
pub fn sample_adjust_iuq(
    model: &dyn Model,
    records: &[ExperimentRecord],
    initial: &[(f64, f64)],
    config: &SampleAdjustConfig,
    rng: RngStream,
) -> Result<SampleAdjustResult> {
    let d = model.param_dim();
    if initial.len() != d {
        return Err(IuqError::DimensionMismatch { what: "initial ranges", expected: d, got: initial.len() });
    }
    if initial.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
        return Err(IuqError::invalid("initial ranges must be finite with lo < hi"));
    }
    if config.max_rounds == 0 {
        return Err(IuqError::invalid("max_rounds must be at least 1"));
    }
    if config.n_samples < 2 {
        return Err(IuqError::invalid("at least two samples per round are required"));
    }
    if !(config.factor > 1.0) {
        return Err(IuqError::invalid("expansion factor must exceed 1"));
    }
    if records.is_empty() {
        return Err(IuqError::invalid("at least one experiment is required"));
    }
    let center: Vec<f64> = initial.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    let unit = unit_design(config.n_samples, d, rng);
    let designs = record_designs(records);
    let mut ranges = initial.to_vec();
    let mut rounds = Vec::new();
    let mut converged = false;
    for round in 1..=config.max_rounds {
        let bands = bands_from_inputs(model, &map_unit(&unit, &ranges), &designs)?;
        let pos = escapes(&bands, records)?;
        let total: usize = pos.iter().map(Vec::len).sum();
        let below = pos.iter().flatten().filter(|s| **s < 0).count();
        let above = pos.iter().flatten().filter(|s| **s > 0).count();
        let coverage = (total - below - above) as f64 / total as f64;
        let mut log = AdjustRound { round, ranges: ranges.clone(), coverage, points_below: below, points_above: above, expanded_lower: vec![], expanded_upper: vec![] };
        if coverage >= config.target {
            rounds.push(log);
            converged = true;
            break;
        }
        if round == config.max_rounds {
            rounds.push(log);
            break;
        }
        let mid: Vec<f64> = ranges.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
        let mut up = vec![false; d];
        let mut down = vec![false; d];
        for (rec, p) in records.iter().zip(&pos) {
            if p.iter().all(|s| *s == 0) {
                continue;
            }
            let s = finite_difference_sensitivity(model, &rec.design.values, &mid, config.fd_rel_step)?;
            for (j, side) in p.iter().enumerate() {
                for i in 0..d {
                    let dir = f64::from(*side) * s.entries[(j, i)];
                    if dir > 0.0 {
                        up[i] = true;
                    } else if dir < 0.0 {
                        down[i] = true;
                    }
                }
            }
        }
        log.expanded_upper = (0..d).filter(|i| up[*i]).collect();
        log.expanded_lower = (0..d).filter(|i| down[*i]).collect();
        rounds.push(log);
        if !up.iter().chain(&down).any(|b| *b) {
            log::warn!("sample-adjust: escaping data have zero sensitivity to every input; stopping");
            break;
        }
        for i in 0..d {
            if up[i] {
                ranges[i].1 = center[i] + config.factor * (ranges[i].1 - center[i]);
            }
            if down[i] {
                ranges[i].0 = center[i] - config.factor * (center[i] - ranges[i].0);
            }
        }
    }
    if !converged {
        log::warn!("sample-adjust: coverage target {} not reached in {} rounds", config.target, rounds.len());
    }
    Ok(SampleAdjustResult { ranges, center, rounds, converged, target: config.target })
}

/// Pointwise coverage of `records` by the band from `ranges`, using the same
/// sample design the adjustment loop would use for `(n_samples, rng)`.
pub fn range_coverage(model: &dyn Model, records: &[ExperimentRecord], ranges: &[(f64, f64)], n_samples: usize, rng: RngStream) -> Result<f64> {
    let unit = unit_design(n_samples, model.param_dim(), rng);
    let bands = bands_from_inputs(model, &map_unit(&unit, ranges), &record_designs(records))?;
    let pos = escapes(&bands, records)?;
    let total: usize = pos.iter().map(Vec::len).sum();
    Ok(pos.iter().flatten().filter(|s| **s == 0).count() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DesignPoint, FnModel, QoiVector};
    use proptest::prelude::*;

    fn line() -> FnModel<impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync> {
        FnModel::scalar("line", 1, vec![1.0], |x: &[f64], t: &[f64]| vec![t[0] * (1.0 + x[0])])
    }

    fn records(values: &[f64]) -> Vec<ExperimentRecord> {
        values
            .iter()
            .enumerate()
            .map(|(k, v)| ExperimentRecord::new(format!("d{k}"), DesignPoint::unlabeled(vec![0.0]), QoiVector::scalars(vec![*v]), vec![0.0]).unwrap())
            .collect()
    }

    #[test]
    fn enveloped_data_leave_ranges_unchanged() {
        let m = line();
        let recs = records(&[0.9, 1.0, 1.1]);
        let r = sample_adjust_iuq(&m, &recs, &[(0.5, 1.5)], &SampleAdjustConfig::default(), RngStream::new(1)).unwrap();
        assert!(r.converged);
        assert_eq!(r.rounds.len(), 1);
        assert_eq!(r.ranges, vec![(0.5, 1.5)]);
    }

    #[test]
    fn only_upper_bound_expands_for_high_data() {
        let m = line();
        let recs = records(&[1.0, 2.4]);
        let r = sample_adjust_iuq(&m, &recs, &[(0.5, 1.5)], &SampleAdjustConfig { target: 1.0, ..Default::default() }, RngStream::new(2)).unwrap();
        assert!(r.converged);
        assert_eq!(r.ranges[0].0, 0.5);
        assert!(r.ranges[0].1 > 2.4);
        assert!(r.rounds.iter().all(|l| l.expanded_lower.is_empty()));
    }

    #[test]
    fn decreasing_model_expands_the_opposite_side() {
        let m = FnModel::scalar("neg", 1, vec![0.0], |_x: &[f64], t: &[f64]| vec![-t[0]]);
        let recs = records(&[-3.0]);
        let r = sample_adjust_iuq(&m, &recs, &[(-1.0, 1.0)], &SampleAdjustConfig { target: 1.0, ..Default::default() }, RngStream::new(3)).unwrap();
        assert!(r.converged);
        assert!(r.ranges[0].1 > 3.0);
        assert_eq!(r.ranges[0].0, -1.0);
    }

    #[test]
    fn unreachable_target_reports_non_converged() {
        let m = FnModel::scalar("flat", 1, vec![0.0], |_x: &[f64], _t: &[f64]| vec![0.0]);
        let recs = records(&[1.0]);
        let r = sample_adjust_iuq(&m, &recs, &[(-1.0, 1.0)], &SampleAdjustConfig::default(), RngStream::new(4)).unwrap();
        assert!(!r.converged);
        assert_eq!(r.ranges, vec![(-1.0, 1.0)]);
    }

    #[test]
    fn bad_inputs_rejected() {
        let m = line();
        let recs = records(&[1.0]);
        let cfg = SampleAdjustConfig::default();
        assert!(sample_adjust_iuq(&m, &recs, &[(1.0, 1.0)], &cfg, RngStream::new(0)).is_err());
        assert!(sample_adjust_iuq(&m, &recs, &[(0.0, f64::INFINITY)], &cfg, RngStream::new(0)).is_err());
        assert!(sample_adjust_iuq(&m, &recs, &[(0.0, 1.0)], &SampleAdjustConfig { max_rounds: 0, ..cfg }, RngStream::new(0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ranges_only_grow(lo in -2.0f64..0.9, width in 0.1f64..2.0, a in -6.0f64..6.0, b in -6.0f64..6.0, seed in 0u64..1000) {
            let m = line();
            let recs = records(&[a, b]);
            let r = sample_adjust_iuq(&m, &recs, &[(lo, lo + width)], &SampleAdjustConfig { max_rounds: 6, ..Default::default() }, RngStream::new(seed)).unwrap();
            for w in r.rounds.windows(2) {
                prop_assert!(w[1].ranges[0].0 <= w[0].ranges[0].0);
                prop_assert!(w[1].ranges[0].1 >= w[0].ranges[0].1);
            }
            prop_assert!(r.ranges[0].0 <= lo && r.ranges[0].1 >= lo + width);
        }
    }
}
