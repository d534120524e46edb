//! FFT-based accuracy metrics (average amplitude) and threshold-crossing
//! range quantification for time-dependent QoIs.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{IuqError, Result};
use crate::model::{evaluate, ExperimentRecord, Model, QoiVector};

pub const DEFAULT_ETA: f64 = 0.22;
pub const MAX_EXPONENT: u32 = 14;
pub const MIN_EXPONENT: u32 = 3;
pub const DEFAULT_GRID_POINTS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSignal {
    pub label: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl TimeSeriesSignal {
    pub fn new(label: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let s = TimeSeriesSignal { label: label.into(), times, values };
        s.validate()?;
        Ok(s)
    }

    pub fn from_qoi(label: impl Into<String>, q: &QoiVector) -> Result<Self> {
        let times = q.times.clone().ok_or_else(|| IuqError::invalid("QoI vector has no time stamps"))?;
        Self::new(label, times, q.values.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() < 2 {
            return Err(IuqError::invalid(format!("signal `{}` needs at least 2 points", self.label)));
        }
        if self.times.len() != self.values.len() {
            return Err(IuqError::DimensionMismatch { what: "signal values", expected: self.times.len(), got: self.values.len() });
        }
        if self.times.iter().chain(&self.values).any(|v| !v.is_finite()) {
            return Err(IuqError::invalid(format!("signal `{}` has non-finite entries", self.label)));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(IuqError::invalid(format!("signal `{}` times must be strictly increasing", self.label)));
        }
        Ok(())
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Piecewise-linear value at `t` (clamped to the end values outside the span).
    pub fn value_at(&self, t: f64) -> f64 {
        let ts = &self.times;
        if t <= ts[0] {
            return self.values[0];
        }
        if t >= self.end() {
            return *self.values.last().unwrap();
        }
        let k = ts.partition_point(|v| *v <= t);
        let (t0, t1) = (ts[k - 1], ts[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    fn sample_uniform(&self, t0: f64, t1: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| {
                if k == n - 1 {
                    self.value_at(t1)
                } else {
                    self.value_at(t0 + (t1 - t0) * k as f64 / (n - 1) as f64)
                }
            })
            .collect()
    }
}

/// Smallest `m` with `2^m ≥ n_samples`, within `[3, 14]`.
pub fn default_exponent(n_samples: usize) -> u32 {
    let mut m = MIN_EXPONENT;
    while (1usize << m) < n_samples && m < MAX_EXPONENT {
        m += 1;
    }
    m
}

/// Linear interpolation onto `2^m` uniformly spaced points over the signal span.
pub fn resample_pow2(signal: &TimeSeriesSignal, m: u32) -> Result<TimeSeriesSignal> {
    signal.validate()?;
    if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&m) {
        return Err(IuqError::invalid(format!("exponent m must lie in [{MIN_EXPONENT}, {MAX_EXPONENT}]")));
    }
    let n = 1usize << m;
    let (t0, t1) = (signal.start(), signal.end());
    let times: Vec<f64> =
        (0..n).map(|k| if k == n - 1 { t1 } else { t0 + (t1 - t0) * k as f64 / (n - 1) as f64 }).collect();
    let values = signal.sample_uniform(t0, t1, n);
    Ok(TimeSeriesSignal { label: signal.label.clone(), times, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralComparison {
    pub aa: f64,
    pub n_points: usize,
    /// `Σ |F(model - data)|`
    pub numerator: f64,
    /// `Σ |F(data)|`
    pub denominator: f64,
}

fn spectrum_abs_sum(values: &[f64]) -> f64 {
    let mut buf: Vec<Complex<f64>> = values.iter().map(|v| Complex::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf.iter().map(|c| c.norm()).sum()
}

/// Average amplitude of `model` against `data` over their common time window.
///
/// `m = None` picks the next power of two above the larger sample count.
pub fn average_amplitude(data: &TimeSeriesSignal, model: &TimeSeriesSignal, m: Option<u32>) -> Result<SpectralComparison> {
    data.validate()?;
    model.validate()?;
    let t0 = data.start().max(model.start());
    let t1 = data.end().min(model.end());
    if !(t1 > t0) {
        return Err(IuqError::invalid("signals share no common time window"));
    }
    let m = m.unwrap_or_else(|| default_exponent(data.times.len().max(model.times.len())));
    if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&m) {
        return Err(IuqError::invalid(format!("exponent m must lie in [{MIN_EXPONENT}, {MAX_EXPONENT}]")));
    }
    let n = 1usize << m;
    let e = data.sample_uniform(t0, t1, n);
    let y = model.sample_uniform(t0, t1, n);
    let err: Vec<f64> = y.iter().zip(&e).map(|(a, b)| a - b).collect();
    let denominator = spectrum_abs_sum(&e);
    if !(denominator > 0.0) {
        return Err(IuqError::ZeroSpectrum);
    }
    let numerator = spectrum_abs_sum(&err);
    Ok(SpectralComparison { aa: numerator / denominator, n_points: n, numerator, denominator })
}

/// Weighted mean `Σ w_z AA_z` with `w_z = W_z / Σ W`.
pub fn global_aa(aas: &[f64], weights: &[f64]) -> Result<f64> {
    if aas.is_empty() {
        return Err(IuqError::invalid("global AA needs at least one QoI"));
    }
    if aas.len() != weights.len() {
        return Err(IuqError::DimensionMismatch { what: "QoI weights", expected: aas.len(), got: weights.len() });
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(IuqError::invalid("QoI weights must be positive and finite"));
    }
    let total: f64 = weights.iter().sum();
    Ok(aas.iter().zip(weights).map(|(a, w)| a * w / total).sum())
}

/// `CR = (AAG_SE + AAG_SR - AAG_RE) / (1 - AAG_SE)`.
pub fn criterion_cr(aag_se: f64, aag_sr: f64, aag_re: f64) -> Result<f64> {
    if [aag_se, aag_sr, aag_re].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(IuqError::invalid("AAG values must be finite and non-negative"));
    }
    if aag_se >= 1.0 {
        return Err(IuqError::invalid(format!("AAG_SE = {aag_se} >= 1 makes the criterion denominator non-positive")));
    }
    Ok((aag_se + aag_sr - aag_re) / (1.0 - aag_se))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundStatus {
    BothBounds,
    UpperOnly,
    LowerOnly,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub status: BoundStatus,
    /// Crossings further from the nominal than the reported ones.
    pub outer_crossings: usize,
    pub advisory: Option<String>,
}

fn crossing(a: (f64, f64), b: (f64, f64), eta: f64) -> Option<f64> {
    let (fa, fb) = (a.1 - eta, b.1 - eta);
    if fb == 0.0 {
        return Some(b.0);
    }
    if fa == 0.0 {
        return None;
    }
    if fa.signum() != fb.signum() {
        Some(a.0 + (b.0 - a.0) * fa / (fa - fb))
    } else {
        None
    }
}

/// Nearest crossings of `cr` with `eta` on either side of `nominal`.
///
/// `grid` must be ascending and bracket `nominal`; the criterion at the
/// nominal is linearly interpolated when it is not a grid node.
pub fn extract_bounds(grid: &[f64], cr: &[f64], nominal: f64, eta: f64) -> Result<BoundResult> {
    if grid.len() != cr.len() {
        return Err(IuqError::DimensionMismatch { what: "criterion values", expected: grid.len(), got: cr.len() });
    }
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(IuqError::invalid("grid must hold at least 2 strictly ascending values"));
    }
    if nominal < grid[0] || nominal > *grid.last().unwrap() {
        return Err(IuqError::invalid("grid must bracket the nominal value"));
    }
    if cr.iter().any(|v| !v.is_finite()) || !eta.is_finite() {
        return Err(IuqError::invalid("criterion values and eta must be finite"));
    }
    let k = grid.partition_point(|v| *v < nominal);
    let nominal_cr = if grid[k] == nominal {
        cr[k]
    } else {
        let (t0, t1) = (grid[k - 1], grid[k]);
        cr[k - 1] + (cr[k] - cr[k - 1]) * (nominal - t0) / (t1 - t0)
    };
    let centre = (nominal, nominal_cr);

    let scan = |points: Vec<(f64, f64)>| -> (Option<f64>, usize) {
        let mut prev = centre;
        let mut found = None;
        let mut extra = 0;
        for p in points {
            if p.0 == nominal {
                continue;
            }
            if let Some(c) = crossing(prev, p, eta) {
                if found.is_none() {
                    found = Some(c);
                } else {
                    extra += 1;
                }
            }
            prev = p;
        }
        (found, extra)
    };
    let right: Vec<(f64, f64)> = (k..grid.len()).map(|i| (grid[i], cr[i])).collect();
    let left: Vec<(f64, f64)> = (0..k).rev().map(|i| (grid[i], cr[i])).collect();
    let (upper, extra_u) = scan(right);
    let (lower, extra_l) = scan(left);
    let outer_crossings = extra_u + extra_l;
    if outer_crossings > 0 {
        log::info!("iprem: {outer_crossings} further crossing(s) beyond the nearest ones ignored");
    }
    let status = match (lower, upper) {
        (Some(_), Some(_)) => BoundStatus::BothBounds,
        (None, Some(_)) => BoundStatus::UpperOnly,
        (Some(_), None) => BoundStatus::LowerOnly,
        (None, None) => BoundStatus::None,
    };
    let advisory = match status {
        BoundStatus::None => Some(format!("criterion never crosses eta = {eta} on the grid; reduce eta or widen the grid")),
        BoundStatus::UpperOnly => Some("no lower crossing on the grid; extend the grid downward or reduce eta".to_string()),
        BoundStatus::LowerOnly => Some("no upper crossing on the grid; extend the grid upward or reduce eta".to_string()),
        BoundStatus::BothBounds => None,
    };
    Ok(BoundResult { lower, upper, status, outer_crossings, advisory })
}

/// `n` evenly spaced values over `[lo, hi]` with `nominal` inserted if absent.
pub fn default_grid(lo: f64, hi: f64, nominal: f64, n: usize) -> Result<Vec<f64>> {
    if !(hi > lo) || n < 2 {
        return Err(IuqError::invalid("grid needs hi > lo and at least 2 points"));
    }
    if nominal < lo || nominal > hi {
        return Err(IuqError::invalid("grid range must bracket the nominal value"));
    }
    let mut g: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
    g[n - 1] = hi;
    if !g.iter().any(|v| (*v - nominal).abs() <= 1e-12 * (hi - lo)) {
        g.push(nominal);
        g.sort_by(f64::total_cmp);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpremConfig {
    pub eta: f64,
    /// Weight per QoI signal; equal weights when empty.
    pub weights: Vec<f64>,
    pub exponent: Option<u32>,
}

impl Default for IpremConfig {
    fn default() -> Self {
        IpremConfig { eta: DEFAULT_ETA, weights: Vec::new(), exponent: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterGrid {
    pub index: usize,
    /// Ascending model-input values for this parameter.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridNode {
    pub value: f64,
    pub aag_se: f64,
    pub aag_sr: f64,
    pub cr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpremRange {
    pub index: usize,
    pub nominal: f64,
    pub aag_re: f64,
    pub nodes: Vec<GridNode>,
    pub bounds: BoundResult,
}

fn aag_between(data: &[TimeSeriesSignal], model: &[TimeSeriesSignal], weights: &[f64], m: Option<u32>) -> Result<f64> {
    if data.len() != model.len() {
        return Err(IuqError::DimensionMismatch { what: "QoI signals", expected: data.len(), got: model.len() });
    }
    let aas = data.iter().zip(model).map(|(d, s)| average_amplitude(d, s, m).map(|c| c.aa)).collect::<Result<Vec<_>>>()?;
    global_aa(&aas, weights)
}

/// One-at-a-time criterion scan and bound extraction.
///
/// `run` maps a full model-input vector to one signal per QoI, in the same
/// order as `data`. Grid nodes are evaluated in parallel.
pub fn iprem_quantify<F>(
    run: F,
    data: &[TimeSeriesSignal],
    nominal: &[f64],
    grids: &[ParameterGrid],
    config: &IpremConfig,
) -> Result<Vec<IpremRange>>
where
    F: Fn(&[f64]) -> Result<Vec<TimeSeriesSignal>> + Sync,
{
    if data.is_empty() {
        return Err(IuqError::invalid("at least one QoI signal is required"));
    }
    let weights = if config.weights.is_empty() { vec![1.0; data.len()] } else { config.weights.clone() };
    if weights.len() != data.len() {
        return Err(IuqError::DimensionMismatch { what: "QoI weights", expected: data.len(), got: weights.len() });
    }
    let reference = run(nominal)?;
    let aag_re = aag_between(data, &reference, &weights, config.exponent)?;
    let mut out = Vec::with_capacity(grids.len());
    for g in grids {
        if g.index >= nominal.len() {
            return Err(IuqError::invalid(format!("grid parameter index {} out of range", g.index)));
        }
        let nodes = g
            .values
            .par_iter()
            .map(|v| {
                let mut theta = nominal.to_vec();
                theta[g.index] = *v;
                let sens = run(&theta)?;
                let aag_se = aag_between(data, &sens, &weights, config.exponent)?;
                let aag_sr = aag_between(&reference, &sens, &weights, config.exponent)?;
                let cr = criterion_cr(aag_se, aag_sr, aag_re)?;
                Ok(GridNode { value: *v, aag_se, aag_sr, cr })
            })
            .collect::<Result<Vec<_>>>()?;
        let cr: Vec<f64> = nodes.iter().map(|n| n.cr).collect();
        let bounds = extract_bounds(&g.values, &cr, nominal[g.index], config.eta)?;
        out.push(IpremRange { index: g.index, nominal: nominal[g.index], aag_re, nodes, bounds });
    }
    Ok(out)
}

/// IPREM on a time-series model: each record is one QoI signal at its design.
pub fn iprem_quantify_model(
    model: &dyn Model,
    records: &[ExperimentRecord],
    grids: &[ParameterGrid],
    config: &IpremConfig,
) -> Result<Vec<IpremRange>> {
    let data = records
        .iter()
        .map(|r| TimeSeriesSignal::from_qoi(r.label.clone(), &r.observed))
        .collect::<Result<Vec<_>>>()?;
    let run = |theta: &[f64]| -> Result<Vec<TimeSeriesSignal>> {
        records
            .iter()
            .map(|r| TimeSeriesSignal::from_qoi(r.label.clone(), &evaluate(model, &r.design.values, theta)?))
            .collect()
    };
    iprem_quantify(run, &data, &model.nominal(), grids, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeCombination {
    pub intersection: Option<(f64, f64)>,
    pub union: (f64, f64),
}

/// Intersection (if non-empty) and covering hull of per-test ranges.
pub fn combine_ranges(ranges: &[(f64, f64)]) -> Result<RangeCombination> {
    if ranges.is_empty() {
        return Err(IuqError::invalid("no ranges to combine"));
    }
    let lo_max = ranges.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let hi_min = ranges.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let lo_min = ranges.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let hi_max = ranges.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(RangeCombination { intersection: (lo_max <= hi_min).then_some((lo_max, hi_min)), union: (lo_min, hi_max) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(times: Vec<f64>, values: Vec<f64>) -> TimeSeriesSignal {
        TimeSeriesSignal::new("s", times, values).unwrap()
    }

    fn sine(n: usize) -> TimeSeriesSignal {
        let t: Vec<f64> = (0..n).map(|k| k as f64 * 0.1).collect();
        let v = t.iter().map(|x| 2.0 + x.sin()).collect();
        sig(t, v)
    }

    #[test]
    fn uniform_pow2_is_unchanged() {
        let t: Vec<f64> = (0..16).map(|k| k as f64 * 0.5).collect();
        let v: Vec<f64> = t.iter().map(|x| x.cos()).collect();
        let r = resample_pow2(&sig(t.clone(), v.clone()), 4).unwrap();
        for (a, b) in r.values.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_resample_is_exact() {
        let s = sig(vec![0.0, 0.3, 2.0, 5.0], vec![1.0, 1.6, 5.0, 11.0]);
        for m in [3, 7, 10] {
            let r = resample_pow2(&s, m).unwrap();
            assert_eq!(r.times.len(), 1 << m);
            assert_eq!(*r.times.last().unwrap(), 5.0);
            for (t, v) in r.times.iter().zip(&r.values) {
                assert!((v - (1.0 + 2.0 * t)).abs() < 1e-12);
            }
        }
        assert!(TimeSeriesSignal::new("x", vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn aa_identities() {
        let e = sine(200);
        assert_eq!(average_amplitude(&e, &e, None).unwrap().aa, 0.0);
        let twice = sig(e.times.clone(), e.values.iter().map(|v| 2.0 * v).collect());
        assert!((average_amplitude(&e, &twice, None).unwrap().aa - 1.0).abs() < 1e-12);
        let zero = sig(e.times.clone(), vec![0.0; 200]);
        assert_eq!(average_amplitude(&zero, &e, None), Err(IuqError::ZeroSpectrum));
    }

    #[test]
    fn aa_resolution_stability() {
        // four full periods sampled at 300 points; model off in amplitude and phase
        let t: Vec<f64> = (0..300).map(|k| k as f64 * 8.0 / 299.0).collect();
        let w = std::f64::consts::PI;
        let e = sig(t.clone(), t.iter().map(|x| (w * x).sin()).collect());
        let m = sig(t.clone(), t.iter().map(|x| 1.1 * (w * x + 0.1).sin()).collect());
        let a10 = average_amplitude(&e, &m, Some(10)).unwrap().aa;
        let a12 = average_amplitude(&e, &m, Some(12)).unwrap().aa;
        assert!((a10 - a12).abs() / a12 < 0.02, "{a10} vs {a12}");
    }

    #[test]
    fn default_exponent_rules() {
        assert_eq!(default_exponent(2), 3);
        assert_eq!(default_exponent(101), 7);
        assert_eq!(default_exponent(128), 7);
        assert_eq!(default_exponent(1 << 20), 14);
    }

    #[test]
    fn global_aa_examples() {
        assert!((global_aa(&[0.1, 0.3], &[1.0, 1.0]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(global_aa(&[0.37], &[5.0]).unwrap(), 0.37);
        assert!((global_aa(&[0.4, 0.0], &[1.0, 3.0]).unwrap() - 0.1).abs() < 1e-15);
        assert!(global_aa(&[], &[]).is_err());
    }

    #[test]
    fn criterion_examples() {
        assert!((criterion_cr(0.1, 0.1, 0.0).unwrap() - 0.2222).abs() < 1e-4);
        let a = 0.3;
        assert!((criterion_cr(a, a, a).unwrap() - a / (1.0 - a)).abs() < 1e-15);
        assert_eq!(criterion_cr(0.2, 0.0, 0.2).unwrap(), 0.0);
        assert!(criterion_cr(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn abs_profile_bounds() {
        let grid: Vec<f64> = (0..=8).map(|k| k as f64 * 0.25).collect();
        let cr: Vec<f64> = grid.iter().map(|t| (t - 1.0_f64).abs()).collect();
        let b = extract_bounds(&grid, &cr, 1.0, 0.22).unwrap();
        assert_eq!(b.status, BoundStatus::BothBounds);
        assert!((b.lower.unwrap() - 0.78).abs() < 1e-12);
        assert!((b.upper.unwrap() - 1.22).abs() < 1e-12);
    }

    #[test]
    fn nearest_crossing_wins() {
        let grid = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let cr = vec![0.5, 0.0, 0.5, 0.1, 0.5];
        let b = extract_bounds(&grid, &cr, 1.0, 0.22).unwrap();
        assert!((b.upper.unwrap() - 1.44).abs() < 1e-12);
        assert_eq!(b.outer_crossings, 2);
    }

    #[test]
    fn none_status_has_advisory() {
        let grid = vec![0.0, 1.0, 2.0];
        let b = extract_bounds(&grid, &[0.5, 0.4, 0.5], 1.0, 0.22).unwrap();
        assert_eq!(b.status, BoundStatus::None);
        assert!(b.advisory.unwrap().contains("reduce eta"));
    }

    #[test]
    fn grid_inserts_nominal() {
        let g = default_grid(0.5, 2.0, 1.1, 9).unwrap();
        assert_eq!(g.len(), 10);
        assert!(g.contains(&1.1));
        assert_eq!(default_grid(0.0, 2.0, 1.0, 9).unwrap().len(), 9);
    }

    #[test]
    fn range_combination() {
        let c = combine_ranges(&[(0.5, 1.5), (0.8, 2.0)]).unwrap();
        assert_eq!(c.intersection, Some((0.8, 1.5)));
        assert_eq!(c.union, (0.5, 2.0));
        assert_eq!(combine_ranges(&[(0.0, 1.0), (2.0, 3.0)]).unwrap().intersection, None);
    }

    #[test]
    fn symmetric_model_gives_symmetric_bounds() {
        let t: Vec<f64> = (0..64).map(|k| k as f64 * 0.1).collect();
        let data = vec![sig(t.clone(), t.iter().map(|x| 3.0 + x.sin()).collect())];
        let run = |theta: &[f64]| -> Result<Vec<TimeSeriesSignal>> {
            let d = theta[0] - 1.0;
            Ok(vec![sig(t.clone(), t.iter().map(|x| 3.0 + x.sin() + 2.0 * d * d).collect())])
        };
        let grid = default_grid(0.0, 2.0, 1.0, 41).unwrap();
        let cell = grid[1] - grid[0];
        let res = iprem_quantify(run, &data, &[1.0], &[ParameterGrid { index: 0, values: grid }], &IpremConfig::default()).unwrap();
        let b = &res[0].bounds;
        assert_eq!(b.status, BoundStatus::BothBounds);
        assert!(((1.0 - b.lower.unwrap()) - (b.upper.unwrap() - 1.0)).abs() <= cell);
    }
}
