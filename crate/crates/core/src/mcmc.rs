//! Random-walk Metropolis-Hastings with optional adaptive proposal covariance,
//! and chain diagnostics (ESS, split-half mean check).

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IuqError, Result};
use crate::stats::RngStream;

pub const AM_SCALE: f64 = 2.38 * 2.38;
pub const ACCEPTANCE_WINDOW: (f64, f64) = (0.15, 0.5);
pub const DEGENERATE_ACCEPTANCE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    /// Total iterations including burn-in.
    pub length: usize,
    pub burn_in: f64,
    /// Initial proposal standard deviations (diagonal); `proposal_cov` wins if set.
    pub proposal_sd: Option<Vec<f64>>,
    pub proposal_cov: Option<Vec<Vec<f64>>>,
    pub adapt: bool,
    pub adapt_start: usize,
    pub seed: u64,
    pub stream: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            length: 20_000,
            burn_in: 0.2,
            proposal_sd: None,
            proposal_cov: None,
            adapt: true,
            adapt_start: 1_000,
            seed: 0,
            stream: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.length < 1_000 {
            return Err(IuqError::invalid("chain length must be at least 1000"));
        }
        if !(0.0..=0.9).contains(&self.burn_in) {
            return Err(IuqError::invalid("burn-in fraction must lie in [0, 0.9]"));
        }
        if let Some(sd) = &self.proposal_sd {
            if sd.len() != dim {
                return Err(IuqError::DimensionMismatch { what: "proposal sd", expected: dim, got: sd.len() });
            }
            if sd.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
                return Err(IuqError::invalid("proposal sd must be finite and non-negative"));
            }
        }
        if let Some(c) = &self.proposal_cov {
            if c.len() != dim || c.iter().any(|r| r.len() != dim) {
                return Err(IuqError::DimensionMismatch { what: "proposal covariance", expected: dim, got: c.len() });
            }
        }
        Ok(())
    }

    fn initial_factor(&self, dim: usize) -> Result<DMatrix<f64>> {
        if let Some(c) = &self.proposal_cov {
            let m = DMatrix::from_fn(dim, dim, |i, j| c[i][j]);
            return crate::stats::CovMatrix::new(m.clone())
                .map_err(|_| IuqError::invalid("proposal covariance must be symmetric positive semi-definite"))
                .and_then(|_| Ok(crate::stats::factor_with_nugget(&m)?.l()));
        }
        let sd = self.proposal_sd.clone().unwrap_or_else(|| vec![0.1; dim]);
        Ok(DMatrix::from_diagonal(&DVector::from_vec(sd)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum McmcWarning {
    /// Acceptance outside [0.15, 0.5]; rescale the proposal.
    AcceptanceOutsideWindow { rate: f64 },
    /// Acceptance above 0.95: the walk barely moves.
    DegenerateWalk { rate: f64 },
    /// Zero variance in a parameter's draws.
    ConstantChain { param: usize },
    NonFiniteProposals { count: usize },
    /// Split-half means differ by more than 3 Monte Carlo standard errors.
    PoorMixing { param: usize, z: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcChain {
    /// Post-burn-in draws, one row per iteration.
    pub samples: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    /// Over all iterations, burn-in included.
    pub acceptance_rate: f64,
    pub ess: Vec<f64>,
    pub nonfinite_proposals: usize,
    pub warnings: Vec<McmcWarning>,
}

impl McmcChain {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.len())
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[i]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        crate::stats::sample_mean_cov(&self.samples).0
    }

    pub fn cov(&self) -> DMatrix<f64> {
        crate::stats::sample_mean_cov(&self.samples).1
    }
}

/// Running mean and covariance (Welford).
struct Welford {
    n: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Welford { n: 0.0, mean: DVector::zeros(d), m2: DMatrix::zeros(d, d) }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1.0;
        let delta = x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn cov(&self) -> DMatrix<f64> {
        let c = &self.m2 / (self.n - 1.0).max(1.0);
        (&c + c.transpose()) * 0.5
    }
}

/// Metropolis-Hastings on `log_target` from `init`.
///
/// With adaptation on, after `adapt_start` iterations the proposal covariance
/// is `(2.38²/d)(C + εI)` with `C` the running chain covariance; if that
/// matrix fails to factor, the previous factor is kept.
pub fn mh_sample<F>(log_target: F, init: &[f64], config: &McmcConfig) -> Result<McmcChain>
where
    F: Fn(&[f64]) -> f64,
{
    let d = init.len();
    if d == 0 {
        return Err(IuqError::invalid("initial state must be non-empty"));
    }
    config.validate(d)?;
    let mut current = DVector::from_column_slice(init);
    let mut current_lp = log_target(init);
    if !current_lp.is_finite() {
        return Err(IuqError::NonFiniteInit);
    }
    let mut factor = config.initial_factor(d)?;
    let mut rng = RngStream::with_stream(config.seed, config.stream).rng();
    let burn = (config.burn_in * config.length as f64).floor() as usize;
    let mut samples = Vec::with_capacity(config.length - burn);
    let mut log_density = Vec::with_capacity(config.length - burn);
    let mut stats = Welford::new(d);
    let mut accepted = 0usize;
    let mut nonfinite = 0usize;
    let scale = AM_SCALE / d as f64;

    for it in 0..config.length {
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let proposal = &current + &factor * z;
        let lp = log_target(proposal.as_slice());
        let u: f64 = rng.random();
        if lp.is_nan() || lp == f64::INFINITY {
            nonfinite += 1;
        } else if lp > f64::NEG_INFINITY && u.ln() < lp - current_lp {
            current = proposal;
            current_lp = lp;
            accepted += 1;
        }
        stats.push(&current);
        if config.adapt && it + 1 >= config.adapt_start && stats.n >= 2.0 {
            let c = stats.cov();
            let eps = 1e-10 * (c.trace() / d as f64).max(1e-300);
            let prop = (c + DMatrix::identity(d, d) * eps) * scale;
            if let Some(ch) = prop.cholesky() {
                factor = ch.l();
            }
        }
        if it >= burn {
            samples.push(current.iter().copied().collect());
            log_density.push(current_lp);
        }
    }

    let acceptance_rate = accepted as f64 / config.length as f64;
    let mut chain = McmcChain { samples, log_density, acceptance_rate, ess: Vec::new(), nonfinite_proposals: nonfinite, warnings: Vec::new() };
    let diag = diagnostics(&chain)?;
    chain.ess = diag.ess;
    chain.warnings = diag.warnings;
    if nonfinite > 0 {
        chain.warnings.push(McmcWarning::NonFiniteProposals { count: nonfinite });
    }
    for w in &chain.warnings {
        log::warn!("mcmc: {w:?}");
    }
    Ok(chain)
}

struct NegTarget<F>(F);

impl<F: Fn(&[f64]) -> f64> CostFunction for NegTarget<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, v: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let lp = (self.0)(v);
        Ok(if lp.is_finite() { -lp } else { 1e300 })
    }
}

/// Mode and scaled inverse-Hessian proposal for starting a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceStart {
    pub mode: Vec<f64>,
    /// `(2.38²/d) H⁻¹`, or a diagonal fallback when the Hessian is not negative definite.
    pub proposal_cov: Vec<Vec<f64>>,
    pub hessian_ok: bool,
}

/// Nelder-Mead climb from `init` (simplex step `scales`), then a central
/// finite-difference Hessian at the mode with steps `1e-3 * scales`.
/// Falls back to `0.1 * scales` per axis if the curvature is unusable.
pub fn laplace_start<F>(log_target: F, init: &[f64], scales: &[f64]) -> Result<LaplaceStart>
where
    F: Fn(&[f64]) -> f64,
{
    let d = init.len();
    if scales.len() != d || scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(IuqError::invalid("laplace_start needs one positive scale per dimension"));
    }
    if !log_target(init).is_finite() {
        return Err(IuqError::NonFiniteInit);
    }
    let mut mode = init.to_vec();
    // two restarts shrink the simplex onto the mode
    for round in 0..3 {
        let step = 0.5 * 0.1f64.powi(round);
        let mut simplex = vec![mode.clone()];
        for k in 0..d {
            let mut v = mode.clone();
            v[k] += step * scales[k];
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex).with_sd_tolerance(1e-14).map_err(|e| IuqError::Optimizer(e.to_string()))?;
        let res = Executor::new(NegTarget(&log_target), solver)
            .configure(|s| s.max_iters(400 * d as u64))
            .run()
            .map_err(|e| IuqError::Optimizer(e.to_string()))?;
        if let Some(p) = res.state().best_param.clone() {
            if log_target(&p) >= log_target(&mode) {
                mode = p;
            }
        }
    }
    let h: Vec<f64> = scales.iter().map(|s| 1e-3 * s).collect();
    let f0 = log_target(&mode);
    let at = |di: &[(usize, f64)]| {
        let mut t = mode.clone();
        for (i, v) in di {
            t[*i] += v;
        }
        log_target(&t)
    };
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        hess[(i, i)] = -(at(&[(i, h[i])]) - 2.0 * f0 + at(&[(i, -h[i])])) / (h[i] * h[i]);
        for j in 0..i {
            let v = -(at(&[(i, h[i]), (j, h[j])]) - at(&[(i, h[i]), (j, -h[j])]) - at(&[(i, -h[i]), (j, h[j])])
                + at(&[(i, -h[i]), (j, -h[j])]))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let scale = AM_SCALE / d as f64;
    let inv = if hess.iter().all(|v| v.is_finite()) { hess.clone().cholesky().map(|c| c.inverse()) } else { None };
    let (cov, ok) = match inv {
        Some(c) => (c * scale, true),
        None => {
            let diag = DVector::from_fn(d, |i, _| {
                let hi = hess[(i, i)];
                if hi.is_finite() && hi > 0.0 {
                    scale / hi
                } else {
                    (0.1 * scales[i]).powi(2)
                }
            });
            (DMatrix::from_diagonal(&diag), false)
        }
    };
    let proposal_cov = cov.row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok(LaplaceStart { mode, proposal_cov, hessian_ok: ok })
}

/// Independent chains on separate streams of `config.seed`, run in parallel.
pub fn mh_sample_chains<F>(log_target: F, inits: &[Vec<f64>], config: &McmcConfig) -> Result<Vec<McmcChain>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    inits
        .par_iter()
        .enumerate()
        .map(|(k, init)| {
            let cfg = McmcConfig { stream: config.stream + k as u64, ..config.clone() };
            mh_sample(&log_target, init, &cfg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub acceptance_rate: f64,
    pub ess: Vec<f64>,
    /// `|mean(first half) - mean(second half)|` in Monte Carlo standard errors.
    pub split_half_z: Vec<f64>,
    pub warnings: Vec<McmcWarning>,
}

fn variance(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v)
}

/// Effective sample size by Geyer's initial monotone sequence estimator.
/// A constant series returns 1.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return n as f64;
    }
    let (m, v) = variance(x);
    if !(v > 0.0) {
        return 1.0;
    }
    let rho = |lag: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..n - lag {
            s += (x[t] - m) * (x[t + lag] - m);
        }
        s / (n as f64 * v)
    };
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        k += 1;
    }
    (n as f64 / tau.max(1e-12)).max(1.0)
}

/// Monte Carlo standard error of the mean.
pub fn mcse(x: &[f64]) -> f64 {
    let (_, v) = variance(x);
    (v / effective_sample_size(x)).sqrt()
}

pub fn diagnostics(chain: &McmcChain) -> Result<Diagnostics> {
    if chain.samples.is_empty() {
        return Err(IuqError::invalid("chain is empty"));
    }
    let d = chain.dim();
    let mut warnings = Vec::new();
    let rate = chain.acceptance_rate;
    if rate > DEGENERATE_ACCEPTANCE {
        warnings.push(McmcWarning::DegenerateWalk { rate });
    } else if rate < ACCEPTANCE_WINDOW.0 || rate > ACCEPTANCE_WINDOW.1 {
        warnings.push(McmcWarning::AcceptanceOutsideWindow { rate });
    }
    let mut ess = Vec::with_capacity(d);
    let mut split = Vec::with_capacity(d);
    for i in 0..d {
        let col = chain.column(i);
        let (_, v) = variance(&col);
        if !(v > 0.0) {
            warnings.push(McmcWarning::ConstantChain { param: i });
            ess.push(1.0);
            split.push(0.0);
            continue;
        }
        ess.push(effective_sample_size(&col));
        let half = col.len() / 2;
        let z = if half >= 2 {
            let (a, b) = (&col[..half], &col[half..]);
            let se = (mcse(a).powi(2) + mcse(b).powi(2)).sqrt();
            let diff = (variance(a).0 - variance(b).0).abs();
            if se > 0.0 {
                diff / se
            } else if diff > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            0.0
        };
        if z > 3.0 {
            warnings.push(McmcWarning::PoorMixing { param: i, z });
        }
        split.push(z);
    }
    Ok(Diagnostics { acceptance_rate: rate, ess, split_half_z: split, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_from(samples: Vec<Vec<f64>>) -> McmcChain {
        McmcChain { log_density: vec![0.0; samples.len()], samples, acceptance_rate: 0.3, ess: vec![], nonfinite_proposals: 0, warnings: vec![] }
    }

    #[test]
    fn standard_normal_moments() {
        let cfg = McmcConfig { length: 62_500, seed: 4, proposal_sd: Some(vec![2.4]), ..Default::default() };
        let ch = mh_sample(|x| -0.5 * x[0] * x[0], &[0.0], &cfg).unwrap();
        assert_eq!(ch.samples.len(), 50_000);
        let col = ch.column(0);
        let (m, v) = variance(&col);
        assert!(m.abs() < 0.03, "mean {m}");
        assert!((0.9..=1.1).contains(&v), "var {v}");
        assert!(ch.acceptance_rate > 0.0 && ch.acceptance_rate < 1.0);
    }

    #[test]
    fn correlated_gaussian() {
        let rho: f64 = 0.8;
        let det = 1.0 - rho * rho;
        let target = move |x: &[f64]| -0.5 * (x[0] * x[0] - 2.0 * rho * x[0] * x[1] + x[1] * x[1]) / det;
        let cfg = McmcConfig { length: 40_000, seed: 8, ..Default::default() };
        let ch = mh_sample(target, &[0.0, 0.0], &cfg).unwrap();
        let c = ch.cov();
        let r = c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt();
        assert!((r - rho).abs() < 0.05, "corr {r}");
    }

    #[test]
    fn tiny_proposal_is_flagged_degenerate() {
        let cfg = McmcConfig { length: 5_000, adapt: false, proposal_sd: Some(vec![1e-9]), ..Default::default() };
        let ch = mh_sample(|x| -0.5 * x[0] * x[0], &[0.0], &cfg).unwrap();
        assert!(ch.acceptance_rate > 0.99);
        assert!(variance(&ch.column(0)).1 < 1e-12);
        assert!(ch.warnings.iter().any(|w| matches!(w, McmcWarning::DegenerateWalk { .. })));
    }

    #[test]
    fn reproducible_and_stream_sensitive() {
        let cfg = McmcConfig { length: 2_000, seed: 1, ..Default::default() };
        let a = mh_sample(|x| -0.5 * x[0] * x[0], &[0.3], &cfg).unwrap();
        let b = mh_sample(|x| -0.5 * x[0] * x[0], &[0.3], &cfg).unwrap();
        assert_eq!(a, b);
        let c = mh_sample(|x| -0.5 * x[0] * x[0], &[0.3], &McmcConfig { stream: 1, ..cfg }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn non_finite_handling() {
        let cfg = McmcConfig { length: 1_000, ..Default::default() };
        assert_eq!(mh_sample(|_| f64::NAN, &[0.0], &cfg).unwrap_err(), IuqError::NonFiniteInit);
        let ch = mh_sample(|x| if x[0] > 0.1 { f64::NAN } else { -0.5 * x[0] * x[0] }, &[0.0], &cfg).unwrap();
        assert!(ch.nonfinite_proposals > 0);
        assert!(ch.samples.iter().all(|s| s[0] <= 0.1));
    }

    #[test]
    fn config_validation() {
        let short = McmcConfig { length: 999, ..Default::default() };
        assert!(mh_sample(|_| 0.0, &[0.0], &short).is_err());
        let burn = McmcConfig { burn_in: 0.95, ..Default::default() };
        assert!(mh_sample(|_| 0.0, &[0.0], &burn).is_err());
    }

    #[test]
    fn iid_ess_close_to_n() {
        let mut rng = RngStream::new(2).rng();
        let x: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = effective_sample_size(&x);
        assert!((e / 20_000.0 - 1.0).abs() < 0.2, "{e}");
    }

    #[test]
    fn ar1_ess() {
        let rho = 0.95;
        let mut rng = RngStream::new(3).rng();
        let n = 100_000;
        let mut x = vec![0.0; n];
        for t in 1..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[t] = rho * x[t - 1] + (1.0 - rho * rho as f64).sqrt() * z;
        }
        let expect = n as f64 * (1.0 - rho) / (1.0 + rho);
        let e = effective_sample_size(&x);
        assert!((e / expect - 1.0).abs() < 0.3, "{e} vs {expect}");
    }

    #[test]
    fn constant_chain_diagnostics() {
        let d = diagnostics(&chain_from(vec![vec![1.5]; 500])).unwrap();
        assert_eq!(d.ess, vec![1.0]);
        assert!(d.warnings.contains(&McmcWarning::ConstantChain { param: 0 }));
    }

    #[test]
    fn split_half_detects_drift() {
        let samples: Vec<Vec<f64>> = (0..2000).map(|k| vec![if k < 1000 { 0.0 } else { 1.0 } + 0.01 * ((k * 7919) % 13) as f64]).collect();
        let d = diagnostics(&chain_from(samples)).unwrap();
        assert!(d.split_half_z[0] > 3.0);
    }

    #[test]
    fn adapted_proposal_stays_factorable() {
        // strongly anisotropic target; the sampler must finish and move in both directions
        let target = |x: &[f64]| -0.5 * (x[0] * x[0] / 1e-4 + x[1] * x[1] / 1e2);
        let cfg = McmcConfig { length: 20_000, seed: 5, ..Default::default() };
        let ch = mh_sample(target, &[0.0, 0.0], &cfg).unwrap();
        let c = ch.cov();
        assert!(c[(0, 0)] > 0.0 && c[(1, 1)] > 10.0 * c[(0, 0)]);
    }

    #[test]
    fn parallel_chains_use_distinct_streams() {
        let cfg = McmcConfig { length: 1_000, seed: 9, ..Default::default() };
        let chains = mh_sample_chains(|x: &[f64]| -0.5 * x[0] * x[0], &[vec![0.0], vec![0.0]], &cfg).unwrap();
        assert_ne!(chains[0].samples, chains[1].samples);
    }
}
