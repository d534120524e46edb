//! Gaussian-process regression with a power-exponential kernel, constant
//! mean and concentrated-likelihood hyperparameter fitting.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IuqError, Result};
use crate::stats::RngStream;

pub const LOG_OMEGA_BOUNDS: (f64, f64) = (-6.907755278982137, 6.907755278982137); // ln 1e-3, ln 1e3
pub const MIN_TRAINING: usize = 4;
const MAX_NUGGET: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    /// Fit the roughness exponents instead of fixing them at 2.
    pub fit_roughness: bool,
    pub n_starts: usize,
    /// Diagonal nugget on the correlation matrix, relative to the process variance.
    pub nugget: f64,
    pub max_iters: u64,
    /// Inputs closer than this (standardised units) count as duplicates.
    pub dedup_tol: f64,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig { fit_roughness: false, n_starts: 8, nugget: 1e-8, max_iters: 400, dedup_tol: 1e-9, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    /// Constant mean.
    pub beta: f64,
    pub sigma2: f64,
    /// Length-scales in standardised input units.
    pub omega: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    x_mean: Vec<f64>,
    x_sd: Vec<f64>,
    pub hyper: GpHyper,
    /// Nugget actually used (relative to `sigma2`).
    pub nugget: f64,
    pub log_likelihood: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    config: GpConfig,
}

fn correlation(a: &[f64], b: &[f64], omega: &[f64], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += ((a[i] - b[i]).abs() / omega[i]).powf(p[i]);
    }
    (-s).exp()
}

struct Fitted {
    chol: Cholesky<f64, Dyn>,
    beta: f64,
    sigma2: f64,
    nugget: f64,
    loglik: f64,
}

/// Refines `K⁻¹ resid` towards `R⁻¹ resid` (nugget-free) using the
/// factorised `K = R + λI` as preconditioner, so the mean interpolates the
/// training outputs more tightly than the nugget alone allows.
fn refine_weights(chol: &Cholesky<f64, Dyn>, lambda: f64, resid: &DVector<f64>) -> DVector<f64> {
    // preconditioned conjugate gradients on R α = resid, with K = R + λI as preconditioner
    let l = chol.l();
    let apply_r = |v: &DVector<f64>| &l * (l.transpose() * v) - v * lambda;
    let scale = resid.amax().max(1e-300);
    let mut alpha = chol.solve(resid);
    let mut best = alpha.clone();
    let mut r = resid - apply_r(&alpha);
    let mut best_defect = r.amax();
    let mut z = chol.solve(&r);
    let mut d = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..4 * resid.len().max(50) {
        if best_defect <= 1e-12 * scale {
            break;
        }
        let rd = apply_r(&d);
        let curv = d.dot(&rd);
        if !(curv > 0.0) || !rz.is_finite() {
            break;
        }
        let step = rz / curv;
        alpha.axpy(step, &d, 1.0);
        r.axpy(-step, &rd, 1.0);
        let defect = r.amax();
        if defect < best_defect {
            best_defect = defect;
            best.copy_from(&alpha);
        }
        z = chol.solve(&r);
        let rz_new = r.dot(&z);
        d = &z + &d * (rz_new / rz);
        rz = rz_new;
    }
    best
}

fn sigma2_floor(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    let v = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    1e-12 * v.max(1e-300)
}

/// GLS mean, profiled variance and concentrated log-likelihood at fixed correlation parameters.
fn concentrated(x: &[Vec<f64>], y: &[f64], omega: &[f64], p: &[f64], nugget: f64) -> Option<Fitted> {
    let n = x.len();
    let mut lambda = nugget;
    loop {
        let k = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + lambda } else { correlation(&x[i], &x[j], omega, p) });
        if let Some(chol) = k.cholesky() {
            let ones = DVector::from_element(n, 1.0);
            let yv = DVector::from_column_slice(y);
            let k1 = chol.solve(&ones);
            let beta = k1.dot(&yv) / k1.dot(&ones);
            let resid = &yv - &ones * beta;
            let alpha = chol.solve(&resid);
            let sigma2 = (resid.dot(&alpha) / n as f64).max(sigma2_floor(y));
            let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let nf = n as f64;
            let loglik = -0.5 * nf * (2.0 * std::f64::consts::PI * sigma2).ln() - 0.5 * logdet - 0.5 * nf;
            if !loglik.is_finite() {
                return None;
            }
            return Some(Fitted { chol, beta, sigma2, nugget: lambda, loglik });
        }
        lambda *= 10.0;
        if lambda > MAX_NUGGET {
            return None;
        }
    }
}

struct NegLogLik<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    dim: usize,
    fit_p: bool,
    nugget: f64,
}

impl NegLogLik<'_> {
    fn unpack(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let (lo, hi) = LOG_OMEGA_BOUNDS;
        let mut penalty = 0.0;
        let omega = v[..self.dim]
            .iter()
            .map(|u| {
                let c = u.clamp(lo, hi);
                penalty += (u - c).powi(2);
                c.exp()
            })
            .collect();
        let p = if self.fit_p {
            v[self.dim..].iter().map(|u| 2.0 / (1.0 + (-u).exp())).collect()
        } else {
            vec![2.0; self.dim]
        };
        (omega, p, penalty)
    }
}

impl CostFunction for NegLogLik<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, v: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let (omega, p, penalty) = self.unpack(v);
        Ok(match concentrated(self.x, self.y, &omega, &p, self.nugget) {
            Some(f) => -f.loglik + 1e3 * penalty,
            None => 1e300,
        })
    }
}

fn standardise(inputs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = inputs[0].len();
    let n = inputs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| inputs.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let sd = (0..d)
        .map(|i| {
            let v = inputs.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

fn scale_rows(inputs: &[Vec<f64>], mean: &[f64], sd: &[f64]) -> Vec<Vec<f64>> {
    inputs.iter().map(|r| r.iter().zip(mean).zip(sd).map(|((v, m), s)| (v - m) / s).collect()).collect()
}

fn check_training(inputs: &[Vec<f64>], outputs: &[f64]) -> Result<usize> {
    if inputs.len() < MIN_TRAINING {
        return Err(IuqError::invalid(format!("GP needs at least {MIN_TRAINING} training points")));
    }
    if inputs.len() != outputs.len() {
        return Err(IuqError::DimensionMismatch { what: "GP outputs", expected: inputs.len(), got: outputs.len() });
    }
    let d = inputs[0].len();
    if d == 0 || inputs.iter().any(|r| r.len() != d) {
        return Err(IuqError::invalid("GP inputs must share a positive dimension"));
    }
    if inputs.iter().flatten().chain(outputs).any(|v| !v.is_finite()) {
        return Err(IuqError::invalid("GP training data must be finite"));
    }
    Ok(d)
}

fn check_duplicates(x: &[Vec<f64>], tol: f64) -> Result<()> {
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            let dist = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist <= tol {
                return Err(IuqError::invalid(format!("duplicate GP training inputs at rows {i} and {j}")));
            }
        }
    }
    Ok(())
}

impl GpModel {
    /// Maximum-likelihood fit with multi-start Nelder-Mead over log length-scales.
    pub fn fit(inputs: &[Vec<f64>], outputs: &[f64], config: &GpConfig) -> Result<Self> {
        let d = check_training(inputs, outputs)?;
        let (x_mean, x_sd) = standardise(inputs);
        let x = scale_rows(inputs, &x_mean, &x_sd);
        check_duplicates(&x, config.dedup_tol)?;

        let cost = NegLogLik { x: &x, y: outputs, dim: d, fit_p: config.fit_roughness, nugget: config.nugget };
        let n_par = if config.fit_roughness { 2 * d } else { d };
        let mut rng = RngStream::with_stream(config.seed, 0x6770).rng();
        let mut starts: Vec<Vec<f64>> = vec![vec![0.0; n_par]];
        for _ in 1..config.n_starts.max(1) {
            let mut s: Vec<f64> = (0..d).map(|_| rng.random_range(-2.5..2.0)).collect();
            if config.fit_roughness {
                s.extend((0..d).map(|_| rng.random_range(0.0..3.0)));
            }
            starts.push(s);
        }
        let mut best: Option<(Vec<f64>, f64)> = None;
        for start in starts {
            let mut simplex = vec![start.clone()];
            for k in 0..n_par {
                let mut v = start.clone();
                v[k] += 0.7;
                simplex.push(v);
            }
            let solver = NelderMead::new(simplex).with_sd_tolerance(1e-9).map_err(|e| IuqError::Optimizer(e.to_string()))?;
            let cost_ref = NegLogLik { ..cost };
            let res = match Executor::new(cost_ref, solver).configure(|s| s.max_iters(config.max_iters)).run() {
                Ok(r) => r,
                Err(e) => {
                    log::debug!("gp: start failed: {e}");
                    continue;
                }
            };
            let state = res.state();
            if let Some(p) = state.best_param.clone() {
                let c = state.best_cost;
                if c < 1e300 && best.as_ref().is_none_or(|b| c < b.1) {
                    best = Some((p, c));
                }
            }
        }
        let (v, _) = best.ok_or_else(|| IuqError::Optimizer("GP likelihood optimisation failed at every start".into()))?;
        let (omega, p, _) = cost.unpack(&v);
        Self::build(x, outputs.to_vec(), x_mean, x_sd, omega, p, config.clone())
    }

    /// Fit with given length-scales and roughness (no optimisation).
    pub fn with_hyper(inputs: &[Vec<f64>], outputs: &[f64], omega: Vec<f64>, p: Vec<f64>, config: &GpConfig) -> Result<Self> {
        let d = check_training(inputs, outputs)?;
        if omega.len() != d || p.len() != d {
            return Err(IuqError::DimensionMismatch { what: "GP hyperparameters", expected: d, got: omega.len().min(p.len()) });
        }
        if omega.iter().any(|w| !(*w > 0.0)) || p.iter().any(|v| !(*v > 0.0 && *v <= 2.0)) {
            return Err(IuqError::invalid("GP length-scales must be positive and roughness in (0, 2]"));
        }
        let (x_mean, x_sd) = standardise(inputs);
        let x = scale_rows(inputs, &x_mean, &x_sd);
        check_duplicates(&x, config.dedup_tol)?;
        Self::build(x, outputs.to_vec(), x_mean, x_sd, omega, p, config.clone())
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        x_mean: Vec<f64>,
        x_sd: Vec<f64>,
        omega: Vec<f64>,
        p: Vec<f64>,
        config: GpConfig,
    ) -> Result<Self> {
        let f = concentrated(&x, &y, &omega, &p, config.nugget)
            .ok_or_else(|| IuqError::Optimizer("GP covariance could not be factorised".into()))?;
        let alpha = refine_weights(&f.chol, f.nugget, &DVector::from_iterator(y.len(), y.iter().map(|v| v - f.beta)));
        Ok(GpModel {
            x,
            y,
            x_mean,
            x_sd,
            hyper: GpHyper { beta: f.beta, sigma2: f.sigma2, omega, p },
            nugget: f.nugget,
            log_likelihood: f.loglik,
            chol: f.chol,
            alpha,
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn n_train(&self) -> usize {
        self.x.len()
    }

    /// Training inputs in original units.
    pub fn training_inputs(&self) -> Vec<Vec<f64>> {
        self.x.iter().map(|r| r.iter().zip(&self.x_mean).zip(&self.x_sd).map(|((v, m), s)| v * s + m).collect()).collect()
    }

    pub fn training_outputs(&self) -> &[f64] {
        &self.y
    }

    fn scale(&self, point: &[f64]) -> Vec<f64> {
        point.iter().zip(&self.x_mean).zip(&self.x_sd).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// Predictive mean and latent variance at `point`.
    pub fn predict(&self, point: &[f64]) -> Result<(f64, f64)> {
        if point.len() != self.dim() {
            return Err(IuqError::DimensionMismatch { what: "GP query point", expected: self.dim(), got: point.len() });
        }
        let z = self.scale(point);
        let r = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| correlation(&z, xi, &self.hyper.omega, &self.hyper.p)));
        let mean = self.hyper.beta + r.dot(&self.alpha);
        let kr = self.chol.solve(&r);
        let var = (self.hyper.sigma2 * (1.0 - r.dot(&kr))).max(0.0);
        Ok((mean, var))
    }

    /// Concentrated log-likelihood at other length-scales/roughness on the same data.
    pub fn log_likelihood_at(&self, omega: &[f64], p: &[f64]) -> Option<f64> {
        concentrated(&self.x, &self.y, omega, p, self.config.nugget).map(|f| f.loglik)
    }

    /// Refit with extra points, keeping hyperparameters and input scaling fixed.
    pub fn condition(&self, inputs: &[Vec<f64>], outputs: &[f64]) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(IuqError::DimensionMismatch { what: "GP outputs", expected: inputs.len(), got: outputs.len() });
        }
        let mut x = self.x.clone();
        x.extend(inputs.iter().map(|r| self.scale(r)));
        let mut y = self.y.clone();
        y.extend_from_slice(outputs);
        check_duplicates(&x, self.config.dedup_tol)?;
        let n = x.len();
        let mut lambda = self.config.nugget;
        let chol = loop {
            let k = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + lambda } else { correlation(&x[i], &x[j], &self.hyper.omega, &self.hyper.p) });
            if let Some(c) = k.cholesky() {
                break c;
            }
            lambda *= 10.0;
            if lambda > MAX_NUGGET {
                return Err(IuqError::Optimizer("GP covariance could not be factorised".into()));
            }
        };
        let resid = DVector::from_iterator(n, y.iter().map(|v| v - self.hyper.beta));
        let alpha = refine_weights(&chol, lambda, &resid);
        Ok(GpModel {
            x,
            y,
            x_mean: self.x_mean.clone(),
            x_sd: self.x_sd.clone(),
            hyper: self.hyper.clone(),
            nugget: lambda,
            log_likelihood: f64::NAN,
            chol,
            alpha,
            config: self.config.clone(),
        })
    }

    /// Closed-form leave-one-out residuals divided by their predictive sd.
    pub fn loo_standardized_residuals(&self) -> Vec<f64> {
        let n = self.x.len();
        let kinv = self.chol.inverse();
        let weights = self.chol.solve(&DVector::from_iterator(n, self.y.iter().map(|v| v - self.hyper.beta)));
        (0..n)
            .map(|i| {
                let d = kinv[(i, i)];
                let resid = weights[i] / d;
                let var = self.hyper.sigma2 / d;
                resid / var.sqrt()
            })
            .collect()
    }
}
