//! Calibration through data assimilation: a linearity gate, the regularised
//! linear update (posterior mean, parameter and QoI covariances), L-curve
//! selection of the regularisation weight, and an MCMC route for non-linear
//! models.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IuqError, Result};
use crate::mcmc::{mh_sample, McmcChain, McmcConfig};
use crate::model::{evaluate, finite_difference_sensitivity, ExperimentRecord, Model};
use crate::stats::{inverse_spd, latin_hypercube, log_diag_normal, log_mvn_pdf, sample_mean_cov, CovMatrix, RngStream};

/// Minimum per-QoI R² of the tangent-plane fit for the linear route.
pub const LINEARITY_R2: f64 = 0.99;
pub const MIN_PROBES: usize = 8;
pub const MIN_CHAIN_LENGTH: usize = 10_000;
pub const LCURVE_MIN_NODES: usize = 20;
pub const LCURVE_MIN_DECADES: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McdaRoute {
    Deterministic,
    Probabilistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    /// R² of the tangent plane against probe runs, one per QoI (experiments stacked).
    pub r2: Vec<f64>,
    pub min_r2: f64,
    pub threshold: f64,
    pub n_probe: usize,
    pub route: McdaRoute,
}

/// Latin hypercube on `[-1, 1]^d`.
fn latin_unit(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    latin_hypercube(n, d, rng).into_iter().map(|r| r.into_iter().map(|u| 2.0 * u - 1.0).collect()).collect()
}

/// Probes the model at Latin points in `θ_prior ± 2σ` and scores the tangent
/// plane (FD sensitivities at the prior mean) by R² per QoI.
pub fn linearity_test(
    model: &dyn Model,
    designs: &[Vec<f64>],
    theta_prior: &[f64],
    prior_cov: &CovMatrix,
    n_probe: usize,
    fd_rel_step: f64,
    rng: RngStream,
) -> Result<LinearityReport> {
    if n_probe < MIN_PROBES {
        return Err(IuqError::invalid(format!("linearity test needs at least {MIN_PROBES} probes")));
    }
    if prior_cov.dim() != theta_prior.len() {
        return Err(IuqError::DimensionMismatch { what: "prior covariance", expected: theta_prior.len(), got: prior_cov.dim() });
    }
    let sd: Vec<f64> = prior_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    let probes = latin_unit(n_probe, theta_prior.len(), &mut rng.rng());
    let mut r2 = Vec::new();
    for x in designs {
        let base = evaluate(model, x, theta_prior)?.values;
        let s = finite_difference_sensitivity(model, x, theta_prior, fd_rel_step)?.entries;
        let mut actual = vec![Vec::with_capacity(n_probe); base.len()];
        let mut plane = vec![Vec::with_capacity(n_probe); base.len()];
        for u in &probes {
            let dtheta: Vec<f64> = u.iter().zip(&sd).map(|(u, s)| 2.0 * u * s).collect();
            let theta: Vec<f64> = theta_prior.iter().zip(&dtheta).map(|(t, d)| t + d).collect();
            let y = evaluate(model, x, &theta)?.values;
            let lin = DVector::from_column_slice(&base) + &s * DVector::from_column_slice(&dtheta);
            for j in 0..base.len() {
                actual[j].push(y[j]);
                plane[j].push(lin[j]);
            }
        }
        for (a, p) in actual.iter().zip(&plane) {
            r2.push(r_squared(a, p));
        }
    }
    let min_r2 = r2.iter().copied().fold(f64::INFINITY, f64::min);
    let route = if min_r2 >= LINEARITY_R2 { McdaRoute::Deterministic } else { McdaRoute::Probabilistic };
    Ok(LinearityReport { r2, min_r2, threshold: LINEARITY_R2, n_probe, route })
}

/// `1 - SS_res / SS_tot`; a response that does not vary is perfectly fitted
/// when the plane is flat too.
fn r_squared(actual: &[f64], fitted: &[f64]) -> f64 {
    let n = actual.len() as f64;
    let mean = actual.iter().sum::<f64>() / n;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    let ss_res: f64 = actual.iter().zip(fitted).map(|(a, f)| (a - f).powi(2)).sum();
    let scale = actual.iter().fold(0.0_f64, |m, a| m.max(a.abs())).max(1e-300);
    if ss_tot <= 1e-24 * scale * scale * n {
        return if ss_res <= 1e-20 * scale * scale * n { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// Linearised problem around the prior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProblem {
    pub theta_prior: Vec<f64>,
    pub prior_cov: CovMatrix,
    /// `S^prior`, `J x I`.
    pub sensitivity: DMatrix<f64>,
    /// `y^E - y^M(θ_prior)`.
    pub residual: Vec<f64>,
    pub noise_cov: CovMatrix,
}

impl LinearProblem {
    pub fn new(
        theta_prior: Vec<f64>,
        prior_cov: CovMatrix,
        sensitivity: DMatrix<f64>,
        residual: Vec<f64>,
        noise_cov: CovMatrix,
    ) -> Result<Self> {
        let i = theta_prior.len();
        let j = residual.len();
        if prior_cov.dim() != i {
            return Err(IuqError::DimensionMismatch { what: "prior covariance", expected: i, got: prior_cov.dim() });
        }
        if sensitivity.ncols() != i {
            return Err(IuqError::DimensionMismatch { what: "sensitivity columns", expected: i, got: sensitivity.ncols() });
        }
        if sensitivity.nrows() != j {
            return Err(IuqError::DimensionMismatch { what: "sensitivity rows", expected: j, got: sensitivity.nrows() });
        }
        if noise_cov.dim() != j {
            return Err(IuqError::DimensionMismatch { what: "noise covariance", expected: j, got: noise_cov.dim() });
        }
        if noise_cov.matrix().clone().cholesky().is_none() {
            return Err(IuqError::invalid("noise covariance must be positive definite"));
        }
        Ok(LinearProblem { theta_prior, prior_cov, sensitivity, residual, noise_cov })
    }

    /// Stacks all experiments: residuals and FD sensitivities at `theta_prior`,
    /// noise covariance from the records.
    pub fn from_model(
        model: &dyn Model,
        experiments: &[ExperimentRecord],
        theta_prior: &[f64],
        prior_cov: CovMatrix,
        fd_rel_step: f64,
    ) -> Result<Self> {
        let (s, resid, noise) = stack(model, experiments, theta_prior, fd_rel_step)?;
        LinearProblem::new(theta_prior.to_vec(), prior_cov, s, resid, CovMatrix::from_diag(&noise))
    }

    fn noise_inv(&self) -> Result<DMatrix<f64>> {
        inverse_spd(self.noise_cov.matrix())
    }

    fn prior_inv(&self) -> Result<DMatrix<f64>> {
        inverse_spd(self.prior_cov.matrix())
            .map_err(|_| IuqError::Singular("prior covariance is singular; the regularisation term is undefined".into()))
    }

    /// Gain `K = (SᵀΣε⁻¹S + α²Σθ⁻¹)⁻¹ SᵀΣε⁻¹`.
    pub fn gain(&self, alpha: f64) -> Result<DMatrix<f64>> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(IuqError::invalid("alpha must be finite and non-negative"));
        }
        let s = &self.sensitivity;
        let w = self.noise_inv()?;
        let stw = s.transpose() * &w;
        let mut a = &stw * s;
        if alpha > 0.0 {
            a += self.prior_inv()? * (alpha * alpha);
        }
        let chol = a.clone().cholesky().filter(|c| {
            let d = c.l_dirty().diagonal();
            let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
            lo > 1e-8 * hi
        });
        let chol = chol.ok_or_else(|| {
            IuqError::Singular("SᵀΣε⁻¹S + α²Σθ⁻¹ is singular; raise alpha or add informative data".into())
        })?;
        Ok(chol.solve(&stw))
    }

    /// Mismatch `(d - SΔθ)ᵀΣε⁻¹(d - SΔθ)` and regularisation `ΔθᵀΣθ⁻¹Δθ` at `alpha`.
    pub fn lcurve_terms(&self, alpha: f64) -> Result<(f64, f64)> {
        let k = self.gain(alpha)?;
        let d = DVector::from_column_slice(&self.residual);
        let dt = &k * &d;
        let r = &d - &self.sensitivity * &dt;
        let mismatch = (r.transpose() * self.noise_inv()? * &r)[0];
        let reg = (dt.transpose() * self.prior_inv()? * &dt)[0];
        Ok((mismatch, reg))
    }
}

fn stack(
    model: &dyn Model,
    experiments: &[ExperimentRecord],
    theta: &[f64],
    fd_rel_step: f64,
) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut resid = Vec::new();
    let mut noise = Vec::new();
    for e in experiments {
        let y = evaluate(model, &e.design.values, theta)?.values;
        let s = finite_difference_sensitivity(model, &e.design.values, theta, fd_rel_step)?.entries;
        for j in 0..y.len() {
            resid.push(e.observed.values[j] - y[j]);
            noise.push(e.noise_var[j]);
            rows.push(s.row(j).iter().copied().collect());
        }
    }
    let s = DMatrix::from_fn(rows.len(), theta.len(), |r, c| rows[r][c]);
    Ok((s, resid, noise))
}

fn sensitivities_only(model: &dyn Model, experiments: &[ExperimentRecord], theta: &[f64], fd_rel_step: f64) -> Result<DMatrix<f64>> {
    let blocks = experiments
        .iter()
        .map(|e| finite_difference_sensitivity(model, &e.design.values, theta, fd_rel_step).map(|s| s.entries))
        .collect::<Result<Vec<_>>>()?;
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, theta.len());
    let mut r0 = 0;
    for b in blocks {
        out.view_mut((r0, 0), (b.nrows(), b.ncols())).copy_from(&b);
        r0 += b.nrows();
    }
    Ok(out)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LcurveWarning {
    /// Both terms are constant across the grid; alpha fell back to 1.
    FlatCurve,
    /// No corner (curvature never positive): the data sit on the model's
    /// column space, so the weakest regularisation in the grid was taken.
    NoCorner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcurvePoint {
    pub alpha: f64,
    pub mismatch: f64,
    pub regularization: f64,
    /// Signed curvature of the (log mismatch, log regularisation) curve; NaN at the ends.
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcurveSelection {
    pub alpha: f64,
    pub points: Vec<LcurvePoint>,
    pub warning: Option<LcurveWarning>,
}

/// Picks α at the maximum signed curvature of the log-log L-curve; traversed
/// with increasing α a proper corner turns counter-clockwise (positive).
pub fn select_alpha_lcurve(problem: &LinearProblem, alphas: &[f64]) -> Result<LcurveSelection> {
    if alphas.len() < LCURVE_MIN_NODES {
        return Err(IuqError::invalid(format!("alpha grid needs at least {LCURVE_MIN_NODES} nodes")));
    }
    if alphas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) || alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(IuqError::invalid("alpha grid must be positive and strictly increasing"));
    }
    if (alphas[alphas.len() - 1] / alphas[0]).log10() < LCURVE_MIN_DECADES - 1e-9 {
        return Err(IuqError::invalid(format!("alpha grid must span at least {LCURVE_MIN_DECADES} decades")));
    }
    let terms = alphas.iter().map(|a| problem.lcurve_terms(*a)).collect::<Result<Vec<_>>>()?;
    let t: Vec<f64> = alphas.iter().map(|a| a.ln()).collect();
    let x: Vec<f64> = terms.iter().map(|(m, _)| m.max(1e-300).ln()).collect();
    let y: Vec<f64> = terms.iter().map(|(_, r)| r.max(1e-300).ln()).collect();
    let mut kappa = signed_curvature(&t, &x, &y);
    let points: Vec<LcurvePoint> = alphas
        .iter()
        .zip(&terms)
        .zip(&kappa)
        .map(|((a, (m, r)), k)| LcurvePoint { alpha: *a, mismatch: *m, regularization: *r, curvature: *k })
        .collect();

    let span = |v: &[f64]| v.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b)) - v.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    if span(&x) < 1e-9 && span(&y) < 1e-9 {
        log::warn!("L-curve is flat; using alpha = 1");
        return Ok(LcurveSelection { alpha: 1.0, points, warning: Some(LcurveWarning::FlatCurve) });
    }
    // nodes where the curve is nearly stationary carry no shape information
    let speed: Vec<f64> = (0..t.len())
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(t.len() - 1));
            ((x[b] - x[a]).powi(2) + (y[b] - y[a]).powi(2)).sqrt() / (t[b] - t[a])
        })
        .collect();
    let vmax = speed.iter().copied().fold(0.0, f64::max);
    for (k, v) in kappa.iter_mut().zip(&speed) {
        if *v < 1e-2 * vmax {
            *k = f64::NAN;
        }
    }
    let best = kappa
        .iter()
        .enumerate()
        .filter(|(_, k)| k.is_finite())
        .max_by(|a, b| a.1.total_cmp(b.1));
    match best {
        Some((i, k)) if *k > 0.0 => Ok(LcurveSelection { alpha: alphas[i], points, warning: None }),
        _ => {
            log::warn!("L-curve has no corner; using the smallest alpha");
            Ok(LcurveSelection { alpha: alphas[0], points, warning: Some(LcurveWarning::NoCorner) })
        }
    }
}

/// `(x'y'' - y'x'') / (x'² + y'²)^{3/2}` with second-order differences on a
/// non-uniform parameter grid. End points are NaN.
pub fn signed_curvature(t: &[f64], x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut out = vec![f64::NAN; n];
    for i in 1..n.saturating_sub(1) {
        let (h0, h1) = (t[i] - t[i - 1], t[i + 1] - t[i]);
        let d1 = |f: &[f64]| (h0 * h0 * f[i + 1] + (h1 * h1 - h0 * h0) * f[i] - h1 * h1 * f[i - 1]) / (h0 * h1 * (h0 + h1));
        let d2 = |f: &[f64]| 2.0 * (h0 * f[i + 1] - (h0 + h1) * f[i] + h1 * f[i - 1]) / (h0 * h1 * (h0 + h1));
        let (xp, yp, xpp, ypp) = (d1(x), d1(y), d2(x), d2(y));
        let speed = (xp * xp + yp * yp).powf(1.5);
        out[i] = if speed > 1e-300 { (xp * ypp - yp * xpp) / speed } else { 0.0 };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McdaPosterior {
    pub theta_post: Vec<f64>,
    pub cov_post: Vec<Vec<f64>>,
    /// Sandwich `S Σθ Sᵀ` at the prior.
    pub qoi_cov_prior: Vec<Vec<f64>>,
    pub qoi_cov_post: Vec<Vec<f64>>,
    pub alpha: f64,
    pub route: McdaRoute,
    pub chain: Option<McmcChain>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn from_rows(r: &[Vec<f64>]) -> DMatrix<f64> {
    let n = r.len();
    let k = r.first().map_or(0, |v| v.len());
    DMatrix::from_fn(n, k, |i, j| r[i][j])
}

impl McdaPosterior {
    pub fn cov_post_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.cov_post)
    }

    pub fn qoi_cov_post_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.qoi_cov_post)
    }
}

/// Regularised linear update. `sensitivity_post` is `S` at `θ_post` for the
/// posterior QoI covariance; `None` reuses the prior sensitivities.
///
/// The parameter covariance is evaluated in Joseph form
/// `(I-KS)Σθ(I-KS)ᵀ + KΣεKᵀ`, algebraically identical to the expanded
/// four-term expression and PSD by construction.
pub fn mcda_deterministic(problem: &LinearProblem, alpha: f64, sensitivity_post: Option<&DMatrix<f64>>) -> Result<McdaPosterior> {
    let k = problem.gain(alpha)?;
    let s = &problem.sensitivity;
    let n = problem.theta_prior.len();
    let dt = &k * DVector::from_column_slice(&problem.residual);
    let theta_post: Vec<f64> = problem.theta_prior.iter().zip(dt.iter()).map(|(a, b)| a + b).collect();
    let ikz = DMatrix::identity(n, n) - &k * s;
    let cov = symmetrize(&ikz * problem.prior_cov.matrix() * ikz.transpose() + &k * problem.noise_cov.matrix() * k.transpose());
    let s_post = sensitivity_post.unwrap_or(s);
    if s_post.shape() != s.shape() {
        return Err(IuqError::DimensionMismatch { what: "posterior sensitivity rows", expected: s.nrows(), got: s_post.nrows() });
    }
    let qoi_prior = symmetrize(s * problem.prior_cov.matrix() * s.transpose());
    let qoi_post = symmetrize(s_post * &cov * s_post.transpose());
    Ok(McdaPosterior {
        theta_post,
        cov_post: rows(&cov),
        qoi_cov_prior: rows(&qoi_prior),
        qoi_cov_post: rows(&qoi_post),
        alpha,
        route: McdaRoute::Deterministic,
        chain: None,
    })
}

/// Linear route on a model: linearise at the prior mean, update, then
/// recompute sensitivities at `θ_post` for the posterior QoI covariance.
pub fn mcda_deterministic_model(
    model: &dyn Model,
    experiments: &[ExperimentRecord],
    theta_prior: &[f64],
    prior_cov: CovMatrix,
    alpha: f64,
    fd_rel_step: f64,
) -> Result<McdaPosterior> {
    let problem = LinearProblem::from_model(model, experiments, theta_prior, prior_cov, fd_rel_step)?;
    let first = mcda_deterministic(&problem, alpha, None)?;
    let s_post = sensitivities_only(model, experiments, &first.theta_post, fd_rel_step)?;
    mcda_deterministic(&problem, alpha, Some(&s_post))
}

/// Non-linear route: samples the posterior `N(θ; θ_prior, Σθ) · Π N(y^E - y^M(θ); 0, Σε)`
/// with every normalising constant kept. Model failures count as zero density.
pub fn mcda_probabilistic(
    model: &dyn Model,
    experiments: &[ExperimentRecord],
    theta_prior: &[f64],
    prior_cov: &CovMatrix,
    mcmc: &McmcConfig,
) -> Result<McdaPosterior> {
    if mcmc.length < MIN_CHAIN_LENGTH {
        return Err(IuqError::invalid(format!("probabilistic route needs a chain of at least {MIN_CHAIN_LENGTH} iterations")));
    }
    if prior_cov.dim() != theta_prior.len() || model.param_dim() != theta_prior.len() {
        return Err(IuqError::DimensionMismatch { what: "prior dimension", expected: model.param_dim(), got: theta_prior.len() });
    }
    if prior_cov.matrix().clone().cholesky().is_none() {
        return Err(IuqError::invalid("prior covariance must be positive definite (proper prior)"));
    }
    let log_post = |theta: &[f64]| -> f64 {
        let Ok(lp) = log_mvn_pdf(theta, theta_prior, prior_cov) else { return f64::NEG_INFINITY };
        let mut ll = 0.0;
        for e in experiments {
            let Ok(y) = evaluate(model, &e.design.values, theta) else { return f64::NEG_INFINITY };
            let r: Vec<f64> = e.observed.values.iter().zip(&y.values).map(|(o, m)| o - m).collect();
            ll += log_diag_normal(&r, &e.noise_var);
        }
        lp + ll
    };
    let mut cfg = mcmc.clone();
    if cfg.proposal_sd.is_none() && cfg.proposal_cov.is_none() {
        cfg.proposal_sd = Some(prior_cov.diagonal().iter().map(|v| 0.5 * v.sqrt()).collect());
    }
    let chain = mh_sample(log_post, theta_prior, &cfg)?;
    let (mean, cov) = sample_mean_cov(&chain.samples);

    let s_prior = sensitivities_only(model, experiments, theta_prior, 1e-4)?;
    let qoi_prior = symmetrize(&s_prior * prior_cov.matrix() * s_prior.transpose());
    // posterior predictive covariance from up to 1000 evenly thinned draws
    let step = (chain.samples.len() / 1000).max(1);
    let outputs = chain
        .samples
        .iter()
        .step_by(step)
        .map(|t| {
            let mut y = Vec::new();
            for e in experiments {
                y.extend(evaluate(model, &e.design.values, t)?.values);
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, qoi_post) = sample_mean_cov(&outputs);
    Ok(McdaPosterior {
        theta_post: mean,
        cov_post: rows(&cov),
        qoi_cov_prior: rows(&qoi_prior),
        qoi_cov_post: rows(&qoi_post),
        alpha: 1.0,
        route: McdaRoute::Probabilistic,
        chain: Some(chain),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineModel, DesignPoint, FnModel, QoiVector};
    use rand_distr::{Distribution, StandardNormal};

    fn random_problem(seed: u64, i: usize, j: usize) -> LinearProblem {
        let mut rng = RngStream::new(seed).rng();
        let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
        let s = DMatrix::from_fn(j, i, |_, _| g());
        let a = DMatrix::from_fn(i, i, |_, _| 0.5 * g());
        let prior = &a * a.transpose() + DMatrix::identity(i, i) * 0.5;
        let noise: Vec<f64> = (0..j).map(|_| 0.05 + 0.1 * g().abs()).collect();
        let theta0: Vec<f64> = (0..i).map(|_| g()).collect();
        let d: Vec<f64> = (0..j).map(|_| g()).collect();
        LinearProblem::new(theta0, CovMatrix::new(prior).unwrap(), s, d, CovMatrix::from_diag(&noise)).unwrap()
    }

    #[test]
    fn zero_alpha_square_is_exact_inversion() {
        let p = random_problem(1, 3, 3);
        let post = mcda_deterministic(&p, 0.0, None).unwrap();
        let delta = p.sensitivity.clone().lu().solve(&DVector::from_column_slice(&p.residual)).unwrap();
        for k in 0..3 {
            assert!((post.theta_post[k] - p.theta_prior[k] - delta[k]).abs() < 1e-8);
        }
        let gain = p.gain(0.0).unwrap();
        let inv = p.sensitivity.clone().try_inverse().unwrap();
        assert!((gain - inv).amax() < 1e-8);
    }

    #[test]
    fn large_alpha_returns_prior() {
        let p = random_problem(2, 3, 6);
        let post = mcda_deterministic(&p, 1e6, None).unwrap();
        for k in 0..3 {
            assert!((post.theta_post[k] - p.theta_prior[k]).abs() < 1e-4);
        }
        assert!(p.gain(1e6).unwrap().amax() < 1e-8);
    }

    #[test]
    fn unit_alpha_is_bayesian_linear_regression() {
        let p = random_problem(3, 3, 6);
        let post = mcda_deterministic(&p, 1.0, None).unwrap();
        // covariance form of the conjugate update
        let s = &p.sensitivity;
        let sp = p.prior_cov.matrix();
        let innov = s * sp * s.transpose() + p.noise_cov.matrix();
        let gain = sp * s.transpose() * innov.try_inverse().unwrap();
        let mean = DVector::from_column_slice(&p.theta_prior) + &gain * DVector::from_column_slice(&p.residual);
        let cov = sp - &gain * s * sp;
        for k in 0..3 {
            assert!((post.theta_post[k] - mean[k]).abs() < 1e-8);
        }
        assert!((post.cov_post_matrix() - cov).amax() < 1e-8);
    }

    #[test]
    fn singular_normal_matrix_is_an_error() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let p = LinearProblem::new(vec![0.0, 0.0], CovMatrix::identity(2), s, vec![1.0, 2.0], CovMatrix::identity(2)).unwrap();
        assert!(matches!(p.gain(0.0), Err(IuqError::Singular(_))));
        assert!(p.gain(1.0).is_ok());
    }

    #[test]
    fn covariances_are_psd() {
        for seed in 0..10 {
            let p = random_problem(100 + seed, 3, 5);
            let post = mcda_deterministic(&p, 0.7, None).unwrap();
            assert!(CovMatrix::new(post.cov_post_matrix()).is_ok());
            assert!(CovMatrix::new(from_rows(&post.qoi_cov_prior)).is_ok());
            assert!(CovMatrix::new(post.qoi_cov_post_matrix()).is_ok());
        }
    }

    fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / (n - 1) as f64)).collect()
    }

    #[test]
    fn lcurve_grid_preconditions() {
        let p = random_problem(4, 2, 4);
        assert!(select_alpha_lcurve(&p, &[1.0]).is_err());
        assert!(select_alpha_lcurve(&p, &log_grid(0.0, 2.0, 30)).is_err());
        assert!(select_alpha_lcurve(&p, &log_grid(-3.0, 3.0, 30)).is_ok());
    }

    #[test]
    fn lcurve_consistent_data_recovers_shift() {
        let s = DMatrix::from_row_slice(4, 2, &[1.0, 0.2, 0.3, 1.0, 0.5, -0.4, 0.8, 0.6]);
        let delta = DVector::from_vec(vec![0.3, -0.2]);
        let d: Vec<f64> = (&s * &delta).iter().copied().collect();
        let p = LinearProblem::new(vec![1.0, 1.0], CovMatrix::from_diag(&[0.25, 0.25]), s, d, CovMatrix::from_diag(&[1e-4; 4])).unwrap();
        let sel = select_alpha_lcurve(&p, &log_grid(-4.0, 2.0, 40)).unwrap();
        assert!(sel.alpha < 1e-2, "{}", sel.alpha);
        let post = mcda_deterministic(&p, sel.alpha, None).unwrap();
        for k in 0..2 {
            let got = post.theta_post[k] - 1.0;
            assert!((got - delta[k]).abs() <= 0.01 * delta[k].abs(), "{got}");
        }
    }

    /// Diagonal ill-posed problem with singular values 10^{-k/2}, unit prior and noise.
    fn picard_problem(d: Vec<f64>) -> LinearProblem {
        let sv: Vec<f64> = (0..12).map(|k| 10f64.powf(-(k as f64) / 2.0)).collect();
        let s = DMatrix::from_diagonal(&DVector::from_vec(sv));
        LinearProblem::new(vec![0.0; 12], CovMatrix::identity(12), s, d, CovMatrix::identity(12)).unwrap()
    }

    fn dense_corner(p: &LinearProblem) -> f64 {
        // closed form per component: Δθ = s d / (s² + α²)
        let dense = log_grid(-6.0, 2.0, 20001);
        let t: Vec<f64> = dense.iter().map(|a| a.ln()).collect();
        let (x, y): (Vec<f64>, Vec<f64>) = dense
            .iter()
            .map(|a| {
                let (mut rho, mut eta) = (0.0, 0.0);
                for k in 0..12 {
                    let (sk, dk) = (p.sensitivity[(k, k)], p.residual[k]);
                    let dt = sk * dk / (sk * sk + a * a);
                    rho += (dk - sk * dt).powi(2);
                    eta += dt * dt;
                }
                (rho.ln(), eta.ln())
            })
            .unzip();
        let k = signed_curvature(&t, &x, &y);
        let (i, _) = k.iter().enumerate().filter(|(_, v)| v.is_finite()).max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        dense[i]
    }

    #[test]
    fn lcurve_corner_matches_dense_oracle() {
        let mut rng = RngStream::new(3).rng();
        let noise: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
        let signal: Vec<f64> = (0..12).map(|k| 10f64.powf(-(k as f64) / 2.0) * (1.0 + 0.1 * k as f64) + 1e-3 * noise[k]).collect();
        let grid = log_grid(-6.0, 2.0, 33);
        let cell = 8.0 / 32.0;
        let pn = picard_problem(noise);
        let ps = picard_problem(signal);
        let an = select_alpha_lcurve(&pn, &grid).unwrap();
        let as_ = select_alpha_lcurve(&ps, &grid).unwrap();
        assert!(an.warning.is_none() && as_.warning.is_none());
        for (sel, p) in [(&an, &pn), (&as_, &ps)] {
            let oracle = dense_corner(p);
            assert!((sel.alpha.log10() - oracle.log10()).abs() <= cell + 1e-9, "{} vs {oracle}", sel.alpha);
        }
    }

    #[test]
    fn lcurve_flat_falls_back_to_one() {
        let p = LinearProblem::new(vec![0.0], CovMatrix::from_diag(&[1.0]), DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), vec![0.0, 1.0], CovMatrix::identity(2)).unwrap();
        let sel = select_alpha_lcurve(&p, &log_grid(-2.0, 2.0, 21)).unwrap();
        assert_eq!(sel.alpha, 1.0);
        assert_eq!(sel.warning, Some(LcurveWarning::FlatCurve));
    }

    #[test]
    fn linearity_gate() {
        let affine = AffineModel::linear(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]), DVector::from_vec(vec![0.1, 0.2])).unwrap();
        let rep = linearity_test(&affine, &[vec![1.0]], &[1.0, 1.0], &CovMatrix::from_diag(&[0.04, 0.04]), 16, 1e-4, RngStream::new(1)).unwrap();
        assert!(rep.r2.iter().all(|r| (r - 1.0).abs() < 1e-9));
        assert_eq!(rep.route, McdaRoute::Deterministic);

        let expo = FnModel::scalar("exp3", 1, vec![0.0], |_, t| vec![(3.0 * t[0]).exp()]);
        let rep = linearity_test(&expo, &[vec![0.0]], &[0.0], &CovMatrix::from_diag(&[0.25]), 16, 1e-4, RngStream::new(1)).unwrap();
        // independent R² of the tangent 1 + 3θ on the same probes
        let probes = latin_unit(16, 1, &mut RngStream::new(1).rng());
        let ys: Vec<f64> = probes.iter().map(|u| (3.0 * u[0]).exp()).collect();
        let m = ys.iter().sum::<f64>() / 16.0;
        let ss_tot: f64 = ys.iter().map(|y| (y - m).powi(2)).sum();
        let ss_res: f64 = probes.iter().zip(&ys).map(|(u, y)| (y - 1.0 - 3.0 * u[0]).powi(2)).sum();
        assert!((rep.r2[0] - (1.0 - ss_res / ss_tot)).abs() < 1e-6);
        assert!(rep.min_r2 < 0.99);
        assert_eq!(rep.route, McdaRoute::Probabilistic);

        let rep = linearity_test(&expo, &[vec![0.0]], &[0.0], &CovMatrix::from_diag(&[1e-10]), 16, 1e-4, RngStream::new(1)).unwrap();
        assert_eq!(rep.route, McdaRoute::Deterministic);
        assert!(linearity_test(&expo, &[vec![0.0]], &[0.0], &CovMatrix::from_diag(&[0.25]), 4, 1e-4, RngStream::new(1)).is_err());
    }

    fn record(label: &str, y: Vec<f64>, noise_var: f64) -> ExperimentRecord {
        let n = y.len();
        ExperimentRecord::new(label, DesignPoint::unlabeled(vec![1.0]), QoiVector::scalars(y), vec![noise_var; n]).unwrap()
    }

    #[test]
    fn deterministic_model_route_uses_posterior_sensitivity() {
        let m = FnModel::scalar("sq", 1, vec![1.0], |_, t| vec![t[0] * t[0]]);
        let post = mcda_deterministic_model(&m, &[record("a", vec![1.21], 1e-4)], &[1.0], CovMatrix::from_diag(&[0.01]), 1.0, 1e-6).unwrap();
        let s_post = 2.0 * post.theta_post[0];
        let expect = s_post * s_post * post.cov_post[0][0];
        assert!((post.qoi_cov_post[0][0] - expect).abs() < 1e-8 * expect);
        assert!((post.qoi_cov_prior[0][0] - 4.0 * 0.01).abs() < 1e-8);
    }

    fn long_chain(seed: u64) -> McmcConfig {
        McmcConfig { length: 40_000, seed, ..McmcConfig::default() }
    }

    #[test]
    fn probabilistic_matches_linear_route() {
        let s = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 1.0, 0.7, 0.7]);
        let model = AffineModel::linear(s.clone(), DVector::zeros(3)).unwrap();
        let exps = vec![record("a", vec![0.4, 0.2, 0.9], 0.05)];
        let prior = CovMatrix::from_diag(&[0.5, 0.5]);
        let det = mcda_deterministic_model(&model, &exps, &[0.0, 0.0], prior.clone(), 1.0, 1e-4).unwrap();
        let prob = mcda_probabilistic(&model, &exps, &[0.0, 0.0], &prior, &long_chain(5)).unwrap();
        let chain = prob.chain.as_ref().unwrap();
        for k in 0..2 {
            let err = crate::mcmc::mcse(&chain.column(k));
            assert!((prob.theta_post[k] - det.theta_post[k]).abs() <= 3.0 * err, "{k}: {} vs {} ({err})", prob.theta_post[k], det.theta_post[k]);
        }
        assert_eq!(prob.route, McdaRoute::Probabilistic);
    }

    #[test]
    fn uninformative_likelihood_recovers_prior() {
        let model = AffineModel::linear(DMatrix::identity(1, 1), DVector::zeros(1)).unwrap();
        let exps = vec![record("a", vec![5.0], 1e12)];
        let prob = mcda_probabilistic(&model, &exps, &[0.3], &CovMatrix::from_diag(&[0.04]), &long_chain(6)).unwrap();
        let chain = prob.chain.as_ref().unwrap();
        let err = crate::mcmc::mcse(&chain.column(0));
        assert!((prob.theta_post[0] - 0.3).abs() <= 3.0 * err);
        assert!((prob.cov_post[0][0] / 0.04 - 1.0).abs() < 0.1);
    }

    #[test]
    fn bimodal_posterior_visits_both_modes() {
        let m = FnModel::scalar("sq", 1, vec![0.0], |_, t| vec![t[0] * t[0]]);
        let exps = vec![record("a", vec![1.0], 0.25)];
        let prob = mcda_probabilistic(&m, &exps, &[0.0], &CovMatrix::from_diag(&[1.0]), &long_chain(7)).unwrap();
        let c = prob.chain.unwrap().column(0);
        let pos: Vec<f64> = c.iter().copied().filter(|v| *v > 0.0).collect();
        let neg: Vec<f64> = c.iter().copied().filter(|v| *v < 0.0).collect();
        let frac = pos.len() as f64 / c.len() as f64;
        assert!((0.3..0.7).contains(&frac), "{frac}");
        let mp = pos.iter().sum::<f64>() / pos.len() as f64;
        let mn = neg.iter().sum::<f64>() / neg.len() as f64;
        assert!((mp + mn).abs() <= 0.05 * mp, "{mp} {mn}");
    }

    #[test]
    fn short_chain_rejected() {
        let m = FnModel::scalar("id", 1, vec![0.0], |_, t| vec![t[0]]);
        let cfg = McmcConfig { length: 5_000, ..McmcConfig::default() };
        assert!(mcda_probabilistic(&m, &[record("a", vec![0.0], 1.0)], &[0.0], &CovMatrix::identity(1), &cfg).is_err());
    }
}
