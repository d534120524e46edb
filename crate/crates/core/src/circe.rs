//! CIRCÉ: E-M estimation of a Gaussian law `θ ~ N(b, Σθ)` from
//! experiment-minus-model residuals and sensitivities, plus the iterative
//! variant, the post-hoc linearity check and an E-M MLE/MAP variant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IuqError, Result};
use crate::model::{evaluate, finite_difference_sensitivity, CenteredModel, ExperimentRecord, Model};
use crate::stats::{inverse_spd, GaussianParamSpec, Transform};

/// Lower clamp on the predicted residual variance `X_j`.
pub const X_FLOOR: f64 = 1e-30;
/// Two sensitivity columns with `|cos|` above this are flagged as collinear.
pub const COLLINEAR_COSINE: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CirceOptions {
    pub estimate_bias: bool,
    pub max_iter: usize,
    pub tol: f64,
    /// Starting diagonal of `Σθ`; identity when absent.
    pub initial_var: Option<Vec<f64>>,
}

impl Default for CirceOptions {
    fn default() -> Self {
        CirceOptions { estimate_bias: false, max_iter: 10_000, tol: 1e-8, initial_var: None }
    }
}

/// Residuals `d_j = yE_j - yM_j`, the `J x I` sensitivity matrix and `ε_j²`.
#[derive(Debug, Clone, PartialEq)]
pub struct CirceInputs {
    pub residuals: Vec<f64>,
    pub sensitivities: DMatrix<f64>,
    pub noise_vars: Vec<f64>,
    pub options: CirceOptions,
}

impl CirceInputs {
    pub fn new(residuals: Vec<f64>, sensitivities: DMatrix<f64>, noise_vars: Vec<f64>, options: CirceOptions) -> Result<Self> {
        let inputs = CirceInputs { residuals, sensitivities, noise_vars, options };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn n_qoi(&self) -> usize {
        self.residuals.len()
    }

    pub fn n_param(&self) -> usize {
        self.sensitivities.ncols()
    }

    fn validate(&self) -> Result<()> {
        let j = self.residuals.len();
        if j == 0 {
            return Err(IuqError::invalid("at least one residual is required"));
        }
        if self.sensitivities.nrows() != j {
            return Err(IuqError::DimensionMismatch { what: "sensitivity rows", expected: j, got: self.sensitivities.nrows() });
        }
        if self.sensitivities.ncols() == 0 {
            return Err(IuqError::invalid("at least one parameter is required"));
        }
        if self.noise_vars.len() != j {
            return Err(IuqError::DimensionMismatch { what: "noise variances", expected: j, got: self.noise_vars.len() });
        }
        if self.residuals.iter().chain(self.sensitivities.iter()).any(|v| !v.is_finite()) {
            return Err(IuqError::invalid("residuals and sensitivities must be finite"));
        }
        if self.noise_vars.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(IuqError::invalid("noise variances must be finite and non-negative"));
        }
        let o = &self.options;
        if o.max_iter == 0 || !(o.tol > 0.0) {
            return Err(IuqError::invalid("max_iter must be positive and tol > 0"));
        }
        if let Some(v) = &o.initial_var {
            if v.len() != self.n_param() {
                return Err(IuqError::DimensionMismatch { what: "initial variances", expected: self.n_param(), got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(IuqError::invalid("initial variances must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CirceWarning {
    /// Two sensitivity columns are nearly parallel.
    Collinear { first: usize, second: usize, cosine: f64 },
    /// More than three parameters are estimated at once.
    ManyParameters { count: usize },
    /// Fewer QoIs than parameters.
    FewQois { qois: usize, params: usize },
    /// A sensitivity column is identically zero; that variance is not identifiable.
    ZeroSensitivity { param: usize },
    /// `X_j` hit the lower clamp (all-zero noise with vanishing predicted spread).
    VarianceFloor { iteration: usize },
    /// Log-likelihood decreased by more than the slack.
    LikelihoodDecrease { iteration: usize, drop: f64 },
    NotConverged { iterations: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirceEstimate {
    pub spec: GaussianParamSpec,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood at the start point followed by one entry per iteration.
    pub loglik_trace: Vec<f64>,
    pub warnings: Vec<CirceWarning>,
}

impl CirceEstimate {
    pub fn mean(&self) -> &[f64] {
        &self.spec.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.spec.var
    }

    /// Largest drop between consecutive log-likelihood entries (0 when monotone).
    pub fn max_loglik_drop(&self) -> f64 {
        self.loglik_trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
    }
}

/// 95% interval of the multiplier `p` when `θ ~ N(b, σ²)`.
pub fn multiplier_interval(transform: Transform, b: f64, sd: f64) -> (f64, f64) {
    (transform.multiplier(b - 2.0 * sd), transform.multiplier(b + 2.0 * sd))
}

/// Pairs of sensitivity columns with `|cos| > 0.999`, sorted by decreasing `|cos|`.
pub fn collinear_pairs(s: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let n = s.ncols();
    let norms: Vec<f64> = (0..n).map(|i| s.column(i).norm()).collect();
    let mut out = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if norms[a] == 0.0 || norms[b] == 0.0 {
                continue;
            }
            let c = s.column(a).dot(&s.column(b)) / (norms[a] * norms[b]);
            if c.abs() > COLLINEAR_COSINE {
                out.push((a, b, c.abs()));
            }
        }
    }
    out.sort_by(|x, y| y.2.total_cmp(&x.2));
    out
}

fn most_collinear_pair(s: &DMatrix<f64>) -> (usize, usize, f64) {
    let n = s.ncols();
    let mut best = (0, 1.min(n - 1), 0.0);
    for a in 0..n {
        for b in (a + 1)..n {
            let na = s.column(a).norm();
            let nb = s.column(b).norm();
            let c = if na == 0.0 || nb == 0.0 { 1.0 } else { (s.column(a).dot(&s.column(b)) / (na * nb)).abs() };
            if c > best.2 {
                best = (a, b, c);
            }
        }
    }
    best
}

/// `X_j = ε_j² + s_jᵀ Σ s_j` for diagonal `Σ`; second value flags the clamp.
fn predicted_vars(inp: &CirceInputs, var: &[f64]) -> (Vec<f64>, bool) {
    let s = &inp.sensitivities;
    let mut clamped = false;
    let x = (0..inp.n_qoi())
        .map(|j| {
            let mut x = inp.noise_vars[j];
            for i in 0..var.len() {
                x += s[(j, i)] * s[(j, i)] * var[i];
            }
            if x < X_FLOOR {
                clamped = true;
                X_FLOOR
            } else {
                x
            }
        })
        .collect();
    (x, clamped)
}

/// Residual log-likelihood `ln L(b, Σ)` for diagonal `Σ`.
pub fn circe_loglik(inp: &CirceInputs, bias: &[f64], var: &[f64]) -> f64 {
    let (x, _) = predicted_vars(inp, var);
    let s = &inp.sensitivities;
    let mut ll = -0.5 * inp.n_qoi() as f64 * (2.0 * std::f64::consts::PI).ln();
    for j in 0..inp.n_qoi() {
        let pred: f64 = (0..bias.len()).map(|i| s[(j, i)] * bias[i]).sum();
        let r = inp.residuals[j] - pred;
        ll -= 0.5 * (x[j].ln() + r * r / x[j]);
    }
    ll
}

/// One E-M covariance step at fixed bias; returns the new diagonal.
fn covariance_step(inp: &CirceInputs, bias: &[f64], var: &[f64], x: &[f64]) -> Vec<f64> {
    let s = &inp.sensitivities;
    let n = var.len();
    let j_count = inp.n_qoi() as f64;
    let mut acc = vec![0.0; n];
    for j in 0..inp.n_qoi() {
        let pred: f64 = (0..n).map(|i| s[(j, i)] * bias[i]).sum();
        let r = inp.residuals[j] - pred;
        let factor = r * r / x[j] - 1.0;
        for i in 0..n {
            // diagonal of Y_j = Σ s sᵀ Σ
            let y = (var[i] * s[(j, i)]).powi(2);
            acc[i] += y / x[j] * factor;
        }
    }
    var.iter().zip(&acc).map(|(v, a)| (v + a / j_count).max(0.0)).collect()
}

/// Weighted normal equations for the bias given `X_j`.
fn bias_step(inp: &CirceInputs, x: &[f64]) -> Result<Vec<f64>> {
    let s = &inp.sensitivities;
    let n = inp.n_param();
    let mut a: DMatrix<f64> = DMatrix::zeros(n, n);
    let mut rhs: DVector<f64> = DVector::zeros(n);
    for j in 0..inp.n_qoi() {
        let w = 1.0 / x[j];
        for p in 0..n {
            rhs[p] += w * s[(j, p)] * inp.residuals[j];
            for q in 0..n {
                a[(p, q)] += w * s[(j, p)] * s[(j, q)];
            }
        }
    }
    if let Some(i) = (0..n).find(|&i| s.column(i).iter().all(|v| *v == 0.0)) {
        return Err(IuqError::Singular(format!("sensitivity column {i} is identically zero; its bias is not identifiable")));
    }
    // Scale-free singularity test on the correlation form of the normal matrix.
    let d: Vec<f64> = (0..n).map(|i| a[(i, i)].sqrt()).collect();
    let corr = DMatrix::from_fn(n, n, |p, q| a[(p, q)] / (d[p] * d[q]));
    let eig = corr.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min_eig > 1e-12) {
        let (first, second, cosine) = most_collinear_pair(s);
        return Err(IuqError::Collinear { first, second, cosine });
    }
    let scaled_rhs = DVector::from_fn(n, |p, _| rhs[p] / d[p]);
    let z = corr
        .cholesky()
        .ok_or_else(|| {
            let (first, second, cosine) = most_collinear_pair(s);
            IuqError::Collinear { first, second, cosine }
        })?
        .solve(&scaled_rhs);
    Ok((0..n).map(|p| z[p] / d[p]).collect())
}

fn relative_change(new: &[f64], old: &[f64], scale: &[f64]) -> f64 {
    new.iter()
        .zip(old)
        .zip(scale)
        .map(|((a, b), s)| {
            let diff = (a - b).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / s.max(1e-300)
            }
        })
        .fold(0.0, f64::max)
}

fn structural_warnings(inp: &CirceInputs) -> Vec<CirceWarning> {
    let mut w = Vec::new();
    let (j, i) = (inp.n_qoi(), inp.n_param());
    if i > 3 {
        w.push(CirceWarning::ManyParameters { count: i });
    }
    if j < i {
        w.push(CirceWarning::FewQois { qois: j, params: i });
    }
    for p in 0..i {
        if inp.sensitivities.column(p).iter().all(|v| *v == 0.0) {
            w.push(CirceWarning::ZeroSensitivity { param: p });
        }
    }
    for (first, second, cosine) in collinear_pairs(&inp.sensitivities) {
        w.push(CirceWarning::Collinear { first, second, cosine });
    }
    for wn in &w {
        log::warn!("circe: {wn:?}");
    }
    w
}

const MONOTONE_SLACK: f64 = 1e-8;

fn run_circe(inp: &CirceInputs) -> Result<CirceEstimate> {
    inp.validate()?;
    let n = inp.n_param();
    let opts = &inp.options;
    let mut warnings = structural_warnings(inp);
    let mut var = opts.initial_var.clone().unwrap_or_else(|| vec![1.0; n]);
    let mut bias = vec![0.0; n];
    let mut trace = vec![circe_loglik(inp, &bias, &var)];
    let mut floor_flagged = false;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let (x, clamped) = predicted_vars(inp, &var);
        if clamped && !floor_flagged {
            floor_flagged = true;
            warnings.push(CirceWarning::VarianceFloor { iteration: iterations });
        }
        let new_var = covariance_step(inp, &bias, &var, &x);
        if new_var.iter().any(|v| !v.is_finite()) {
            return Err(IuqError::Divergence(format!("non-finite covariance at iteration {iterations}")));
        }
        let new_bias = if opts.estimate_bias {
            let (x_new, _) = predicted_vars(inp, &new_var);
            bias_step(inp, &x_new)?
        } else {
            bias.clone()
        };
        if new_bias.iter().any(|v| !v.is_finite()) {
            return Err(IuqError::Divergence(format!("non-finite bias at iteration {iterations}")));
        }
        let var_scale: Vec<f64> = new_var.iter().zip(&var).map(|(a, b)| a.abs().max(b.abs())).collect();
        let bias_scale: Vec<f64> =
            new_bias.iter().zip(&new_var).map(|(b, v)| b.abs().max(v.sqrt())).collect();
        let change = relative_change(&new_var, &var, &var_scale).max(relative_change(&new_bias, &bias, &bias_scale));
        var = new_var;
        bias = new_bias;
        let ll = circe_loglik(inp, &bias, &var);
        let prev = *trace.last().unwrap();
        if ll < prev - MONOTONE_SLACK * prev.abs().max(1.0) {
            log::warn!("circe: log-likelihood decreased by {} at iteration {iterations}", prev - ll);
            warnings.push(CirceWarning::LikelihoodDecrease { iteration: iterations, drop: prev - ll });
        }
        trace.push(ll);
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(CirceWarning::NotConverged { iterations });
    }
    let spec = GaussianParamSpec::additive(bias, var)?;
    Ok(CirceEstimate { spec, iterations, converged, loglik_trace: trace, warnings })
}

/// `Σθ` with the bias held at zero.
pub fn circe_no_bias(inp: &CirceInputs) -> Result<CirceEstimate> {
    if inp.options.estimate_bias {
        return Err(IuqError::invalid("circe_no_bias called with estimate_bias = true"));
    }
    run_circe(inp)
}

/// Joint `(b, Σθ)`: covariance step at the previous bias, then the bias normal equations.
pub fn circe_with_bias(inp: &CirceInputs) -> Result<CirceEstimate> {
    if !inp.options.estimate_bias {
        return Err(IuqError::invalid("circe_with_bias called with estimate_bias = false"));
    }
    run_circe(inp)
}

/// Dispatches on `options.estimate_bias`.
pub fn circe(inp: &CirceInputs) -> Result<CirceEstimate> {
    run_circe(inp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterativeCirceConfig {
    pub inner: CirceOptions,
    pub outer_max: usize,
    /// Stop once every component of the bias update is below this.
    pub outer_tol: f64,
    pub fd_rel_step: f64,
    pub transforms: Option<Vec<Transform>>,
}

impl Default for IterativeCirceConfig {
    fn default() -> Self {
        IterativeCirceConfig {
            inner: CirceOptions { estimate_bias: true, ..CirceOptions::default() },
            outer_max: 10,
            outer_tol: 1e-4,
            fd_rel_step: 1e-4,
            transforms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeCirceResult {
    /// Mean is the final expansion point in centred coordinates.
    pub estimate: CirceEstimate,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Expansion point after each outer iteration.
    pub centers: Vec<Vec<f64>>,
}

/// Stacks residuals `yE - yM(x, center)`, FD sensitivities and noise variances.
pub fn stack_inputs(
    model: &dyn Model,
    experiments: &[ExperimentRecord],
    center: &[f64],
    fd_rel_step: f64,
    options: CirceOptions,
) -> Result<CirceInputs> {
    let n = model.param_dim();
    let mut resid = Vec::new();
    let mut noise = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in experiments {
        let y = evaluate(model, &rec.design.values, center)?;
        if y.len() != rec.observed.len() {
            return Err(IuqError::DimensionMismatch { what: "observed QoIs", expected: y.len(), got: rec.observed.len() });
        }
        let s = finite_difference_sensitivity(model, &rec.design.values, center, fd_rel_step)?;
        for j in 0..y.len() {
            resid.push(rec.observed.values[j] - y.values[j]);
            noise.push(rec.noise_var[j]);
            rows.push((0..n).map(|i| s.entries[(j, i)]).collect());
        }
    }
    let sens = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    CirceInputs::new(resid, sens, noise, options)
}

/// Iterative CIRCÉ on a model in its centred parametrisation.
///
/// A run counts as converged when the bias update is below `outer_tol`, or
/// when the residuals at the shifted expansion point equal the tangent-plane
/// prediction (the model is linear over the step), so no further run can
/// change the estimate.
pub fn iterative_circe(
    model: &dyn Model,
    experiments: &[ExperimentRecord],
    theta_start: &[f64],
    config: &IterativeCirceConfig,
) -> Result<IterativeCirceResult> {
    if config.outer_max == 0 {
        return Err(IuqError::invalid("outer_max must be at least 1"));
    }
    if theta_start.len() != model.param_dim() {
        return Err(IuqError::DimensionMismatch { what: "theta_start", expected: model.param_dim(), got: theta_start.len() });
    }
    let transforms = config.transforms.clone().unwrap_or_else(|| vec![Transform::Additive; model.param_dim()]);
    let centred = CenteredModel::new(model, transforms.clone())?;
    let mut center = theta_start.to_vec();
    let mut centers = Vec::new();
    let mut options = config.inner.clone();
    options.estimate_bias = true;
    let mut last: Option<CirceEstimate> = None;
    let mut converged = false;
    let mut outer = 0;
    while outer < config.outer_max {
        outer += 1;
        let inp = stack_inputs(&centred, experiments, &center, config.fd_rel_step, options.clone())?;
        let est = circe_with_bias(&inp)?;
        let step = est.spec.mean.clone();
        let new_center: Vec<f64> = center.iter().zip(&step).map(|(c, b)| c + b).collect();
        let small = step.iter().all(|b| b.abs() < config.outer_tol);
        let exact = !small && tangent_is_exact(&centred, experiments, &inp, &step, &new_center)?;
        center = new_center;
        centers.push(center.clone());
        options.initial_var = Some(est.spec.var.iter().map(|v| v.max(1e-12)).collect());
        last = Some(est);
        if small || exact {
            converged = true;
            break;
        }
    }
    let mut estimate = last.expect("at least one outer iteration");
    estimate.spec = GaussianParamSpec::new(center, estimate.spec.var.clone(), transforms)?;
    Ok(IterativeCirceResult { estimate, outer_iterations: outer, converged, centers })
}

fn tangent_is_exact(
    model: &dyn Model,
    experiments: &[ExperimentRecord],
    inp: &CirceInputs,
    step: &[f64],
    new_center: &[f64],
) -> Result<bool> {
    let s = &inp.sensitivities;
    let mut row = 0;
    let mut max_dev: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for rec in experiments {
        let y = evaluate(model, &rec.design.values, new_center)?;
        for j in 0..y.len() {
            let predicted = inp.residuals[row] - (0..step.len()).map(|i| s[(row, i)] * step[i]).sum::<f64>();
            let actual = rec.observed.values[j] - y.values[j];
            max_dev = max_dev.max((actual - predicted).abs());
            scale = scale.max(rec.observed.values[j].abs()).max(y.values[j].abs());
            row += 1;
        }
    }
    Ok(max_dev <= 1e-9 * scale.max(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    /// Worst relative deviation from the tangent plane for each parameter.
    pub per_param: Vec<f64>,
    pub max_rel_deviation: f64,
    pub threshold: f64,
    /// Set when `max_rel_deviation` exceeds `threshold`: re-run iterative CIRCÉ.
    pub advisory: bool,
}

pub const LINEARITY_THRESHOLD: f64 = 0.05;

/// Evaluates the centred model at `b ± 2σ_i` for each parameter and compares
/// with the tangent-plane prediction at `b`.
pub fn linearity_check(
    model: &dyn Model,
    experiments: &[ExperimentRecord],
    spec: &GaussianParamSpec,
    fd_rel_step: f64,
) -> Result<LinearityReport> {
    let centred = CenteredModel::new(model, spec.transform.clone())?;
    let sd = spec.sd();
    let mut per_param = vec![0.0_f64; spec.dim()];
    for rec in experiments {
        let x = &rec.design.values;
        let base = evaluate(&centred, x, &spec.mean)?;
        let sens = finite_difference_sensitivity(&centred, x, &spec.mean, fd_rel_step)?;
        for (i, sdi) in sd.iter().enumerate() {
            if *sdi == 0.0 {
                continue;
            }
            for sign in [-1.0, 1.0] {
                let mut theta = spec.mean.clone();
                theta[i] += sign * 2.0 * sdi;
                let y = evaluate(&centred, x, &theta)?;
                let mut dev: f64 = 0.0;
                let mut lin_change: f64 = 0.0;
                for j in 0..y.len() {
                    let lin = base.values[j] + sens.entries[(j, i)] * sign * 2.0 * sdi;
                    dev = dev.max((y.values[j] - lin).abs());
                    lin_change = lin_change.max((lin - base.values[j]).abs());
                }
                let rel = if lin_change > 0.0 {
                    dev / lin_change
                } else if dev > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                per_param[i] = per_param[i].max(rel);
            }
        }
    }
    let max_rel_deviation = per_param.iter().copied().fold(0.0, f64::max);
    let advisory = max_rel_deviation > LINEARITY_THRESHOLD;
    if advisory {
        log::warn!("circe: linearity deviation {max_rel_deviation:.3} exceeds 5% at ±2σ; the tangent-plane estimate may be inaccurate");
    }
    Ok(LinearityReport { per_param, max_rel_deviation, threshold: LINEARITY_THRESHOLD, advisory })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSelection {
    pub transforms: Vec<Transform>,
    pub additive_deviation: Vec<f64>,
    pub exponential_deviation: Vec<f64>,
}

/// Chooses, per parameter, the change of variable whose estimate has the
/// smaller linearity deviation; ties and zero nominals go to additive.
pub fn select_transforms(
    model: &dyn Model,
    experiments: &[ExperimentRecord],
    config: &IterativeCirceConfig,
) -> Result<TransformSelection> {
    let n = model.param_dim();
    let nominal = model.nominal();
    let start = vec![0.0; n];
    let run = |t: Transform| -> Result<Vec<f64>> {
        let kinds: Vec<Transform> =
            nominal.iter().map(|v| if *v == 0.0 { Transform::Additive } else { t }).collect();
        let cfg = IterativeCirceConfig { transforms: Some(kinds), ..config.clone() };
        let res = iterative_circe(model, experiments, &start, &cfg)?;
        Ok(linearity_check(model, experiments, &res.estimate.spec, config.fd_rel_step)?.per_param)
    };
    let add = run(Transform::Additive)?;
    let exp = run(Transform::Exponential)?;
    let transforms = (0..n)
        .map(|i| if nominal[i] != 0.0 && exp[i] < add[i] { Transform::Exponential } else { Transform::Additive })
        .collect();
    Ok(TransformSelection { transforms, additive_deviation: add, exponential_deviation: exp })
}

/// One experiment (or QoI group) for the MLE/MAP variant:
/// `residual ~ N(S μ, S Σθ Sᵀ + diag(noise_var))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentBlock {
    pub residual: Vec<f64>,
    pub sensitivities: DMatrix<f64>,
    pub noise_var: Vec<f64>,
}

impl ExperimentBlock {
    pub fn new(residual: Vec<f64>, sensitivities: DMatrix<f64>, noise_var: Vec<f64>) -> Result<Self> {
        if sensitivities.nrows() != residual.len() {
            return Err(IuqError::DimensionMismatch { what: "block sensitivity rows", expected: residual.len(), got: sensitivities.nrows() });
        }
        if noise_var.len() != residual.len() {
            return Err(IuqError::DimensionMismatch { what: "block noise variances", expected: residual.len(), got: noise_var.len() });
        }
        Ok(ExperimentBlock { residual, sensitivities, noise_var })
    }
}

/// Splits CIRCÉ inputs into one block per QoI, each an independent realisation of `θ`.
pub fn blocks_from_circe_inputs(inp: &CirceInputs) -> Vec<ExperimentBlock> {
    (0..inp.n_qoi())
        .map(|j| ExperimentBlock {
            residual: vec![inp.residuals[j]],
            sensitivities: inp.sensitivities.rows(j, 1).into_owned(),
            noise_var: vec![inp.noise_vars[j]],
        })
        .collect()
}

/// Per-parameter normal-inverse-gamma prior:
/// `μ | σ² ~ N(μ0, σ²/κ0)`, `σ² ~ Scaled-Inv-χ²(ν0, σ0²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalInvGammaPrior {
    pub mean: Vec<f64>,
    pub kappa: Vec<f64>,
    pub var: Vec<f64>,
    pub nu: Vec<f64>,
}

impl NormalInvGammaPrior {
    fn validate(&self, n: usize) -> Result<()> {
        for (what, v) in [("prior mean", &self.mean), ("prior kappa", &self.kappa), ("prior var", &self.var), ("prior nu", &self.nu)] {
            if v.len() != n {
                return Err(IuqError::DimensionMismatch { what, expected: n, got: v.len() });
            }
        }
        if self.kappa.iter().chain(&self.nu).chain(&self.var).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(IuqError::invalid("prior kappa, nu and var must be positive and finite"));
        }
        Ok(())
    }

    fn log_density(&self, mean: &[f64], var: &[f64]) -> f64 {
        let mut lp = 0.0;
        for i in 0..mean.len() {
            let v = var[i].max(1e-300);
            let dm = mean[i] - self.mean[i];
            lp += -0.5 * v.ln() - 0.5 * self.kappa[i] * dm * dm / v;
            lp += -(0.5 * self.nu[i] + 1.0) * v.ln() - 0.5 * self.nu[i] * self.var[i] / v;
        }
        lp
    }
}

fn block_loglik(b: &ExperimentBlock, mean: &[f64], var: &[f64]) -> Result<f64> {
    let s = &b.sensitivities;
    let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(var));
    let p = s * &sigma * s.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(&b.noise_var));
    let r = DVector::from_column_slice(&b.residual) - s * DVector::from_column_slice(mean);
    let n = r.len() as f64;
    let chol = crate::stats::factor_with_nugget(&p)?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let z = chol.solve(&r);
    Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&z)))
}

/// E-M maximisation of the summed block log-likelihood over `(μ, Σθ)` with
/// diagonal `Σθ`; with a prior, the log-posterior (MAP).
pub fn mle_map_estimate(
    blocks: &[ExperimentBlock],
    prior: Option<&NormalInvGammaPrior>,
    options: &CirceOptions,
) -> Result<CirceEstimate> {
    let first = blocks.first().ok_or_else(|| IuqError::invalid("at least one experiment block is required"))?;
    let n = first.sensitivities.ncols();
    for b in blocks {
        ExperimentBlock::new(b.residual.clone(), b.sensitivities.clone(), b.noise_var.clone())?;
        if b.sensitivities.ncols() != n {
            return Err(IuqError::DimensionMismatch { what: "block parameter count", expected: n, got: b.sensitivities.ncols() });
        }
    }
    if let Some(p) = prior {
        p.validate(n)?;
    }
    let all_rows = DMatrix::from_fn(blocks.iter().map(|b| b.residual.len()).sum(), n, {
        let rows: Vec<_> = blocks.iter().flat_map(|b| (0..b.residual.len()).map(move |r| b.sensitivities.row(r).into_owned())).collect();
        move |r, c| rows[r][c]
    });
    let stacked = CirceInputs {
        residuals: blocks.iter().flat_map(|b| b.residual.iter().copied()).collect(),
        sensitivities: all_rows.clone(),
        noise_vars: blocks.iter().flat_map(|b| b.noise_var.iter().copied()).collect(),
        options: CirceOptions { estimate_bias: true, ..options.clone() },
    };
    let mut warnings = structural_warnings(&stacked);
    // Identifiability of μ: the stacked normal matrix must be non-singular.
    if prior.is_none() {
        let x: Vec<f64> = vec![1.0; stacked.n_qoi()];
        bias_step(&stacked, &x)?;
    }

    let objective = |mean: &[f64], var: &[f64]| -> Result<f64> {
        let mut ll = 0.0;
        for b in blocks {
            ll += block_loglik(b, mean, var)?;
        }
        if let Some(p) = prior {
            ll += p.log_density(mean, var);
        }
        Ok(ll)
    };

    let mut mean = vec![0.0; n];
    let mut var = options.initial_var.clone().unwrap_or_else(|| vec![1.0; n]);
    if var.len() != n {
        return Err(IuqError::DimensionMismatch { what: "initial variances", expected: n, got: var.len() });
    }
    let mut trace = vec![objective(&mean, &var)?];
    let count = blocks.len() as f64;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(&var));
        let mu = DVector::from_column_slice(&mean);
        let mut m_sum = DVector::zeros(n);
        let mut post: Vec<(DVector<f64>, DVector<f64>)> = Vec::with_capacity(blocks.len());
        for b in blocks {
            let s = &b.sensitivities;
            let p = s * &sigma * s.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(&b.noise_var));
            let p_inv = inverse_spd(&p)?;
            let gain = &sigma * s.transpose() * p_inv;
            let r = DVector::from_column_slice(&b.residual) - s * &mu;
            let m = &mu + &gain * r;
            let c = &sigma - &gain * s * &sigma;
            m_sum += &m;
            post.push((m, c.diagonal()));
        }
        let new_mean: Vec<f64> = match prior {
            None => (0..n).map(|i| m_sum[i] / count).collect(),
            Some(p) => (0..n).map(|i| (p.kappa[i] * p.mean[i] + m_sum[i]) / (p.kappa[i] + count)).collect(),
        };
        let mut spread = vec![0.0; n];
        for (m, c) in &post {
            for i in 0..n {
                spread[i] += (m[i] - new_mean[i]).powi(2) + c[i].max(0.0);
            }
        }
        let new_var: Vec<f64> = match prior {
            None => spread.iter().map(|s| s / count).collect(),
            Some(p) => (0..n)
                .map(|i| {
                    let dm = new_mean[i] - p.mean[i];
                    (p.nu[i] * p.var[i] + p.kappa[i] * dm * dm + spread[i]) / (p.nu[i] + count + 3.0)
                })
                .collect(),
        };
        if new_var.iter().chain(&new_mean).any(|v| !v.is_finite()) {
            return Err(IuqError::Divergence(format!("non-finite estimate at iteration {iterations}")));
        }
        let var_scale: Vec<f64> = new_var.iter().zip(&var).map(|(a, b)| a.abs().max(b.abs())).collect();
        let mean_scale: Vec<f64> = new_mean.iter().zip(&new_var).map(|(b, v)| b.abs().max(v.sqrt())).collect();
        let change = relative_change(&new_var, &var, &var_scale).max(relative_change(&new_mean, &mean, &mean_scale));
        mean = new_mean;
        var = new_var;
        let ll = objective(&mean, &var)?;
        let prev = *trace.last().unwrap();
        if ll < prev - MONOTONE_SLACK * prev.abs().max(1.0) {
            warnings.push(CirceWarning::LikelihoodDecrease { iteration: iterations, drop: prev - ll });
        }
        trace.push(ll);
        if change < options.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(CirceWarning::NotConverged { iterations });
    }
    Ok(CirceEstimate { spec: GaussianParamSpec::additive(mean, var)?, iterations, converged, loglik_trace: trace, warnings })
}
