//! Computer-model abstraction, built-in synthetic models, experiment records
//! and finite-difference sensitivities.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{IuqError, Result};
use crate::stats::{GaussianParamSpec, RngStream, Transform};

/// Experiment-defining inputs `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub values: Vec<f64>,
    pub labels: Vec<String>,
}

impl DesignPoint {
    pub fn new(values: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if values.len() != labels.len() {
            return Err(IuqError::DimensionMismatch { what: "design labels", expected: values.len(), got: labels.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IuqError::invalid("design values must be finite"));
        }
        Ok(DesignPoint { values, labels })
    }

    /// Design with generated labels `x0, x1, ...`.
    pub fn unlabeled(values: Vec<f64>) -> Self {
        let labels = (0..values.len()).map(|i| format!("x{i}")).collect();
        DesignPoint { values, labels }
    }
}

/// Calibration parameters `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationVector {
    pub values: Vec<f64>,
    pub labels: Vec<String>,
}

impl CalibrationVector {
    pub fn new(values: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if values.len() != labels.len() {
            return Err(IuqError::DimensionMismatch { what: "parameter labels", expected: values.len(), got: labels.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IuqError::invalid("calibration values must be finite"));
        }
        Ok(CalibrationVector { values, labels })
    }

    pub fn unlabeled(values: Vec<f64>) -> Self {
        let labels = (0..values.len()).map(|i| format!("theta{i}")).collect();
        CalibrationVector { values, labels }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    ScalarSet,
    TimeSeries,
}

/// Model or measured quantities of interest; time stamps (s) for time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiVector {
    pub values: Vec<f64>,
    pub times: Option<Vec<f64>>,
}

impl QoiVector {
    pub fn scalars(values: Vec<f64>) -> Self {
        QoiVector { values, times: None }
    }

    pub fn series(times: Vec<f64>, values: Vec<f64>) -> Self {
        QoiVector { values, times: Some(times) }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(IuqError::invalid("QoI values must be finite"));
        }
        if let Some(t) = &self.times {
            if t.len() != self.values.len() {
                return Err(IuqError::DimensionMismatch { what: "time stamps", expected: self.values.len(), got: t.len() });
            }
            if t.windows(2).any(|w| w[1] <= w[0]) {
                return Err(IuqError::invalid("time stamps must be strictly increasing"));
            }
        }
        Ok(())
    }
}

/// One observation: design, measured QoIs and diagonal measurement variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub label: String,
    pub design: DesignPoint,
    pub observed: QoiVector,
    /// Diagonal of the measurement-error covariance (QoI units squared).
    pub noise_var: Vec<f64>,
}

impl ExperimentRecord {
    pub fn new(label: impl Into<String>, design: DesignPoint, observed: QoiVector, noise_var: Vec<f64>) -> Result<Self> {
        if noise_var.len() != observed.len() {
            return Err(IuqError::DimensionMismatch { what: "noise variances", expected: observed.len(), got: noise_var.len() });
        }
        if noise_var.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(IuqError::invalid("noise variances must be finite and non-negative"));
        }
        observed.validate()?;
        Ok(ExperimentRecord { label: label.into(), design, observed, noise_var })
    }

    pub fn noise_sd(&self) -> Vec<f64> {
        self.noise_var.iter().map(|v| v.sqrt()).collect()
    }
}

/// `J x I` matrix of `∂y_j/∂θ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    pub entries: DMatrix<f64>,
    pub evaluation_point: Vec<f64>,
    pub step_sizes: Vec<f64>,
}

/// A deterministic computer model `y(x, θ)`.
///
/// Implementations must be pure: identical inputs give bit-identical outputs.
pub trait Model: Send + Sync {
    fn name(&self) -> &str;
    fn design_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn output_kind(&self) -> OutputKind;
    /// Nominal calibration vector `θ0`.
    fn nominal(&self) -> Vec<f64>;
    /// Raw evaluation; dimension checks and finiteness are enforced by [`evaluate`].
    fn eval(&self, x: &[f64], theta: &[f64]) -> QoiVector;

    fn param_labels(&self) -> Vec<String> {
        (0..self.param_dim()).map(|i| format!("theta{i}")).collect()
    }

    fn qoi_label(&self) -> String {
        "y".to_string()
    }
}

/// Checked evaluation of `model` at `(x, theta)`.
pub fn evaluate(model: &dyn Model, x: &[f64], theta: &[f64]) -> Result<QoiVector> {
    if x.len() != model.design_dim() {
        return Err(IuqError::DimensionMismatch { what: "design point", expected: model.design_dim(), got: x.len() });
    }
    if theta.len() != model.param_dim() {
        return Err(IuqError::DimensionMismatch { what: "calibration vector", expected: model.param_dim(), got: theta.len() });
    }
    let out = model.eval(x, theta);
    if let Some(bad) = out.values.iter().find(|v| !v.is_finite()) {
        return Err(IuqError::ModelFailure {
            model: model.name().to_string(),
            x: x.to_vec(),
            theta: theta.to_vec(),
            reason: format!("non-finite output {bad}"),
        });
    }
    Ok(out)
}

pub fn evaluate_model(model: &dyn Model, x: &DesignPoint, theta: &CalibrationVector) -> Result<QoiVector> {
    evaluate(model, &x.values, &theta.values)
}

/// Central-difference sensitivities with `h_i = rel_step * max(|θ0_i|, 1)`.
pub fn finite_difference_sensitivity(model: &dyn Model, x: &[f64], theta0: &[f64], rel_step: f64) -> Result<SensitivityMatrix> {
    if !(rel_step > 0.0) {
        return Err(IuqError::invalid("rel_step must be positive"));
    }
    let base = evaluate(model, x, theta0)?;
    let n_out = base.len();
    let mut entries = DMatrix::zeros(n_out, theta0.len());
    let mut steps = Vec::with_capacity(theta0.len());
    for i in 0..theta0.len() {
        let h = rel_step * theta0[i].abs().max(1.0);
        let mut plus = theta0.to_vec();
        let mut minus = theta0.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fail = |e: IuqError| IuqError::SensitivityFailure { param: i, reason: e.to_string() };
        let yp = evaluate(model, x, &plus).map_err(fail)?;
        let ym = evaluate(model, x, &minus).map_err(fail)?;
        if yp.len() != n_out || ym.len() != n_out {
            return Err(IuqError::SensitivityFailure { param: i, reason: "output length changed under perturbation".into() });
        }
        for j in 0..n_out {
            let d = (yp.values[j] - ym.values[j]) / (2.0 * h);
            if !d.is_finite() {
                return Err(IuqError::SensitivityFailure { param: i, reason: format!("non-finite difference for output {j}") });
            }
            entries[(j, i)] = d;
        }
        steps.push(h);
    }
    Ok(SensitivityMatrix { entries, evaluation_point: theta0.to_vec(), step_sizes: steps })
}

/// Synthetic experiments: per design, `θ ~ truth`, model run, Gaussian noise.
///
/// `noise_sd` holds one entry per QoI, or a single entry applied to every QoI.
pub fn generate_synthetic_experiments(
    model: &dyn Model,
    truth: &GaussianParamSpec,
    designs: &[DesignPoint],
    noise_sd: &[f64],
    rng: RngStream,
) -> Result<Vec<ExperimentRecord>> {
    truth.validate()?;
    if truth.dim() != model.param_dim() {
        return Err(IuqError::DimensionMismatch { what: "truth spec", expected: model.param_dim(), got: truth.dim() });
    }
    if noise_sd.iter().any(|s| !(*s >= 0.0)) {
        return Err(IuqError::invalid("noise_sd must be non-negative"));
    }
    let nominal = model.nominal();
    let sd = truth.sd();
    let mut rng = rng.rng();
    let mut out = Vec::with_capacity(designs.len());
    for (k, design) in designs.iter().enumerate() {
        let theta: Vec<f64> = truth
            .mean
            .iter()
            .zip(&sd)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + s * z
            })
            .collect();
        let input = truth.to_input(&nominal, &theta);
        let y = evaluate(model, &design.values, &input)?;
        let per_qoi: Vec<f64> = match noise_sd.len() {
            1 => vec![noise_sd[0]; y.len()],
            n if n == y.len() => noise_sd.to_vec(),
            n => return Err(IuqError::DimensionMismatch { what: "noise_sd", expected: y.len(), got: n }),
        };
        let values = y
            .values
            .iter()
            .zip(&per_qoi)
            .map(|(v, s)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + s * z
            })
            .collect();
        let observed = QoiVector { values, times: y.times.clone() };
        let noise_var = per_qoi.iter().map(|s| s * s).collect();
        out.push(ExperimentRecord::new(format!("d{k}"), design.clone(), observed, noise_var)?);
    }
    Ok(out)
}

/// `y = S θ + B x + c`.
#[derive(Debug, Clone)]
pub struct AffineModel {
    pub sensitivity: DMatrix<f64>,
    pub design_coef: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub nominal: Vec<f64>,
}

impl AffineModel {
    pub fn new(sensitivity: DMatrix<f64>, design_coef: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let j = sensitivity.nrows();
        if design_coef.nrows() != j {
            return Err(IuqError::DimensionMismatch { what: "design coefficients rows", expected: j, got: design_coef.nrows() });
        }
        if offset.len() != j {
            return Err(IuqError::DimensionMismatch { what: "offset", expected: j, got: offset.len() });
        }
        let nominal = vec![0.0; sensitivity.ncols()];
        Ok(AffineModel { sensitivity, design_coef, offset, nominal })
    }

    /// `y = S θ + c` with no design dependence (one dummy design variable).
    pub fn linear(sensitivity: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let j = sensitivity.nrows();
        Self::new(sensitivity, DMatrix::zeros(j, 1), offset)
    }

    pub fn with_nominal(mut self, nominal: Vec<f64>) -> Self {
        self.nominal = nominal;
        self
    }
}

impl Model for AffineModel {
    fn name(&self) -> &str {
        "affine"
    }
    fn design_dim(&self) -> usize {
        self.design_coef.ncols()
    }
    fn param_dim(&self) -> usize {
        self.sensitivity.ncols()
    }
    fn output_kind(&self) -> OutputKind {
        OutputKind::ScalarSet
    }
    fn nominal(&self) -> Vec<f64> {
        self.nominal.clone()
    }
    fn eval(&self, x: &[f64], theta: &[f64]) -> QoiVector {
        let t = DVector::from_column_slice(theta);
        let xv = DVector::from_column_slice(x);
        let y = &self.sensitivity * t + &self.design_coef * xv + &self.offset;
        QoiVector::scalars(y.iter().copied().collect())
    }
}

/// `y = θ1 exp(θ2 x)` for a scalar design `x`.
#[derive(Debug, Clone)]
pub struct ExponentialModel {
    pub nominal: [f64; 2],
}

impl Default for ExponentialModel {
    fn default() -> Self {
        ExponentialModel { nominal: [1.0, 1.0] }
    }
}

impl Model for ExponentialModel {
    fn name(&self) -> &str {
        "exponential"
    }
    fn design_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn output_kind(&self) -> OutputKind {
        OutputKind::ScalarSet
    }
    fn nominal(&self) -> Vec<f64> {
        self.nominal.to_vec()
    }
    fn eval(&self, x: &[f64], theta: &[f64]) -> QoiVector {
        QoiVector::scalars(vec![theta[0] * (theta[1] * x[0]).exp()])
    }
    fn param_labels(&self) -> Vec<String> {
        vec!["amplitude".into(), "rate".into()]
    }
}

/// Lumped heater-rod reflood transient.
///
/// Cladding temperature `T(t)` obeys
/// `C dT/dt = q - h(t) (T - T_sat)` with
/// `h(t) = p_htc [h_dry + (h_wet - h_dry) s((p_qf v t - z_m) / w)]`,
/// `s` the logistic function. The design is `(T0 [K], q [W/m2])`, the
/// calibration vector `(p_htc, p_qf)` multiplies the wall heat transfer and the
/// quench-front speed. Integrated with fixed-step RK4.
#[derive(Debug, Clone)]
pub struct RefloodModel {
    pub t_sat: f64,
    pub heat_capacity: f64,
    pub h_dry: f64,
    pub h_wet: f64,
    pub front_speed: f64,
    pub elevation: f64,
    pub front_width: f64,
    pub t_end: f64,
    pub dt: f64,
    pub output_every: usize,
}

impl Default for RefloodModel {
    fn default() -> Self {
        RefloodModel {
            t_sat: 373.15,
            heat_capacity: 5.0e3,
            h_dry: 30.0,
            h_wet: 3.0e3,
            front_speed: 0.01,
            elevation: 1.0,
            front_width: 0.02,
            t_end: 200.0,
            dt: 0.05,
            output_every: 40,
        }
    }
}

impl RefloodModel {
    pub fn htc(&self, t: f64, p_htc: f64, p_qf: f64) -> f64 {
        let arg = (p_qf * self.front_speed * t - self.elevation) / self.front_width;
        let wet = 1.0 / (1.0 + (-arg).exp());
        p_htc * (self.h_dry + (self.h_wet - self.h_dry) * wet)
    }

    pub fn rhs(&self, t: f64, temp: f64, q: f64, p_htc: f64, p_qf: f64) -> f64 {
        (q - self.htc(t, p_htc, p_qf) * (temp - self.t_sat)) / self.heat_capacity
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

impl Model for RefloodModel {
    fn name(&self) -> &str {
        "reflood"
    }
    fn design_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn output_kind(&self) -> OutputKind {
        OutputKind::TimeSeries
    }
    fn nominal(&self) -> Vec<f64> {
        vec![1.0, 1.0]
    }
    fn param_labels(&self) -> Vec<String> {
        vec!["htc_multiplier".into(), "quench_front_speed_multiplier".into()]
    }
    fn qoi_label(&self) -> String {
        "cladding_temperature".into()
    }
    fn eval(&self, x: &[f64], theta: &[f64]) -> QoiVector {
        let (t0, q) = (x[0], x[1]);
        let (ph, pq) = (theta[0], theta[1]);
        let n = self.n_steps();
        let h = self.dt;
        let mut temp = t0;
        let mut times = vec![0.0];
        let mut values = vec![t0];
        for step in 0..n {
            let t = step as f64 * h;
            let k1 = self.rhs(t, temp, q, ph, pq);
            let k2 = self.rhs(t + 0.5 * h, temp + 0.5 * h * k1, q, ph, pq);
            let k3 = self.rhs(t + 0.5 * h, temp + 0.5 * h * k2, q, ph, pq);
            let k4 = self.rhs(t + h, temp + h * k3, q, ph, pq);
            temp += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if (step + 1) % self.output_every == 0 {
                times.push((step + 1) as f64 * h);
                values.push(temp);
            }
        }
        QoiVector::series(times, values)
    }
}

/// Model defined by a closure; handy for analytic test problems.
pub struct FnModel<F> {
    name: String,
    design_dim: usize,
    nominal: Vec<f64>,
    kind: OutputKind,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn scalar(name: impl Into<String>, design_dim: usize, nominal: Vec<f64>, f: F) -> Self {
        FnModel { name: name.into(), design_dim, nominal, kind: OutputKind::ScalarSet, f }
    }
}

impl<F> Model for FnModel<F>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }
    fn design_dim(&self) -> usize {
        self.design_dim
    }
    fn param_dim(&self) -> usize {
        self.nominal.len()
    }
    fn output_kind(&self) -> OutputKind {
        self.kind
    }
    fn nominal(&self) -> Vec<f64> {
        self.nominal.clone()
    }
    fn eval(&self, x: &[f64], theta: &[f64]) -> QoiVector {
        QoiVector::scalars((self.f)(x, theta))
    }
}

/// View of a model in centred variables: input `i` is
/// `transform_i.to_input(nominal_i, θ_i)`, so `θ = 0` is the nominal run.
pub struct CenteredModel<'a> {
    inner: &'a dyn Model,
    nominal: Vec<f64>,
    transform: Vec<Transform>,
}

impl<'a> CenteredModel<'a> {
    pub fn new(inner: &'a dyn Model, transform: Vec<Transform>) -> Result<Self> {
        let nominal = inner.nominal();
        if transform.len() != nominal.len() {
            return Err(IuqError::DimensionMismatch { what: "transforms", expected: nominal.len(), got: transform.len() });
        }
        for (i, (t, n)) in transform.iter().zip(&nominal).enumerate() {
            if *t == Transform::Exponential && *n == 0.0 {
                return Err(IuqError::invalid(format!("exponential change of variable needs a nonzero nominal for parameter {i}")));
            }
        }
        Ok(CenteredModel { inner, nominal, transform })
    }

    pub fn to_input(&self, theta: &[f64]) -> Vec<f64> {
        self.transform
            .iter()
            .zip(&self.nominal)
            .zip(theta)
            .map(|((t, n), th)| t.to_input(*n, *th))
            .collect()
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transform
    }
}

impl Model for CenteredModel<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn design_dim(&self) -> usize {
        self.inner.design_dim()
    }
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn output_kind(&self) -> OutputKind {
        self.inner.output_kind()
    }
    fn nominal(&self) -> Vec<f64> {
        vec![0.0; self.nominal.len()]
    }
    fn eval(&self, x: &[f64], theta: &[f64]) -> QoiVector {
        self.inner.eval(x, &self.to_input(theta))
    }
    fn param_labels(&self) -> Vec<String> {
        self.inner.param_labels()
    }
    fn qoi_label(&self) -> String {
        self.inner.qoi_label()
    }
}
