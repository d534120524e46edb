//! Statistical primitives shared by every method: Gaussian densities,
//! covariance handling, reproducible random streams and SPD solves.
//!
//! Random streams use ChaCha8 (`rand_chacha::ChaCha8Rng`). A stream is keyed by
//! a 64-bit seed expanded with `SeedableRng::seed_from_u64` and a 64-bit stream
//! id passed to `set_stream`, so `(seed, id)` pairs give independent,
//! reproducible sequences that other implementations of ChaCha8 can match.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{IuqError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Relative nugget added to the diagonal when a plain Cholesky factorization fails.
pub const NUGGET_REL: f64 = 1e-10;

/// Change-of-variable between a CIRCE-style centred variable and a model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    /// `p = 1 + theta`; the model input is shifted from its nominal value.
    #[default]
    Additive,
    /// `p = exp(theta)`; the model input is scaled from its nominal value.
    Exponential,
}

impl Transform {
    /// Multiplier `p = f(theta)` with `f(0) = 1`, `f'(0) = 1`.
    pub fn multiplier(self, theta: f64) -> f64 {
        match self {
            Transform::Additive => 1.0 + theta,
            Transform::Exponential => theta.exp(),
        }
    }

    /// Maps a centred variable onto the model input around `nominal`.
    ///
    /// Additive: `nominal + theta`. Exponential: `nominal * exp(theta)`.
    /// For multipliers with nominal value 1 both reduce to `p = f(theta)`.
    pub fn to_input(self, nominal: f64, theta: f64) -> f64 {
        match self {
            Transform::Additive => nominal + theta,
            Transform::Exponential => nominal * theta.exp(),
        }
    }

    /// Inverse of [`Transform::to_input`].
    pub fn from_input(self, nominal: f64, input: f64) -> f64 {
        match self {
            Transform::Additive => input - nominal,
            Transform::Exponential => (input / nominal).ln(),
        }
    }
}

/// Independent Gaussian law of centred calibration variables.
///
/// `mean` is the bias vector `b`, `var` the diagonal of `Σθ`; each coordinate
/// reaches the model through its [`Transform`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParamSpec {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub transform: Vec<Transform>,
}

impl GaussianParamSpec {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, transform: Vec<Transform>) -> Result<Self> {
        let spec = GaussianParamSpec { mean, var, transform };
        spec.validate()?;
        Ok(spec)
    }

    pub fn additive(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, var, vec![Transform::Additive; n])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if self.var.len() != n {
            return Err(IuqError::DimensionMismatch { what: "parameter variances", expected: n, got: self.var.len() });
        }
        if self.transform.len() != n {
            return Err(IuqError::DimensionMismatch { what: "parameter transforms", expected: n, got: self.transform.len() });
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(IuqError::invalid("parameter mean must be finite"));
        }
        if self.var.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(IuqError::invalid("parameter variances must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn sd(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }

    /// Model input for centred values `theta` around `nominal`.
    pub fn to_input(&self, nominal: &[f64], theta: &[f64]) -> Vec<f64> {
        self.transform
            .iter()
            .zip(nominal)
            .zip(theta)
            .map(|((t, n), th)| t.to_input(*n, *th))
            .collect()
    }

    pub fn cov(&self) -> CovMatrix {
        CovMatrix::from_diag(&self.var)
    }
}

/// Symmetric positive semi-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix(DMatrix<f64>);

impl CovMatrix {
    /// Validates symmetry (1e-12 relative) and semi-definiteness
    /// (eigenvalues >= -1e-10 * trace).
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(IuqError::DimensionMismatch { what: "covariance (square)", expected: m.nrows(), got: m.ncols() });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(IuqError::invalid("covariance has non-finite entries"));
        }
        let scale = m.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(IuqError::invalid(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        let min_eig = min_eigenvalue(&m);
        if min_eig < -1e-10 * m.trace().abs().max(f64::MIN_POSITIVE) {
            return Err(IuqError::NotPositiveDefinite { min_eigenvalue: min_eig });
        }
        Ok(CovMatrix(m))
    }

    pub fn from_diag(d: &[f64]) -> Self {
        CovMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn identity(n: usize) -> Self {
        CovMatrix(DMatrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal().iter().copied().collect()
    }

    pub fn is_psd(&self) -> bool {
        min_eigenvalue(&self.0) >= -1e-10 * self.0.trace().abs().max(f64::MIN_POSITIVE)
    }
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Cholesky factor, retrying once with a `1e-10 * trace / k` diagonal nugget.
pub fn factor_with_nugget(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let k = m.nrows().max(1) as f64;
    let nugget = NUGGET_REL * m.trace().abs() / k;
    let mut regularized = m.clone();
    for i in 0..m.nrows() {
        regularized[(i, i)] += nugget;
    }
    regularized
        .cholesky()
        .ok_or_else(|| IuqError::NotPositiveDefinite { min_eigenvalue: min_eigenvalue(m) })
}

/// Reproducible random stream keyed by `(seed, stream id)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// Sibling stream with the same seed.
    pub fn split(&self, stream: u64) -> Self {
        RngStream { seed: self.seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Log-density of `N(mean, cov)` at `x`, including `-0.5 log|cov|`.
pub fn log_mvn_pdf(x: &[f64], mean: &[f64], cov: &CovMatrix) -> Result<f64> {
    let k = cov.dim();
    if x.len() != k {
        return Err(IuqError::DimensionMismatch { what: "log_mvn_pdf point", expected: k, got: x.len() });
    }
    if mean.len() != k {
        return Err(IuqError::DimensionMismatch { what: "log_mvn_pdf mean", expected: k, got: mean.len() });
    }
    let chol = factor_with_nugget(cov.matrix())?;
    let r = DVector::from_iterator(k, x.iter().zip(mean).map(|(a, b)| a - b));
    let z = chol.l().solve_lower_triangular(&r).expect("triangular factor is invertible");
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (k as f64 * LN_2PI + log_det + z.norm_squared()))
}

/// Log-density of independent Gaussians `N(mean_i, var_i)`; no factorization needed.
pub fn log_diag_normal(resid: &[f64], var: &[f64]) -> f64 {
    resid
        .iter()
        .zip(var)
        .map(|(r, v)| -0.5 * (LN_2PI + v.ln() + r * r / v))
        .sum()
}

/// `n` draws from `N(mean, cov)`, one per row.
pub fn draw_mvn(mean: &[f64], cov: &CovMatrix, rng: &mut ChaCha8Rng, n: usize) -> Result<DMatrix<f64>> {
    let k = cov.dim();
    if mean.len() != k {
        return Err(IuqError::DimensionMismatch { what: "draw_mvn mean", expected: k, got: mean.len() });
    }
    let factor = if cov.matrix().iter().all(|v| *v == 0.0) {
        DMatrix::zeros(k, k)
    } else {
        factor_with_nugget(cov.matrix())?.unpack()
    };
    let mut out = DMatrix::zeros(n, k);
    let mut z = DVector::zeros(k);
    for row in 0..n {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
        }
        let draw = &factor * &z;
        for c in 0..k {
            out[(row, c)] = mean[c] + draw[c];
        }
    }
    Ok(out)
}

/// Solves `a x = rhs` for symmetric positive definite `a`.
pub fn solve_spd(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != rhs.len() {
        return Err(IuqError::DimensionMismatch { what: "solve_spd", expected: a.nrows(), got: rhs.len() });
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| IuqError::NotPositiveDefinite { min_eigenvalue: min_eigenvalue(a) })?;
    Ok(chol.solve(rhs))
}

/// Inverse of an SPD matrix via Cholesky.
pub fn inverse_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| IuqError::NotPositiveDefinite { min_eigenvalue: min_eigenvalue(a) })?;
    Ok(chol.inverse())
}

/// Column means and unbiased covariance of row samples.
pub fn sample_mean_cov(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = rows.len();
    let k = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; k];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut cov = DMatrix::zeros(k, k);
    for r in rows {
        for i in 0..k {
            for j in 0..=i {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..k {
        for j in 0..=i {
            cov[(i, j)] /= denom;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (mean, cov)
}

/// `n` Latin-hypercube points in `[0, 1)^d`: each axis has one point per stratum.
pub fn latin_hypercube(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            let mut c: Vec<f64> = (0..n).map(|k| (k as f64 + rng.random::<f64>()) / n as f64).collect();
            c.shuffle(rng);
            c
        })
        .collect();
    (0..n).map(|k| cols.iter_mut().map(|c| c[k]).collect()).collect()
}

/// Linear-interpolation quantile (type 7) of an ascending-sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, p)
}
