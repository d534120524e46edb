//! Modular Bayesian calibration: prior, likelihood with experimental, bias and
//! code-uncertainty variance parts, optional GP surrogates over θ and GP bias
//! terms over the design, and an MCMC driver with posterior summaries.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IuqError, Result};
use crate::gp::{GpConfig, GpModel, MIN_TRAINING};
use crate::mcmc::{laplace_start, mh_sample, McmcChain, McmcConfig};
use crate::model::{evaluate, ExperimentRecord, Model};
use crate::stats::{latin_hypercube, quantile, sample_mean_cov, RngStream};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Minimum experiments for a bias split.
pub const MIN_BIAS_EXPERIMENTS: usize = 6;
/// Surrogate runs per calibration parameter.
pub const SURROGATE_RUNS_PER_PARAM: usize = 10;
/// Surrogate validation RMSE limit, relative to the output range.
pub const SURROGATE_MAX_REL_RMSE: f64 = 0.1;
/// Floor on the total likelihood variance.
const VAR_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ParamPrior {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
}

impl ParamPrior {
    fn validate(&self) -> Result<()> {
        match *self {
            ParamPrior::Uniform { lo, hi } if !(lo < hi) || !lo.is_finite() || !hi.is_finite() => {
                Err(IuqError::invalid(format!("uniform prior needs finite lo < hi, got [{lo}, {hi}]")))
            }
            ParamPrior::Normal { mean, sd } if !(sd > 0.0) || !mean.is_finite() || !sd.is_finite() => {
                Err(IuqError::invalid(format!("normal prior needs finite mean and sd > 0, got sd = {sd}")))
            }
            _ => Ok(()),
        }
    }

    pub fn log_density(&self, t: f64) -> f64 {
        match *self {
            ParamPrior::Uniform { lo, hi } => {
                if (lo..=hi).contains(&t) {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            ParamPrior::Normal { mean, sd } => -0.5 * (LN_2PI + 2.0 * sd.ln() + ((t - mean) / sd).powi(2)),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ParamPrior::Uniform { lo, hi } => 0.5 * (lo + hi),
            ParamPrior::Normal { mean, .. } => mean,
        }
    }

    pub fn sd(&self) -> f64 {
        match *self {
            ParamPrior::Uniform { lo, hi } => (hi - lo) / 12f64.sqrt(),
            ParamPrior::Normal { sd, .. } => sd,
        }
    }

    /// Interval used for space-filling designs: the support, or mean ± 3 sd.
    pub fn design_range(&self) -> (f64, f64) {
        match *self {
            ParamPrior::Uniform { lo, hi } => (lo, hi),
            ParamPrior::Normal { mean, sd } => (mean - 3.0 * sd, mean + 3.0 * sd),
        }
    }
}

/// Independent per-parameter priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriorSpec {
    pub params: Vec<ParamPrior>,
}

impl PriorSpec {
    pub fn new(params: Vec<ParamPrior>) -> Result<Self> {
        let p = PriorSpec { params };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(IuqError::invalid("prior must cover at least one parameter"));
        }
        self.params.iter().try_for_each(ParamPrior::validate)
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.params.iter().zip(theta).map(|(p, t)| p.log_density(*t)).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.params.iter().map(ParamPrior::mean).collect()
    }

    pub fn sd(&self) -> Vec<f64> {
        self.params.iter().map(ParamPrior::sd).collect()
    }

    pub fn sample(&self, rng: &mut impl rand::Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                self.params
                    .iter()
                    .map(|p| match *p {
                        ParamPrior::Uniform { lo, hi } => Uniform::new_inclusive(lo, hi).expect("validated range").sample(rng),
                        ParamPrior::Normal { mean, sd } => Normal::new(mean, sd).expect("validated sd").sample(rng),
                    })
                    .collect()
            })
            .collect()
    }

    /// Latin-hypercube points over each parameter's design range.
    pub fn space_filling(&self, rng: &mut impl rand::Rng, n: usize) -> Vec<Vec<f64>> {
        latin_hypercube(n, self.dim(), rng)
            .into_iter()
            .map(|u| {
                u.iter()
                    .zip(&self.params)
                    .map(|(u, p)| {
                        let (lo, hi) = p.design_range();
                        lo + u * (hi - lo)
                    })
                    .collect()
            })
            .collect()
    }
}

/// One GP over θ per (experiment, QoI).
#[derive(Debug, Clone)]
pub struct SurrogateSet {
    pub gps: Vec<Vec<GpModel>>,
    /// Validation RMSE relative to output range, per (experiment, QoI).
    pub validation_rel_rmse: Vec<Vec<f64>>,
}

impl SurrogateSet {
    /// Fits on 80% of a space-filling design of `budget` runs, validates on the
    /// rest, then conditions each GP on the validation runs as well.
    pub fn train(
        model: &dyn Model,
        experiments: &[ExperimentRecord],
        prior: &PriorSpec,
        budget: usize,
        gp: &GpConfig,
        rng: RngStream,
    ) -> Result<Self> {
        let i = prior.dim();
        if budget < SURROGATE_RUNS_PER_PARAM * i {
            return Err(IuqError::invalid(format!(
                "surrogate budget {budget} is below {} runs ({SURROGATE_RUNS_PER_PARAM} per parameter)",
                SURROGATE_RUNS_PER_PARAM * i
            )));
        }
        let design = prior.space_filling(&mut rng.rng(), budget);
        let runs: Vec<Vec<Vec<f64>>> = design
            .par_iter()
            .map(|t| experiments.iter().map(|e| evaluate(model, &e.design.values, t).map(|y| y.values)).collect())
            .collect::<Result<_>>()?;
        let n_fit = ((0.8 * budget as f64).round() as usize).clamp(MIN_TRAINING, budget - 1);
        let (fit_x, val_x) = design.split_at(n_fit);
        let per = experiments
            .par_iter()
            .enumerate()
            .map(|(e, rec)| {
                (0..rec.observed.len())
                    .map(|j| {
                        let y: Vec<f64> = runs.iter().map(|r| r[e][j]).collect();
                        let (fit_y, val_y) = y.split_at(n_fit);
                        let g = GpModel::fit(fit_x, fit_y, gp)?;
                        let mut sq = 0.0;
                        for (x, v) in val_x.iter().zip(val_y) {
                            sq += (g.predict(x)?.0 - v).powi(2);
                        }
                        let rmse = (sq / val_y.len() as f64).sqrt();
                        let range = y.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b)) - y.iter().fold(f64::INFINITY, |a, b| a.min(*b));
                        let rel = if range > 0.0 { rmse / range } else { 0.0 };
                        if rel > SURROGATE_MAX_REL_RMSE {
                            return Err(IuqError::SurrogateInadequate { rmse, range });
                        }
                        Ok((g.condition(val_x, val_y)?, rel))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let (gps, validation_rel_rmse) = per.into_iter().map(|v| v.into_iter().unzip()).unzip();
        Ok(SurrogateSet { gps, validation_rel_rmse })
    }
}

/// One GP over the design variables per QoI index, trained on residuals.
#[derive(Debug, Clone)]
pub struct BiasSet {
    pub gps: Vec<GpModel>,
    pub theta_ref: Vec<f64>,
}

impl BiasSet {
    /// Predictive mean and variance of `δ` at `x` for every QoI.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<(f64, f64)>> {
        self.gps.iter().map(|g| g.predict(x)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BiasTraining {
    pub bias: BiasSet,
    pub train: Vec<ExperimentRecord>,
    pub held_out: Vec<ExperimentRecord>,
}

/// Seeded split of the records; residuals `y^E - y^M(x, θ_ref)` on the
/// training part become per-QoI GP targets over `x`.
pub fn train_bias_gp(
    model: &dyn Model,
    experiments: &[ExperimentRecord],
    theta_ref: &[f64],
    split_fraction: f64,
    gp: &GpConfig,
    rng: RngStream,
) -> Result<BiasTraining> {
    if experiments.len() < MIN_BIAS_EXPERIMENTS {
        return Err(IuqError::TooFewExperiments { needed: MIN_BIAS_EXPERIMENTS, got: experiments.len() });
    }
    if !(split_fraction > 0.5 && split_fraction < 0.95) {
        return Err(IuqError::invalid("bias split fraction must lie in (0.5, 0.95)"));
    }
    let n = experiments.len();
    let n_train = ((split_fraction * n as f64).round() as usize).clamp(1, n - 1);
    if n_train < MIN_TRAINING {
        return Err(IuqError::TooFewExperiments { needed: MIN_TRAINING, got: n_train });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng.rng());
    let (tr, ho) = order.split_at(n_train);
    let mut tr = tr.to_vec();
    let mut ho = ho.to_vec();
    tr.sort_unstable();
    ho.sort_unstable();
    let train: Vec<ExperimentRecord> = tr.iter().map(|k| experiments[*k].clone()).collect();
    let held_out: Vec<ExperimentRecord> = ho.iter().map(|k| experiments[*k].clone()).collect();

    let n_qoi = train[0].observed.len();
    if train.iter().chain(&held_out).any(|e| e.observed.len() != n_qoi) {
        return Err(IuqError::invalid("bias term needs the same QoI count for every experiment"));
    }
    let xs: Vec<Vec<f64>> = train.iter().map(|e| e.design.values.clone()).collect();
    let resid: Vec<Vec<f64>> = train
        .iter()
        .map(|e| {
            let y = evaluate(model, &e.design.values, theta_ref)?.values;
            Ok(e.observed.values.iter().zip(&y).map(|(o, m)| o - m).collect())
        })
        .collect::<Result<_>>()?;
    let gps = (0..n_qoi)
        .into_par_iter()
        .map(|j| {
            let t: Vec<f64> = resid.iter().map(|r| r[j]).collect();
            GpModel::fit(&xs, &t, gp)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BiasTraining { bias: BiasSet { gps, theta_ref: theta_ref.to_vec() }, train, held_out })
}

/// What produces `y^M(θ)` inside the likelihood.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a dyn Model),
    Surrogate(&'a SurrogateSet),
}

/// Diagonal variance parts and bias mean for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodParts {
    pub exp_var: Vec<f64>,
    pub bias_var: Vec<f64>,
    pub code_var: Vec<f64>,
    pub bias_mean: Vec<f64>,
}

impl LikelihoodParts {
    pub fn total_var(&self) -> Vec<f64> {
        (0..self.exp_var.len()).map(|j| (self.exp_var[j] + self.bias_var[j] + self.code_var[j]).max(VAR_FLOOR)).collect()
    }
}

/// Unnormalised log posterior `log p(θ) + Σ log N(y^E - y^M(θ) - δ; 0, Σ)`.
pub struct LogPosterior<'a> {
    prior: &'a PriorSpec,
    experiments: &'a [ExperimentRecord],
    predictor: Predictor<'a>,
    /// Bias mean and variance per experiment, fixed in θ.
    bias: Vec<Vec<(f64, f64)>>,
}

/// Assembles the log posterior; bias predictions at each design are computed once.
pub fn build_log_posterior<'a>(
    prior: &'a PriorSpec,
    experiments: &'a [ExperimentRecord],
    predictor: Predictor<'a>,
    bias: Option<&BiasSet>,
) -> Result<LogPosterior<'a>> {
    prior.validate()?;
    match predictor {
        Predictor::Model(m) => {
            if m.param_dim() != prior.dim() {
                return Err(IuqError::DimensionMismatch { what: "prior dimension", expected: m.param_dim(), got: prior.dim() });
            }
        }
        Predictor::Surrogate(s) => {
            if s.gps.len() != experiments.len() {
                return Err(IuqError::DimensionMismatch { what: "surrogate experiments", expected: experiments.len(), got: s.gps.len() });
            }
            for (g, e) in s.gps.iter().zip(experiments) {
                if g.len() != e.observed.len() || g.iter().any(|g| g.dim() != prior.dim()) {
                    return Err(IuqError::invalid(format!("surrogate does not cover experiment {}", e.label)));
                }
            }
        }
    }
    let bias = experiments
        .iter()
        .map(|e| match bias {
            Some(b) => {
                if b.gps.len() != e.observed.len() {
                    return Err(IuqError::DimensionMismatch { what: "bias QoIs", expected: e.observed.len(), got: b.gps.len() });
                }
                b.predict(&e.design.values)
            }
            None => Ok(vec![(0.0, 0.0); e.observed.len()]),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LogPosterior { prior, experiments, predictor, bias })
}

impl LogPosterior<'_> {
    /// Predicted QoIs and code variances of experiment `k` at `theta`.
    fn predict(&self, k: usize, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let e = &self.experiments[k];
        match self.predictor {
            Predictor::Model(m) => {
                let y = evaluate(m, &e.design.values, theta)?.values;
                if y.len() != e.observed.len() {
                    return Err(IuqError::DimensionMismatch { what: "model output", expected: e.observed.len(), got: y.len() });
                }
                let n = y.len();
                Ok((y, vec![0.0; n]))
            }
            Predictor::Surrogate(s) => {
                let mv = s.gps[k].iter().map(|g| g.predict(theta)).collect::<Result<Vec<_>>>()?;
                Ok(mv.into_iter().unzip())
            }
        }
    }

    pub fn parts(&self, theta: &[f64]) -> Result<Vec<LikelihoodParts>> {
        (0..self.experiments.len())
            .map(|k| {
                let (_, code_var) = self.predict(k, theta)?;
                let (bias_mean, bias_var) = self.bias[k].iter().copied().unzip();
                Ok(LikelihoodParts { exp_var: self.experiments[k].noise_var.clone(), bias_var, code_var, bias_mean })
            })
            .collect()
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> Result<f64> {
        let mut ll = 0.0;
        for (k, e) in self.experiments.iter().enumerate() {
            let (y, code) = self.predict(k, theta)?;
            for j in 0..y.len() {
                let (dm, dv) = self.bias[k][j];
                let v = (e.noise_var[j] + dv + code[j]).max(VAR_FLOOR);
                let r = e.observed.values[j] - y[j] - dm;
                ll += -0.5 * (LN_2PI + v.ln() + r * r / v);
            }
        }
        Ok(ll)
    }

    /// `-∞` outside the prior support or where the predictor fails.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let lp = self.prior.log_density(theta);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self.log_likelihood(theta) {
            Ok(ll) => lp + ll,
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MbaOptions {
    pub use_surrogate: bool,
    pub use_bias: bool,
    /// Surrogate runs; `None` means the minimum, 10 per parameter.
    pub surrogate_budget: Option<usize>,
    pub split_fraction: f64,
    /// Residual reference point for the bias GPs; `None` means the prior mean.
    pub theta_ref: Option<Vec<f64>>,
    /// Start the chain at the posterior mode with a Hessian-based proposal.
    pub laplace_start: bool,
    pub mcmc: McmcConfig,
    pub gp: GpConfig,
    pub seed: u64,
}

impl Default for MbaOptions {
    fn default() -> Self {
        MbaOptions {
            use_surrogate: false,
            use_bias: false,
            surrogate_budget: None,
            split_fraction: 0.8,
            theta_ref: None,
            laplace_start: true,
            mcmc: McmcConfig::default(),
            gp: GpConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub label: String,
    pub mean: f64,
    pub sd: f64,
    /// Equal-tailed 95% credible interval.
    pub lo95: f64,
    pub hi95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbaSettings {
    pub options: MbaOptions,
    pub n_experiments_used: usize,
    pub held_out_labels: Vec<String>,
    pub bias_train_labels: Vec<String>,
    pub surrogate_rel_rmse: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbaResult {
    pub chain: McmcChain,
    pub marginals: Vec<Marginal>,
    pub correlations: Vec<Vec<f64>>,
    /// `∂y/∂θ` of the predictor at the posterior mean, QoIs stacked over
    /// experiments. A diagnostic for confounded parameters, not an identifiability test.
    pub sensitivity: Vec<Vec<f64>>,
    pub settings: MbaSettings,
}

/// Surrogate (optional) → bias (optional) → posterior → MCMC → summaries.
/// With bias enabled, inference uses only the records held out from bias training.
pub fn mba_iuq(model: &dyn Model, experiments: &[ExperimentRecord], prior: &PriorSpec, options: &MbaOptions) -> Result<MbaResult> {
    prior.validate()?;
    if model.param_dim() != prior.dim() {
        return Err(IuqError::DimensionMismatch { what: "prior dimension", expected: model.param_dim(), got: prior.dim() });
    }
    if experiments.is_empty() {
        return Err(IuqError::invalid("no experiments to calibrate against"));
    }
    let root = RngStream::new(options.seed);
    let (bias, used, held_labels, train_labels) = if options.use_bias {
        let theta_ref = options.theta_ref.clone().unwrap_or_else(|| prior.mean());
        if theta_ref.len() != prior.dim() {
            return Err(IuqError::DimensionMismatch { what: "bias reference point", expected: prior.dim(), got: theta_ref.len() });
        }
        let bt = train_bias_gp(model, experiments, &theta_ref, options.split_fraction, &options.gp, root.split(1))
            .map_err(|e| match e {
                IuqError::TooFewExperiments { .. } => IuqError::invalid(format!("{e}; disable the bias term for data sets this small")),
                other => other,
            })?;
        let held = bt.held_out.iter().map(|e| e.label.clone()).collect();
        let tr = bt.train.iter().map(|e| e.label.clone()).collect();
        (Some(bt.bias), bt.held_out, held, tr)
    } else {
        (None, experiments.to_vec(), Vec::new(), Vec::new())
    };
    let surrogate = if options.use_surrogate {
        let budget = options.surrogate_budget.unwrap_or(SURROGATE_RUNS_PER_PARAM * prior.dim());
        Some(SurrogateSet::train(model, &used, prior, budget, &options.gp, root.split(2))?)
    } else {
        None
    };
    let predictor = match &surrogate {
        Some(s) => Predictor::Surrogate(s),
        None => Predictor::Model(model),
    };
    let post = build_log_posterior(prior, &used, predictor, bias.as_ref())?;
    let target = |t: &[f64]| post.log_density(t);

    let mut cfg = options.mcmc.clone();
    let mut init = prior.mean();
    if options.laplace_start && cfg.proposal_sd.is_none() && cfg.proposal_cov.is_none() {
        match laplace_start(target, &init, &prior.sd()) {
            Ok(ls) => {
                init = ls.mode;
                cfg.proposal_cov = Some(ls.proposal_cov);
            }
            Err(e) => log::warn!("mba: mode search failed ({e}); starting at the prior mean"),
        }
    }
    if cfg.proposal_sd.is_none() && cfg.proposal_cov.is_none() {
        cfg.proposal_sd = Some(prior.sd().iter().map(|s| 0.1 * s).collect());
    }
    let chain = mh_sample(target, &init, &cfg)?;

    let labels = model.param_labels();
    let (mean, cov) = sample_mean_cov(&chain.samples);
    let marginals = (0..prior.dim())
        .map(|i| {
            let col = chain.column(i);
            Marginal {
                label: labels.get(i).cloned().unwrap_or_else(|| format!("theta{i}")),
                mean: mean[i],
                sd: cov[(i, i)].max(0.0).sqrt(),
                lo95: quantile(&col, 0.025),
                hi95: quantile(&col, 0.975),
            }
        })
        .collect();
    let correlations = (0..prior.dim())
        .map(|i| {
            (0..prior.dim())
                .map(|j| {
                    let d = (cov[(i, i)] * cov[(j, j)]).sqrt();
                    if d > 0.0 {
                        (cov[(i, j)] / d).clamp(-1.0, 1.0)
                    } else if i == j {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let sensitivity = predictor_sensitivity(&post, &mean, &prior.sd())?;
    Ok(MbaResult {
        chain,
        marginals,
        correlations,
        sensitivity,
        settings: MbaSettings {
            options: options.clone(),
            n_experiments_used: used.len(),
            held_out_labels: held_labels,
            bias_train_labels: train_labels,
            surrogate_rel_rmse: surrogate.map(|s| s.validation_rel_rmse),
        },
    })
}

fn predictor_sensitivity(post: &LogPosterior<'_>, at: &[f64], scales: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for k in 0..post.experiments.len() {
        let cols = (0..at.len())
            .map(|i| {
                let h = 1e-4 * scales[i];
                let mut up = at.to_vec();
                let mut dn = at.to_vec();
                up[i] += h;
                dn[i] -= h;
                let (yu, _) = post.predict(k, &up)?;
                let (yd, _) = post.predict(k, &dn)?;
                Ok(yu.iter().zip(&yd).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        for j in 0..cols.first().map_or(0, |c| c.len()) {
            rows.push(cols.iter().map(|c| c[j]).collect());
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineModel, DesignPoint, FnModel, QoiVector};
    use nalgebra::{DMatrix, DVector};

    fn rec(label: &str, x: f64, y: Vec<f64>, var: f64) -> ExperimentRecord {
        let n = y.len();
        ExperimentRecord::new(label, DesignPoint::unlabeled(vec![x]), QoiVector::scalars(y), vec![var; n]).unwrap()
    }

    #[test]
    fn prior_validation() {
        assert!(PriorSpec::new(vec![ParamPrior::Uniform { lo: 1.0, hi: 1.0 }]).is_err());
        assert!(PriorSpec::new(vec![ParamPrior::Normal { mean: 0.0, sd: 0.0 }]).is_err());
        let p = PriorSpec::new(vec![ParamPrior::Uniform { lo: 0.0, hi: 2.0 }]).unwrap();
        assert_eq!(p.log_density(&[3.0]), f64::NEG_INFINITY);
        assert!((p.log_density(&[1.0]) + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_likelihood() {
        let m = AffineModel::linear(DMatrix::identity(3, 3), DVector::zeros(3)).unwrap();
        let theta = [0.2, -0.1, 0.4];
        let exps = vec![rec("a", 1.0, theta.to_vec(), 1.0)];
        let prior = PriorSpec::new(vec![ParamPrior::Normal { mean: 0.0, sd: 1.0 }; 3]).unwrap();
        let post = build_log_posterior(&prior, &exps, Predictor::Model(&m), None).unwrap();
        let ll = post.log_likelihood(&theta).unwrap();
        assert!((ll + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        let parts = post.parts(&theta).unwrap();
        assert!(parts[0].bias_var.iter().chain(&parts[0].code_var).chain(&parts[0].bias_mean).all(|v| *v == 0.0));
    }

    #[test]
    fn flat_prior_ratio_is_likelihood_ratio() {
        let m = FnModel::scalar("sq", 1, vec![0.5], |_, t| vec![t[0] * t[0]]);
        let exps = vec![rec("a", 1.0, vec![0.3], 0.01)];
        let prior = PriorSpec::new(vec![ParamPrior::Uniform { lo: -1.0, hi: 1.0 }]).unwrap();
        let post = build_log_posterior(&prior, &exps, Predictor::Model(&m), None).unwrap();
        let (a, b) = ([0.2], [0.7]);
        let lhs = post.log_density(&a) - post.log_density(&b);
        let rhs = post.log_likelihood(&a).unwrap() - post.log_likelihood(&b).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    /// Closed-form conjugate posterior for `y = Sθ + noise`, independent normal prior.
    fn conjugate(s: &DMatrix<f64>, y: &[f64], noise: f64, m0: &[f64], sd0: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let p0 = DMatrix::from_diagonal(&DVector::from_iterator(sd0.len(), sd0.iter().map(|s| 1.0 / (s * s))));
        let prec = s.transpose() * s / noise + &p0;
        let cov = prec.clone().try_inverse().unwrap();
        let rhs = s.transpose() * DVector::from_column_slice(y) / noise + &p0 * DVector::from_column_slice(m0);
        (&cov * rhs, cov)
    }

    #[test]
    fn map_matches_conjugate_mode() {
        let s = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, -0.5, 1.0, 0.2, 0.8]);
        let m = AffineModel::linear(s.clone(), DVector::zeros(3)).unwrap();
        let y = vec![0.5, 0.1, 0.7];
        let exps = vec![rec("a", 1.0, y.clone(), 0.04)];
        let prior = PriorSpec::new(vec![ParamPrior::Normal { mean: 0.1, sd: 0.5 }, ParamPrior::Normal { mean: -0.2, sd: 1.0 }]).unwrap();
        let post = build_log_posterior(&prior, &exps, Predictor::Model(&m), None).unwrap();
        let ls = laplace_start(|t: &[f64]| post.log_density(t), &prior.mean(), &prior.sd()).unwrap();
        let (mean, _) = conjugate(&s, &y, 0.04, &[0.1, -0.2], &[0.5, 1.0]);
        for k in 0..2 {
            assert!((ls.mode[k] - mean[k]).abs() < 1e-6, "{:?} vs {mean}", ls.mode);
        }
    }

    #[test]
    fn mba_matches_conjugate_posterior() {
        let s = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, -0.5, 1.0, 0.2, 0.8]);
        let m = AffineModel::linear(s.clone(), DVector::zeros(3)).unwrap();
        let y = vec![0.5, 0.1, 0.7];
        let exps = vec![rec("a", 1.0, y.clone(), 0.04)];
        let prior = PriorSpec::new(vec![ParamPrior::Normal { mean: 0.1, sd: 0.5 }, ParamPrior::Normal { mean: -0.2, sd: 1.0 }]).unwrap();
        let opts = MbaOptions { seed: 3, ..MbaOptions::default() };
        let res = mba_iuq(&m, &exps, &prior, &opts).unwrap();
        let (mean, cov) = conjugate(&s, &y, 0.04, &[0.1, -0.2], &[0.5, 1.0]);
        for k in 0..2 {
            let err = crate::mcmc::mcse(&res.chain.column(k));
            assert!((res.marginals[k].mean - mean[k]).abs() <= 3.0 * err, "{k}");
            let var = res.marginals[k].sd.powi(2);
            assert!((var / cov[(k, k)] - 1.0).abs() < 0.1);
            assert!(res.marginals[k].lo95 < res.marginals[k].hi95);
        }
        assert!(res.correlations.iter().flatten().all(|c| (-1.0..=1.0).contains(c)));
        assert!((res.sensitivity[0][1] - 0.3).abs() < 1e-8);
    }

    #[test]
    fn boundary_concentration_when_support_excludes_truth() {
        let m = FnModel::scalar("id", 1, vec![0.5], |_, t| vec![t[0]]);
        let exps: Vec<_> = (0..5).map(|k| rec(&format!("d{k}"), k as f64, vec![2.0], 0.01)).collect();
        let prior = PriorSpec::new(vec![ParamPrior::Uniform { lo: 0.0, hi: 1.0 }]).unwrap();
        let res = mba_iuq(&m, &exps, &prior, &MbaOptions { seed: 1, ..MbaOptions::default() }).unwrap();
        assert!(res.marginals[0].lo95 > 0.95, "{:?}", res.marginals[0]);
    }

    #[test]
    fn uniform_posterior_is_bounded() {
        let m = FnModel::scalar("lin", 1, vec![0.0, 0.0], |x, t| vec![t[0] + t[1] * x[0]]);
        let exps: Vec<_> = (0..4).map(|k| rec(&format!("d{k}"), k as f64, vec![0.3 * k as f64], 0.05)).collect();
        let prior = PriorSpec::new(vec![ParamPrior::Uniform { lo: -2.0, hi: 2.0 }; 2]).unwrap();
        let post = build_log_posterior(&prior, &exps, Predictor::Model(&m), None).unwrap();
        let bound = -2.0 * 4f64.ln() - 2.0 * (LN_2PI + 0.05f64.ln());
        let draws = prior.sample(&mut RngStream::new(2).rng(), 1000);
        assert!(draws.iter().all(|t| post.log_density(t) <= bound + 1e-12));
    }

    #[test]
    fn bias_split_bookkeeping() {
        let m = FnModel::scalar("lin", 1, vec![1.0], |x, t| vec![t[0] * x[0]]);
        let exps: Vec<_> = (0..10).map(|k| rec(&format!("d{k}"), k as f64, vec![k as f64], 0.0)).collect();
        let bt = train_bias_gp(&m, &exps, &[1.0], 0.8, &GpConfig::default(), RngStream::new(4)).unwrap();
        assert_eq!(bt.train.len(), 8);
        assert_eq!(bt.held_out.len(), 2);
        assert!(bt.held_out.iter().all(|h| bt.train.iter().all(|t| t.label != h.label)));
        // model equals truth, no noise: zero bias everywhere
        for k in 0..=90 {
            let (mu, _) = bt.bias.predict(&[k as f64 / 10.0]).unwrap()[0];
            assert!(mu.abs() < 1e-6);
        }
        assert!(matches!(train_bias_gp(&m, &exps[..5], &[1.0], 0.8, &GpConfig::default(), RngStream::new(4)), Err(IuqError::TooFewExperiments { .. })));
        assert!(train_bias_gp(&m, &exps, &[1.0], 0.97, &GpConfig::default(), RngStream::new(4)).is_err());
    }

    #[test]
    fn bias_gp_recovers_injected_sine() {
        let m = FnModel::scalar("lin", 1, vec![1.0], |x, t| vec![t[0] * x[0]]);
        let exps: Vec<_> = (0..40)
            .map(|k| {
                let x = 6.0 * k as f64 / 39.0;
                rec(&format!("d{k}"), x, vec![x + 0.1 * x.sin()], 1e-6)
            })
            .collect();
        let bt = train_bias_gp(&m, &exps, &[1.0], 0.8, &GpConfig::default(), RngStream::new(5)).unwrap();
        let sq: f64 = bt
            .held_out
            .iter()
            .map(|e| {
                let x = e.design.values[0];
                (bt.bias.predict(&[x]).unwrap()[0].0 - 0.1 * x.sin()).powi(2)
            })
            .sum();
        let rms = (sq / bt.held_out.len() as f64).sqrt();
        let sig: f64 = (bt.held_out.iter().map(|e| (0.1 * e.design.values[0].sin()).powi(2)).sum::<f64>() / bt.held_out.len() as f64).sqrt();
        assert!(rms <= 0.2 * sig, "{rms} vs {sig}");
    }

    #[test]
    fn surrogate_run_is_close_to_full_model() {
        let m = FnModel::scalar("quad", 1, vec![1.0, 1.0], |x, t| vec![t[0] + t[1] * x[0] + 0.1 * t[0] * t[1]]);
        let exps: Vec<_> = (0..3).map(|k| rec(&format!("d{k}"), k as f64, vec![1.0 + 1.2 * k as f64 + 0.12], 0.01)).collect();
        let prior = PriorSpec::new(vec![ParamPrior::Normal { mean: 1.0, sd: 0.3 }; 2]).unwrap();
        let full = mba_iuq(&m, &exps, &prior, &MbaOptions { seed: 2, ..MbaOptions::default() }).unwrap();
        let opts = MbaOptions { seed: 2, use_surrogate: true, surrogate_budget: Some(40), ..MbaOptions::default() };
        let sur = mba_iuq(&m, &exps, &prior, &opts).unwrap();
        for k in 0..2 {
            assert!((full.marginals[k].mean - sur.marginals[k].mean).abs() < 0.25 * full.marginals[k].sd);
        }
        assert!(sur.settings.surrogate_rel_rmse.is_some());
    }

    #[test]
    fn surrogate_budget_precondition() {
        let m = FnModel::scalar("id", 1, vec![0.0, 0.0], |_, t| vec![t[0] + t[1]]);
        let exps = vec![rec("a", 0.0, vec![0.0], 1.0)];
        let prior = PriorSpec::new(vec![ParamPrior::Normal { mean: 0.0, sd: 1.0 }; 2]).unwrap();
        assert!(SurrogateSet::train(&m, &exps, &prior, 19, &GpConfig::default(), RngStream::new(0)).is_err());
    }

    #[test]
    fn inadequate_surrogate_aborts() {
        // a sharp kink the GP cannot learn from a few runs
        let m = FnModel::scalar("step", 1, vec![0.0], |_, t| vec![if t[0] > 0.0 { 1.0 } else { 0.0 } + 0.01 * t[0]]);
        let exps = vec![rec("a", 0.0, vec![0.5], 1.0)];
        let prior = PriorSpec::new(vec![ParamPrior::Uniform { lo: -1.0, hi: 1.0 }]).unwrap();
        let r = SurrogateSet::train(&m, &exps, &prior, 10, &GpConfig::default(), RngStream::new(0));
        assert!(matches!(r, Err(IuqError::SurrogateInadequate { .. })), "{r:?}");
    }

    #[test]
    fn bias_requires_enough_records() {
        let m = FnModel::scalar("id", 1, vec![0.0], |_, t| vec![t[0]]);
        let exps: Vec<_> = (0..4).map(|k| rec(&format!("d{k}"), k as f64, vec![0.0], 1.0)).collect();
        let prior = PriorSpec::new(vec![ParamPrior::Normal { mean: 0.0, sd: 1.0 }]).unwrap();
        let err = mba_iuq(&m, &exps, &prior, &MbaOptions { use_bias: true, ..MbaOptions::default() }).unwrap_err();
        assert!(err.to_string().contains("disable the bias"));
    }
}
