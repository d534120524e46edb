//! Scenario execution: data, method dispatch, forward UQ and envelope.

use std::path::PathBuf;

use serde_json::Value;

use super::adjust::{sample_adjust_iuq, SampleAdjustConfig};
use super::config::{LoadedConfig, Method, RouteChoice, ScenarioConfig};
use super::fuq::{envelope_check, forward_uq, record_designs, EnvelopeReport, FuqBands, ParamSource};
use crate::bayes::{mba_iuq, PriorSpec};
use crate::circe::{
    circe_no_bias, iterative_circe, linearity_check, mle_map_estimate, stack_inputs, CirceOptions, ExperimentBlock,
};
use crate::dipe::{dipe_bounds, dipe_pseudo_cdf};
use crate::error::{IuqError, Result};
use crate::iprem::{default_grid, iprem_quantify_model, IpremConfig, ParameterGrid};
use crate::mcda::{
    linearity_test, mcda_deterministic_model, mcda_probabilistic, select_alpha_lcurve, LinearProblem, McdaRoute,
};
use crate::model::{generate_synthetic_experiments, CenteredModel, ExperimentRecord, Model};
use crate::stats::{CovMatrix, GaussianParamSpec, RngStream, Transform};

/// Random streams carved from the scenario seed.
const STREAM_DATA: u64 = 1;
const STREAM_BASELINE: u64 = 2;
const STREAM_METHOD: u64 = 100;
const STREAM_FUQ: u64 = 200;

/// A validated scenario ready to run.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub base_dir: PathBuf,
    pub model: Box<dyn Model>,
}

/// Output of one IUQ method: its JSON block and the input law it implies.
pub struct MethodOutcome {
    pub method: Method,
    pub result: Value,
    pub source: ParamSource,
}

/// Forward UQ and envelope of one parameter law.
pub struct Propagation {
    pub bands: FuqBands,
    pub envelope: EnvelopeReport,
}

pub struct MethodRun {
    pub outcome: MethodOutcome,
    pub propagation: Propagation,
}

pub struct ScenarioRun {
    pub experiments: Vec<ExperimentRecord>,
    pub baseline: Option<Propagation>,
    pub methods: Vec<MethodRun>,
}

impl Scenario {
    /// `seed` overrides the configured seed when given.
    pub fn new(loaded: LoadedConfig, seed: Option<u64>) -> Result<Self> {
        let model = loaded.config.model.build()?;
        Ok(Scenario {
            seed: seed.unwrap_or(loaded.config.seed),
            config: loaded.config,
            config_sha256: loaded.sha256,
            base_dir: loaded.base_dir,
            model,
        })
    }

    pub fn from_toml(text: &str, seed: Option<u64>) -> Result<Self> {
        use sha2::{Digest, Sha256};
        let config = ScenarioConfig::from_toml(text)?;
        let sha256 = hex::encode(Sha256::digest(text.as_bytes()));
        Scenario::new(LoadedConfig { config, sha256, base_dir: PathBuf::new() }, seed)
    }

    fn stream(&self, k: u64) -> RngStream {
        RngStream::with_stream(self.seed, k)
    }

    fn nominal(&self) -> Vec<f64> {
        self.model.nominal()
    }

    fn truth_spec(&self) -> Result<Option<GaussianParamSpec>> {
        self.config.truth.as_ref().map(|t| t.spec()).transpose()
    }

    /// Synthetic records from the truth spec, or the configured CSV file.
    pub fn experiments(&self) -> Result<Vec<ExperimentRecord>> {
        let designs = self.config.data.designs(self.model.design_dim())?;
        if let Some(csv) = &self.config.data.csv {
            let path = self.base_dir.join(csv);
            let f = std::fs::File::open(&path).map_err(|e| IuqError::invalid(format!("data.csv: cannot open {}: {e}", path.display())))?;
            return super::data::read_experiments(f, &designs);
        }
        let truth = self.truth_spec()?.ok_or_else(|| IuqError::invalid("config: `truth` is required to synthesise data"))?;
        generate_synthetic_experiments(self.model.as_ref(), &truth, &designs, &self.config.data.noise_sd, self.stream(STREAM_DATA))
    }

    pub fn propagate(&self, source: &ParamSource, records: &[ExperimentRecord], stream: u64) -> Result<Propagation> {
        let bands = forward_uq(self.model.as_ref(), source, &record_designs(records), self.config.fuq.n_samples, self.stream(stream))?;
        let envelope = envelope_check(self.model.as_ref(), &bands, records, self.config.envelope.target)?;
        Ok(Propagation { bands, envelope })
    }

    /// Envelope of the data under the law that generated them.
    pub fn baseline(&self, records: &[ExperimentRecord]) -> Result<Option<Propagation>> {
        if self.config.data.csv.is_some() {
            return Ok(None);
        }
        match self.truth_spec()? {
            Some(spec) => {
                let src = ParamSource::Gaussian { spec, nominal: self.nominal() };
                self.propagate(&src, records, STREAM_BASELINE).map(Some)
            }
            None => Ok(None),
        }
    }

    fn transforms(&self) -> Vec<Transform> {
        self.config.circe.transforms.clone().unwrap_or_else(|| vec![Transform::Additive; self.model.param_dim()])
    }

    pub fn run_method(&self, method: Method, records: &[ExperimentRecord]) -> Result<MethodOutcome> {
        let model = self.model.as_ref();
        let n = model.param_dim();
        let nominal = self.nominal();
        let cfg = &self.config;
        let stream = STREAM_METHOD + method as u64;
        let (result, source) = match method {
            Method::Circe => {
                let t = self.transforms();
                let centred = CenteredModel::new(model, t.clone())?;
                let options = CirceOptions { estimate_bias: false, ..cfg.circe.inner.clone() };
                let inp = stack_inputs(&centred, records, &vec![0.0; n], cfg.circe.fd_rel_step, options)?;
                let mut est = circe_no_bias(&inp)?;
                est.spec = GaussianParamSpec::new(est.spec.mean.clone(), est.spec.var.clone(), t)?;
                let lin = linearity_check(model, records, &est.spec, cfg.circe.fd_rel_step)?;
                let v = serde_json::json!({ "estimate": est, "linearity": lin });
                (v, ParamSource::Gaussian { spec: est.spec, nominal })
            }
            Method::CirceBias => {
                let mut ic = cfg.circe.clone();
                ic.transforms = Some(self.transforms());
                let res = iterative_circe(model, records, &vec![0.0; n], &ic)?;
                let lin = linearity_check(model, records, &res.estimate.spec, ic.fd_rel_step)?;
                let spec = res.estimate.spec.clone();
                (serde_json::json!({ "iterative": res, "linearity": lin }), ParamSource::Gaussian { spec, nominal })
            }
            Method::MleMap => {
                let t = self.transforms();
                let centred = CenteredModel::new(model, t.clone())?;
                let blocks = records
                    .iter()
                    .map(|r| {
                        let inp = stack_inputs(&centred, std::slice::from_ref(r), &vec![0.0; n], cfg.circe.fd_rel_step, CirceOptions::default())?;
                        ExperimentBlock::new(inp.residuals, inp.sensitivities, inp.noise_vars)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut est = mle_map_estimate(&blocks, cfg.mle_map.prior.as_ref(), &cfg.mle_map.options)?;
                est.spec = GaussianParamSpec::new(est.spec.mean.clone(), est.spec.var.clone(), t)?;
                let spec = est.spec.clone();
                (serde_json::json!({ "estimate": est, "map": cfg.mle_map.prior.is_some() }), ParamSource::Gaussian { spec, nominal })
            }
            Method::Iprem => {
                let s = &cfg.iprem;
                if s.grids.is_empty() {
                    return Err(IuqError::invalid("config: iprem.grids must list at least one parameter grid"));
                }
                let grids = s
                    .grids
                    .iter()
                    .map(|g| {
                        check_index(g.index, n, "iprem.grids")?;
                        Ok(ParameterGrid { index: g.index, values: default_grid(g.lo, g.hi, nominal[g.index], g.n)? })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let ic = IpremConfig {
                    eta: s.eta.unwrap_or(crate::iprem::DEFAULT_ETA),
                    weights: s.weights.clone(),
                    exponent: s.exponent,
                };
                let ranges = iprem_quantify_model(model, records, &grids, &ic)?;
                let mut uni: Vec<(f64, f64)> = nominal.iter().map(|v| (*v, *v)).collect();
                for r in &ranges {
                    uni[r.index] = (r.bounds.lower.unwrap_or(r.nominal), r.bounds.upper.unwrap_or(r.nominal));
                }
                (serde_json::json!({ "ranges": ranges, "propagated_ranges": uni }), ParamSource::Uniform { ranges: uni })
            }
            Method::Dipe => {
                let s = &cfg.dipe;
                if s.grids.is_empty() {
                    return Err(IuqError::invalid("config: dipe.grids must list at least one parameter grid"));
                }
                let mut uni: Vec<(f64, f64)> = nominal.iter().map(|v| (*v, *v)).collect();
                let mut curves = Vec::new();
                for g in &s.grids {
                    check_index(g.index, n, "dipe.grids")?;
                    if g.n < 2 || !(g.lo < g.hi) {
                        return Err(IuqError::invalid("config: dipe grid needs lo < hi and n >= 2"));
                    }
                    let grid: Vec<f64> = (0..g.n).map(|k| g.lo + (g.hi - g.lo) * k as f64 / (g.n - 1) as f64).collect();
                    let curve = dipe_pseudo_cdf(model, records, g.index, &grid)?;
                    let b = dipe_bounds(&curve, s.levels)?;
                    uni[g.index] = b;
                    curves.push(serde_json::json!({ "curve": curve, "bounds": b }));
                }
                (serde_json::json!({ "params": curves, "levels": s.levels, "propagated_ranges": uni }), ParamSource::Uniform { ranges: uni })
            }
            Method::Mcda => {
                let s = &cfg.mcda;
                let prior = s.prior_mean.clone().unwrap_or_else(|| nominal.clone());
                if prior.len() != n {
                    return Err(IuqError::DimensionMismatch { what: "mcda.prior_mean", expected: n, got: prior.len() });
                }
                let cov = CovMatrix::from_diag(&s.prior_var);
                let designs: Vec<Vec<f64>> = records.iter().map(|r| r.design.values.clone()).collect();
                let lin = linearity_test(model, &designs, &prior, &cov, s.n_probe, s.fd_rel_step, self.stream(stream))?;
                let route = match s.route {
                    RouteChoice::Auto => lin.route,
                    RouteChoice::Deterministic => McdaRoute::Deterministic,
                    RouteChoice::Probabilistic => McdaRoute::Probabilistic,
                };
                let mut lcurve = None;
                let post = match route {
                    McdaRoute::Deterministic => {
                        let alpha = match s.alpha {
                            Some(a) => a,
                            None => {
                                let (lo, hi, k) = s.alpha_grid;
                                let grid: Vec<f64> = (0..k).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (k.max(2) - 1) as f64)).collect();
                                let problem = LinearProblem::from_model(model, records, &prior, cov.clone(), s.fd_rel_step)?;
                                let sel = select_alpha_lcurve(&problem, &grid)?;
                                let a = sel.alpha;
                                lcurve = Some(sel);
                                a
                            }
                        };
                        mcda_deterministic_model(model, records, &prior, cov, alpha, s.fd_rel_step)?
                    }
                    McdaRoute::Probabilistic => {
                        let mc = crate::mcmc::McmcConfig { seed: self.seed, stream, ..s.mcmc.clone() };
                        mcda_probabilistic(model, records, &prior, &cov, &mc)?
                    }
                };
                let source = ParamSource::MvNormal { mean: post.theta_post.clone(), cov: CovMatrix::new(post.cov_post_matrix())? };
                (serde_json::json!({ "linearity": lin, "lcurve": lcurve, "posterior": post }), source)
            }
            Method::Mba => {
                let prior = PriorSpec::new(cfg.mba.prior.clone())?;
                let mut options = cfg.mba.options.clone();
                options.seed = self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                options.mcmc.seed = self.seed;
                options.mcmc.stream = stream;
                let res = mba_iuq(model, records, &prior, &options)?;
                let draws = res.chain.samples.clone();
                (serde_json::to_value(&res).map_err(json_err)?, ParamSource::Draws(draws))
            }
            Method::SampleAdjust => {
                let s = &cfg.sample_adjust;
                let ac = SampleAdjustConfig { n_samples: s.n_samples, max_rounds: s.max_rounds, target: s.target, factor: s.factor, ..Default::default() };
                let ranges: Vec<(f64, f64)> = s.ranges.iter().map(|[a, b]| (*a, *b)).collect();
                let res = sample_adjust_iuq(model, records, &ranges, &ac, self.stream(stream))?;
                let src = ParamSource::Uniform { ranges: res.ranges.clone() };
                (serde_json::to_value(&res).map_err(json_err)?, src)
            }
        };
        let mut result = serde_json::to_value(result).map_err(json_err)?;
        strip_chain_draws(&mut result);
        Ok(MethodOutcome { method, result, source })
    }

    /// generate → each method → forward UQ → envelope.
    pub fn run(&self, methods: &[Method]) -> Result<ScenarioRun> {
        let experiments = self.experiments()?;
        let baseline = self.baseline(&experiments)?;
        let mut runs = Vec::with_capacity(methods.len());
        for m in methods {
            log::info!("running {}", m.name());
            let outcome = self.run_method(*m, &experiments)?;
            let propagation = self.propagate(&outcome.source, &experiments, STREAM_FUQ + *m as u64)?;
            runs.push(MethodRun { outcome, propagation });
        }
        Ok(ScenarioRun { experiments, baseline, methods: runs })
    }
}

fn check_index(i: usize, n: usize, what: &str) -> Result<()> {
    if i >= n {
        return Err(IuqError::invalid(format!("config: {what}: parameter index {i} out of range (model has {n})")));
    }
    Ok(())
}

pub(crate) fn json_err(e: serde_json::Error) -> IuqError {
    IuqError::invalid(format!("json: {e}"))
}

/// Replaces per-draw chain arrays by their length; summaries stay.
fn strip_chain_draws(v: &mut Value) {
    match v {
        Value::Object(map) => {
            if map.contains_key("acceptance_rate") && map.contains_key("samples") {
                let n = map.get("samples").and_then(Value::as_array).map_or(0, Vec::len);
                map.remove("samples");
                map.remove("log_density");
                map.insert("n_draws".into(), Value::from(n));
            }
            for x in map.values_mut() {
                strip_chain_draws(x);
            }
        }
        Value::Array(a) => a.iter_mut().for_each(strip_chain_draws),
        _ => {}
    }
}
