//! Scenario configuration (TOML). Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{MbaOptions, ParamPrior, PriorSpec};
use crate::circe::{CirceOptions, IterativeCirceConfig, NormalInvGammaPrior};
use crate::error::{IuqError, Result};
use crate::mcmc::McmcConfig;
use crate::model::{AffineModel, DesignPoint, ExponentialModel, Model, RefloodModel};
use crate::stats::{GaussianParamSpec, Transform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Circe,
    CirceBias,
    MleMap,
    Iprem,
    Dipe,
    Mcda,
    Mba,
    SampleAdjust,
}

impl Method {
    pub const ALL: [Method; 8] =
        [Method::Circe, Method::CirceBias, Method::MleMap, Method::Iprem, Method::Dipe, Method::Mcda, Method::Mba, Method::SampleAdjust];

    pub fn name(self) -> &'static str {
        match self {
            Method::Circe => "circe",
            Method::CirceBias => "circe-bias",
            Method::MleMap => "mle-map",
            Method::Iprem => "iprem",
            Method::Dipe => "dipe",
            Method::Mcda => "mcda",
            Method::Mba => "mba",
            Method::SampleAdjust => "sample-adjust",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| IuqError::invalid(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `y = S θ + B x + c`; `design_coef` defaults to one zero column.
    Affine {
        sensitivity: Vec<Vec<f64>>,
        #[serde(default)]
        design_coef: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        offset: Option<Vec<f64>>,
        #[serde(default)]
        nominal: Option<Vec<f64>>,
    },
    /// `y = θ1 exp(θ2 x)`.
    Exponential {
        #[serde(default)]
        nominal: Option<[f64; 2]>,
    },
    /// Heater cool-down trace with HTC and quench-front multipliers; design `(T0, q)`.
    Reflood {
        #[serde(default)]
        t_end: Option<f64>,
        #[serde(default)]
        dt: Option<f64>,
        #[serde(default)]
        output_every: Option<usize>,
    },
}

fn matrix(rows: &[Vec<f64>], what: &'static str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let k = rows.first().map_or(0, |r| r.len());
    if n == 0 || k == 0 {
        return Err(IuqError::invalid(format!("model.{what} must be a non-empty matrix")));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != k) {
        return Err(IuqError::DimensionMismatch { what, expected: k, got: bad.len() });
    }
    Ok(DMatrix::from_fn(n, k, |i, j| rows[i][j]))
}

impl ModelConfig {
    pub fn build(&self) -> Result<Box<dyn Model>> {
        Ok(match self {
            ModelConfig::Affine { sensitivity, design_coef, offset, nominal } => {
                let s = matrix(sensitivity, "sensitivity")?;
                let b = match design_coef {
                    Some(d) => matrix(d, "design_coef")?,
                    None => DMatrix::zeros(s.nrows(), 1),
                };
                let c = DVector::from_vec(offset.clone().unwrap_or_else(|| vec![0.0; s.nrows()]));
                let mut m = AffineModel::new(s, b, c)?;
                if let Some(n) = nominal {
                    if n.len() != m.param_dim() {
                        return Err(IuqError::DimensionMismatch { what: "model.nominal", expected: m.param_dim(), got: n.len() });
                    }
                    m = m.with_nominal(n.clone());
                }
                Box::new(m)
            }
            ModelConfig::Exponential { nominal } => Box::new(ExponentialModel { nominal: nominal.unwrap_or([1.0, 1.0]) }),
            ModelConfig::Reflood { t_end, dt, output_every } => {
                let d = RefloodModel::default();
                let m = RefloodModel {
                    t_end: t_end.unwrap_or(d.t_end),
                    dt: dt.unwrap_or(d.dt),
                    output_every: output_every.unwrap_or(d.output_every),
                    ..d
                };
                if !(m.dt > 0.0 && m.t_end > m.dt && m.output_every > 0) {
                    return Err(IuqError::invalid("model: reflood needs dt > 0, t_end > dt and output_every > 0"));
                }
                Box::new(m)
            }
        })
    }
}

/// Law of the centred calibration variables used to synthesise data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    #[serde(default)]
    pub transform: Option<Vec<Transform>>,
}

impl TruthConfig {
    pub fn spec(&self) -> Result<GaussianParamSpec> {
        let t = self.transform.clone().unwrap_or_else(|| vec![Transform::Additive; self.mean.len()]);
        GaussianParamSpec::new(self.mean.clone(), self.var.clone(), t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Measurement noise sd: one value for all QoIs or one per QoI.
    pub noise_sd: Vec<f64>,
    /// Explicit design points.
    #[serde(default)]
    pub designs: Option<Vec<Vec<f64>>>,
    /// Evenly spaced designs over `design_range` (one `[lo, hi]` per design variable).
    #[serde(default)]
    pub n_designs: Option<usize>,
    #[serde(default)]
    pub design_range: Option<Vec<[f64; 2]>>,
    /// Read experiments from this CSV (relative to the config file) instead of synthesising.
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

impl DataConfig {
    /// Design points labelled `d0, d1, ...`.
    pub fn designs(&self, design_dim: usize) -> Result<Vec<DesignPoint>> {
        let raw: Vec<Vec<f64>> = match (&self.designs, self.n_designs, &self.design_range) {
            (Some(d), None, None) => d.clone(),
            (None, Some(n), Some(r)) => {
                if n == 0 {
                    return Err(IuqError::invalid("data.n_designs must be positive"));
                }
                (0..n)
                    .map(|k| {
                        let u = if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
                        r.iter().map(|[lo, hi]| lo + u * (hi - lo)).collect()
                    })
                    .collect()
            }
            _ => return Err(IuqError::invalid("data: give either `designs` or both `n_designs` and `design_range`")),
        };
        raw.into_iter()
            .map(|v| {
                if v.len() != design_dim {
                    return Err(IuqError::DimensionMismatch { what: "data.designs entry", expected: design_dim, got: v.len() });
                }
                let labels = (0..v.len()).map(|i| format!("x{i}")).collect();
                DesignPoint::new(v, labels)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuqConfig {
    pub n_samples: usize,
}

impl Default for FuqConfig {
    fn default() -> Self {
        FuqConfig { n_samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvelopeConfig {
    pub target: f64,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        EnvelopeConfig { target: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MleMapConfig {
    pub options: CirceOptions,
    pub prior: Option<NormalInvGammaPrior>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    #[serde(default = "default_grid_points")]
    pub n: usize,
}

fn default_grid_points() -> usize {
    crate::iprem::DEFAULT_GRID_POINTS
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpremSection {
    pub eta: Option<f64>,
    pub exponent: Option<u32>,
    pub weights: Vec<f64>,
    pub grids: Vec<GridConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DipeSection {
    pub grids: Vec<GridConfig>,
    pub levels: (f64, f64),
}

impl Default for DipeSection {
    fn default() -> Self {
        DipeSection { grids: Vec::new(), levels: crate::dipe::DEFAULT_LEVELS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteChoice {
    Auto,
    Deterministic,
    Probabilistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McdaSection {
    /// Prior mean of the model inputs; `None` uses the model nominal.
    pub prior_mean: Option<Vec<f64>>,
    pub prior_var: Vec<f64>,
    pub route: RouteChoice,
    /// Fixed α; `None` selects α on the L-curve over `alpha_grid`.
    pub alpha: Option<f64>,
    /// `[log10 lo, log10 hi, nodes]`.
    pub alpha_grid: (f64, f64, usize),
    pub n_probe: usize,
    pub fd_rel_step: f64,
    pub mcmc: McmcConfig,
}

impl Default for McdaSection {
    fn default() -> Self {
        McdaSection {
            prior_mean: None,
            prior_var: Vec::new(),
            route: RouteChoice::Auto,
            alpha: None,
            alpha_grid: (-4.0, 2.0, 31),
            n_probe: 16,
            fd_rel_step: 1e-4,
            mcmc: McmcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MbaSection {
    /// One prior per model input.
    pub prior: Vec<ParamPrior>,
    pub options: MbaOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleAdjustSection {
    /// Initial `[lo, hi]` per model input.
    pub ranges: Vec<[f64; 2]>,
    pub n_samples: usize,
    pub max_rounds: usize,
    pub target: f64,
    pub factor: f64,
}

impl Default for SampleAdjustSection {
    fn default() -> Self {
        SampleAdjustSection {
            ranges: Vec::new(),
            n_samples: crate::harness::adjust::DEFAULT_SAMPLES_PER_ROUND,
            max_rounds: 10,
            target: 0.95,
            factor: crate::harness::adjust::EXPANSION_FACTOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub methods: Vec<Method>,
    pub model: ModelConfig,
    #[serde(default)]
    pub truth: Option<TruthConfig>,
    pub data: DataConfig,
    #[serde(default)]
    pub fuq: FuqConfig,
    #[serde(default)]
    pub envelope: EnvelopeConfig,
    #[serde(default)]
    pub circe: IterativeCirceConfig,
    #[serde(default)]
    pub mle_map: MleMapConfig,
    #[serde(default)]
    pub iprem: IpremSection,
    #[serde(default)]
    pub dipe: DipeSection,
    #[serde(default)]
    pub mcda: McdaSection,
    #[serde(default)]
    pub mba: MbaSection,
    #[serde(default)]
    pub sample_adjust: SampleAdjustSection,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Parsed configuration with its source hash and location.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ScenarioConfig,
    pub sha256: String,
    pub base_dir: PathBuf,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| IuqError::invalid(format!("config: {}", e.to_string().trim_end())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let bytes = std::fs::read(path).map_err(|e| IuqError::invalid(format!("config: cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| IuqError::invalid("config: not valid UTF-8"))?;
        let config = ScenarioConfig::from_toml(&text)?;
        Ok(LoadedConfig {
            config,
            sha256: hex::encode(Sha256::digest(&bytes)),
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    /// Cross-field checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let model = self.model.build()?;
        let i = model.param_dim();
        if self.data.csv.is_none() && self.truth.is_none() {
            return Err(IuqError::invalid("config: `truth` is required unless `data.csv` is given"));
        }
        if let Some(t) = &self.truth {
            let spec = t.spec().map_err(|e| IuqError::invalid(format!("config: truth: {e}")))?;
            if spec.dim() != i {
                return Err(IuqError::DimensionMismatch { what: "truth.mean", expected: i, got: spec.dim() });
            }
        }
        if self.data.noise_sd.is_empty() || self.data.noise_sd.iter().any(|s| !(*s >= 0.0)) {
            return Err(IuqError::invalid("config: data.noise_sd must be non-empty and non-negative"));
        }
        if self.data.csv.is_none() {
            self.data.designs(model.design_dim())?;
        }
        if self.fuq.n_samples < crate::harness::fuq::MIN_FUQ_SAMPLES {
            return Err(IuqError::invalid(format!("config: fuq.n_samples must be at least {}", crate::harness::fuq::MIN_FUQ_SAMPLES)));
        }
        if !(0.0..=1.0).contains(&self.envelope.target) {
            return Err(IuqError::invalid("config: envelope.target must lie in [0, 1]"));
        }
        for m in &self.methods {
            match m {
                Method::Mba => {
                    if self.mba.prior.len() != i {
                        return Err(IuqError::DimensionMismatch { what: "mba.prior", expected: i, got: self.mba.prior.len() });
                    }
                    PriorSpec::new(self.mba.prior.clone()).map_err(|e| IuqError::invalid(format!("config: mba.prior: {e}")))?;
                    self.mba.options.mcmc.validate(i).map_err(|e| IuqError::invalid(format!("config: mba.options.mcmc: {e}")))?;
                }
                Method::Mcda => {
                    if self.mcda.prior_var.len() != i {
                        return Err(IuqError::DimensionMismatch { what: "mcda.prior_var", expected: i, got: self.mcda.prior_var.len() });
                    }
                }
                Method::SampleAdjust => {
                    let s = &self.sample_adjust;
                    if s.ranges.len() != i {
                        return Err(IuqError::DimensionMismatch { what: "sample_adjust.ranges", expected: i, got: s.ranges.len() });
                    }
                    if s.max_rounds == 0 {
                        return Err(IuqError::invalid("config: sample_adjust.max_rounds must be at least 1"));
                    }
                }
                Method::Iprem if model.output_kind() != crate::model::OutputKind::TimeSeries => {
                    return Err(IuqError::invalid("config: iprem needs a time-series model"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}
