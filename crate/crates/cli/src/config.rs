use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tboa_core::diagnostics::BundleRule;
use tboa_core::objective::{Aggregation, HorizonMode, ObjectiveSpec, Orientation, Variant};
use tboa_core::optimizer::OptimizerSettings;
use tboa_core::{Method, Tolerances};

use crate::error::{CliError, Result};

/// Built-in run configurations.
pub const PRESETS: &[(&str, &str)] = &[
    ("davis_skodje", include_str!("../presets/davis_skodje.json")),
    ("michaelis_menten", include_str!("../presets/michaelis_menten.json")),
    ("hydrogen", include_str!("../presets/hydrogen.json")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    pub level_set: LevelSetConfig,
    pub horizons: Vec<f64>,
    #[serde(default)]
    pub starts: StartsConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default = "default_accumulation_tol")]
    pub accumulation_tol: f64,
    #[serde(default)]
    pub emit: EmitConfig,
    #[serde(default)]
    pub certificate: CertificateConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_name() -> String {
    "run".into()
}

fn default_accumulation_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    DavisSkodje {
        gamma: f64,
    },
    MichaelisMenten {
        gamma: f64,
        kappa: f64,
        beta: f64,
    },
    Linear {
        matrix: Vec<Vec<f64>>,
    },
    /// A mechanism file (the bundled hydrogen mechanism when `file` is
    /// absent), its temperature, and the initial composition in mol/cm3 that
    /// fixes the conserved affine subspace.
    Mechanism {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        file: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature_k: Option<f64>,
        initial: BTreeMap<String, f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub mode: HorizonMode,
    pub level: u32,
    pub orientation: Orientation,
    pub aggregation: Aggregation,
    /// Grid spacing reference; the first horizon when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_base: Option<f64>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        let d = ObjectiveSpec::default_recipe(1.0);
        Self {
            variant: d.variant,
            mode: d.mode,
            level: d.level,
            orientation: d.orientation,
            aggregation: d.aggregation,
            grid_base: None,
        }
    }
}

impl ObjectiveConfig {
    pub fn spec(&self, horizon: f64) -> ObjectiveSpec {
        ObjectiveSpec {
            variant: self.variant,
            mode: self.mode,
            horizon,
            level: self.level,
            grid_base: self.grid_base,
            orientation: self.orientation,
            aggregation: self.aggregation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSetConfig {
    pub epsilon: EpsilonConfig,
    /// Search box in reduced coordinates (species-space offsets from the
    /// initial composition projected on the conserved subspace, for
    /// mechanisms).
    pub region: RegionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EpsilonConfig {
    Value(f64),
    /// Fraction of the speed at the region centre.
    CentreFraction(f64),
    /// Quantile of the speeds at uniformly sampled admissible region points.
    Quantile { q: f64, samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartsConfig {
    pub count: usize,
}

impl Default for StartsConfig {
    fn default() -> Self {
        Self { count: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    pub rel: f64,
    pub abs: f64,
    pub method: Method,
    pub max_steps: usize,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        let t = Tolerances::default();
        Self { rel: t.rel, abs: t.abs, method: t.method, max_steps: t.max_steps }
    }
}

impl ToleranceConfig {
    pub fn stiff() -> Self {
        let t = Tolerances::stiff();
        Self { rel: t.rel, abs: t.abs, method: t.method, max_steps: t.max_steps }
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances { rel: self.rel, abs: self.abs, method: self.method, max_steps: self.max_steps, ..Tolerances::default() }
    }
}

/// Sampling of the trajectory through each minimizer. Without a span the
/// trajectory covers `[-T, T]` with 128 intervals per side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EmitConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

impl EmitConfig {
    pub fn resolve(&self, horizon: f64) -> ((f64, f64), f64) {
        let span = self.span.map_or((-horizon, horizon), |[a, b]| (a, b));
        let dt = self.dt.unwrap_or(horizon / 128.0);
        (span, dt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateConfig {
    /// Objective certificates are evaluated this many levels finer.
    pub refine_levels: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attraction: Option<AttractionConfig>,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self { refine_levels: 2, attraction: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BundleChoice {
    /// The model's invariant bundle when it has one, else orthogonal.
    #[default]
    Auto,
    Oracle,
    Orthogonal,
}

impl BundleChoice {
    pub fn rule(self, has_oracle: bool) -> BundleRule {
        match self {
            Self::Auto if has_oracle => BundleRule::Oracle,
            Self::Auto | Self::Orthogonal => BundleRule::Orthogonal,
            Self::Oracle => BundleRule::Oracle,
        }
    }
}

impl std::str::FromStr for BundleChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(Self::Auto),
            "oracle" => Ok(Self::Oracle),
            "orthogonal" => Ok(Self::Orthogonal),
            other => Err(format!("unknown bundle '{other}' (auto, oracle, orthogonal)")),
        }
    }
}

/// Normal-attraction check on the limiting trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttractionConfig {
    pub nu: f64,
    pub nu_c: f64,
    pub horizon: f64,
    #[serde(default = "default_attraction_level")]
    pub level: u32,
    /// Number of evenly spaced trajectory points that are checked.
    #[serde(default = "default_attraction_samples")]
    pub samples: usize,
    #[serde(default)]
    pub bundle: BundleChoice,
}

fn default_attraction_level() -> u32 {
    4
}

fn default_attraction_samples() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Units {
    #[default]
    #[serde(rename = "mol/cm3")]
    MolPerCm3,
    #[serde(rename = "mol/L")]
    MolPerL,
}

impl Units {
    /// Factor from internal mol/cm3 to these units.
    pub fn factor(self) -> f64 {
        match self {
            Self::MolPerCm3 => 1.0,
            Self::MolPerL => 1e3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::MolPerCm3 => "mol/cm3",
            Self::MolPerL => "mol/L",
        }
    }
}

impl std::str::FromStr for Units {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mol/cm3" => Ok(Self::MolPerCm3),
            "mol/L" => Ok(Self::MolPerL),
            other => Err(format!("unknown units '{other}' (mol/cm3 or mol/L)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub units: Units,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file. A relative mechanism path is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let ModelConfig::Mechanism { file: Some(f), .. } = &mut cfg.model {
            if f.is_relative() {
                if let Some(dir) = path.parent() {
                    *f = dir.join(&*f);
                }
            }
        }
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CliError::Config(format!("unknown preset '{name}'")))?;
        Self::from_json(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that can be checked without touching the model.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.horizons.is_empty() {
            return bad("horizons must not be empty".into());
        }
        if self.horizons.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return bad("horizons must be positive and finite".into());
        }
        if self.horizons.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("horizons must be strictly increasing".into());
        }
        let base = self.objective.grid_base.unwrap_or(self.horizons[0]);
        for &t in &self.horizons {
            self.objective.spec(t).with_grid_base(base).validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.starts.count == 0 {
            return bad("starts.count must be at least 1".into());
        }
        let t = &self.tolerances;
        if !(t.rel > 0.0 && t.abs > 0.0 && t.max_steps > 0) {
            return bad("tolerances must be positive".into());
        }
        match self.level_set.epsilon {
            EpsilonConfig::Value(v) | EpsilonConfig::CentreFraction(v) if !(v > 0.0 && v.is_finite()) => {
                return bad("epsilon must be positive".into());
            }
            EpsilonConfig::Quantile { q, samples } if !((0.0..=1.0).contains(&q) && samples > 0) => {
                return bad("epsilon quantile needs q in [0, 1] and samples > 0".into());
            }
            _ => {}
        }
        let r = &self.level_set.region;
        if r.lo.len() != r.hi.len() || r.lo.iter().zip(&r.hi).any(|(a, b)| !(a < b)) {
            return bad("region needs lo < hi componentwise with equal lengths".into());
        }
        if !(self.accumulation_tol > 0.0) {
            return bad("accumulation_tol must be positive".into());
        }
        let (span, dt) = self.emit.resolve(self.horizons[0]);
        if !(span.0 <= 0.0 && span.1 >= 0.0 && dt > 0.0) {
            return bad("emit span must contain 0 and dt must be positive".into());
        }
        if let Some(a) = &self.certificate.attraction {
            if !(a.nu_c >= 0.0 && a.nu_c < a.nu && a.horizon > 0.0 && a.samples > 0) {
                return bad("attraction check needs 0 <= nu_c < nu, horizon > 0, samples > 0".into());
            }
        }
        match &self.model {
            ModelConfig::DavisSkodje { gamma } if !(*gamma > 1.0) => bad("davis_skodje needs gamma > 1".into()),
            ModelConfig::Linear { matrix } if matrix.is_empty() || matrix.iter().any(|r| r.len() != matrix.len()) => {
                bad("linear model needs a square matrix".into())
            }
            ModelConfig::Mechanism { initial, .. } if initial.values().any(|c| !(*c >= 0.0 && c.is_finite())) => {
                bad("initial concentrations must be nonnegative".into())
            }
            _ => Ok(()),
        }
    }
}
