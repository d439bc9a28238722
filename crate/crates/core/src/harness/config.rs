//! Run configuration: one TOML file pins everything an experiment needs —
//! law, speed, geometry, grids, seeds, and tolerances — so that a config
//! plus the code version determines every output number. Unknown keys are
//! rejected rather than ignored: a typo must fail loudly, not silently run
//! the default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamic::{DynamicKind, DynamicLaw, Potential};
use crate::environment::{ConductanceLaw, PositiveLaw, SpeedMeasure};
use crate::lattice::{Annulus, MeshResolution, Window};

/// Everything a pipeline reads. Most fields have defaults; presets only
/// state what they change. Sections that belong to one family of
/// experiments (`[dynamic]`, `[interface]`) are optional and demanded by
/// the pipelines that need them.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form identifier recorded in every output.
    pub experiment: String,
    /// Master seed; every stream in the run is keyed off it.
    pub seed: u64,
    #[serde(default)]
    pub law: LawSpec,
    #[serde(default)]
    pub speed: SpeedSpec,
    /// Half-width of the sampled window (side = 2·half_width + 1).
    #[serde(default = "defaults::half_width")]
    pub half_width: i32,
    /// Geometric radius grid for the scans.
    #[serde(default = "defaults::n_grid")]
    pub n_grid: Vec<i32>,
    #[serde(default)]
    pub annulus: AnnulusSpec,
    #[serde(default = "defaults::num_envs")]
    pub num_envs: usize,
    #[serde(default = "defaults::num_walks")]
    pub num_walks: usize,
    /// Monte Carlo walk horizon.
    #[serde(default = "defaults::horizon")]
    pub horizon: f64,
    /// Shrink factor for off-center killed-Green scans: the probe point
    /// sits at radius (1 − delta)·n. Zero keeps it at the center.
    #[serde(default)]
    pub delta: f64,
    /// Time grid for kernel curves (heat-kernel scaling, annealed
    /// gradients). Pipelines fall back to a built-in grid when absent.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    #[serde(default)]
    pub dynamic: Option<DynamicSpec>,
    #[serde(default)]
    pub interface: Option<InterfaceSpec>,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Default output directory; the command line can override it.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Worker count; the command line and `RCM_LAB_THREADS` can override.
    #[serde(default)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum SpeedSpec {
    #[default]
    Vsrw,
    Csrw,
}

impl From<SpeedSpec> for SpeedMeasure {
    fn from(s: SpeedSpec) -> SpeedMeasure {
        match s {
            SpeedSpec::Vsrw => SpeedMeasure::Vsrw,
            SpeedSpec::Csrw => SpeedMeasure::Csrw,
        }
    }
}

/// Conductance law section. `kind` selects the family; exactly the
/// parameters of that family must be present.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawSpec {
    #[serde(default = "defaults::one")]
    pub p_open: f64,
    #[serde(default)]
    pub kind: LawKindSpec,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub lo: Option<f64>,
    #[serde(default)]
    pub hi: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum LawKindSpec {
    #[default]
    Constant,
    Uniform,
    Pareto,
    InversePareto,
}

impl Default for LawSpec {
    fn default() -> Self {
        LawSpec {
            p_open: 1.0,
            kind: LawKindSpec::Constant,
            value: None,
            lo: None,
            hi: None,
            alpha: None,
            beta: None,
            scale: None,
        }
    }
}

impl LawSpec {
    /// Builds the law, insisting that exactly the parameters of the chosen
    /// family are set.
    pub fn build(&self) -> Result<ConductanceLaw, ConfigError> {
        let fields = [
            ("value", self.value),
            ("lo", self.lo),
            ("hi", self.hi),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("scale", self.scale),
        ];
        let allowed: &[&str] = match self.kind {
            LawKindSpec::Constant => &["value"],
            LawKindSpec::Uniform => &["lo", "hi"],
            LawKindSpec::Pareto => &["alpha", "scale"],
            LawKindSpec::InversePareto => &["beta", "scale"],
        };
        for (name, v) in fields {
            if v.is_some() && !allowed.contains(&name) {
                return Err(ConfigError::Law(format!(
                    "parameter `{name}` does not belong to law kind {:?}",
                    self.kind
                )));
            }
        }
        let get = |name: &str| -> Result<f64, ConfigError> {
            fields
                .iter()
                .find(|(n, _)| *n == name)
                .and_then(|(_, v)| *v)
                .ok_or_else(|| {
                    ConfigError::Law(format!("law kind {:?} needs `{name}`", self.kind))
                })
        };
        let law = match self.kind {
            LawKindSpec::Constant => PositiveLaw::Constant { c: self.value.unwrap_or(1.0) },
            LawKindSpec::Uniform => PositiveLaw::Uniform { lo: get("lo")?, hi: get("hi")? },
            LawKindSpec::Pareto => {
                PositiveLaw::Pareto { alpha: get("alpha")?, scale: get("scale")? }
            }
            LawKindSpec::InversePareto => {
                PositiveLaw::InversePareto { beta: get("beta")?, scale: get("scale")? }
            }
        };
        ConductanceLaw::new(self.p_open, law).map_err(|e| ConfigError::Law(e.to_string()))
    }

    /// True when the law is the unit conductance on every edge, the case
    /// with closed-form constants.
    pub fn is_homogeneous_unit(&self) -> bool {
        self.p_open == 1.0
            && self.kind == LawKindSpec::Constant
            && self.value.unwrap_or(1.0) == 1.0
    }
}

/// Annulus scan geometry: the real annulus K and its polar mesh.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnulusSpec {
    #[serde(default = "defaults::one")]
    pub inner: f64,
    #[serde(default = "defaults::two")]
    pub outer: f64,
    #[serde(default = "defaults::mesh_radii")]
    pub radii: usize,
    #[serde(default = "defaults::mesh_angles")]
    pub angles: usize,
}

impl Default for AnnulusSpec {
    fn default() -> Self {
        AnnulusSpec { inner: 1.0, outer: 2.0, radii: 16, angles: 64 }
    }
}

impl AnnulusSpec {
    pub fn build(&self) -> Result<(Annulus, MeshResolution), ConfigError> {
        let annulus = Annulus::new(self.inner, self.outer)
            .map_err(|e| ConfigError::Value(e.to_string()))?;
        Ok((annulus, MeshResolution { radii: self.radii, angles: self.angles }))
    }
}

/// Dynamic-environment section.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicSpec {
    pub frame_dt: f64,
    #[serde(default)]
    pub kind: DynamicKindSpec,
    #[serde(default)]
    pub law: Option<LawSpec>,
    #[serde(default)]
    pub even: Option<LawSpec>,
    #[serde(default)]
    pub odd: Option<LawSpec>,
    /// Quadrature cutoff for the annealed potential kernel.
    #[serde(default = "defaults::t_cut")]
    pub t_cut: f64,
    /// Separations probed by the annealed potential.
    #[serde(default)]
    pub targets: Option<Vec<[i32; 2]>>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicKindSpec {
    Constant,
    Alternating,
    #[default]
    IidFrames,
    Interface,
}

impl DynamicSpec {
    pub fn build(
        &self,
        window: Window,
        interface: Option<&InterfaceSpec>,
    ) -> Result<DynamicLaw, ConfigError> {
        let law_of = |spec: &Option<LawSpec>, which: &str| -> Result<ConductanceLaw, ConfigError> {
            spec.as_ref()
                .ok_or_else(|| ConfigError::Law(format!("dynamic kind needs `{which}`")))?
                .build()
        };
        let kind = match self.kind {
            DynamicKindSpec::Constant => DynamicKind::Constant { law: law_of(&self.law, "law")? },
            DynamicKindSpec::IidFrames => {
                DynamicKind::IidFrames { law: law_of(&self.law, "law")? }
            }
            DynamicKindSpec::Alternating => DynamicKind::Alternating {
                even: law_of(&self.even, "even")?,
                odd: law_of(&self.odd, "odd")?,
            },
            DynamicKindSpec::Interface => {
                let iface = interface.ok_or(ConfigError::MissingSection("interface"))?;
                DynamicKind::Interface {
                    side: iface.side,
                    potential: iface.potential()?,
                    tilt: iface.tilt,
                    step: iface.step,
                    equilibration: iface.equilibration,
                }
            }
        };
        Ok(DynamicLaw { frame_dt: self.frame_dt, window, kind })
    }
}

/// Interface-model section.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceSpec {
    pub side: usize,
    /// Anharmonicity of the pair potential; zero means quadratic.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub tilt: [f64; 2],
    /// Euler step for the dynamic-conductance driver.
    #[serde(default = "defaults::step")]
    pub step: f64,
    /// Relaxation time applied before a driver starts emitting frames.
    #[serde(default = "defaults::equilibration")]
    pub equilibration: f64,
    #[serde(default = "defaults::burn_in")]
    pub burn_in: f64,
    #[serde(default = "defaults::sample_time")]
    pub sample_time: f64,
    /// Increment separations for the variance table.
    #[serde(default = "defaults::separations")]
    pub separations: Vec<i32>,
}

impl InterfaceSpec {
    pub fn potential(&self) -> Result<Potential, ConfigError> {
        if self.epsilon == 0.0 {
            Ok(Potential::Quadratic)
        } else if self.epsilon > 0.0 && self.epsilon < 1.0 {
            Ok(Potential::AnharmonicCosine { epsilon: self.epsilon })
        } else {
            Err(ConfigError::Value(format!(
                "interface epsilon {} outside [0, 1)",
                self.epsilon
            )))
        }
    }
}

/// Pass/fail knobs, preset to the calibrated defaults. Overriding them in
/// a config changes what the exit code reports, never what is computed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Final sup-deviation cap for the annulus scan, relative to gbar.
    pub sup_dev_cap: f64,
    /// Relative window for the on-diagonal ratio at the top radius.
    pub ondiag_rel: f64,
    /// Absolute residual cap for the exit-identity check.
    pub lemma22_residual: f64,
    /// Relative window for fitted logarithmic slopes.
    pub slope_rel: f64,
    /// Relative window for the scaled return density.
    pub llt_rel: f64,
    /// Relative window for extrapolated potential values.
    pub potential_rel: f64,
    /// Relative window for the additive constant of the expansion.
    pub classical_rel: f64,
    /// Acceptable fitted log-log slope range for the annealed gradient.
    pub gradient_slope_lo: f64,
    pub gradient_slope_hi: f64,
    /// Standard-error multiplier for Monte Carlo agreement checks.
    pub mc_sigma: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            sup_dev_cap: 0.15,
            ondiag_rel: 0.10,
            lemma22_residual: 1e-2,
            slope_rel: 0.10,
            llt_rel: 0.02,
            potential_rel: 0.01,
            classical_rel: 0.01,
            gradient_slope_lo: -1.7,
            gradient_slope_hi: -1.3,
            mc_sigma: 3.0,
        }
    }
}

mod defaults {
    pub fn one() -> f64 {
        1.0
    }
    pub fn two() -> f64 {
        2.0
    }
    pub fn half_width() -> i32 {
        160
    }
    pub fn n_grid() -> Vec<i32> {
        vec![8, 16, 32, 64]
    }
    pub fn num_envs() -> usize {
        4
    }
    pub fn num_walks() -> usize {
        200
    }
    pub fn horizon() -> f64 {
        200.0
    }
    pub fn t_cut() -> f64 {
        40.0
    }
    pub fn mesh_radii() -> usize {
        16
    }
    pub fn mesh_angles() -> usize {
        64
    }
    pub fn step() -> f64 {
        0.05
    }
    pub fn equilibration() -> f64 {
        40.0
    }
    pub fn burn_in() -> f64 {
        10.0
    }
    pub fn sample_time() -> f64 {
        240.0
    }
    pub fn separations() -> Vec<i32> {
        vec![1, 2, 4, 8, 16]
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file; also returns the SHA-256 of the
    /// raw bytes, which stamps every output derived from it.
    pub fn load(path: &Path) -> Result<(ExperimentConfig, String), ConfigError> {
        let bytes = std::fs::read(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let hash = super::io::sha256_hex(&bytes);
        let text = String::from_utf8_lossy(&bytes);
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok((cfg, hash))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.law.build()?;
        if self.half_width < 8 {
            return Err(ConfigError::Value(format!(
                "half_width {} too small; the smallest scans need 8",
                self.half_width
            )));
        }
        if self.n_grid.is_empty() {
            return Err(ConfigError::Value("n_grid is empty".into()));
        }
        if self.n_grid[0] < 2 || self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ConfigError::Value(
                "n_grid must be strictly increasing with entries >= 2".into(),
            ));
        }
        if !(self.delta >= 0.0 && self.delta < 1.0) {
            return Err(ConfigError::Value(format!("delta {} outside [0, 1)", self.delta)));
        }
        if !(self.horizon > 0.0) {
            return Err(ConfigError::Value(format!("horizon {} must be positive", self.horizon)));
        }
        if self.num_envs == 0 || self.num_walks == 0 {
            return Err(ConfigError::Value("num_envs and num_walks must be positive".into()));
        }
        if let Some(times) = &self.times {
            if times.is_empty() || times.iter().any(|&t| !(t > 0.0)) {
                return Err(ConfigError::Value("times must be positive".into()));
            }
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(ConfigError::Value("times must be strictly increasing".into()));
            }
        }
        self.annulus.build()?;
        if let Some(iface) = &self.interface {
            iface.potential()?;
            if iface.side < 4 {
                return Err(ConfigError::Value(format!(
                    "interface side {} too small",
                    iface.side
                )));
            }
        }
        Ok(())
    }

    pub fn speed_measure(&self) -> SpeedMeasure {
        self.speed.into()
    }

    pub fn window(&self) -> Window {
        Window::new(self.half_width)
    }

    /// Worker count: explicit config value, else `RCM_LAB_THREADS`, else
    /// whatever the machine offers.
    pub fn resolve_threads(&self) -> usize {
        if let Some(t) = self.threads {
            return t.max(1);
        }
        if let Ok(v) = std::env::var("RCM_LAB_THREADS") {
            if let Ok(t) = v.trim().parse::<usize>() {
                return t.max(1);
            }
        }
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

#[derive(thiserror::Error, Debug)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path} does not parse: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("bad law: {0}")]
    Law(String),
    #[error("bad config value: {0}")]
    Value(String),
    #[error("this run needs the [{0}] section")]
    MissingSection(&'static str),
    #[error(
        "window half-width {given} too small for this run: need at least {required} (side {})",
        2 * *required as i64 + 1
    )]
    WindowTooSmall { required: i32, given: i32 },
}
