//! Run configuration: a flat TOML (or JSON) file overlaid on per-experiment defaults.
//!
//! ```toml
//! experiment = "positivity-probe"
//! nx = 64
//! nt = 1000
//! seeds = "0..500"
//! eps = [0.04, 0.02, 0.01, 0.005]
//!
//! [thresholds]
//! fraction_at_smallest_min = 1.0
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use spde_core::coefficients::{validate_assumptions, CoefficientPair, CutoffSpec};
use spde_core::noise::GridSpec;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: parse error: {0}")]
    Parse(String),
    #[error("config: {module}: {invariant}")]
    Invalid { module: &'static str, invariant: String },
}

fn invalid(module: &'static str, invariant: impl Into<String>) -> ConfigError {
    let invariant = invariant.into();
    // Core errors already carry their module name.
    let invariant = invariant.strip_prefix(&format!("{module}: ")).map(str::to_string).unwrap_or(invariant);
    ConfigError::Invalid { module, invariant }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    KernelChecks,
    PicardConvergence,
    SolverOracle,
    MalliavinAdditive,
    PositivityProbe,
    KolmogorovFit,
    DensityGaussian,
    SupDensity,
    MomentReport,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::KernelChecks,
        Experiment::PicardConvergence,
        Experiment::SolverOracle,
        Experiment::MalliavinAdditive,
        Experiment::PositivityProbe,
        Experiment::KolmogorovFit,
        Experiment::DensityGaussian,
        Experiment::SupDensity,
        Experiment::MomentReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::KernelChecks => "kernel-checks",
            Experiment::PicardConvergence => "picard-convergence",
            Experiment::SolverOracle => "solver-oracle",
            Experiment::MalliavinAdditive => "malliavin-additive",
            Experiment::PositivityProbe => "positivity-probe",
            Experiment::KolmogorovFit => "kolmogorov-fit",
            Experiment::DensityGaussian => "density-gaussian",
            Experiment::SupDensity => "sup-density",
            Experiment::MomentReport => "moment-report",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Experiment::KernelChecks => "heat kernel identities and bounds (optionally the difference-integral ratio sweeps)",
            Experiment::PicardConvergence => "Picard sweep deltas on an ensemble",
            Experiment::SolverOracle => "spectral Picard solver against the finite-difference oracle on coupled noise",
            Experiment::MalliavinAdditive => "derivative field and Malliavin norm in the additive case",
            Experiment::PositivityProbe => "a/b split of the localized derivative norm and its window scaling",
            Experiment::KolmogorovFit => "continuity exponents of the derivative field",
            Experiment::DensityGaussian => "law of u(t,x) in the additive case against the exact Gaussian",
            Experiment::SupDensity => "law of the window supremum under coupled refinement",
            Experiment::MomentReport => "sup-norm moments and their stability under ensemble doubling",
        }
    }

    /// Threshold names and defaults.
    pub fn thresholds(self) -> &'static [(&'static str, f64)] {
        match self {
            Experiment::KernelChecks => &[
                ("semigroup_defect_max", 1e-8),
                ("gaussian_excess_max", 1e-8),
                ("l2_bound", 1.0 / 6.0),
                ("odd_limit_tol", 1e-10),
                ("mass_excess_max", 1e-8),
                ("lemma_drift_max", 0.1),
            ],
            // Index into the per-sweep delta list from which deltas must strictly decrease.
            Experiment::PicardConvergence => &[("decreasing_from", 1.0)],
            Experiment::SolverOracle => &[("rel_discrepancy_max", 0.05)],
            Experiment::MalliavinAdditive => &[("field_rel_l2_max", 1e-6), ("norm_rel_err_max", 0.03)],
            Experiment::PositivityProbe => &[("fraction_at_smallest_min", 1.0), ("norm_exponent_min", 0.4)],
            Experiment::KolmogorovFit => &[("alpha_min", 1.5), ("beta_min", 3.0), ("inverse_sum_max", 1.0)],
            Experiment::DensityGaussian => &[("ks_max", 0.05), ("normalization_tol", 0.02)],
            Experiment::SupDensity => &[("l1_max", 0.1), ("normalization_tol", 0.02)],
            Experiment::MomentReport => &[("drift_max", 0.15)],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| invalid("cli", format!("unknown experiment {s:?}")))
    }
}

/// Half-open seed range a..b.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> std::ops::Range<u64> {
        self.start..self.end
    }
}

fn parse_seed(s: &str) -> Result<u64, ConfigError> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|_| invalid("noise", format!("seed {s:?} is not a decimal or 0x-hex integer")))
}

impl FromStr for SeedRange {
    type Err = ConfigError;

    /// "a..b" (half-open) or a single seed "a".
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let r = match s.split_once("..") {
            Some((a, b)) => SeedRange { start: parse_seed(a)?, end: parse_seed(b)? },
            None => {
                let a = parse_seed(s)?;
                SeedRange { start: a, end: a.checked_add(1).ok_or_else(|| invalid("noise", "seed overflow"))? }
            }
        };
        if r.is_empty() {
            return Err(invalid("cli", format!("seed range {s:?} is empty")));
        }
        Ok(r)
    }
}

impl fmt::Display for SeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

/// Experiment-specific parameters; each experiment reads the ones it needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Knobs {
    /// Probe windows ε.
    pub eps: Vec<f64>,
    /// Windows for the localized-norm regression.
    pub eps_fit: Vec<f64>,
    /// Compact [l, 1−l].
    pub l: f64,
    /// Target point x (must be a grid node).
    pub x: f64,
    pub s_index: usize,
    pub y_index: usize,
    pub t_ref: usize,
    pub x_ref: usize,
    pub spatial_lags: Vec<usize>,
    pub temporal_lags: Vec<usize>,
    pub p: Vec<f64>,
    /// (s,y) sub-grid size for the forward Malliavin norm.
    pub sub_grid: usize,
    /// Refinement levels, including the base grid.
    pub levels: usize,
    /// Refinement factors (space, time).
    pub refine: [usize; 2],
    /// Random samples for kernel checks.
    pub samples: usize,
    pub lemma_sweeps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub nx: usize,
    pub nt: usize,
    pub t_final: f64,
    pub family: String,
    pub params: Vec<f64>,
    pub cutoff: f64,
    pub u0_amplitude: f64,
    pub seeds: SeedRange,
    pub picard_tol: f64,
    pub picard_k_max: usize,
    pub knobs: Knobs,
    pub thresholds: BTreeMap<String, f64>,
    /// Output directory from the file; not part of the hashed configuration.
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

/// On-disk form: every key optional except the experiment.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    experiment: String,
    nx: Option<usize>,
    nt: Option<usize>,
    t_final: Option<f64>,
    family: Option<String>,
    params: Option<Vec<f64>>,
    cutoff: Option<f64>,
    u0_amplitude: Option<f64>,
    seeds: Option<String>,
    out: Option<PathBuf>,
    picard_tol: Option<f64>,
    picard_k_max: Option<usize>,
    eps: Option<Vec<f64>>,
    eps_fit: Option<Vec<f64>>,
    l: Option<f64>,
    x: Option<f64>,
    s_index: Option<usize>,
    y_index: Option<usize>,
    t_ref: Option<usize>,
    x_ref: Option<usize>,
    spatial_lags: Option<Vec<usize>>,
    temporal_lags: Option<Vec<usize>>,
    p: Option<Vec<f64>>,
    sub_grid: Option<usize>,
    levels: Option<usize>,
    refine: Option<[usize; 2]>,
    samples: Option<usize>,
    lemma_sweeps: Option<bool>,
    #[serde(default)]
    thresholds: BTreeMap<String, f64>,
}

impl RunConfig {
    /// Documented defaults for one experiment.
    pub fn defaults(experiment: Experiment) -> Self {
        use Experiment::*;
        let (nx, nt, t_final, family, u0, seeds) = match experiment {
            KernelChecks => (64, 64, 1.0, "additive", 0.0, 0..1),
            PicardConvergence => (64, 2048, 0.5, "nonlinear", 1.0, 0..50),
            SolverOracle => (64, 4096, 0.25, "additive", 1.0, 0..4),
            MalliavinAdditive => (64, 256, 0.25, "additive", 0.0, 0..1),
            PositivityProbe => (64, 1000, 0.25, "nonlinear", 1.0, 0..500),
            KolmogorovFit => (64, 512, 0.25, "nonlinear", 1.0, 0..200),
            DensityGaussian => (64, 1024, 0.25, "additive", 1.0, 0..10_000),
            SupDensity => (16, 128, 0.25, "additive", 1.0, 0..10_000),
            MomentReport => (32, 256, 0.25, "nonlinear", 1.0, 0..2000),
        };
        let knobs = Knobs {
            eps: vec![0.04, 0.02, 0.01, 0.005],
            eps_fit: vec![0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1],
            l: 0.25,
            x: 0.5,
            s_index: match experiment {
                KolmogorovFit => 102,
                _ => nt / 4,
            },
            y_index: nx / 2,
            t_ref: nt,
            x_ref: nx / 4,
            spatial_lags: vec![1, 2, 4, 8],
            temporal_lags: vec![1, 2, 4, 8, 16],
            p: match experiment {
                MomentReport => vec![2.0, 8.0],
                _ => vec![12.0],
            },
            sub_grid: 32,
            levels: match experiment {
                SupDensity => 3,
                _ => 2,
            },
            refine: [2, 4],
            samples: 1000,
            lemma_sweeps: false,
        };
        Self {
            experiment,
            nx,
            nt,
            t_final,
            family: family.to_string(),
            params: Vec::new(),
            cutoff: 5.0,
            u0_amplitude: u0,
            seeds: SeedRange { start: seeds.start, end: seeds.end },
            picard_tol: spde_core::solver::DEFAULT_TOL,
            picard_k_max: spde_core::solver::DEFAULT_K_MAX,
            knobs,
            thresholds: experiment.thresholds().iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            out: None,
        }
    }

    /// Parse TOML, or JSON when the path ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::resolve(file)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let file: ConfigFile = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::resolve(file)
    }

    fn resolve(file: ConfigFile) -> Result<Self, ConfigError> {
        let experiment: Experiment = file.experiment.parse()?;
        let mut c = Self::defaults(experiment);
        // Grid-dependent knob defaults follow an overridden grid.
        if let Some(nx) = file.nx {
            c.nx = nx;
            c.knobs.y_index = nx / 2;
            c.knobs.x_ref = nx / 4;
        }
        if let Some(nt) = file.nt {
            c.nt = nt;
            c.knobs.t_ref = nt;
            if experiment != Experiment::KolmogorovFit {
                c.knobs.s_index = nt / 4;
            }
        }
        macro_rules! take {
            ($($field:ident),*) => { $(if let Some(v) = file.$field { c.$field = v; })* };
        }
        macro_rules! take_knob {
            ($($field:ident),*) => { $(if let Some(v) = file.$field { c.knobs.$field = v; })* };
        }
        take!(t_final, family, params, cutoff, u0_amplitude, picard_tol, picard_k_max);
        take_knob!(eps, eps_fit, l, x, s_index, y_index, t_ref, x_ref, spatial_lags, temporal_lags, p, sub_grid, levels, refine, samples, lemma_sweeps);
        if let Some(s) = file.seeds {
            c.seeds = s.parse()?;
        }
        c.out = file.out;
        for (k, v) in file.thresholds {
            if !c.thresholds.contains_key(&k) {
                return Err(invalid("cli", format!("unknown threshold {k:?} for {experiment}")));
            }
            c.thresholds.insert(k, v);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn threshold(&self, name: &str) -> f64 {
        self.thresholds[name]
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.nx, self.nt, self.t_final).expect("validated grid")
    }

    pub fn pair(&self) -> CoefficientPair {
        CoefficientPair::from_family(&self.family, &self.params).expect("validated family")
    }

    pub fn cutoff_spec(&self) -> CutoffSpec {
        CutoffSpec::new(self.cutoff).expect("validated cutoff")
    }

    /// Index of the node at `x`.
    pub fn node(&self, x: f64) -> usize {
        (x * self.nx as f64).round() as usize
    }

    /// Every invariant a run relies on; called after parsing and after CLI overrides.
    pub fn validate(&self) -> Result<(), ConfigError> {
        GridSpec::new(self.nx, self.nt, self.t_final).map_err(|e| invalid("noise", e.to_string()))?;
        let pair = CoefficientPair::from_family(&self.family, &self.params).map_err(|e| invalid("coefficients", e.to_string()))?;
        let cutoff = CutoffSpec::new(self.cutoff).map_err(|e| invalid("coefficients", e.to_string()))?;
        let xs: Vec<f64> = (0..=16).map(|k| k as f64 / 16.0).collect();
        let span = cutoff.level() + 1.0;
        let report = validate_assumptions(&pair, (-span, span), &xs);
        if let Some(f) = report.failures().first() {
            return Err(invalid("coefficients", format!("{} violated by {:e} at (x, u) = {:?}", f.name, -f.margin, f.worst_at)));
        }
        let exact_law = matches!(self.experiment, Experiment::MalliavinAdditive | Experiment::DensityGaussian);
        if exact_law && self.family != "additive" {
            return Err(invalid("coefficients", format!("{} compares against the exact additive law; family must be additive", self.experiment)));
        }
        if self.seeds.is_empty() {
            return Err(invalid("cli", "seed range is empty"));
        }
        if !(self.picard_tol > 0.0) || self.picard_k_max == 0 {
            return Err(invalid("solver", "picard_tol must be positive and picard_k_max at least 1"));
        }
        let k = &self.knobs;
        let on_node = |x: f64| (x * self.nx as f64 - (x * self.nx as f64).round()).abs() < 1e-9 && x > 0.0 && x < 1.0;
        if !on_node(k.x) {
            return Err(invalid("malliavin", format!("x = {} is not an interior grid node", k.x)));
        }
        if !(k.l > 0.0 && k.l < 0.5 && k.x >= k.l && k.x <= 1.0 - k.l) {
            return Err(invalid("malliavin", format!("need 0 < l < 1/2 and x in [l, 1-l], got l = {}, x = {}", k.l, k.x)));
        }
        if k.s_index >= self.nt || k.y_index > self.nx {
            return Err(invalid("malliavin", "source index outside the grid"));
        }
        if k.eps.iter().chain(&k.eps_fit).any(|&e| !(e > 0.0 && e <= self.t_final)) {
            return Err(invalid("malliavin", "window lengths must lie in (0, T]"));
        }
        if k.p.iter().any(|&p| !(p >= 2.0)) {
            return Err(invalid("solver", "moment exponents must be at least 2"));
        }
        if self.experiment == Experiment::KolmogorovFit {
            if k.p.iter().any(|&p| !(p > 4.0)) {
                return Err(invalid("malliavin", "continuity fit needs p > 4"));
            }
            let max_h = k.spatial_lags.iter().max().copied().unwrap_or(0);
            let max_tau = k.temporal_lags.iter().max().copied().unwrap_or(0);
            if k.t_ref > self.nt || k.x_ref + max_h >= self.nx || max_tau > k.t_ref || k.t_ref - max_tau <= k.s_index {
                return Err(invalid("malliavin", "increment design leaves the grid or crosses the source time"));
            }
            if k.spatial_lags.len() < 2 || k.temporal_lags.len() < 2 {
                return Err(invalid("malliavin", "need at least two lags per direction"));
            }
        }
        if self.experiment == Experiment::MalliavinAdditive && (k.sub_grid == 0 || self.nt % k.sub_grid != 0 || self.nx % k.sub_grid != 0) {
            return Err(invalid("malliavin", format!("sub_grid {} must divide nx = {} and nt = {}", k.sub_grid, self.nx, self.nt)));
        }
        if k.levels < 2 || k.refine.iter().any(|&r| r == 0) {
            return Err(invalid("density", "need at least two refinement levels and positive factors"));
        }
        if k.samples == 0 {
            return Err(invalid("heat_kernel", "samples must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!("0..500".parse::<SeedRange>().unwrap(), SeedRange { start: 0, end: 500 });
        assert_eq!("0x10..0x20".parse::<SeedRange>().unwrap(), SeedRange { start: 16, end: 32 });
        assert_eq!("7".parse::<SeedRange>().unwrap().len(), 1);
        assert!("5..5".parse::<SeedRange>().is_err());
        assert!("a..b".parse::<SeedRange>().is_err());
    }

    #[test]
    fn toml_overlays_defaults() {
        let c = RunConfig::from_toml("experiment = \"positivity-probe\"\nnt = 500\nseeds = \"3..9\"\n[thresholds]\nnorm_exponent_min = 0.3\n").unwrap();
        assert_eq!((c.nx, c.nt, c.seeds.len()), (64, 500, 6));
        assert_eq!(c.threshold("norm_exponent_min"), 0.3);
        assert_eq!(c.threshold("fraction_at_smallest_min"), 1.0);
        assert_eq!(c.knobs.s_index, 125);
    }

    #[test]
    fn json_is_accepted() {
        let c = RunConfig::from_json(r#"{"experiment": "kernel-checks", "lemma_sweeps": true}"#).unwrap();
        assert!(c.knobs.lemma_sweeps);
    }

    #[test]
    fn invalid_configs_name_the_module() {
        let err = RunConfig::from_toml("experiment = \"kernel-checks\"\nnx = 1\n").unwrap_err();
        assert!(err.to_string().contains("noise"), "{err}");
        let err = RunConfig::from_toml("experiment = \"kernel-checks\"\nfamily = \"cubic\"\n").unwrap_err();
        assert!(err.to_string().contains("coefficients"), "{err}");
        let err = RunConfig::from_toml("experiment = \"kernel-checks\"\nparams = [0.5, 0.25, 1.0]\nfamily = \"nonlinear\"\n").unwrap_err();
        assert!(err.to_string().contains("c0"), "{err}");
        assert!(RunConfig::from_toml("experiment = \"kernel-checks\"\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("experiment = \"kernel-checks\"\n[thresholds]\nks_max = 1\n").is_err());
        assert!(RunConfig::from_toml("experiment = \"nope\"\n").is_err());
        assert!(RunConfig::from_toml("experiment = \"positivity-probe\"\nx = 0.1\n").is_err());
    }

    #[test]
    fn every_experiment_default_is_valid() {
        for e in Experiment::ALL {
            RunConfig::defaults(e).validate().unwrap();
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
    }
}
