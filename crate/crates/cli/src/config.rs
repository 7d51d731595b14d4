//! Experiment configuration files.
//!
//! TOML with `[section]` headers. Unknown keys are errors, and parse errors
//! carry the line and column of the offending key.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use btlab::bubbletree::{ExtractConfig, Superposition, Thresholds};
use btlab::solver::SolveConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Solve,
    MobiusSweep,
    Extract,
    VerifyIdentity,
    GapTest,
    Degree,
    Neck,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Must match the subcommand when given.
    pub experiment: Option<Kind>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub thresholds: ThresholdsConfig,
    pub sequence: Option<SequenceConfig>,
    #[serde(default)]
    pub extract: ExtractOptions,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub gap: GapConfig,
    pub neck: Option<NeckConfig>,
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    #[serde(default = "one")]
    pub r: f64,
    pub h: f64,
    #[serde(default = "yes")]
    pub half: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n: 2, r: 1.0, h: 1.0 / 32.0, half: true }
    }
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Dirichlet,
    Free,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Defaults to `n`.
    pub p: Option<f64>,
    pub residual_tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub delta_schedule: Option<Vec<f64>>,
    pub delta_min: Option<f64>,
    #[serde(default)]
    pub mode: Mode,
}

impl SolverConfig {
    pub fn build(&self, n: usize) -> SolveConfig {
        let mut c = SolveConfig::new(self.p.unwrap_or(n as f64));
        if let Some(v) = self.residual_tol {
            c.residual_tol = v;
        }
        if let Some(v) = self.max_iters {
            c.max_iters = v;
        }
        if let Some(v) = &self.delta_schedule {
            c.delta_schedule = v.clone();
        }
        if let Some(v) = self.delta_min {
            c.delta_min = v;
        }
        c
    }
}

/// Overrides of the dimension defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdsConfig {
    pub eps0: Option<f64>,
    pub eps_b: Option<f64>,
    pub eps_reg: Option<f64>,
    pub eps_star: Option<f64>,
    pub energy_bound: Option<f64>,
    pub sep_threshold: Option<f64>,
}

impl ThresholdsConfig {
    pub fn build(&self, n: usize) -> Thresholds {
        let mut t = Thresholds::for_dimension(n);
        if let Some(v) = self.eps_b {
            t.eps_b = v;
        }
        if let Some(v) = self.eps0 {
            t.eps0 = v;
        }
        if let Some(v) = self.eps_reg {
            t.eps_reg = v;
        }
        t.eps_star = self.eps_star.or(t.eps_star);
        t.energy_bound = self.energy_bound.or(t.energy_bound);
        if let Some(v) = self.sep_threshold {
            t.sep_threshold = v;
        }
        t
    }

    fn validate(&self) -> Result<()> {
        let all = [
            ("eps0", self.eps0),
            ("eps_b", self.eps_b),
            ("eps_reg", self.eps_reg),
            ("eps_star", self.eps_star),
            ("energy_bound", self.energy_bound),
            ("sep_threshold", self.sep_threshold),
        ];
        for (name, v) in all {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    bail!("thresholds.{name} must be positive, got {v}");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaRule {
    /// `p_k = n`.
    #[default]
    Zero,
    /// `α_k = c`.
    Constant,
    /// `α_k = c/k`.
    InverseK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeKind {
    /// `ω(∞) = e_n`.
    ChartInverse,
    /// `ω(∞) = −e_n`.
    Antipodal,
}

/// Bubble with `λ_k = base^{−power·k}` and a fixed center.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BubbleConfig {
    pub prototype: PrototypeKind,
    pub center: Option<Vec<f64>>,
    #[serde(default = "two")]
    pub base: f64,
    #[serde(default = "one")]
    pub power: f64,
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    /// Inclusive index range `[k_first, k_last]`.
    pub k: [i64; 2],
    #[serde(default)]
    pub alpha: AlphaRule,
    #[serde(default)]
    pub alpha_c: f64,
    /// Constant background map; defaults to `e_n`.
    pub background: Option<Vec<f64>>,
    #[serde(default)]
    pub superposition: Superposition,
    #[serde(default, rename = "bubble")]
    pub bubbles: Vec<BubbleConfig>,
    /// Map files, one per index, replacing the synthetic generator.
    pub maps: Option<Vec<PathBuf>>,
}

impl SequenceConfig {
    pub fn ks(&self) -> Vec<i64> {
        (self.k[0]..=self.k[1]).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.ks()
            .iter()
            .map(|&k| match self.alpha {
                AlphaRule::Zero => 0.0,
                AlphaRule::Constant => self.alpha_c,
                AlphaRule::InverseK => self.alpha_c / k as f64,
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.k[0] > self.k[1] {
            bail!("sequence.k range [{}, {}] is empty", self.k[0], self.k[1]);
        }
        if self.alpha != AlphaRule::Zero && !(self.alpha_c > 0.0) {
            bail!("sequence.alpha_c must be positive for rule {:?}", self.alpha);
        }
        for b in &self.bubbles {
            if !(b.base > 1.0 && b.power > 0.0) {
                bail!("bubble scales need base > 1 and power > 0");
            }
        }
        if let Some(m) = &self.maps {
            if m.len() != self.ks().len() {
                bail!("sequence.maps has {} files for {} indices", m.len(), self.ks().len());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractOptions {
    pub generation_cap: Option<usize>,
    pub concentration_radius: Option<f64>,
    pub min_scale_factor: Option<f64>,
    pub bisection_tol: Option<f64>,
    pub lambda_window: Option<usize>,
    pub neck_k: Option<f64>,
    pub neck_eta: Option<f64>,
    #[serde(default = "profile_default")]
    pub profile_radii: usize,
    /// Relative defect accepted by `verify-identity`.
    #[serde(default = "identity_tol")]
    pub identity_tol: f64,
}

fn profile_default() -> usize {
    64
}

fn identity_tol() -> f64 {
    0.1
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            generation_cap: None,
            concentration_radius: None,
            min_scale_factor: None,
            bisection_tol: None,
            lambda_window: None,
            neck_k: None,
            neck_eta: None,
            profile_radii: profile_default(),
            identity_tol: identity_tol(),
        }
    }
}

impl ExtractOptions {
    pub fn build(&self, n: usize, thresholds: Thresholds) -> ExtractConfig {
        let mut c = ExtractConfig::for_dimension(n);
        c.thresholds = thresholds;
        if let Some(v) = self.generation_cap {
            c.generation_cap = v;
        }
        c.concentration_radius = self.concentration_radius.or(c.concentration_radius);
        if let Some(v) = self.min_scale_factor {
            c.min_scale_factor = v;
        }
        if let Some(v) = self.bisection_tol {
            c.bisection_tol = v;
        }
        if let Some(v) = self.lambda_window {
            c.lambda_window = v;
        }
        if let Some(v) = self.neck_k {
            c.neck_k = v;
        }
        if let Some(v) = self.neck_eta {
            c.neck_eta = v;
        }
        c.profile_radii = self.profile_radii;
        c
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Values of `|a|`.
    #[serde(default = "sweep_radii")]
    pub radii: Vec<f64>,
    /// Direction of `a`; defaults to `e_1`.
    pub direction: Option<Vec<f64>>,
}

fn sweep_radii() -> Vec<f64> {
    vec![0.0, 0.3, 0.6, 0.9]
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { radii: sweep_radii(), direction: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapConfig {
    #[serde(default = "trials")]
    pub trials: usize,
    /// Initial energies stay below `fraction·(ε_b/2)ⁿ`.
    #[serde(default = "one")]
    pub fraction: f64,
    #[serde(default = "osc_tol")]
    pub oscillation_tol: f64,
}

fn trials() -> usize {
    20
}

fn osc_tol() -> f64 {
    1e-3
}

impl Default for GapConfig {
    fn default() -> Self {
        GapConfig { trials: trials(), fraction: 1.0, oscillation_tol: osc_tol() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckConfig {
    /// Annulus center on the flat face; defaults to the origin.
    pub center: Option<Vec<f64>>,
    pub r1: f64,
    pub r2: f64,
    /// Constant data on the two boundary spheres when no input map is given.
    pub a: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
    /// Smallness constant for the input-map comparison.
    pub eps_star: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub map: Option<PathBuf>,
    pub maps: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config, resolving relative file references against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Config::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.input.map.as_mut() {
            fix(m);
        }
        for m in cfg.input.maps.iter_mut().flatten() {
            fix(m);
        }
        if let Some(s) = cfg.sequence.as_mut() {
            for m in s.maps.iter_mut().flatten() {
                fix(m);
            }
        }
        if let Some(d) = cfg.output.dir.as_mut() {
            fix(d);
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.n < 2 {
            bail!("grid.n must be at least 2");
        }
        if !(g.h > 0.0 && g.r > 0.0) {
            bail!("grid.h and grid.r must be positive");
        }
        self.thresholds.validate()?;
        if let Some(s) = &self.sequence {
            s.validate()?;
        }
        if self.gap.trials == 0 || !(self.gap.fraction > 0.0 && self.gap.fraction <= 1.0) {
            bail!("gap.trials must be positive and gap.fraction in (0, 1]");
        }
        if !(self.extract.identity_tol > 0.0) {
            bail!("extract.identity_tol must be positive");
        }
        Ok(())
    }
}
