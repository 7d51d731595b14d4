//! Bubble-tree extraction for sequences `u_k` of `p_k`-energy maps.
//!
//! Concentration points are located at the final index, then bubbles are
//! peeled off one generation at a time, most concentrated first: detect
//! `(a_k, λ_k)` from the concentration function of the current remainder,
//! rescale the final-index remainder into a window, record it, subtract it at
//! every index, repeat.

pub mod concentration;
pub mod degree;
pub mod report;
pub mod synthetic;
pub mod window;


use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use concentration::{concentration_function, node_energies, ConcentrationField, ConcentrationProfile, Detection};
pub use degree::{degree, BoundaryComponent, DegreeResult};
pub use report::{profile_csvs, ExtractionReport, GenerationEntry};
pub use synthetic::{make_synthetic_sequence, make_synthetic_sequence_with, Background, Superposition, Prototype, SyntheticBubble, SyntheticSequence};
pub use window::{rescale, subtract_bubbles, Placement, Window};

use crate::analytic::ball_volume;
use crate::geometry::{AnnulusSpec, GeometryError, HalfBallGrid, MetricField, Region};
use crate::maps::{p_energy, region_energy, DiscreteMap, MapError};

#[derive(Debug, Error)]
pub enum BubbleError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{what} has length {got}, expected {expected}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("sequence is empty")]
    EmptySequence,
    #[error("sequence indices must be strictly increasing")]
    Indices,
    #[error("exponents must satisfy p_k = n + α_k with α_k ≥ 0 nonincreasing (index {0})")]
    Exponents(usize),
    #[error("E_p(u_k) = {energy} exceeds the bound M = {bound} at k={k}")]
    EnergyBound { k: i64, energy: f64, bound: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scale must be positive and finite, got {0}")]
    Scale(f64),
    #[error("scale {lambda} is below the resolution limit {limit}")]
    SubResolution { lambda: f64, limit: f64 },
    #[error("scale {lambda} at k={k} is below the resolution limit {limit}")]
    SubResolutionIndex { k: i64, lambda: f64, limit: f64 },
    #[error("center {0:?} lies below the flat face")]
    CenterOutside(Vec<f64>),
    #[error("window radius {radius} is under two rescaled grid steps ({spacing})")]
    WindowTooSmall { radius: f64, spacing: f64 },
    #[error("point {0:?} is outside the source grid")]
    OutsideSource(Vec<f64>),
    #[error("rotation is not orthogonal")]
    NotOrthogonal,
    #[error("u = 0 at flat node {node}; cannot renormalize")]
    Degenerate { node: usize },
    #[error("boundary component: {0}")]
    Component(&'static str),
    #[error("|u| = {norm} < 1/2 on the boundary at {point:?}")]
    SmallTrace { point: Vec<f64>, norm: f64 },
    #[error("degree is only implemented for n = 2 and n = 3, got n = {0}")]
    DegreeUnsupported(usize),
    #[error("raw degree {raw} is not within 0.1 of an integer")]
    UnresolvedDegree { raw: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// A sequence `u_k` with exponents `p_k` on a common metric.
#[derive(Debug, Clone)]
pub struct SequenceSpec {
    pub ks: Vec<i64>,
    pub ps: Vec<f64>,
    pub maps: Vec<DiscreteMap>,
    pub metric: MetricField,
}

impl SequenceSpec {
    pub fn new(ks: Vec<i64>, ps: Vec<f64>, maps: Vec<DiscreteMap>, metric: MetricField) -> Result<Self, BubbleError> {
        if ks.is_empty() {
            return Err(BubbleError::EmptySequence);
        }
        if ps.len() != ks.len() {
            return Err(BubbleError::Length { what: "exponents", expected: ks.len(), got: ps.len() });
        }
        if maps.len() != ks.len() {
            return Err(BubbleError::Length { what: "maps", expected: ks.len(), got: maps.len() });
        }
        if ks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(BubbleError::Indices);
        }
        let n = maps[0].grid().n();
        for m in &maps {
            if m.grid().n() != n {
                return Err(BubbleError::Dimension { expected: n, got: m.grid().n() });
            }
            metric.check(m.grid())?;
        }
        for (i, &p) in ps.iter().enumerate() {
            let alpha = p - n as f64;
            if !(alpha >= 0.0 && alpha.is_finite()) || (i > 0 && p > ps[i - 1]) {
                return Err(BubbleError::Exponents(i));
            }
        }
        Ok(SequenceSpec { ks, ps, maps, metric })
    }

    pub fn n(&self) -> usize {
        self.maps[0].grid().n()
    }

    pub fn len(&self) -> usize {
        self.ks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ks.is_empty()
    }

    pub fn energies(&self) -> Result<Vec<f64>, BubbleError> {
        Ok(self
            .maps
            .par_iter()
            .zip(&self.ps)
            .map(|(m, &p)| p_energy(m, &self.metric, p).map(|r| r.total))
            .collect::<Result<Vec<_>, _>>()?)
    }
}

/// Small-energy constants. Unset values fall back to the defaults of [`Thresholds::for_dimension`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Concentration-point threshold `ε₀`.
    pub eps0: f64,
    /// Energy-quantization constant `ε_b`.
    pub eps_b: f64,
    /// Small-energy constant of the ε-regularity lemma, `ε_*`.
    pub eps_reg: f64,
    /// Overrides the computed detection constant `ε_⋆`.
    #[serde(default)]
    pub eps_star: Option<f64>,
    /// Energy bound `M`; defaults to `max_k E_{p_k}(u_k)`.
    #[serde(default)]
    pub energy_bound: Option<f64>,
    pub sep_threshold: f64,
}

/// `E_n` of a single Möbius bubble, `n^{n/2}·|Bⁿ|`.
pub fn mobius_bubble_energy(n: usize) -> f64 {
    (n as f64).powf(n as f64 / 2.0) * ball_volume(n)
}

impl Thresholds {
    pub fn for_dimension(n: usize) -> Self {
        let eps_b = 0.5 * mobius_bubble_energy(n).powf(1.0 / n as f64);
        Thresholds { eps0: eps_b, eps_b, eps_reg: eps_b, eps_star: None, energy_bound: None, sep_threshold: 10.0 }
    }

    /// `ε_⋆ = min(ε₀ / vol^{1/n − 1/p}, ε_*, ε_b)`.
    pub fn eps_star(&self, n: usize, p: f64, vol: f64) -> f64 {
        self.eps_star.unwrap_or_else(|| {
            let e = 1.0 / n as f64 - 1.0 / p;
            (self.eps0 / vol.powf(e)).min(self.eps_reg).min(self.eps_b)
        })
    }

    fn validate(&self) -> Result<(), BubbleError> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(BubbleError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.eps0, "eps0")?;
        pos(self.eps_b, "eps_b")?;
        pos(self.eps_reg, "eps_reg")?;
        pos(self.sep_threshold, "sep_threshold")?;
        if let Some(v) = self.eps_star {
            pos(v, "eps_star")?;
        }
        if let Some(v) = self.energy_bound {
            pos(v, "energy_bound")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    pub thresholds: Thresholds,
    /// Generations per concentration point before giving up.
    pub generation_cap: usize,
    /// Radius `ρ_S` used to locate concentration points; defaults to `r/10`.
    pub concentration_radius: Option<f64>,
    /// Scales below `h·min_scale_factor` are refused.
    pub min_scale_factor: f64,
    /// Allowed `|Q(λ) − target|` in scale detection.
    pub bisection_tol: f64,
    /// Indices in the finite-window proxy for `liminf`.
    pub lambda_window: usize,
    pub neck_k: f64,
    pub neck_eta: f64,
    /// Radii per index in the reported concentration profiles (0 disables them).
    pub profile_radii: usize,
}

impl ExtractConfig {
    pub fn for_dimension(n: usize) -> Self {
        ExtractConfig {
            thresholds: Thresholds::for_dimension(n),
            generation_cap: 8,
            concentration_radius: None,
            min_scale_factor: 1.0,
            bisection_tol: 1e-9,
            lambda_window: 3,
            neck_k: 10.0,
            neck_eta: 0.25,
            profile_radii: 0,
        }
    }

    fn validate(&self) -> Result<(), BubbleError> {
        self.thresholds.validate()?;
        let bad = |m: &str| Err(BubbleError::Config(m.to_string()));
        if self.generation_cap == 0 {
            return bad("generation_cap must be at least 1");
        }
        if self.lambda_window == 0 {
            return bad("lambda_window must be at least 1");
        }
        if !(self.min_scale_factor > 0.0) {
            return bad("min_scale_factor must be positive");
        }
        if !(self.bisection_tol > 0.0) {
            return bad("bisection_tol must be positive");
        }
        if !(self.neck_k > 0.0 && self.neck_eta > 0.0) {
            return bad("neck_k and neck_eta must be positive");
        }
        if let Some(r) = self.concentration_radius {
            if !(r > 0.0) {
                return bad("concentration_radius must be positive");
            }
        }
        Ok(())
    }
}

/// `t_q = 1 − 1/(2(q + 2))`.
pub fn generation_fraction(q: usize) -> f64 {
    1.0 - 1.0 / (2.0 * (q as f64 + 2.0))
}

/// Detection level for generation `q ≥ 1`: `ε_⋆^p/2`, then `t_q·ε_⋆^p`.
pub fn detection_level(q: usize, eps_star: f64, p: f64) -> f64 {
    let base = eps_star.powf(p);
    if q <= 1 {
        0.5 * base
    } else {
        generation_fraction(q) * base
    }
}

/// `max{λᵢ/λⱼ, λⱼ/λᵢ, |aᵢ − aⱼ|/(λᵢ + λⱼ)}`.
pub fn separation_ratio(ai: &[f64], li: f64, aj: &[f64], lj: f64) -> f64 {
    let d: f64 = ai.iter().zip(aj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    (li / lj).max(lj / li).max(d / (li + lj))
}

/// Separation of two center/scale sequences over common indices.
///
/// Passes when the final ratio exceeds `threshold` and the ratios strictly
/// increase over the last three indices.
pub fn pair_separated(ratios: &[f64], threshold: f64) -> bool {
    let Some(&last) = ratios.last() else {
        return false;
    };
    let tail = &ratios[ratios.len().saturating_sub(3)..];
    last > threshold && tail.windows(2).all(|w| w[1] > w[0])
}

/// `min (λ_k)^{n − p_k}` over the last `window` indices, unclamped.
pub fn lambda_star(scales: &[f64], ps: &[f64], n: usize, window: usize) -> f64 {
    assert_eq!(scales.len(), ps.len(), "one exponent per scale");
    let start = scales.len().saturating_sub(window.max(1));
    scales[start..]
        .iter()
        .zip(&ps[start..])
        .map(|(&l, &p)| if p == n as f64 { 1.0 } else { l.powf(n as f64 - p) })
        .fold(f64::INFINITY, f64::min)
}

/// One extracted bubble.
#[derive(Debug, Clone)]
pub struct BubbleRecord {
    /// Index of the concentration point the bubble belongs to.
    pub point: usize,
    /// Generation at that point, from 1.
    pub generation: usize,
    /// Sequence indices at which the bubble was detected.
    pub ks: Vec<i64>,
    pub centers: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
    /// Detection target and achieved `Q(λ)` per index.
    pub targets: Vec<f64>,
    pub levels: Vec<f64>,
    /// Final-index center, moved onto the face when within ten scales of it.
    pub anchor: Vec<f64>,
    /// Rescaled final-index remainder the bubble is read from.
    pub window: Window,
    pub at_infinity: Vec<f64>,
    pub lambda_star: f64,
    pub energy: f64,
    pub degree: Option<DegreeResult>,
}

impl BubbleRecord {
    pub fn final_center(&self) -> &[f64] {
        self.centers.last().expect("nonempty")
    }

    pub fn final_scale(&self) -> f64 {
        *self.scales.last().expect("nonempty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyLedger {
    pub e_total: f64,
    pub e_weak: f64,
    /// `λ*ᵢ·E_n(ωᵢ)` per record.
    pub parts: Vec<f64>,
    pub defect: f64,
    /// `(k, defect_k)` at every index.
    pub per_k: Vec<(i64, f64)>,
    pub energy_bound: f64,
}

impl EnergyLedger {
    pub fn relative_defect(&self) -> f64 {
        self.defect / self.e_total
    }

    /// `E_weak + Σ parts ≤ (1 + tol)·E_total`.
    pub fn superadditive(&self, tol: f64) -> bool {
        self.e_weak + self.parts.iter().sum::<f64>() <= (1.0 + tol) * self.e_total
    }

    pub fn defect_csv(&self) -> String {
        let mut s = String::from("k,defect\n");
        for (k, d) in &self.per_k {
            s.push_str(&format!("{k},{d:e}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationReport {
    pub matrix: Vec<Vec<bool>>,
    /// Pairwise ratio at the last common index.
    pub ratios: Vec<Vec<f64>>,
}

impl SeparationReport {
    pub fn all_pass(&self) -> bool {
        self.matrix.iter().enumerate().all(|(i, row)| row.iter().enumerate().all(|(j, &b)| i == j || b))
    }
}

pub fn separation_check(records: &[BubbleRecord], threshold: f64) -> SeparationReport {
    let m = records.len();
    let mut matrix = vec![vec![true; m]; m];
    let mut ratios = vec![vec![f64::INFINITY; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let (a, b) = (&records[i], &records[j]);
            let mut rs = Vec::new();
            for (x, k) in a.ks.iter().enumerate() {
                if let Some(y) = b.ks.iter().position(|kk| kk == k) {
                    rs.push(separation_ratio(&a.centers[x], a.scales[x], &b.centers[y], b.scales[y]));
                }
            }
            let ok = pair_separated(&rs, threshold);
            let last = rs.last().copied().unwrap_or(f64::NAN);
            matrix[i][j] = ok;
            matrix[j][i] = ok;
            ratios[i][j] = last;
            ratios[j][i] = last;
        }
    }
    SeparationReport { matrix, ratios }
}

/// `p_K`-energy of `u_K` on `B(ā, η) ∖ B(ā, K·λ)` at the final index.
pub fn neck_energy(spec: &SequenceSpec, record: &BubbleRecord, k_window: f64, eta: f64) -> Result<f64, BubbleError> {
    let last = spec.len() - 1;
    let inner = k_window * record.final_scale();
    if inner >= eta {
        return Ok(0.0);
    }
    let map = &spec.maps[last];
    let ann = AnnulusSpec::new(record.anchor.clone(), inner, eta, map.grid().half())?;
    Ok(region_energy(map, &spec.metric, spec.ps[last], &Region::Annulus(ann))?)
}

/// Everything produced by [`extract_tree`].
#[derive(Debug, Clone)]
pub struct Extraction {
    pub records: Vec<BubbleRecord>,
    pub ledger: EnergyLedger,
    pub points: Vec<Vec<f64>>,
    /// Remainder `w_k` after all subtractions, per index.
    pub remainders: Vec<DiscreteMap>,
    pub neck_energies: Vec<f64>,
    pub separation: SeparationReport,
    pub profiles: Vec<ConcentrationProfile>,
    /// Generation cap reached with concentrated energy left.
    pub incomplete: bool,
    pub thresholds: Thresholds,
    pub eps_star: Vec<f64>,
}

impl Extraction {
    /// Degree of the final remainder, the discrete stand-in for the weak limit.
    pub fn remainder_degree(&self) -> Result<DegreeResult, BubbleError> {
        let w = self.remainders.last().expect("nonempty");
        degree(w, BoundaryComponent::default_for(w))
    }
}

fn volume(grid: &HalfBallGrid, metric: &MetricField) -> f64 {
    (0..grid.len()).map(|i| grid.weight(i) * metric.sqrt_det(i)).sum()
}

/// Greedy maxima of `∫_{B(x,ρ)}|du|ⁿ` that reach `level`, each excluding `2ρ` around it.
fn concentration_points(field: &ConcentrationField, rho: f64, level: f64) -> Vec<Vec<f64>> {
    const MAX_POINTS: usize = 64;
    let g = field.grid().clone();
    let mut f = field.clone();
    let mut points: Vec<Vec<f64>> = Vec::new();
    while points.len() < MAX_POINTS && !f.centers().is_empty() {
        let (v, c) = f.q(rho);
        if v < level {
            break;
        }
        let x = g.point(c);
        f.retain_centers(|i| crate::geometry::dist(&g.point(i), &x) > 2.0 * rho);
        points.push(x);
    }
    points
}

/// Center moved onto the face when it is within ten scales of it.
fn anchor(grid: &HalfBallGrid, a: &[f64], lambda: f64) -> Vec<f64> {
    let n = a.len();
    let mut out = a.to_vec();
    if grid.half() && a[n - 1] <= 10.0 * lambda {
        out[n - 1] = 0.0;
    }
    out
}

/// First local minimum past the core of the dyadic-annulus energy `∫_{ρ_j ≤ |x−ā| < ρ_{j+1}} e`,
/// `ρ_j = 2λ·2^{j/2}`, among radii with `2ρ_j ≤ limit`.
fn neck_radius(grid: &HalfBallGrid, energies: &[f64], center: &[f64], lambda: f64, limit: f64) -> f64 {
    let ratio = std::f64::consts::SQRT_2;
    let mut radii = vec![2.0 * lambda];
    while 2.0 * radii.last().unwrap() * ratio <= limit {
        radii.push(radii.last().unwrap() * ratio);
    }
    if radii.len() < 3 || 2.0 * radii[0] > limit {
        return 0.5 * limit;
    }
    let mut bins = vec![0.0; radii.len() - 1];
    let mut x = vec![0.0; grid.n()];
    for (i, &e) in energies.iter().enumerate() {
        if e == 0.0 {
            continue;
        }
        grid.point_into(i, &mut x);
        let d = crate::geometry::dist(&x, center);
        if d < radii[0] || d >= *radii.last().unwrap() {
            continue;
        }
        let j = ((d / radii[0]).ln() / ratio.ln()).floor() as usize;
        let j = j.min(bins.len() - 1);
        bins[j] += e;
    }
    // Skip the rising part inside the bubble core, then stop at the first minimum.
    let start = (0..bins.len() - 1).find(|&j| bins[j] > bins[j + 1]).unwrap_or(bins.len() - 1);
    for j in start..bins.len() - 1 {
        if bins[j] <= bins[j + 1] {
            return radii[j];
        }
    }
    radii[radii.len() - 1]
}

struct PointResult {
    records: Vec<BubbleRecord>,
    /// `u_k − w_k` per index.
    deltas: Vec<Vec<f64>>,
    incomplete: bool,
}

fn extract_at(
    spec: &SequenceSpec,
    cfg: &ExtractConfig,
    point_index: usize,
    point: &[f64],
    chart_radius: f64,
    rho_s: f64,
    eps_star: &[f64],
) -> Result<PointResult, BubbleError> {
    let n = spec.n();
    let last = spec.len() - 1;
    let chart_nodes = |g: &HalfBallGrid| -> Vec<usize> {
        (0..g.len()).filter(|&i| crate::geometry::dist(&g.point(i), point) <= chart_radius).collect()
    };
    let charts: Vec<Vec<usize>> = spec.maps.iter().map(|m| chart_nodes(m.grid())).collect();
    let restrict = |e: Vec<f64>, chart: &[usize]| -> Vec<f64> {
        let mut out = vec![0.0; e.len()];
        chart.iter().for_each(|&i| out[i] = e[i]);
        out
    };
    let mut w: Vec<DiscreteMap> = spec.maps.clone();
    let mut records: Vec<BubbleRecord> = Vec::new();
    let mut incomplete = false;

    for q in 1..=cfg.generation_cap + 1 {
        let gk = spec.maps[last].grid().clone();
        let en = restrict(node_energies(&w[last], &spec.metric, n as f64)?, &charts[last]);
        let stop_level = eps_star[last].powf(n as f64);
        let remaining = ConcentrationField::new(gk.clone(), &en, Some(charts[last].clone()));
        if !remaining.reaches(rho_s, stop_level) {
            break;
        }
        if q > cfg.generation_cap {
            log::warn!("generation cap reached at point {point_index} with concentrated energy left");
            incomplete = true;
            break;
        }
        let detections: Vec<(usize, f64, Detection, Vec<f64>)> = (0..spec.len())
            .into_par_iter()
            .map(|k| -> Result<_, BubbleError> {
                let e = restrict(node_energies(&w[k], &spec.metric, spec.ps[k])?, &charts[k]);
                let target = detection_level(q, eps_star[k], spec.ps[k]);
                let field = ConcentrationField::new(w[k].grid().clone(), &e, Some(charts[k].clone()));
                let det = field.detect(target, cfg.bisection_tol);
                Ok((k, target, det, e))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut ks = Vec::new();
        let mut centers = Vec::new();
        let mut scales = Vec::new();
        let mut targets = Vec::new();
        let mut levels = Vec::new();
        let mut ps = Vec::new();
        for (k, target, det, _) in &detections {
            if let Detection::Found { center, lambda, level } = det {
                if *lambda > 0.0 {
                    ks.push(*k);
                    centers.push(w[*k].grid().point(*center));
                    scales.push(*lambda);
                    targets.push(*target);
                    levels.push(*level);
                    ps.push(spec.ps[*k]);
                }
            }
        }
        if ks.last() != Some(&last) {
            log::warn!("no concentration at the final index for generation {q} at point {point_index}");
            incomplete = true;
            break;
        }
        let lam = *scales.last().unwrap();
        let a_k = centers.last().unwrap().clone();
        let anchored = anchor(&gk, &a_k, lam);
        let limit = (window::max_window_radius(&gk, &anchored, 1.0)).min(chart_radius);
        let energies_k = &detections[last].3;
        let rho = neck_radius(&gk, energies_k, &anchored, lam, limit);
        let win = rescale(
            &w[last],
            &spec.metric,
            &anchored,
            lam,
            Some(2.0 * rho / lam),
            cfg.min_scale_factor,
        )?;
        let at_infinity = win.value_at_infinity();
        let energy = p_energy(&win.map, &win.metric, n as f64)?.total;
        let deg = if win.map.d() == n {
            degree(&win.map, BoundaryComponent::default_for(&win.map)).ok()
        } else {
            None
        };
        let star = lambda_star(&scales, &ps, n, cfg.lambda_window);

        for (idx, &k) in ks.iter().enumerate() {
            let a = anchor(w[k].grid(), &centers[idx], scales[idx]);
            let placement = Placement { window: &win.map, at_infinity: &at_infinity, center: &a, scale: scales[idx] };
            w[k] = subtract_bubbles(&w[k], &[placement]);
        }
        records.push(BubbleRecord {
            point: point_index,
            generation: q,
            ks: ks.iter().map(|&k| spec.ks[k]).collect(),
            centers,
            scales,
            targets,
            levels,
            anchor: anchored,
            window: win,
            at_infinity,
            lambda_star: star,
            energy,
            degree: deg,
        });
    }

    let deltas = spec
        .maps
        .iter()
        .zip(&w)
        .map(|(u, wk)| u.values().iter().zip(wk.values()).map(|(a, b)| a - b).collect())
        .collect();
    Ok(PointResult { records, deltas, incomplete })
}

/// Runs the generation-by-generation extraction and assembles the ledger.
pub fn extract_tree(spec: &SequenceSpec, cfg: &ExtractConfig) -> Result<Extraction, BubbleError> {
    cfg.validate()?;
    let n = spec.n();
    let last = spec.len() - 1;
    let th = &cfg.thresholds;
    let totals = spec.energies()?;
    let measured = totals.iter().copied().fold(0.0, f64::max);
    let bound = th.energy_bound.unwrap_or(measured);
    for (i, &e) in totals.iter().enumerate() {
        if e > bound * (1.0 + 1e-9) {
            return Err(BubbleError::EnergyBound { k: spec.ks[i], energy: e, bound });
        }
    }
    let eps_star: Vec<f64> = spec
        .maps
        .iter()
        .zip(&spec.ps)
        .map(|(m, &p)| th.eps_star(n, p, volume(m.grid(), &spec.metric)))
        .collect();

    let gk = spec.maps[last].grid().clone();
    let rho_s = cfg.concentration_radius.unwrap_or(0.1 * gk.r());
    let en = node_energies(&spec.maps[last], &spec.metric, n as f64)?;
    let points = concentration_points(&ConcentrationField::new(gk.clone(), &en, None), rho_s, th.eps0.powf(n as f64));
    let chart_radius = |i: usize| -> f64 {
        points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, p)| 0.5 * crate::geometry::dist(p, &points[i]))
            .fold(4.0 * gk.r(), f64::min)
    };

    let results = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| extract_at(spec, cfg, i, x, chart_radius(i), rho_s, &eps_star))
        .collect::<Result<Vec<_>, _>>()?;

    let mut remainders: Vec<DiscreteMap> = spec.maps.clone();
    for r in &results {
        for (wk, delta) in remainders.iter_mut().zip(&r.deltas) {
            wk.values_mut().iter_mut().zip(delta).for_each(|(v, d)| *v -= d);
        }
    }
    let incomplete = results.iter().any(|r| r.incomplete);
    let records: Vec<BubbleRecord> = results.into_iter().flat_map(|r| r.records).collect();

    let parts: Vec<f64> = records.iter().map(|r| r.lambda_star * r.energy).collect();
    let sum_parts: f64 = parts.iter().sum();
    let weak: Vec<f64> = remainders
        .par_iter()
        .map(|w| p_energy(w, &spec.metric, n as f64).map(|r| r.total))
        .collect::<Result<Vec<_>, _>>()?;
    let per_k: Vec<(i64, f64)> =
        spec.ks.iter().zip(totals.iter().zip(&weak)).map(|(&k, (t, w))| (k, t - w - sum_parts)).collect();
    let ledger = EnergyLedger {
        e_total: totals[last],
        e_weak: weak[last],
        defect: per_k[last].1,
        parts,
        per_k,
        energy_bound: bound,
    };
    let neck_energies = records
        .iter()
        .map(|r| neck_energy(spec, r, cfg.neck_k, cfg.neck_eta))
        .collect::<Result<Vec<_>, _>>()?;
    let separation = separation_check(&records, th.sep_threshold);
    let profiles = if cfg.profile_radii > 0 {
        spec.maps
            .iter()
            .zip(&spec.ps)
            .map(|(m, &p)| {
                let g = m.grid();
                let (lo, hi) = (g.h(), 2.0 * g.r());
                let radii: Vec<f64> = (0..cfg.profile_radii)
                    .map(|i| lo * (hi / lo).powf(i as f64 / (cfg.profile_radii.max(2) - 1) as f64))
                    .collect();
                concentration_function(m, &spec.metric, p, &radii)
            })
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    Ok(Extraction {
        records,
        ledger,
        points,
        remainders,
        neck_energies,
        separation,
        profiles,
        incomplete,
        thresholds: th.clone(),
        eps_star,
    })
}

/// `λ*` bounds `[1, M/ε_bⁿ]` for a record.
pub fn lambda_star_bounds(ledger: &EnergyLedger, th: &Thresholds, n: usize) -> (f64, f64) {
    (1.0, ledger.energy_bound / th.eps_b.powf(n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HalfBallGrid;
    use std::sync::Arc;

    #[test]
    fn thresholds_increase() {
        let mut prev = detection_level(1, 1.0, 2.0);
        for q in 2..10 {
            let t = detection_level(q, 1.0, 2.0);
            assert!(t > prev && t < 1.0);
            prev = t;
        }
    }

    #[test]
    fn lambda_star_arithmetic() {
        let ks: Vec<f64> = (1..=10).map(f64::from).collect();
        let ps = vec![2.0; 10];
        let scales: Vec<f64> = ks.iter().map(|k| 2f64.powf(-k)).collect();
        assert_eq!(lambda_star(&scales, &ps, 2, 3), 1.0);
        let c = 0.7;
        let ps: Vec<f64> = ks.iter().map(|k| 2.0 + 1.0 / k).collect();
        let scales: Vec<f64> = ks.iter().map(|k| (-c * k).exp()).collect();
        assert!((lambda_star(&scales, &ps, 2, 3) - c.exp()).abs() < 1e-10);
        // (1/k)^{-1/k} = k^{1/k} decreases to 1 slowly.
        for (k, tol) in [(100.0f64, 5e-2), (1000.0, 1e-2)] {
            let ks = [k - 2.0, k - 1.0, k];
            let ps: Vec<f64> = ks.iter().map(|k| 2.0 + 1.0 / k).collect();
            let scales: Vec<f64> = ks.iter().map(|k| 1.0 / k).collect();
            let v = lambda_star(&scales, &ps, 2, 3);
            assert!((v - k.powf(1.0 / k)).abs() < 1e-12);
            assert!(v > 1.0 && v - 1.0 < tol);
        }
        assert!(lambda_star(&[2.0], &[3.0], 2, 3) < 1.0);
    }

    #[test]
    fn separation_examples() {
        let ks: Vec<i32> = (1..=6).collect();
        let same: Vec<f64> = ks.iter().map(|&k| separation_ratio(&[0.0, 0.0], 2f64.powi(-k), &[0.0, 0.0], 2f64.powi(-k))).collect();
        assert!(!pair_separated(&same, 10.0));
        let nested: Vec<f64> =
            ks.iter().map(|&k| separation_ratio(&[0.0, 0.0], 2f64.powi(-k), &[0.0, 0.0], 2f64.powi(-2 * k))).collect();
        assert!(pair_separated(&nested, 10.0));
        let apart: Vec<f64> =
            ks.iter().map(|&k| separation_ratio(&[0.0, 0.0], 2f64.powi(-k), &[0.5, 0.0], 2f64.powi(-k))).collect();
        for (r, &k) in apart.iter().zip(&ks) {
            assert!((r - (0.5 / (2.0 * 2f64.powi(-k))).max(1.0)).abs() < 1e-12);
        }
        assert!(pair_separated(&apart, 10.0));
    }

    #[test]
    fn sequence_invariants() {
        let g = Arc::new(HalfBallGrid::new(2, 1.0, 0.25, true).unwrap());
        let m = DiscreteMap::constant(g, &[0.0, 1.0]);
        let e = MetricField::euclidean(2);
        assert!(SequenceSpec::new(vec![1, 2], vec![2.5, 2.1], vec![m.clone(), m.clone()], e.clone()).is_ok());
        assert!(matches!(
            SequenceSpec::new(vec![1, 2], vec![2.1, 2.5], vec![m.clone(), m.clone()], e.clone()),
            Err(BubbleError::Exponents(1))
        ));
        assert!(matches!(
            SequenceSpec::new(vec![1, 2], vec![1.9, 1.9], vec![m.clone(), m.clone()], e.clone()),
            Err(BubbleError::Exponents(0))
        ));
        assert!(matches!(SequenceSpec::new(vec![2, 1], vec![2.0, 2.0], vec![m.clone(), m], e), Err(BubbleError::Indices)));
    }

    #[test]
    fn no_concentration_gives_no_records() {
        let g = Arc::new(HalfBallGrid::new(2, 1.0, 1.0 / 32.0, true).unwrap());
        let maps: Vec<DiscreteMap> = (1..=3)
            .map(|k| {
                DiscreteMap::from_fn(g.clone(), 2, |x| {
                    let t = 0.3 * x[0] / k as f64;
                    vec![t.sin(), t.cos()]
                })
                .unwrap()
            })
            .collect();
        let spec = SequenceSpec::new(vec![1, 2, 3], vec![2.2, 2.1, 2.0], maps, MetricField::euclidean(2)).unwrap();
        let out = extract_tree(&spec, &ExtractConfig::for_dimension(2)).unwrap();
        assert!(out.records.is_empty());
        assert!(!out.incomplete);
        assert!((out.ledger.defect).abs() < 1e-12);
        assert!(out.ledger.superadditive(0.0));
    }
}
