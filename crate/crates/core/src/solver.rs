//! Energy minimization: free-boundary p-harmonic maps into the unit sphere
//! constraint on the flat face, and symmetric p-harmonic extensions on annuli.

use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{annulus_mask, norm, AnnulusSpec, GeometryError, HalfBallGrid, MetricField, NONE};
use crate::maps::{
    p_energy, project_gradient, roles, BoundaryMode, DiscreteMap, Domain, EnergyOps, MapError, Role,
    BOUNDARY_TOL,
};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("initial map is not admissible (| |u| - 1 | > {BOUNDARY_TOL:e} on the flat face)")]
    NotAdmissible,
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("no convergence after {iters} iterations (last residual {last:e})")]
    NoConvergence { iters: usize, last: f64, history: Vec<f64> },
    #[error("line search stalled at iteration {iter} (residual {residual:e})")]
    Stalled { iter: usize, residual: f64, history: Vec<f64> },
    #[error("annulus center must lie on the flat face x_n = 0")]
    AnnulusCenter,
    #[error("annulus is not contained in the grid")]
    AnnulusOutside,
    #[error("local n-energy {energy:e} on the annulus exceeds the smallness threshold {threshold:e}")]
    NotSmall { energy: f64, threshold: f64 },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Reflection(#[from] crate::reflection::ReflectionError),
}

/// Solver parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub p: f64,
    pub residual_tol: f64,
    pub max_iters: usize,
    /// Regularization levels used before the final level `delta_min`.
    pub delta_schedule: Vec<f64>,
    pub delta_min: f64,
    pub armijo: f64,
    pub initial_step: f64,
    pub backtrack: f64,
}

impl SolveConfig {
    pub fn new(p: f64) -> Self {
        SolveConfig {
            p,
            residual_tol: 1e-6,
            max_iters: 20_000,
            delta_schedule: vec![1e-1, 1e-2, 1e-3, 1e-4],
            delta_min: 1e-6,
            armijo: 1e-4,
            initial_step: 1.0,
            backtrack: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: &str| Err(SolveError::Config(m.to_string()));
        if !(self.p >= 2.0 && self.p.is_finite()) {
            return bad("p must be at least 2");
        }
        if !(self.residual_tol > 0.0) {
            return bad("residual_tol must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(self.delta_min >= 0.0) {
            return bad("delta_min must be nonnegative");
        }
        let mut prev = f64::INFINITY;
        for &d in &self.delta_schedule {
            if !(d < prev && d > self.delta_min) {
                return bad("delta schedule must decrease strictly to delta_min");
            }
            prev = d;
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0 && self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad("line search constants out of range");
        }
        if !(self.initial_step > 0.0) {
            return bad("initial step must be positive");
        }
        Ok(())
    }

    /// Regularization levels actually used; `p = 2` needs none.
    fn stages(&self) -> Vec<f64> {
        if self.p == 2.0 {
            vec![0.0]
        } else {
            let mut s = self.delta_schedule.clone();
            s.push(self.delta_min);
            s
        }
    }
}

/// One accepted iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub delta: f64,
    pub energy: f64,
    pub residual: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceLog {
    pub rows: Vec<LogRow>,
    /// Unregularized residual of the returned map.
    pub final_residual: f64,
}

impl ConvergenceLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,delta,energy,residual,step\n");
        for r in &self.rows {
            writeln!(s, "{},{:e},{:e},{:e},{:e}", r.iter, r.delta, r.energy, r.residual, r.step).unwrap();
        }
        s
    }

    /// Energies never increase between accepted steps at a fixed regularization,
    /// up to summation round-off.
    pub fn is_monotone(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[0].delta != w[1].delta || w[1].energy <= w[0].energy + ROUNDOFF * w[0].energy.abs())
    }
}


/// A minimization problem over a domain with per-node roles.
struct Problem<'a> {
    domain: &'a Domain,
    metric: &'a MetricField,
    /// Role per grid node; nodes outside the domain are fixed.
    role: Vec<Role>,
    d: usize,
    /// Mirror node under `xₙ ↦ −xₙ`, enforcing exact symmetry.
    mirror: Option<Vec<u32>>,
}

impl Problem<'_> {
    fn full_weights(&self, ops: &EnergyOps) -> Vec<f64> {
        let mut w = vec![1.0; self.domain.grid().len()];
        for (k, &i) in self.domain.nodes().iter().enumerate() {
            w[i] = ops.weights[k];
        }
        w
    }

    fn renormalize(&self, values: &mut [f64]) -> Result<(), SolveError> {
        let d = self.d;
        for (i, r) in self.role.iter().enumerate() {
            if *r == Role::Sphere {
                let v = &mut values[i * d..(i + 1) * d];
                let nv = norm(v);
                if nv == 0.0 {
                    return Err(MapError::DegenerateProjection(i).into());
                }
                v.iter_mut().for_each(|x| *x /= nv);
            }
        }
        Ok(())
    }

    fn symmetrize(&self, v: &mut [f64]) {
        if let Some(m) = &self.mirror {
            let d = self.d;
            for (i, &j) in m.iter().enumerate() {
                let j = j as usize;
                if j != NONE as usize && j > i {
                    for c in 0..d {
                        let s = 0.5 * (v[i * d + c] + v[j * d + c]);
                        v[i * d + c] = s;
                        v[j * d + c] = s;
                    }
                }
            }
        }
    }

    /// Weighted inner product over non-fixed nodes.
    fn wdot(&self, a: &[f64], b: &[f64], w: &[f64]) -> f64 {
        let d = self.d;
        let mut s = 0.0;
        for (i, r) in self.role.iter().enumerate() {
            if *r != Role::Fixed {
                let dot: f64 = (0..d).map(|c| a[i * d + c] * b[i * d + c]).sum();
                s += w[i] * dot;
            }
        }
        s
    }

    /// Project onto the tangent space at sphere nodes and zero fixed nodes.
    fn project(&self, values: &[f64], v: &mut [f64]) {
        let d = self.d;
        for (i, r) in self.role.iter().enumerate() {
            let x = &mut v[i * d..(i + 1) * d];
            match r {
                Role::Fixed => x.iter_mut().for_each(|e| *e = 0.0),
                Role::Sphere => {
                    let u = &values[i * d..(i + 1) * d];
                    let uu: f64 = u.iter().map(|e| e * e).sum();
                    let dot: f64 = u.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() / uu;
                    for (xe, ue) in x.iter_mut().zip(u) {
                        *xe -= dot * ue;
                    }
                }
                Role::Free => {}
            }
        }
    }

    /// Projected `L²` gradient and its norm; `grad` holds the raw gradient on entry.
    fn residual(&self, values: &[f64], grad: &mut [f64], w: &[f64]) -> Result<f64, SolveError> {
        project_gradient(values, grad, w, &self.role, self.d)?;
        if self.mirror.is_some() {
            self.symmetrize(grad);
        }
        Ok(self.wdot(grad, grad, w).sqrt())
    }

    fn unregularized_residual(&self, values: &[f64], p: f64) -> Result<f64, SolveError> {
        let ops = EnergyOps::new(self.domain, self.metric, self.d, p, 0.0);
        let w = self.full_weights(&ops);
        let mut g = vec![0.0; values.len()];
        ops.energy_and_gradient(values, &mut g);
        self.residual(values, &mut g, &w)
    }
}

struct LineSearch {
    t: f64,
    energy: f64,
    values: Vec<f64>,
    /// Raw gradient at `values`, when the search computed it.
    grad: Option<Vec<f64>>,
}

/// Relative size of energy differences treated as summation round-off.
pub const ROUNDOFF: f64 = 1e-11;

/// Armijo backtracking along `dir`, with one quadratic-interpolation trial.
///
/// Once energy differences drop to round-off level the sufficient-decrease
/// test is made on the directional derivative instead (approximate Armijo),
/// starting from a secant step.
#[allow(clippy::too_many_arguments)]
fn line_search(
    prob: &Problem,
    ops: &EnergyOps,
    values: &[f64],
    dir: &[f64],
    energy: f64,
    slope: f64,
    t0: f64,
    cfg: &SolveConfig,
) -> Result<Option<LineSearch>, SolveError> {
    let trial = |t: f64| -> Result<LineSearch, SolveError> {
        let mut v: Vec<f64> = values.iter().zip(dir).map(|(a, b)| a + t * b).collect();
        prob.renormalize(&mut v)?;
        let e = ops.energy(&v);
        Ok(LineSearch { t, energy: e, values: v, grad: None })
    };
    let noise = ROUNDOFF * energy.abs();
    let armijo = |ls: &LineSearch| ls.energy.is_finite() && ls.energy <= energy + cfg.armijo * ls.t * slope;
    let flat = |ls: &LineSearch| (ls.energy - energy).abs() <= noise;
    let deriv = |ls: &mut LineSearch| -> f64 {
        let mut g = vec![0.0; ls.values.len()];
        ops.energy_and_gradient(&ls.values, &mut g);
        let d = prob.d;
        let dphi = prob
            .role
            .iter()
            .enumerate()
            .filter(|(_, r)| **r != Role::Fixed)
            .map(|(i, _)| (i * d..(i + 1) * d).map(|c| g[c] * dir[c]).sum::<f64>())
            .sum();
        ls.grad = Some(g);
        dphi
    };
    let approx = |ls: &LineSearch, dphi: f64| ls.energy <= energy + noise && dphi <= -0.8 * slope;
    let curvature = |ls: &LineSearch| (ls.energy - energy - slope * ls.t) / (ls.t * ls.t);

    let mut first = trial(t0)?;
    if flat(&first) {
        let d1 = deriv(&mut first);
        let secant = if slope - d1 > 0.0 { t0 * slope / (slope - d1) } else { t0 };
        if (secant - t0).abs() <= 1e-3 * t0 {
            let dphi = d1;
            if approx(&first, dphi) {
                return Ok(Some(first));
            }
        }
        let mut t = secant;
        let floor = t0 * 1e-18;
        while t > floor {
            let mut ls = trial(t)?;
            let dphi = deriv(&mut ls);
            if approx(&ls, dphi) {
                return Ok(Some(ls));
            }
            t *= cfg.backtrack;
        }
        return Ok(None);
    }
    let c = curvature(&first);
    let t_quad = if c > 0.0 { -slope / (2.0 * c) } else { f64::NAN };
    if armijo(&first) {
        if t_quad.is_finite() && t_quad > 0.1 * t0 && t_quad < 10.0 * t0 && (t_quad - t0).abs() > 0.05 * t0 {
            let second = trial(t_quad)?;
            if armijo(&second) && second.energy < first.energy {
                return Ok(Some(second));
            }
        }
        return Ok(Some(first));
    }
    let mut t = if t_quad.is_finite() {
        t_quad.clamp(0.1 * t0, cfg.backtrack * t0)
    } else {
        cfg.backtrack * t0
    };
    let floor = t0 * 1e-18;
    while t > floor {
        let mut ls = trial(t)?;
        if armijo(&ls) {
            return Ok(Some(ls));
        }
        if flat(&ls) {
            let dphi = deriv(&mut ls);
            if approx(&ls, dphi) {
                return Ok(Some(ls));
            }
        }
        t *= cfg.backtrack;
    }
    Ok(None)
}

/// Projected nonlinear conjugate gradients (Polak–Ribière+) with δ-continuation.
fn minimize(prob: &Problem, values: &mut Vec<f64>, cfg: &SolveConfig) -> Result<ConvergenceLog, SolveError> {
    cfg.validate()?;
    prob.renormalize(values)?;
    prob.symmetrize(values);
    let stages = cfg.stages();
    let mut log = ConvergenceLog::default();
    let mut history = Vec::new();
    let mut iter = 0usize;
    let mut step = cfg.initial_step;
    let mut first_step = true;
    for (si, &delta) in stages.iter().enumerate() {
        let last = si + 1 == stages.len();
        let ops = EnergyOps::new(prob.domain, prob.metric, prob.d, cfg.p, delta);
        let w = prob.full_weights(&ops);
        let tol = if last || delta == 0.0 {
            cfg.residual_tol
        } else {
            cfg.residual_tol * (delta / cfg.delta_min.max(1e-12)).sqrt().max(1.0)
        };
        let mut grad = vec![0.0; values.len()];
        let mut energy = ops.energy_and_gradient(values, &mut grad);
        let mut prev_g: Option<Vec<f64>> = None;
        let mut dir = vec![0.0; values.len()];
        let mut taken = 0.0;
        loop {
            let res = prob.residual(values, &mut grad, &w)?;
            history.push(res);
            log.rows.push(LogRow {
                iter,
                delta,
                energy,
                residual: res,
                step: taken,
            });
            if res <= tol {
                if !last {
                    break;
                }
                let r0 = if delta == 0.0 { res } else { prob.unregularized_residual(values, cfg.p)? };
                if r0 <= cfg.residual_tol {
                    log.final_residual = r0;
                    return Ok(log);
                }
            }
            if iter >= cfg.max_iters {
                return Err(SolveError::NoConvergence {
                    iters: iter,
                    last: res,
                    history,
                });
            }
            // Polak–Ribière+ direction.
            let beta = match &prev_g {
                Some(pg) => {
                    let num = prob.wdot(&grad, &grad, &w) - prob.wdot(&grad, pg, &w);
                    let den = prob.wdot(pg, pg, &w);
                    if den > 0.0 {
                        (num / den).max(0.0)
                    } else {
                        0.0
                    }
                }
                None => 0.0,
            };
            for (dv, gv) in dir.iter_mut().zip(&grad) {
                *dv = -gv + beta * *dv;
            }
            prob.project(values, &mut dir);
            prob.symmetrize(&mut dir);
            let mut slope = prob.wdot(&grad, &dir, &w);
            if !(slope < 0.0) {
                for (dv, gv) in dir.iter_mut().zip(&grad) {
                    *dv = -gv;
                }
                slope = -prob.wdot(&grad, &grad, &w);
            }
            let t0 = if first_step { cfg.initial_step } else { 2.0 * step };
            let mut found = line_search(prob, &ops, values, &dir, energy, slope, t0, cfg)?;
            if found.is_none() && beta > 0.0 {
                // Restart along steepest descent.
                for (dv, gv) in dir.iter_mut().zip(&grad) {
                    *dv = -gv;
                }
                slope = -prob.wdot(&grad, &grad, &w);
                found = line_search(prob, &ops, values, &dir, energy, slope, t0, cfg)?;
            }
            let Some(ls) = found else {
                if last && res <= 10.0 * tol {
                    let r0 = prob.unregularized_residual(values, cfg.p)?;
                    if r0 <= cfg.residual_tol {
                        log.final_residual = r0;
                        return Ok(log);
                    }
                }
                return Err(SolveError::Stalled {
                    iter,
                    residual: res,
                    history,
                });
            };
            first_step = false;
            step = ls.t;
            taken = ls.t;
            *values = ls.values;
            iter += 1;
            prev_g = Some(grad.clone());
            match ls.grad {
                Some(g) => {
                    grad = g;
                    energy = ls.energy;
                }
                None => energy = ops.energy_and_gradient(values, &mut grad),
            }
        }
    }
    unreachable!("the last stage returns or errors")
}

/// Minimize the p-energy with `|u| = 1` on the flat face and spherical-boundary values fixed.
pub fn minimize_free_boundary(
    init: &DiscreteMap,
    metric: &MetricField,
    cfg: &SolveConfig,
) -> Result<(DiscreteMap, ConvergenceLog), SolveError> {
    minimize_free_boundary_with(init, metric, cfg, BoundaryMode::Dirichlet)
}

pub fn minimize_free_boundary_with(
    init: &DiscreteMap,
    metric: &MetricField,
    cfg: &SolveConfig,
    mode: BoundaryMode,
) -> Result<(DiscreteMap, ConvergenceLog), SolveError> {
    metric.check(init.grid())?;
    if !init.is_admissible(BOUNDARY_TOL) {
        return Err(SolveError::NotAdmissible);
    }
    let domain = Domain::full(init.grid().clone());
    let prob = Problem {
        domain: &domain,
        metric,
        role: roles(init.grid(), mode),
        d: init.d(),
        mirror: None,
    };
    let mut values = init.values().to_vec();
    let log = minimize(&prob, &mut values, cfg)?;
    Ok((DiscreteMap::new(init.grid().clone(), init.d(), values)?, log))
}

/// Dirichlet problem on a full annulus centered on the flat face.
///
/// Values of `data` outside the annulus are the Dirichlet data; values inside
/// only seed the solve.
#[derive(Debug, Clone)]
pub struct AnnulusProblem {
    pub spec: AnnulusSpec,
    pub data: DiscreteMap,
    pub p: f64,
    pub metric: MetricField,
}

impl AnnulusProblem {
    pub fn new(spec: AnnulusSpec, data: DiscreteMap, p: f64, metric: MetricField) -> Result<Self, SolveError> {
        let g = data.grid();
        let n = g.n();
        if g.half() {
            return Err(SolveError::Config("annulus data must live on a full-ball grid".into()));
        }
        if spec.center.len() != n || spec.center[n - 1] != 0.0 {
            return Err(SolveError::AnnulusCenter);
        }
        if norm(&spec.center) + spec.r2 > g.r() + 1e-12 {
            return Err(SolveError::AnnulusOutside);
        }
        metric.check(g)?;
        Ok(AnnulusProblem { spec, data, p, metric })
    }

    /// Constant data `a` inside and `b` outside, on a grid of spacing `h`.
    pub fn constant(spec: AnnulusSpec, a: &[f64], b: &[f64], h: f64, p: f64) -> Result<Self, SolveError> {
        let n = spec.center.len();
        let r = norm(&spec.center) + spec.r2 + 2.0 * h;
        let grid = Arc::new(HalfBallGrid::new(n, r, h, false)?);
        let mid = (spec.r1 * spec.r2).sqrt();
        let c = spec.center.clone();
        let data = DiscreteMap::from_fn(grid, a.len(), |x| {
            if crate::geometry::dist(x, &c) < mid {
                a.to_vec()
            } else {
                b.to_vec()
            }
        })?;
        Self::new(spec, data, p, MetricField::euclidean(n))
    }

    /// Data from a half-ball map, reflected evenly; the metric is reflected too.
    pub fn from_half_map(
        u: &DiscreteMap,
        spec: AnnulusSpec,
        p: f64,
        metric: &MetricField,
    ) -> Result<Self, SolveError> {
        let half = u.grid();
        let full = Arc::new(crate::geometry::full_grid_like(half));
        let fold = crate::geometry::fold_map(&full, half).ok_or(SolveError::AnnulusOutside)?;
        let d = u.d();
        let mut values = Vec::with_capacity(full.len() * d);
        for &j in &fold {
            values.extend_from_slice(u.value(j));
        }
        let data = DiscreteMap::new(full.clone(), d, values)?;
        let metric = crate::reflection::reflect_metric(half, metric)?.metric;
        Self::new(spec, data, p, metric)
    }
}

#[derive(Debug, Clone)]
pub struct AnnulusSolution {
    /// Solution on the full grid (data values outside the annulus).
    pub map: DiscreteMap,
    /// Annulus nodes.
    pub nodes: Vec<usize>,
    /// p-energy over the annulus (cut-cell quadrature).
    pub energy: f64,
    pub log: ConvergenceLog,
}

/// Symmetric p-harmonic extension of the boundary data into the annulus.
///
/// Every annulus node is free unless the grid ends next to it. Dirichlet
/// data sits on the ghost layer of non-annulus nodes within `2h` of the
/// annulus, and the reported energy integrates over the annulus itself with
/// cut-cell weights.
pub fn annulus_extension(problem: &AnnulusProblem, cfg: &SolveConfig) -> Result<AnnulusSolution, SolveError> {
    let grid = problem.data.grid().clone();
    let spec = &problem.spec;
    let nodes = annulus_mask(&grid, spec)?;
    let h = grid.h();
    let n = grid.n();
    let mut member = vec![false; grid.len()];
    for &i in &nodes {
        member[i] = true;
    }
    let mut x = vec![0.0; n];
    let ghost: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            if member[i] {
                return false;
            }
            grid.point_into(i, &mut x);
            let r = crate::geometry::dist(&x, &spec.center);
            (r >= spec.r1 - 2.0 * h && r < spec.r1) || (r >= spec.r2 && r < spec.r2 + 2.0 * h)
        })
        .collect();
    let mut role = vec![Role::Fixed; grid.len()];
    for &i in &nodes {
        if grid.neighbors(i).iter().all(|&j| j != NONE) {
            role[i] = Role::Free;
        }
    }
    let d = problem.data.d();
    let mut all = nodes.clone();
    all.extend_from_slice(&ghost);
    let domain = Domain::subset(grid.clone(), all);
    let mut values = problem.data.values().to_vec();

    let region = crate::geometry::Region::Annulus(spec.clone());
    let fractions = crate::geometry::region_fractions(&grid, &region);
    let integrate = |ops: &EnergyOps, values: &[f64]| -> f64 {
        let dens = ops.densities(values);
        let mut at = vec![0.0; grid.len()];
        for (k, &i) in domain.nodes().iter().enumerate() {
            at[i] = dens[k] * ops.weights[k];
        }
        fractions.iter().map(|&(i, f)| f * at[i]).sum()
    };

    let fixed: Vec<usize> = domain.nodes().iter().copied().filter(|&i| role[i] == Role::Fixed).collect();
    let uniform = fixed
        .iter()
        .all(|&i| problem.data.value(i) == problem.data.value(fixed[0]));
    if !fixed.is_empty() && uniform {
        let c = problem.data.value(fixed[0]).to_vec();
        for &i in &nodes {
            values[i * d..(i + 1) * d].copy_from_slice(&c);
        }
        let map = DiscreteMap::new(grid, d, values)?;
        return Ok(AnnulusSolution {
            map,
            nodes,
            energy: 0.0,
            log: ConvergenceLog::default(),
        });
    }

    let prob = Problem {
        domain: &domain,
        metric: &problem.metric,
        role,
        d,
        mirror: Some(crate::geometry::mirror_nodes(&grid)),
    };
    let cfg = SolveConfig {
        p: problem.p,
        ..cfg.clone()
    };
    let log = minimize(&prob, &mut values, &cfg)?;
    let ops = EnergyOps::new(&domain, &problem.metric, d, problem.p, 0.0);
    let energy = integrate(&ops, &values);
    Ok(AnnulusSolution {
        map: DiscreteMap::new(grid, d, values)?,
        nodes,
        energy,
        log,
    })
}

/// Energies of a map and of its p-harmonic replacement on a half annulus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeckComparison {
    pub e_u: f64,
    pub e_v: f64,
    pub ratio: f64,
}

/// Compare `u` on the clipped annulus with the extension of its own trace.
pub fn neck_comparison(
    u: &DiscreteMap,
    spec: &AnnulusSpec,
    metric: &MetricField,
    eps_star: f64,
    cfg: &SolveConfig,
) -> Result<NeckComparison, SolveError> {
    let half = u.grid().clone();
    let n = half.n();
    let clipped = AnnulusSpec { clipped: true, ..spec.clone() };
    let nodes = annulus_mask(&half, &clipped)?;
    let staircase = |map: &DiscreteMap, p: f64| -> Result<f64, SolveError> {
        let e = p_energy(map, metric, p)?;
        Ok(nodes.iter().map(|&i| e.density[i] * e.weights[i]).sum())
    };
    let small = staircase(u, n as f64)?;
    let threshold = eps_star.powi(n as i32);
    if small > threshold {
        return Err(SolveError::NotSmall { energy: small, threshold });
    }
    let problem = AnnulusProblem::from_half_map(u, spec.clone(), cfg.p, metric)?;
    let sol = annulus_extension(&problem, cfg)?;
    let full = sol.map.grid().clone();
    let d = u.d();
    let mut idx = vec![0i64; n];
    let mut values = Vec::with_capacity(half.len() * d);
    for i in 0..half.len() {
        half.index_into(i, &mut idx);
        let j = full.node_at(&idx).expect("half grid is contained in the full grid");
        values.extend_from_slice(sol.map.value(j));
    }
    let v = DiscreteMap::new(half, d, values)?;
    let e_u = staircase(u, cfg.p)?;
    let e_v = staircase(&v, cfg.p)?;
    Ok(NeckComparison {
        e_u,
        e_v,
        ratio: if e_v > 0.0 { e_u / e_v } else { f64::INFINITY },
    })
}

/// Terms of the perturbation estimate `|E_p(u+v) − E_p(u)| ≤ rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoupling {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

/// `rhs = p (‖du‖_p + ‖dv‖_p + 1)^{p−1} ‖dv‖_p`.
pub fn decoupling_check(u: &DiscreteMap, v: &DiscreteMap, metric: &MetricField, p: f64) -> Result<Decoupling, SolveError> {
    if u.grid() != v.grid() || u.d() != v.d() {
        return Err(MapError::GridMismatch.into());
    }
    let sum: Vec<f64> = u.values().iter().zip(v.values()).map(|(a, b)| a + b).collect();
    let w = DiscreteMap::new(u.grid().clone(), u.d(), sum)?;
    let eu = p_energy(u, metric, p)?.total;
    let ev = p_energy(v, metric, p)?.total;
    let ew = p_energy(&w, metric, p)?.total;
    let (nu, nv) = (eu.powf(1.0 / p), ev.powf(1.0 / p));
    let lhs = (ew - eu).abs();
    let rhs = p * (nu + nv + 1.0).powf(p - 1.0) * nv;
    Ok(Decoupling { lhs, rhs, slack: rhs - lhs })
}

/// Random smooth map into the unit sphere with `E_n` below `max_energy`.
///
/// `u = (v₀ + s(Ax + Q(x)))/|·|` with `v₀` uniform on the sphere, `A` and the
/// quadratic part `Q` uniform in `[-1, 1]`; the amplitude `s` starts at 1 and
/// halves until the energy bound holds. Every node lies on the sphere, so the
/// map is admissible in both boundary modes.
pub fn random_small_map<R: rand::Rng + ?Sized>(
    grid: Arc<HalfBallGrid>,
    metric: &MetricField,
    max_energy: f64,
    rng: &mut R,
) -> Result<DiscreteMap, SolveError> {
    let n = grid.n();
    let v0: Vec<f64> = loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = norm(&v);
        if l > 0.1 && l <= 1.0 {
            break v.iter().map(|x| x / l).collect();
        }
    };
    let lin: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let quad: Vec<f64> = (0..n * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut s = 1.0;
    for _ in 0..60 {
        let u = DiscreteMap::from_fn(grid.clone(), n, |x| {
            let mut v = v0.clone();
            for (i, vi) in v.iter_mut().enumerate() {
                let mut t = 0.0;
                for j in 0..n {
                    t += lin[i * n + j] * x[j];
                    for k in 0..n {
                        t += quad[(i * n + j) * n + k] * x[j] * x[k];
                    }
                }
                *vi += s * t;
            }
            let l = norm(&v);
            v.iter().map(|c| c / l).collect()
        })?;
        if p_energy(&u, metric, n as f64)?.total < max_energy {
            return Ok(u);
        }
        s *= 0.5;
    }
    Err(SolveError::Config(format!("cannot reach energy below {max_energy:e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{max_principle_check, weak_residual, weak_residual_with};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half(h: f64) -> Arc<HalfBallGrid> {
        Arc::new(HalfBallGrid::new(2, 1.0, h, true).unwrap())
    }

    fn cfg(p: f64) -> SolveConfig {
        SolveConfig {
            residual_tol: 1e-7,
            ..SolveConfig::new(p)
        }
    }

    #[test]
    fn constant_is_stationary() {
        let u = DiscreteMap::constant(half(0.125), &[0.0, 1.0]);
        let (v, log) = minimize_free_boundary(&u, &MetricField::euclidean(2), &cfg(2.0)).unwrap();
        assert_eq!(v.values(), u.values());
        assert_eq!(log.rows.len(), 1);
        assert_eq!(log.rows[0].iter, 0);
    }

    #[test]
    fn config_validation() {
        let mut c = SolveConfig::new(2.0);
        c.delta_schedule = vec![1e-2, 1e-1];
        assert!(c.validate().is_err());
        assert!(SolveConfig::new(1.5).validate().is_err());
        assert!(SolveConfig { residual_tol: 0.0, ..SolveConfig::new(2.0) }.validate().is_err());
        assert!(SolveConfig::new(3.0).validate().is_ok());
    }

    fn arc_init(g: Arc<HalfBallGrid>) -> DiscreteMap {
        DiscreteMap::from_fn(g.clone(), 2, |x| {
            if x[1] == 0.0 {
                vec![x[0], (1.0 - x[0] * x[0]).max(0.0).sqrt()]
            } else {
                x.to_vec()
            }
        })
        .unwrap()
    }

    #[test]
    fn identity_arc_solve_verified_independently() {
        for p in [2.0, 3.0] {
            let u = arc_init(half(1.0 / 16.0));
            let c = SolveConfig { residual_tol: 1e-6, ..SolveConfig::new(p) };
            let (v, log) = minimize_free_boundary(&u, &MetricField::euclidean(2), &c).unwrap();
            let res = weak_residual(&v, &MetricField::euclidean(2), p).unwrap();
            assert!(res.norm <= 1e-6, "p={p}: {}", res.norm);
            assert!((res.norm - log.final_residual).abs() < 1e-9);
            assert!(max_principle_check(&v).0);
            assert!(log.is_monotone());
            // Spherical boundary data untouched.
            for i in 0..v.grid().len() {
                if u.grid().kind(i) == crate::geometry::NodeKind::SphericalBoundary {
                    assert_eq!(v.value(i), u.value(i));
                }
            }
            assert!(log.to_csv().starts_with("iter,delta,energy,residual,step\n"));
        }
    }

    #[test]
    fn small_energy_free_boundary_goes_constant() {
        let g = half(1.0 / 16.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let u = DiscreteMap::from_fn(g, 2, |x| {
            let t = 0.3 + 0.05 * (a * x[0] + b * x[1] * x[1]);
            vec![t.cos(), t.sin()]
        })
        .unwrap();
        let (v, _) =
            minimize_free_boundary_with(&u, &MetricField::euclidean(2), &cfg(2.0), BoundaryMode::Free).unwrap();
        let r = weak_residual_with(&v, &MetricField::euclidean(2), 2.0, BoundaryMode::Free).unwrap();
        assert!(r.norm <= 1e-7);
        let c = v.value(0).to_vec();
        let osc = (0..v.grid().len())
            .map(|i| v.value(i).iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        assert!(osc <= 1e-3, "oscillation {osc}");
    }

    #[test]
    fn inadmissible_init_rejected() {
        let u = DiscreteMap::constant(half(0.125), &[0.5, 0.0]);
        assert!(matches!(
            minimize_free_boundary(&u, &MetricField::euclidean(2), &cfg(2.0)),
            Err(SolveError::NotAdmissible)
        ));
    }

    #[test]
    fn iteration_cap_reports_history() {
        let u = arc_init(half(1.0 / 16.0));
        let c = SolveConfig { max_iters: 3, ..cfg(2.0) };
        match minimize_free_boundary(&u, &MetricField::euclidean(2), &c) {
            Err(SolveError::NoConvergence { iters, history, .. }) => {
                assert_eq!(iters, 3);
                assert_eq!(history.len(), 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn annulus_constant_data_returns_constant() {
        let spec = AnnulusSpec::new(vec![0.0, 0.0], 0.25, 0.5, false).unwrap();
        let prob = AnnulusProblem::constant(spec, &[0.3, 0.4], &[0.3, 0.4], 1.0 / 64.0, 2.0).unwrap();
        let sol = annulus_extension(&prob, &cfg(2.0)).unwrap();
        assert_eq!(sol.energy, 0.0);
        for &i in &sol.nodes {
            assert_eq!(sol.map.value(i), &[0.3, 0.4]);
        }
    }

    #[test]
    fn annulus_center_must_be_on_face() {
        let spec = AnnulusSpec::new(vec![0.0, 0.1], 0.1, 0.2, false).unwrap();
        assert!(matches!(
            AnnulusProblem::constant(spec, &[0.0], &[1.0], 1.0 / 32.0, 2.0),
            Err(SolveError::AnnulusCenter)
        ));
    }

    #[test]
    fn harmonic_log_oracle() {
        let (r1, r2) = (0.25, 0.5);
        let h = r1 / 32.0;
        let spec = AnnulusSpec::new(vec![0.0, 0.0], r1, r2, false).unwrap();
        let f = |x: &[f64]| (norm(x).max(0.5 * r1) / r1).ln() / (r2 / r1).ln();
        let grid = Arc::new(HalfBallGrid::new(2, r2 + 2.0 * h, h, false).unwrap());
        let seed = DiscreteMap::from_fn(grid, 1, |x| {
            if spec.contains(x) {
                vec![0.5]
            } else {
                vec![f(x)]
            }
        })
        .unwrap();
        let prob = AnnulusProblem::new(spec, seed, 2.0, MetricField::euclidean(2)).unwrap();
        let sol = annulus_extension(&prob, &cfg(2.0)).unwrap();
        let g = sol.map.grid();
        let err = sol
            .nodes
            .iter()
            .map(|&i| (sol.map.value(i)[0] - f(&g.point(i))).abs())
            .fold(0.0, f64::max);
        assert!(err <= 0.02, "sup error {err}");
        // Exact symmetry under x₂ ↦ −x₂.
        let mirror = crate::geometry::mirror_nodes(g);
        for &i in &sol.nodes {
            let j = mirror[i] as usize;
            assert!((sol.map.value(i)[0] - sol.map.value(j)[0]).abs() <= 1e-10);
        }
    }

    #[test]
    fn reflected_trace_solution_is_symmetric() {
        let g = half(1.0 / 32.0);
        let u = DiscreteMap::from_fn(g, 2, |x| vec![(x[0] + x[1] * x[1]).cos(), x[0] * x[1]]).unwrap();
        let spec = AnnulusSpec::new(vec![0.1, 0.0], 0.2, 0.6, false).unwrap();
        let prob = AnnulusProblem::from_half_map(&u, spec, 3.0, &MetricField::euclidean(2)).unwrap();
        let sol = annulus_extension(&prob, &SolveConfig { residual_tol: 1e-6, ..SolveConfig::new(3.0) }).unwrap();
        let mirror = crate::geometry::mirror_nodes(sol.map.grid());
        let worst = (0..sol.map.grid().len())
            .filter(|&i| mirror[i] != NONE)
            .map(|i| {
                let j = mirror[i] as usize;
                sol.map.value(i).iter().zip(sol.map.value(j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        assert!(worst <= 1e-10, "{worst}");
        assert!(sol.log.is_monotone());
    }

    #[test]
    fn neck_comparison_on_own_extension() {
        let g = half(1.0 / 32.0);
        let u = DiscreteMap::from_fn(g, 2, |x| vec![1.0, 0.01 * x[0]]).unwrap();
        let spec = AnnulusSpec::new(vec![0.0, 0.0], 0.2, 0.6, false).unwrap();
        let e = MetricField::euclidean(2);
        let c = neck_comparison(&u, &spec, &e, 0.5, &cfg(2.0)).unwrap();
        assert!((c.ratio - 1.0).abs() < 0.02, "{c:?}");
        let steep = DiscreteMap::from_fn(u.grid().clone(), 2, |x| vec![(8.0 * x[0]).cos(), (8.0 * x[0]).sin()]).unwrap();
        assert!(matches!(
            neck_comparison(&steep, &spec, &e, 0.5, &cfg(2.0)),
            Err(SolveError::NotSmall { .. })
        ));
    }

    #[test]
    fn decoupling_examples() {
        let g = half(1.0 / 16.0);
        let e = MetricField::euclidean(2);
        let u = DiscreteMap::from_fn(g.clone(), 2, |x| vec![2.0 * x[0] - x[1], 0.5 * x[1]]).unwrap();
        let zero = DiscreteMap::constant(g.clone(), &[0.0, 0.0]);
        let d = decoupling_check(&u, &zero, &e, 2.0).unwrap();
        assert_eq!((d.lhs, d.rhs), (0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vals = vec![0.0; g.len() * 2];
        vals.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        let raw = DiscreteMap::new(g.clone(), 2, vals).unwrap();
        let s = p_energy(&raw, &e, 3.0).unwrap().total.powf(1.0 / 3.0);
        let small: Vec<f64> = raw.values().iter().map(|x| x * 1e-3 / s).collect();
        let small = DiscreteMap::new(g, 2, small).unwrap();
        for p in [2.0, 3.0] {
            assert!(decoupling_check(&u, &small, &e, p).unwrap().slack >= 0.0);
            assert!(decoupling_check(&u, &u, &e, p).unwrap().slack >= 0.0);
        }
    }
}
