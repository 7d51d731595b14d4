//! Grid-sampled maps, gradients, p-energies and free-boundary residuals.

pub mod io;
pub mod stencil;

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{GeometryError, HalfBallGrid, MetricField, NodeKind, Region};
pub use stencil::{Domain, EnergyOps};

/// Tolerance on `| |u| − 1 |` at flat-face nodes.
pub const BOUNDARY_TOL: f64 = 1e-6;
/// Slack allowed above 1 in the maximum principle.
pub const MAXNORM_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("target dimension must be at least 1, got {0}")]
    TargetDimension(usize),
    #[error("value array has length {got}, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("non-finite value at node {0}")]
    NonFinite(usize),
    #[error("exponent p={0} must be at least 2")]
    Exponent(f64),
    #[error("degenerate projection: u = 0 at flat node {0}")]
    DegenerateProjection(usize),
    #[error("maps live on different grids")]
    GridMismatch,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("map file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A map from the grid's nodes into `ℝᵈ`.
#[derive(Debug, Clone)]
pub struct DiscreteMap {
    grid: Arc<HalfBallGrid>,
    d: usize,
    values: Vec<f64>,
}

impl DiscreteMap {
    pub fn new(grid: Arc<HalfBallGrid>, d: usize, values: Vec<f64>) -> Result<Self, MapError> {
        if d == 0 {
            return Err(MapError::TargetDimension(d));
        }
        if values.len() != grid.len() * d {
            return Err(MapError::Length {
                expected: grid.len() * d,
                got: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(MapError::NonFinite(k / d));
        }
        Ok(DiscreteMap { grid, d, values })
    }

    /// Sample `f` at every node.
    pub fn from_fn<F>(grid: Arc<HalfBallGrid>, d: usize, f: F) -> Result<Self, MapError>
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync,
    {
        let values: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .with_min_len(1024)
            .flat_map_iter(|i| {
                let v = f(&grid.point(i));
                assert_eq!(v.len(), d, "sampled value has wrong dimension");
                v
            })
            .collect();
        Self::new(grid, d, values)
    }

    /// Fallible sampling; the first error in node order is returned.
    pub fn try_from_fn<F, E>(grid: Arc<HalfBallGrid>, d: usize, f: F) -> Result<Result<Self, MapError>, E>
    where
        F: Fn(&[f64]) -> Result<Vec<f64>, E> + Sync,
        E: Send,
    {
        let rows: Result<Vec<Vec<f64>>, E> = (0..grid.len())
            .into_par_iter()
            .with_min_len(1024)
            .map(|i| f(&grid.point(i)))
            .collect();
        let values: Vec<f64> = rows?.into_iter().flatten().collect();
        Ok(Self::new(grid, d, values))
    }

    pub fn constant(grid: Arc<HalfBallGrid>, c: &[f64]) -> Self {
        let values = c.iter().copied().cycle().take(grid.len() * c.len()).collect();
        DiscreteMap {
            grid,
            d: c.len(),
            values,
        }
    }

    pub fn grid(&self) -> &Arc<HalfBallGrid> {
        &self.grid
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn value(&self, node: usize) -> &[f64] {
        &self.values[node * self.d..(node + 1) * self.d]
    }

    /// Multilinear interpolation; corners outside the grid are dropped and
    /// the remaining weights renormalized. `None` if no corner is active.
    pub fn sample(&self, x: &[f64]) -> Option<Vec<f64>> {
        let g = &self.grid;
        let n = g.n();
        let h = g.h();
        let mut base = vec![0i64; n];
        let mut frac = vec![0.0; n];
        for a in 0..n {
            let t = x[a] / h;
            let f = t.floor();
            base[a] = f as i64;
            frac[a] = t - f;
        }
        let mut out = vec![0.0; self.d];
        let mut wsum = 0.0;
        let mut idx = vec![0i64; n];
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            for a in 0..n {
                let bit = (corner >> a) & 1;
                idx[a] = base[a] + bit as i64;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            if let Some(node) = g.node_at(&idx) {
                wsum += w;
                for (o, v) in out.iter_mut().zip(self.value(node)) {
                    *o += w * v;
                }
            }
        }
        if wsum <= 0.0 {
            return None;
        }
        out.iter_mut().for_each(|v| *v /= wsum);
        Some(out)
    }

    /// `| |u| − 1 | ≤ tol` at every flat-face node.
    pub fn is_admissible(&self, tol: f64) -> bool {
        (0..self.grid.len())
            .filter(|&i| self.grid.kind(i) == NodeKind::FlatBoundary)
            .all(|i| (crate::geometry::norm(self.value(i)) - 1.0).abs() <= tol)
    }

    /// Nodes carrying the sphere constraint: every node on the flat face.
    pub fn face_nodes(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&i| self.grid.on_flat_face(i)).collect()
    }
}

/// Per-node Jacobians, row-major `n×d` per node (rows indexed by axis).
pub fn gradient(map: &DiscreteMap) -> Vec<f64> {
    let domain = Domain::full(map.grid.clone());
    let (n, d) = (map.grid.n(), map.d);
    let mut out = vec![0.0; map.grid.len() * n * d];
    out.par_chunks_mut(n * d)
        .enumerate()
        .for_each(|(k, chunk)| domain.jacobian(&map.values, d, k, chunk));
    out
}

/// Energy with its per-node density.
#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub p: f64,
    pub total: f64,
    pub density: Vec<f64>,
    /// Quadrature weight per node, so that `total = Σ density·weight`.
    pub weights: Vec<f64>,
}

fn check_inputs(map: &DiscreteMap, metric: &MetricField, p: f64) -> Result<(), MapError> {
    if !(p >= 2.0 && p.is_finite()) {
        return Err(MapError::Exponent(p));
    }
    metric.check(&map.grid)?;
    Ok(())
}

/// `E_p(u) = Σ (g^{ij}⟨∂ᵢu,∂ⱼu⟩)^{p/2} hⁿ √det g`.
pub fn p_energy(map: &DiscreteMap, metric: &MetricField, p: f64) -> Result<EnergyReport, MapError> {
    check_inputs(map, metric, p)?;
    let domain = Domain::full(map.grid.clone());
    let ops = EnergyOps::new(&domain, metric, map.d, p, 0.0);
    let density = ops.densities(&map.values);
    let total = stencil::ordered_dot(&density, &ops.weights);
    Ok(EnergyReport {
        p,
        total,
        density,
        weights: ops.weights,
    })
}

/// Energy restricted to a region with cut-cell weights; gradients use the full grid.
pub fn region_energy(map: &DiscreteMap, metric: &MetricField, p: f64, region: &Region) -> Result<f64, MapError> {
    let report = p_energy(map, metric, p)?;
    Ok(region_sum(&map.grid, &report, region))
}

pub(crate) fn region_sum(grid: &HalfBallGrid, report: &EnergyReport, region: &Region) -> f64 {
    crate::geometry::region_fractions(grid, region)
        .iter()
        .map(|&(i, f)| f * report.density[i] * report.weights[i])
        .sum()
}

/// p-energy on `B(center, radius)`.
pub fn local_energy(
    map: &DiscreteMap,
    metric: &MetricField,
    p: f64,
    center: &[f64],
    radius: f64,
) -> Result<f64, MapError> {
    region_energy(
        map,
        metric,
        p,
        &Region::Ball {
            center: center.to_vec(),
            radius,
        },
    )
}

/// Which nodes are held fixed and which carry the sphere constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMode {
    /// Spherical-boundary nodes are Dirichlet; flat nodes are constrained.
    Dirichlet,
    /// Nothing is fixed; every node on the flat face is constrained.
    Free,
}

/// Node roles for a constrained problem on a half grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Role {
    Free,
    Sphere,
    Fixed,
}

pub(crate) fn roles(grid: &HalfBallGrid, mode: BoundaryMode) -> Vec<Role> {
    (0..grid.len())
        .map(|i| match (mode, grid.kind(i)) {
            (BoundaryMode::Dirichlet, NodeKind::SphericalBoundary) => Role::Fixed,
            (BoundaryMode::Dirichlet, NodeKind::FlatBoundary) => Role::Sphere,
            (BoundaryMode::Free, _) if grid.on_flat_face(i) => Role::Sphere,
            _ => Role::Free,
        })
        .collect()
}

/// Projected energy gradient.
#[derive(Debug, Clone)]
pub struct Residual {
    /// Per-node `L²` gradient (raw gradient divided by the node weight), projected.
    pub vector: Vec<f64>,
    /// `(Σ w |r|²)^{1/2}`.
    pub norm: f64,
}

/// Free-boundary residual with spherical-boundary nodes held fixed.
pub fn weak_residual(map: &DiscreteMap, metric: &MetricField, p: f64) -> Result<Residual, MapError> {
    weak_residual_with(map, metric, p, BoundaryMode::Dirichlet)
}

pub fn weak_residual_with(
    map: &DiscreteMap,
    metric: &MetricField,
    p: f64,
    mode: BoundaryMode,
) -> Result<Residual, MapError> {
    check_inputs(map, metric, p)?;
    let domain = Domain::full(map.grid.clone());
    let ops = EnergyOps::new(&domain, metric, map.d, p, 0.0);
    let mut grad = vec![0.0; map.values.len()];
    ops.energy_and_gradient(&map.values, &mut grad);
    let role = roles(&map.grid, mode);
    project_gradient(&map.values, &mut grad, &ops.weights, &role, map.d)
}

/// Scale by inverse weights, project at constrained nodes, zero fixed nodes.
pub(crate) fn project_gradient(
    values: &[f64],
    grad: &mut [f64],
    weights: &[f64],
    role: &[Role],
    d: usize,
) -> Result<Residual, MapError> {
    let mut norm2 = 0.0;
    for (i, r) in role.iter().enumerate() {
        let g = &mut grad[i * d..(i + 1) * d];
        match r {
            Role::Fixed => g.iter_mut().for_each(|v| *v = 0.0),
            Role::Free | Role::Sphere => {
                let w = weights[i];
                g.iter_mut().for_each(|v| *v /= w);
                if *r == Role::Sphere {
                    let u = &values[i * d..(i + 1) * d];
                    let nu = crate::geometry::norm(u);
                    if nu == 0.0 {
                        return Err(MapError::DegenerateProjection(i));
                    }
                    let dot: f64 = u.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>() / (nu * nu);
                    for (gv, uv) in g.iter_mut().zip(u) {
                        *gv -= dot * uv;
                    }
                }
                norm2 += w * g.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    Ok(Residual {
        vector: grad.to_vec(),
        norm: norm2.sqrt(),
    })
}

/// `max |u| ≤ 1 + MAXNORM_TOL`; returns the worst node and its norm.
pub fn max_principle_check(map: &DiscreteMap) -> (bool, usize, f64) {
    let mut worst = (0usize, f64::NEG_INFINITY);
    for i in 0..map.grid.len() {
        let v = crate::geometry::norm(map.value(i));
        if v > worst.1 {
            worst = (i, v);
        }
    }
    (worst.1 <= 1.0 + MAXNORM_TOL, worst.0, worst.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::norm;

    fn grid(n: usize, h: f64, half: bool) -> Arc<HalfBallGrid> {
        Arc::new(HalfBallGrid::new(n, 1.0, h, half).unwrap())
    }

    #[test]
    fn constant_gradient_is_zero() {
        let g = grid(2, 0.125, true);
        let u = DiscreteMap::constant(g, &[0.3, 0.4]);
        assert!(gradient(&u).iter().all(|&v| v == 0.0));
        let e = p_energy(&u, &MetricField::euclidean(2), 2.0).unwrap();
        assert_eq!(e.total, 0.0);
    }

    #[test]
    fn affine_gradient_is_exact() {
        let g = grid(3, 0.125, true);
        let a = [[1.0, -2.0, 0.5], [0.25, 3.0, -1.0]];
        let u = DiscreteMap::from_fn(g.clone(), 2, |x| {
            (0..2).map(|c| (0..3).map(|j| a[c][j] * x[j]).sum()).collect()
        })
        .unwrap();
        let du = gradient(&u);
        for i in 0..g.len() {
            // One-sided differences are exact on affine data too.
            for ax in 0..3 {
                for c in 0..2 {
                    let has = g.neighbor(i, ax, -1).is_some() || g.neighbor(i, ax, 1).is_some();
                    if has {
                        assert!((du[i * 6 + ax * 2 + c] - a[c][ax]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn quadratic_derivative_second_order() {
        let mut errs = Vec::new();
        for &h in &[1.0 / 16.0, 1.0 / 32.0] {
            let g = grid(2, h, true);
            let u = DiscreteMap::from_fn(g.clone(), 2, |x| vec![x[0] * x[0], 0.0]).unwrap();
            let du = gradient(&u);
            let mut e: f64 = 0.0;
            for i in 0..g.len() {
                if g.kind(i) == NodeKind::Interior {
                    e = e.max((du[i * 4] - 2.0 * g.point(i)[0]).abs());
                }
            }
            errs.push(e);
        }
        // Centered differences are exact on quadratics; check the h² bound anyway.
        assert!(errs[0] <= 1e-12 + (1.0 / 16.0f64).powi(2));
        assert!(errs[1] <= errs[0] + 1e-12);
    }

    #[test]
    fn identity_energy_is_pi() {
        let g = grid(2, 1.0 / 64.0, true);
        let u = DiscreteMap::from_fn(g, 2, |x| x.to_vec()).unwrap();
        let e = p_energy(&u, &MetricField::euclidean(2), 2.0).unwrap();
        let pi = std::f64::consts::PI;
        assert!((e.total - pi).abs() / pi < 0.03, "{}", e.total);
        let resum: f64 = e.density.iter().zip(&e.weights).map(|(a, b)| a * b).sum();
        assert!((resum - e.total).abs() < 1e-12 * e.total);
    }

    #[test]
    fn local_energy_limits() {
        let g = grid(2, 1.0 / 16.0, true);
        let u = DiscreteMap::from_fn(g, 2, |x| vec![x[0].sin(), x[1] * x[0]]).unwrap();
        let m = MetricField::euclidean(2);
        let tot = p_energy(&u, &m, 2.0).unwrap().total;
        assert_eq!(local_energy(&u, &m, 2.0, &[0.0, 0.0], 0.0).unwrap(), 0.0);
        let big = local_energy(&u, &m, 2.0, &[0.0, 0.0], 2.0).unwrap();
        assert!((big - tot).abs() < 1e-12 * tot);
    }

    #[test]
    fn residual_of_unit_constant_vanishes() {
        let g = grid(2, 0.125, true);
        let u = DiscreteMap::constant(g, &[0.6, 0.8]);
        let r = weak_residual(&u, &MetricField::euclidean(2), 2.0).unwrap();
        assert_eq!(r.norm, 0.0);
    }

    #[test]
    fn identity_residual() {
        let g = grid(2, 1.0 / 16.0, true);
        let id = DiscreteMap::from_fn(g.clone(), 2, |x| x.to_vec()).unwrap();
        // u(0) = 0 sits on a flat node.
        assert!(matches!(
            weak_residual(&id, &MetricField::euclidean(2), 2.0),
            Err(MapError::DegenerateProjection(_))
        ));
        let shifted = DiscreteMap::from_fn(g, 2, |x| vec![x[0] + 0.01, x[1]]).unwrap();
        let r = weak_residual(&shifted, &MetricField::euclidean(2), 2.0).unwrap();
        assert!(r.norm > 0.1, "{}", r.norm);
    }

    #[test]
    fn max_principle_flags_node() {
        let g = grid(2, 0.125, true);
        let mut u = DiscreteMap::constant(g, &[0.3, 0.4]);
        assert!(max_principle_check(&u).0);
        u.values_mut()[10] = 2.0;
        u.values_mut()[11] = 0.0;
        let (ok, node, v) = max_principle_check(&u);
        assert!(!ok);
        assert_eq!(node, 5);
        assert_eq!(v, 2.0);
    }

    #[test]
    fn sample_reproduces_nodes_and_affine() {
        let g = grid(2, 0.125, true);
        let u = DiscreteMap::from_fn(g.clone(), 2, |x| vec![2.0 * x[0] + 1.0, x[1] - x[0]]).unwrap();
        let v = u.sample(&[0.31, 0.17]).unwrap();
        assert!((v[0] - 1.62).abs() < 1e-12 && (v[1] + 0.14).abs() < 1e-12);
        let p = g.point(7);
        assert_eq!(u.sample(&p).unwrap(), u.value(7));
        assert!(norm(&u.sample(&[5.0, 5.0]).unwrap_or_default()) == 0.0);
    }
}
