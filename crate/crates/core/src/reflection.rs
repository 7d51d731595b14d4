//! Extension of a free-boundary map across the flat face by inversion.
//!
//! Below the face, `v = ι∘u∘σ` and the metric is `h = dσᵀ g(σx) dσ`.

use std::sync::Arc;

use thiserror::Error;

use crate::analytic::{flat_reflection, inversion, AnalyticError};
use crate::geometry::{fold_map, norm, GeometryError, HalfBallGrid, MetricField, NodeKind};
use crate::maps::{DiscreteMap, Domain, EnergyOps, MapError};

#[derive(Debug, Error)]
pub enum ReflectionError {
    #[error("|u| = {value} <= 1/2 at node {node} ({point:?}); no admissible radius found")]
    SmallNorm { node: usize, point: Vec<f64>, value: f64 },
    #[error("reflection needs a half-ball map")]
    NotHalf,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
}

/// Reflected metric with its measured regularity.
#[derive(Debug, Clone)]
pub struct ReflectedMetric {
    pub metric: MetricField,
    /// Largest difference quotient `‖h(x)−h(y)‖_F/|x−y|` over node pairs within `2h`.
    pub lipschitz: f64,
    /// `sup ‖g‖_F + sup (Σₐ‖∂ₐg‖_F²)^{1/2}` estimated on the upper half.
    pub c1_norm: f64,
}

/// `dσᵀ G dσ` for row-major `G`: flips the sign of the mixed last row/column entries.
fn conjugate_by_sigma(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = g.to_vec();
    for a in 0..n - 1 {
        out[a * n + n - 1] = -out[a * n + n - 1];
        out[(n - 1) * n + a] = -out[(n - 1) * n + a];
    }
    out
}

fn frob(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Reflect a metric given on a half grid onto the full grid `target`.
fn reflect_onto(target: &HalfBallGrid, half: &HalfBallGrid, g: &MetricField) -> Result<MetricField, ReflectionError> {
    g.check(half)?;
    if g.is_euclidean() {
        return Ok(g.clone());
    }
    let n = half.n();
    let fold = fold_map(target, half).ok_or(ReflectionError::NotHalf)?;
    let mut data = Vec::with_capacity(target.len() * n * n);
    let mut idx = vec![0i64; n];
    for (i, &j) in fold.iter().enumerate() {
        target.index_into(i, &mut idx);
        let gj = g.g(j);
        if idx[n - 1] < 0 {
            data.extend(conjugate_by_sigma(&gj, n));
        } else {
            data.extend(gj);
        }
    }
    Ok(MetricField::from_matrices(target, data)?)
}

/// Pull back `g` by the flat reflection onto the full ball.
pub fn reflect_metric(half: &HalfBallGrid, g: &MetricField) -> Result<ReflectedMetric, ReflectionError> {
    if !half.half() {
        return Err(ReflectionError::NotHalf);
    }
    let full = crate::geometry::full_grid_like(half);
    let metric = reflect_onto(&full, half, g)?;
    let n = half.n();
    let h = half.h();

    // Lipschitz quotient over lattice offsets with |o|² ≤ 4.
    let mut offsets = Vec::new();
    let span = 2i64;
    let count = (2 * span + 1).pow(n as u32);
    for t in 0..count {
        let mut q = t;
        let mut o = vec![0i64; n];
        for c in o.iter_mut() {
            *c = q % (2 * span + 1) - span;
            q /= 2 * span + 1;
        }
        let s: i64 = o.iter().map(|v| v * v).sum();
        // Each unordered pair once.
        if s > 0 && s <= 4 && o.iter().find(|&&v| v != 0).is_some_and(|&v| v > 0) {
            offsets.push((o, (s as f64).sqrt() * h));
        }
    }
    let mut lipschitz = 0.0f64;
    let mut idx = vec![0i64; n];
    if !metric.is_euclidean() {
        for i in 0..full.len() {
            full.index_into(i, &mut idx);
            let gi = metric.g(i);
            for (o, len) in &offsets {
                let j: Vec<i64> = idx.iter().zip(o).map(|(a, b)| a + b).collect();
                if let Some(j) = full.node_at(&j) {
                    lipschitz = lipschitz.max(frob(&gi, &metric.g(j)) / len);
                }
            }
        }
    }

    let mut sup = 0.0f64;
    let mut dsup = 0.0f64;
    let zero = vec![0.0; n * n];
    for i in 0..half.len() {
        let gi = g.g(i);
        sup = sup.max(frob(&gi, &zero));
        let mut s = 0.0;
        for a in 0..n {
            let (lo, hi) = (half.neighbor(i, a, -1), half.neighbor(i, a, 1));
            let q = match (lo, hi) {
                (Some(l), Some(r)) => frob(&g.g(r), &g.g(l)) / (2.0 * h),
                (None, Some(r)) => frob(&g.g(r), &gi) / h,
                (Some(l), None) => frob(&gi, &g.g(l)) / h,
                (None, None) => 0.0,
            };
            s += q * q;
        }
        dsup = dsup.max(s.sqrt());
    }
    Ok(ReflectedMetric {
        metric,
        lipschitz,
        c1_norm: sup + dsup,
    })
}

/// The extended map, metric and weight on `B(0,R₁)`.
#[derive(Debug, Clone)]
pub struct ReflectedPair {
    pub v: DiscreteMap,
    pub h: MetricField,
    /// `1` above the face, `|ũ|^{2p}` below.
    pub m: Vec<f64>,
    /// Radius `R₁` on which `|u| > 1/2` held.
    pub radius: f64,
    pub p: f64,
}

impl ReflectedPair {
    /// The weight as a scalar map (`d = 1`) for serialization.
    pub fn weight_map(&self) -> Result<DiscreteMap, MapError> {
        DiscreteMap::new(self.v.grid().clone(), 1, self.m.clone())
    }
}

/// Largest radius `r·0.9ʲ` on which `|u| > 1/2` at every upper node.
fn admissible_radius(u: &DiscreteMap) -> Result<f64, ReflectionError> {
    let g = u.grid();
    let h = g.h();
    let mut radius = g.r();
    let mut x = vec![0.0; g.n()];
    loop {
        let bad = (0..g.len())
            .filter(|&i| {
                g.point_into(i, &mut x);
                norm(&x) <= radius * (1.0 + 1e-12)
            })
            .map(|i| (i, norm(u.value(i))))
            .filter(|&(_, v)| v <= 0.5)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((node, value)) = bad else {
            return Ok(radius);
        };
        radius *= 0.9;
        if radius < 2.0 * h {
            return Err(ReflectionError::SmallNorm {
                node,
                point: g.point(node),
                value,
            });
        }
    }
}

/// Extend `u` to the full ball of the largest admissible radius.
pub fn reflect_map(u: &DiscreteMap, metric: &MetricField, p: f64) -> Result<ReflectedPair, ReflectionError> {
    let half = u.grid();
    if !half.half() {
        return Err(ReflectionError::NotHalf);
    }
    metric.check(half)?;
    let radius = admissible_radius(u)?;
    let n = half.n();
    let full = Arc::new(HalfBallGrid::new(n, radius, half.h(), false)?);
    let fold = fold_map(&full, half).ok_or(ReflectionError::NotHalf)?;
    let d = u.d();
    let mut values = Vec::with_capacity(full.len() * d);
    let mut m = Vec::with_capacity(full.len());
    let mut idx = vec![0i64; n];
    for (i, &j) in fold.iter().enumerate() {
        full.index_into(i, &mut idx);
        let uj = u.value(j);
        if idx[n - 1] < 0 {
            values.extend(inversion(uj)?);
            m.push(norm(uj).powf(2.0 * p));
        } else {
            values.extend_from_slice(uj);
            m.push(1.0);
        }
    }
    let v = DiscreteMap::new(full.clone(), d, values)?;
    let h = reflect_onto(&full, half, metric)?;
    Ok(ReflectedPair { v, h, m, radius, p })
}

/// Growth of the discrete p-Laplacian relative to `|dv|^p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthReport {
    /// `max |Δ_{p,h}v| / max(|dv|_h^p, 1e-8)` over interior nodes.
    pub ratio: f64,
    pub node: usize,
    /// Same maximum restricted to nodes at least two layers above the face.
    pub upper_ratio: f64,
    /// `max |Δ_{p,h}v|` over those upper nodes.
    pub upper_max: f64,
}

pub const GROWTH_FLOOR: f64 = 1e-8;

/// Discrete `Δ_{p,h}v = −(∂E/∂v)/(p·w)` at interior nodes, compared with `|dv|^p`.
pub fn residual_growth_check(pair: &ReflectedPair) -> Result<GrowthReport, ReflectionError> {
    let grid = pair.v.grid().clone();
    let domain = Domain::full(grid.clone());
    let d = pair.v.d();
    let ops = EnergyOps::new(&domain, &pair.h, d, pair.p, 0.0);
    let mut grad = vec![0.0; pair.v.values().len()];
    ops.energy_and_gradient(pair.v.values(), &mut grad);
    let dens = ops.densities(pair.v.values());
    let n = grid.n();
    let h = grid.h();
    let mut report = GrowthReport {
        ratio: 0.0,
        node: 0,
        upper_ratio: 0.0,
        upper_max: 0.0,
    };
    let mut x = vec![0.0; n];
    for i in 0..grid.len() {
        if grid.kind(i) != NodeKind::Interior {
            continue;
        }
        // Stencils two layers deep must stay interior for the operator to be the interior one.
        let deep = (0..n).all(|a| {
            [-1, 1].iter().all(|&s| {
                grid.neighbor(i, a, s)
                    .is_some_and(|j| grid.kind(j) == NodeKind::Interior)
            })
        });
        if !deep {
            continue;
        }
        let lap = norm(&grad[i * d..(i + 1) * d]) / (pair.p * ops.weights[i]);
        let ratio = lap / dens[i].max(GROWTH_FLOOR);
        if ratio > report.ratio {
            report.ratio = ratio;
            report.node = i;
        }
        grid.point_into(i, &mut x);
        if x[n - 1] >= 2.0 * h - 1e-12 {
            report.upper_ratio = report.upper_ratio.max(ratio);
            report.upper_max = report.upper_max.max(lap);
        }
    }
    Ok(report)
}

/// Lower-half consistency: `σ` of a lower node and the inversion identity.
pub fn mirror_point(x: &[f64]) -> Vec<f64> {
    flat_reflection(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half(h: f64) -> Arc<HalfBallGrid> {
        Arc::new(HalfBallGrid::new(2, 1.0, h, true).unwrap())
    }

    #[test]
    fn constant_reflects_to_itself() {
        let g = half(0.125);
        let u = DiscreteMap::constant(g, &[0.6, 0.8]);
        let pair = reflect_map(&u, &MetricField::euclidean(2), 2.0).unwrap();
        assert_eq!(pair.radius, 1.0);
        for i in 0..pair.v.grid().len() {
            let v = pair.v.value(i);
            assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        }
        let rep = residual_growth_check(&pair).unwrap();
        assert_eq!(rep.ratio, 0.0);
    }

    #[test]
    fn small_norm_shrinks_then_fails() {
        let g = half(0.0625);
        // |u| small only far from the origin: radius shrinks.
        let u = DiscreteMap::from_fn(g.clone(), 2, |x| {
            let r = norm(x);
            vec![1.0 - 0.8 * r * r, 0.0]
        })
        .unwrap();
        let pair = reflect_map(&u, &MetricField::euclidean(2), 2.0).unwrap();
        assert!(pair.radius < 1.0 && pair.radius > 0.6);
        // |u| small at the origin: no radius works.
        let w = DiscreteMap::from_fn(g, 2, |x| vec![0.1 + norm(x), 0.0]).unwrap();
        assert!(matches!(
            reflect_map(&w, &MetricField::euclidean(2), 2.0),
            Err(ReflectionError::SmallNorm { .. })
        ));
    }

    #[test]
    fn euclidean_metric_reflects_trivially() {
        let g = half(0.125);
        let r = reflect_metric(&g, &MetricField::euclidean(2)).unwrap();
        assert!(r.metric.is_euclidean());
        assert_eq!(r.lipschitz, 0.0);
    }

    #[test]
    fn sheared_metric_flips_mixed_terms() {
        let g = half(0.125);
        let m = MetricField::from_fn(&g, |x| vec![2.0, 0.5 * x[0], 0.5 * x[0], 1.0 + x[1]]).unwrap();
        let r = reflect_metric(&g, &m).unwrap();
        let full = crate::geometry::full_grid_like(&g);
        let i = full.node_at(&[2, -3]).unwrap();
        let gi = r.metric.g(i);
        let x = full.point(i);
        assert!((gi[1] + 0.5 * x[0]).abs() < 1e-15);
        assert!((gi[3] - (1.0 - x[1])).abs() < 1e-15);
        // Continuity across the face: mirror pairs one layer apart.
        let up = full.node_at(&[2, 1]).unwrap();
        let dn = full.node_at(&[2, -1]).unwrap();
        assert!(frob(&r.metric.g(up), &r.metric.g(dn)) <= 4.0 * 0.125);
    }
}
