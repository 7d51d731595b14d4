//! Difference stencils and the regularized p-energy with its gradient.

use std::sync::Arc;

use rayon::prelude::*;

use crate::geometry::{HalfBallGrid, MetricField, NONE};

/// One directional difference `coef·(u[plus] − u[minus])`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Diff {
    pub minus: u32,
    pub plus: u32,
    pub coef: f64,
}

/// Active node subset of a grid with its per-axis difference stencils.
///
/// Each node and axis carries a backward, a forward and a centered difference.
/// Where one neighbor is inactive all three are the available one-sided
/// difference; where both are, all three vanish.
#[derive(Debug, Clone)]
pub struct Domain {
    grid: Arc<HalfBallGrid>,
    nodes: Vec<usize>,
    /// `[backward, forward, centered]` per node and axis.
    diffs: Vec<[Diff; 3]>,
}

impl Domain {
    /// All active nodes of the grid.
    pub fn full(grid: Arc<HalfBallGrid>) -> Self {
        let nodes: Vec<usize> = (0..grid.len()).collect();
        Self::build(grid, nodes, None)
    }

    /// A subset of nodes; neighbors outside the subset count as missing.
    pub fn subset(grid: Arc<HalfBallGrid>, mut nodes: Vec<usize>) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        let mut member = vec![false; grid.len()];
        for &i in &nodes {
            member[i] = true;
        }
        Self::build(grid, nodes, Some(member))
    }

    fn build(grid: Arc<HalfBallGrid>, nodes: Vec<usize>, member: Option<Vec<bool>>) -> Self {
        let n = grid.n();
        let h = grid.h();
        let ok = |v: u32| v != NONE && member.as_ref().map_or(true, |m| m[v as usize]);
        let mut diffs = Vec::with_capacity(nodes.len() * n);
        for &i in &nodes {
            let nb = grid.neighbors(i);
            let me = i as u32;
            for a in 0..n {
                let (lo, hi) = (nb[2 * a], nb[2 * a + 1]);
                let back = Diff { minus: lo, plus: me, coef: 1.0 / h };
                let fwd = Diff { minus: me, plus: hi, coef: 1.0 / h };
                let d = match (ok(lo), ok(hi)) {
                    (true, true) => [back, fwd, Diff { minus: lo, plus: hi, coef: 0.5 / h }],
                    (false, true) => [fwd; 3],
                    (true, false) => [back; 3],
                    (false, false) => [Diff { minus: me, plus: me, coef: 0.0 }; 3],
                };
                diffs.push(d);
            }
        }
        Domain { grid, nodes, diffs }
    }

    pub fn grid(&self) -> &Arc<HalfBallGrid> {
        &self.grid
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub(crate) fn diffs(&self, k: usize) -> &[[Diff; 3]] {
        let n = self.grid.n();
        &self.diffs[k * n..(k + 1) * n]
    }

    /// Centered Jacobian `Du` (row-major `n×d`, row = axis) at the k-th domain node.
    pub fn jacobian(&self, values: &[f64], d: usize, k: usize, out: &mut [f64]) {
        for (a, df) in self.diffs(k).iter().enumerate() {
            apply(&df[2], values, d, &mut out[a * d..(a + 1) * d]);
        }
    }

    /// Backward, forward and (when `centered`) centered Jacobians, each `n×d`.
    fn jacobians(&self, values: &[f64], d: usize, k: usize, centered: bool, out: &mut [f64]) {
        let n = self.grid.n();
        let used = if centered { 3 } else { 2 };
        for (a, df) in self.diffs(k).iter().enumerate() {
            for (s, one) in df[..used].iter().enumerate() {
                let o = s * n * d + a * d;
                apply(one, values, d, &mut out[o..o + d]);
            }
        }
    }
}

#[inline]
fn apply(df: &Diff, values: &[f64], d: usize, out: &mut [f64]) {
    let (p, m) = (df.plus as usize * d, df.minus as usize * d);
    for c in 0..d {
        out[c] = df.coef * (values[p + c] - values[m + c]);
    }
}

/// `|du|²_g` averaged over the `2ⁿ` choices of one-sided differences.
///
/// Diagonal terms average the backward and forward squares; mixed terms
/// reduce to centered products. `jac` holds backward, forward, centered.
fn metric_square(jac: &[f64], n: usize, d: usize, ginv: Option<&[f64]>) -> f64 {
    let nd = n * d;
    let (bk, fw, ce) = (&jac[..nd], &jac[nd..2 * nd], &jac[2 * nd..]);
    let diag = |a: usize| -> f64 {
        (0..d)
            .map(|c| 0.5 * (bk[a * d + c] * bk[a * d + c] + fw[a * d + c] * fw[a * d + c]))
            .sum()
    };
    match ginv {
        None => (0..n).map(diag).sum(),
        Some(gi) => {
            let mut s = 0.0;
            for a in 0..n {
                s += gi[a * n + a] * diag(a);
                for b in 0..n {
                    let gab = gi[a * n + b];
                    if a != b && gab != 0.0 {
                        let dot: f64 = (0..d).map(|c| ce[a * d + c] * ce[b * d + c]).sum();
                        s += gab * dot;
                    }
                }
            }
            s
        }
    }
}

/// `t^e` for `t ≥ 0`, with a fast path for half-integer exponents.
#[inline]
fn pow_half(t: f64, e: f64) -> f64 {
    let twice = 2.0 * e;
    if twice == twice.round() && (0.0..=16.0).contains(&twice) {
        let k = twice as i32;
        let whole = t.powi(k / 2);
        if k % 2 == 0 {
            whole
        } else {
            whole * t.sqrt()
        }
    } else {
        t.powf(e)
    }
}

/// Regularized density `(s + δ²)^{p/2} − δ^p`.
#[inline]
pub(crate) fn density_of(s: f64, p: f64, delta: f64) -> f64 {
    if delta == 0.0 {
        if s <= 0.0 {
            0.0
        } else {
            pow_half(s, 0.5 * p)
        }
    } else {
        pow_half(s + delta * delta, 0.5 * p) - delta.powf(p)
    }
}

/// Derivative of the density with respect to `s`, times 2: `p (s+δ²)^{p/2−1}`.
#[inline]
fn flux_factor(s: f64, p: f64, delta: f64) -> f64 {
    let t = s + delta * delta;
    if t <= 0.0 {
        // p ≥ 2: zero for p > 2, constant p for p = 2.
        if p == 2.0 {
            2.0
        } else {
            0.0
        }
    } else {
        p * pow_half(t, 0.5 * p - 1.0)
    }
}

const CHUNK: usize = 2048;

/// Regularized p-energy on a domain with fixed per-node weights.
pub struct EnergyOps<'a> {
    pub domain: &'a Domain,
    pub metric: &'a MetricField,
    /// Quadrature weight per domain node (including `√det g`).
    pub weights: Vec<f64>,
    pub p: f64,
    pub delta: f64,
    pub d: usize,
}

impl<'a> EnergyOps<'a> {
    /// Standard weights `hⁿ·√det g` (halved on the flat face).
    pub fn new(domain: &'a Domain, metric: &'a MetricField, d: usize, p: f64, delta: f64) -> Self {
        let grid = domain.grid();
        let weights = domain
            .nodes()
            .iter()
            .map(|&i| grid.weight(i) * metric.sqrt_det(i))
            .collect();
        EnergyOps {
            domain,
            metric,
            weights,
            p,
            delta,
            d,
        }
    }

    /// Density at each domain node (not weighted).
    pub fn densities(&self, values: &[f64]) -> Vec<f64> {
        let n = self.domain.grid().n();
        let d = self.d;
        let nodes = self.domain.nodes();
        (0..nodes.len())
            .into_par_iter()
            .with_min_len(CHUNK)
            .map_init(
                || vec![0.0; 3 * n * d],
                |jac, k| {
                    let gi = self.metric.ginv(nodes[k]);
                    self.domain.jacobians(values, d, k, gi.is_some(), jac);
                    let s = metric_square(jac, n, d, gi);
                    density_of(s, self.p, self.delta)
                },
            )
            .collect()
    }

    /// Weighted total; reduction order is fixed so results do not depend on thread count.
    pub fn energy(&self, values: &[f64]) -> f64 {
        let dens = self.densities(values);
        ordered_dot(&dens, &self.weights)
    }

    /// Energy and its gradient with respect to node values (full grid layout).
    pub fn energy_and_gradient(&self, values: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.domain.grid().n();
        let d = self.d;
        let nodes = self.domain.nodes();
        let nd = n * d;
        // Flux per node and stencil (backward, forward, centered): ∂(w·ρ)/∂(D u).
        let stride = 3 * nd + 1;
        let mut parts = vec![0.0; nodes.len() * stride];
        parts
            .par_chunks_mut(stride)
            .with_min_len(CHUNK)
            .enumerate()
            .for_each_init(
                || vec![0.0; 3 * nd],
                |jac, (k, out)| {
                    let gi = self.metric.ginv(nodes[k]);
                    self.domain.jacobians(values, d, k, gi.is_some(), jac);
                    let s = metric_square(jac, n, d, gi);
                    let w = self.weights[k];
                    let f = w * flux_factor(s, self.p, self.delta);
                    let (e, flux) = out.split_first_mut().expect("stride is positive");
                    *e = w * density_of(s, self.p, self.delta);
                    flux.iter_mut().for_each(|v| *v = 0.0);
                    for a in 0..n {
                        let gaa = gi.map_or(1.0, |g| g[a * n + a]);
                        for c in 0..d {
                            let i = a * d + c;
                            flux[i] = 0.5 * f * gaa * jac[i];
                            flux[nd + i] = 0.5 * f * gaa * jac[nd + i];
                        }
                    }
                    if let Some(gi) = gi {
                        for a in 0..n {
                            for b in 0..n {
                                let gab = gi[a * n + b];
                                if a != b && gab != 0.0 {
                                    for c in 0..d {
                                        flux[2 * nd + a * d + c] += f * gab * jac[2 * nd + b * d + c];
                                    }
                                }
                            }
                        }
                    }
                },
            );
        grad.iter_mut().for_each(|g| *g = 0.0);
        let used = if self.metric.is_euclidean() { 2 } else { 3 };
        let mut total = 0.0;
        let mut chunk_sum = 0.0;
        for (k, part) in parts.chunks(stride).enumerate() {
            let (e, flux) = (part[0], &part[1..]);
            chunk_sum += e;
            if (k + 1) % CHUNK == 0 {
                total += chunk_sum;
                chunk_sum = 0.0;
            }
            for (a, dfs) in self.domain.diffs(k).iter().enumerate() {
                for (s, df) in dfs[..used].iter().enumerate() {
                    if df.coef == 0.0 {
                        continue;
                    }
                    let (p, m) = (df.plus as usize * d, df.minus as usize * d);
                    let o = s * nd + a * d;
                    for c in 0..d {
                        let v = df.coef * flux[o + c];
                        grad[p + c] += v;
                        grad[m + c] -= v;
                    }
                }
            }
        }
        total + chunk_sum
    }
}

/// `Σ aᵢbᵢ` summed in fixed-size chunks so the result is independent of threading.
pub(crate) fn ordered_dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_finite_differences() {
        let grid = Arc::new(HalfBallGrid::new(2, 1.0, 0.25, true).unwrap());
        let metric = MetricField::from_fn(&grid, |x| vec![1.5 + x[0], 0.3 * x[1], 0.3 * x[1], 1.0]).unwrap();
        let domain = Domain::full(grid.clone());
        let values: Vec<f64> = (0..grid.len() * 2).map(|i| (0.37 * i as f64).sin()).collect();
        for (p, delta) in [(2.0, 0.0), (3.0, 1e-2), (2.5, 0.0)] {
            let ops = EnergyOps::new(&domain, &metric, 2, p, delta);
            let mut g = vec![0.0; values.len()];
            let e = ops.energy_and_gradient(&values, &mut g);
            assert!((e - ops.energy(&values)).abs() <= 1e-14 * e.abs());
            for i in 0..values.len() {
                let step = 1e-6;
                let mut v = values.clone();
                v[i] += step;
                let ep = ops.energy(&v);
                v[i] -= 2.0 * step;
                let em = ops.energy(&v);
                let fd = (ep - em) / (2.0 * step);
                assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()), "p={p} i={i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn checkerboard_has_energy() {
        let grid = Arc::new(HalfBallGrid::new(2, 1.0, 0.125, false).unwrap());
        let domain = Domain::full(grid.clone());
        let e = MetricField::euclidean(2);
        let values: Vec<f64> = (0..grid.len())
            .map(|i| {
                let idx = grid.index(i);
                if (idx[0] + idx[1]).rem_euclid(2) == 0 { 1.0 } else { -1.0 }
            })
            .collect();
        let ops = EnergyOps::new(&domain, &e, 1, 2.0, 0.0);
        assert!(ops.densities(&values).iter().all(|&s| s > 1.0));
    }
}
