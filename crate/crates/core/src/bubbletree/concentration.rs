//! Concentration function `Q(t) = sup_x ∫_{B(x,t)} e` over grid-node centers.
//!
//! Node `y` contributes `e(y)·clamp((t − |y−x|)/h, 0, 1)`, so `Q` is continuous,
//! nondecreasing and `Q(0) = 0`. Candidate centers are pruned with cube sums
//! from a summed-area table before exact ball sums are taken.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::geometry::{HalfBallGrid, MetricField};
use crate::maps::{p_energy, DiscreteMap, MapError};

/// Weighted node energies and the tables used to query ball sums.
#[derive(Debug, Clone)]
pub struct ConcentrationField {
    grid: Arc<HalfBallGrid>,
    /// Energy per box cell (zero off the active set).
    cells: Vec<f64>,
    /// Exclusive summed-area table with `dims + 1` entries per axis.
    sat: Vec<f64>,
    sat_strides: Vec<usize>,
    /// Exclusive prefix sums along the last axis, `dims_last + 1` per line.
    line: Vec<f64>,
    centers: Vec<usize>,
    total: f64,
    slack: f64,
}

/// Outcome of a level-crossing search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Detection {
    Found { center: usize, lambda: f64, level: f64 },
    NoConcentration { max: f64 },
}

/// `Q` sampled at a list of radii.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationProfile {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    /// Maximizing center node at each radius.
    pub centers: Vec<usize>,
}

impl ConcentrationProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,Q\n");
        for (t, q) in self.radii.iter().zip(&self.values) {
            s.push_str(&format!("{t:e},{q:e}\n"));
        }
        s
    }
}

/// Weighted p-energy per node.
pub fn node_energies(map: &DiscreteMap, metric: &MetricField, p: f64) -> Result<Vec<f64>, MapError> {
    let rep = p_energy(map, metric, p)?;
    Ok(rep.density.iter().zip(&rep.weights).map(|(d, w)| d * w).collect())
}

impl ConcentrationField {
    /// Field from per-node energies; `centers` defaults to every node.
    pub fn new(grid: Arc<HalfBallGrid>, energies: &[f64], centers: Option<Vec<usize>>) -> Self {
        assert_eq!(energies.len(), grid.len(), "one energy per node");
        let n = grid.n();
        let dims = grid.dims().to_vec();
        let mut cells = vec![0.0; grid.box_len()];
        for (i, &e) in energies.iter().enumerate() {
            cells[grid.box_index(i)] = e;
        }

        let sdims: Vec<usize> = dims.iter().map(|d| d + 1).collect();
        let mut sat_strides = vec![1usize; n];
        for a in (0..n - 1).rev() {
            sat_strides[a] = sat_strides[a + 1] * sdims[a + 1];
        }
        let mut sat = vec![0.0; sdims.iter().product()];
        let strides = grid.strides();
        for (b, &e) in cells.iter().enumerate() {
            if e != 0.0 {
                let mut rem = b;
                let mut s = 0;
                for a in 0..n {
                    let q = rem / strides[a];
                    rem -= q * strides[a];
                    s += (q + 1) * sat_strides[a];
                }
                sat[s] = e;
            }
        }
        for a in 0..n {
            let st = sat_strides[a];
            for s in 0..sat.len() {
                if (s / st) % sdims[a] != 0 {
                    sat[s] += sat[s - st];
                }
            }
        }

        let last = dims[n - 1];
        let lines = cells.len() / last;
        let mut line = vec![0.0; lines * (last + 1)];
        for l in 0..lines {
            let mut acc = 0.0;
            for j in 0..last {
                acc += cells[l * last + j];
                line[l * (last + 1) + j + 1] = acc;
            }
        }

        let total: f64 = energies.iter().sum();
        let centers = centers.unwrap_or_else(|| (0..grid.len()).collect());
        ConcentrationField {
            grid,
            cells,
            sat,
            sat_strides,
            line,
            centers,
            total,
            slack: 1e-12 * total.abs() + f64::MIN_POSITIVE,
        }
    }

    pub fn from_map(map: &DiscreteMap, metric: &MetricField, p: f64) -> Result<Self, MapError> {
        Ok(Self::new(map.grid().clone(), &node_energies(map, metric, p)?, None))
    }

    pub fn grid(&self) -> &Arc<HalfBallGrid> {
        &self.grid
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn retain_centers(&mut self, keep: impl Fn(usize) -> bool) {
        self.centers.retain(|&c| keep(c));
    }

    /// Clipped index range `[c − k, c + k]` along each axis, as box offsets.
    fn cube(&self, center: usize, k: i64) -> (Vec<usize>, Vec<usize>) {
        let n = self.grid.n();
        let idx = self.grid.index(center);
        let lo = self.grid.lo();
        let m = self.grid.m();
        let mut a0 = vec![0; n];
        let mut a1 = vec![0; n];
        for a in 0..n {
            a0[a] = ((idx[a] - k).max(lo[a]) - lo[a]) as usize;
            a1[a] = ((idx[a] + k).min(m) - lo[a]) as usize;
        }
        (a0, a1)
    }

    /// Sum over the cube of half-width `⌊t/h⌋` around `center`; bounds the ball sum.
    pub fn upper_bound(&self, center: usize, t: f64) -> f64 {
        let n = self.grid.n();
        let k = (t / self.grid.h()).floor() as i64;
        let (a0, a1) = self.cube(center, k);
        let mut s = 0.0;
        for corner in 0..(1usize << n) {
            let mut off = 0;
            let mut sign = 1.0;
            for a in 0..n {
                if (corner >> a) & 1 == 1 {
                    off += (a1[a] + 1) * self.sat_strides[a];
                } else {
                    off += a0[a] * self.sat_strides[a];
                    sign = -sign;
                }
            }
            s += sign * self.sat[off];
        }
        s.max(0.0)
    }

    /// Ramp-weighted energy of the ball of radius `t` around `center`.
    pub fn ball_sum(&self, center: usize, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let g = &*self.grid;
        let n = g.n();
        let h = g.h();
        let k = (t / h).floor() as i64;
        let (a0, a1) = self.cube(center, k);
        let c = g.index(center);
        let lo = g.lo();
        let last = g.dims()[n - 1];
        let strides = g.strides();
        let cl = (c[n - 1] - lo[n - 1]) as usize;
        let ramp = |d: f64| ((t - d) / h).clamp(0.0, 1.0);

        let mut sum = 0.0;
        let mut cur: Vec<usize> = a0[..n - 1].to_vec();
        loop {
            let mut rho2 = 0.0;
            let mut base = 0;
            for a in 0..n - 1 {
                let o = (cur[a] as i64 + lo[a] - c[a]) as f64 * h;
                rho2 += o * o;
                base += cur[a] * strides[a];
            }
            if rho2 < t * t {
                let l = base / last;
                let pre = &self.line[l * (last + 1)..(l + 1) * (last + 1)];
                let cells = &self.cells[base..base + last];
                let inner = t - h;
                let full = if inner > 0.0 && rho2 <= inner * inner {
                    ((inner * inner - rho2).sqrt() / h).floor() as i64
                } else {
                    -1
                };
                let reach = (((t * t - rho2).sqrt()) / h).ceil() as i64;
                if full >= 0 {
                    let j0 = (cl as i64 - full).max(a0[n - 1] as i64) as usize;
                    let j1 = (cl as i64 + full).min(a1[n - 1] as i64) as usize;
                    sum += pre[j1 + 1] - pre[j0];
                }
                let start = full + 1;
                for o in start..=reach {
                    let d = (rho2 + (o as f64 * h).powi(2)).sqrt();
                    let w = ramp(d);
                    if w <= 0.0 {
                        continue;
                    }
                    let sides: &[i64] = if o == 0 { &[0] } else { &[-1, 1] };
                    for &s in sides {
                        let j = cl as i64 + s * o;
                        if j >= a0[n - 1] as i64 && j <= a1[n - 1] as i64 {
                            sum += w * cells[j as usize];
                        }
                    }
                }
            }
            // Odometer over the first n − 1 axes.
            let mut a = n - 1;
            loop {
                if a == 0 {
                    return sum;
                }
                a -= 1;
                if cur[a] < a1[a] {
                    cur[a] += 1;
                    break;
                }
                cur[a] = a0[a];
            }
        }
    }

    fn bounds(&self, t: f64) -> Vec<f64> {
        self.centers.par_iter().map(|&c| self.upper_bound(c, t)).collect()
    }

    /// Exact `Q(t)` and its maximizing center (smallest node index on ties).
    pub fn q(&self, t: f64) -> (f64, usize) {
        if self.centers.is_empty() {
            return (0.0, 0);
        }
        let ub = self.bounds(t);
        let mut order: Vec<usize> = (0..ub.len()).collect();
        let top = order
            .iter()
            .copied()
            .max_by(|&a, &b| ub[a].total_cmp(&ub[b]).then(b.cmp(&a)))
            .expect("nonempty");
        let mut best = self.ball_sum(self.centers[top], t);
        let mut best_c = self.centers[top];
        order.retain(|&i| ub[i] + self.slack >= best);
        order.sort_by(|&a, &b| ub[b].total_cmp(&ub[a]).then(a.cmp(&b)));
        for i in order {
            if ub[i] + self.slack < best {
                break;
            }
            if best >= self.total - self.slack && self.centers[i] > best_c {
                continue;
            }
            let c = self.centers[i];
            let v = self.ball_sum(c, t);
            if v > best || (v == best && c < best_c) {
                best = v;
                best_c = c;
            }
        }
        (best, best_c)
    }

    /// Whether some center reaches `target` at radius `t`.
    pub fn reaches(&self, t: f64, target: f64) -> bool {
        let mut cands: Vec<(f64, usize)> = self
            .centers
            .par_iter()
            .filter_map(|&c| {
                let ub = self.upper_bound(c, t);
                (ub + self.slack >= target).then_some((ub, c))
            })
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cands.iter().any(|&(_, c)| self.ball_sum(c, t) >= target)
    }

    /// Largest radius worth searching: every node is within it from any center.
    pub fn t_max(&self) -> f64 {
        2.0 * self.grid.r() + 2.0 * self.grid.h()
    }

    /// Smallest `t ≤ hi` with `ball_sum(center, t) ≥ target`, given that `hi` reaches it.
    fn crossing(&self, center: usize, target: f64, hi: f64, tol: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, hi);
        let fine = 1e-6 * self.grid.h();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.ball_sum(center, mid) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= fine && self.ball_sum(center, hi) - target <= tol {
                break;
            }
        }
        hi
    }

    /// Smallest radius whose `Q` reaches `target`, with the maximizing center there.
    ///
    /// `Q(t) ≥ target` iff some center's ball sum does, so the answer is the
    /// least per-center crossing radius. The densest center gives a first
    /// radius `t₀`; only centers whose cube bound reaches `target` at `t₀` can
    /// cross earlier, and they are visited in decreasing order of their sum at `t₀`.
    pub fn detect(&self, target: f64, tol: f64) -> Detection {
        if target <= 0.0 {
            let center = self.centers.first().copied().unwrap_or(0);
            return Detection::Found { center, lambda: 0.0, level: 0.0 };
        }
        // Every ball of radius t_max covers the grid.
        if self.total + self.slack < target || self.centers.is_empty() {
            return Detection::NoConcentration { max: self.total };
        }
        let g = &self.grid;
        let density = |c: usize| self.cells[g.box_index(c)];
        let seed = self
            .centers
            .iter()
            .copied()
            .max_by(|&a, &b| density(a).total_cmp(&density(b)).then(b.cmp(&a)))
            .expect("nonempty");
        let t0 = self.crossing(seed, target, self.t_max(), tol);
        let mut cands: Vec<(f64, usize)> = self
            .centers
            .par_iter()
            .map(|&c| (self.upper_bound(c, t0), c))
            .filter(|&(ub, _)| ub + self.slack >= target)
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut best = t0;
        for &(_, c) in &cands {
            if c != seed && self.upper_bound(c, best) + self.slack >= target && self.ball_sum(c, best) >= target {
                best = self.crossing(c, target, best, tol);
            }
        }
        let (level, center) = cands
            .par_iter()
            .filter(|&&(_, c)| self.upper_bound(c, best) + self.slack >= target)
            .map(|&(_, c)| (self.ball_sum(c, best), c))
            .reduce(|| (f64::MIN, usize::MAX), |a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
        Detection::Found { center, lambda: best, level }
    }

    pub fn profile(&self, radii: &[f64]) -> ConcentrationProfile {
        let mut values = Vec::with_capacity(radii.len());
        let mut centers = Vec::with_capacity(radii.len());
        for &t in radii {
            let (v, c) = self.q(t);
            values.push(v);
            centers.push(c);
        }
        ConcentrationProfile { radii: radii.to_vec(), values, centers }
    }
}

/// `Q` at each radius for the p-energy of `map`.
pub fn concentration_function(
    map: &DiscreteMap,
    metric: &MetricField,
    p: f64,
    radii: &[f64],
) -> Result<ConcentrationProfile, MapError> {
    Ok(ConcentrationField::from_map(map, metric, p)?.profile(radii))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(n: usize, h: f64, half: bool, f: impl Fn(&[f64]) -> f64) -> ConcentrationField {
        let g = Arc::new(HalfBallGrid::new(n, 1.0, h, half).unwrap());
        let e: Vec<f64> = (0..g.len()).map(|i| f(&g.point(i))).collect();
        ConcentrationField::new(g, &e, None)
    }

    fn brute(f: &ConcentrationField, c: usize, t: f64) -> f64 {
        let g = f.grid();
        let x = g.point(c);
        let h = g.h();
        (0..g.len())
            .map(|i| {
                let d = crate::geometry::dist(&x, &g.point(i));
                f.cells[g.box_index(i)] * ((t - d) / h).clamp(0.0, 1.0)
            })
            .sum()
    }

    #[test]
    fn ball_sums_match_brute_force() {
        for (n, half) in [(2, true), (2, false), (3, true)] {
            let f = field(n, 0.125, half, |x| 1.0 + x[0] * x[0] + 0.5 * x[n - 1]);
            for &c in &[0usize, 5, f.grid().len() / 2, f.grid().len() - 1] {
                for t in [0.0, 0.05, 0.125, 0.3, 0.51, 1.1, 2.5] {
                    let a = f.ball_sum(c, t);
                    let b = brute(&f, c, t);
                    assert!((a - b).abs() <= 1e-12 * (1.0 + b), "n={n} c={c} t={t}: {a} vs {b}");
                    assert!(f.upper_bound(c, t) + 1e-12 >= a);
                }
            }
        }
    }

    #[test]
    fn q_is_exact_sup() {
        let f = field(2, 0.0625, true, |x| (-(x[0] - 0.3).powi(2) * 40.0 - (x[1] - 0.2).powi(2) * 40.0).exp());
        for t in [0.07, 0.2, 0.45] {
            let (v, c) = f.q(t);
            let (bv, bc) = (0..f.grid().len())
                .map(|i| (brute(&f, i, t), i))
                .fold((f64::MIN, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
            assert!((v - bv).abs() < 1e-12);
            assert_eq!(c, bc);
        }
    }

    #[test]
    fn constant_map_and_covering_radius() {
        let f = field(2, 0.125, true, |_| 0.0);
        assert_eq!(f.q(0.5).0, 0.0);
        let f = field(2, 0.125, true, |x| 1.0 + x[0]);
        let (v, _) = f.q(f.t_max());
        assert!((v - f.total()).abs() < 1e-12);
        assert_eq!(f.q(0.0).0, 0.0);
    }

    #[test]
    fn detection_levels() {
        let f = field(2, 0.03125, true, |x| (-(x[0] * x[0] + x[1] * x[1]) * 100.0).exp());
        assert_eq!(f.detect(0.0, 1e-9), Detection::Found { center: 0, lambda: 0.0, level: 0.0 });
        assert!(matches!(f.detect(2.0 * f.total(), 1e-9), Detection::NoConcentration { .. }));
        match f.detect(0.5 * f.total(), 1e-9) {
            Detection::Found { center, lambda, level } => {
                assert!((level - 0.5 * f.total()).abs() <= 1e-9);
                assert!(lambda > 0.0 && lambda < 0.5);
                let x = f.grid().point(center);
                assert!(crate::geometry::norm(&x) <= lambda);
                // Smallest such radius.
                assert!(f.q(lambda * (1.0 - 1e-6)).0 < 0.5 * f.total());
            }
            other => panic!("{other:?}"),
        }
    }
}
