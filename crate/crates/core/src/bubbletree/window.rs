//! Rescaled windows `v(y) = u(a + λy)` and bubble subtraction.

use std::sync::Arc;

use rayon::prelude::*;

use super::BubbleError;
use crate::geometry::{norm, HalfBallGrid, MetricField};
use crate::maps::DiscreteMap;

/// A rescaled copy of a map around `center` at scale `lambda`.
#[derive(Debug, Clone)]
pub struct Window {
    pub map: DiscreteMap,
    pub metric: MetricField,
    pub center: Vec<f64>,
    pub lambda: f64,
}

impl Window {
    /// Window radius in rescaled units.
    pub fn radius(&self) -> f64 {
        self.map.grid().r()
    }

    /// Mean value over the outermost 10%-width shell of the window.
    pub fn value_at_infinity(&self) -> Vec<f64> {
        let g = self.map.grid();
        let d = self.map.d();
        let r = g.r();
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        let mut y = vec![0.0; g.n()];
        for i in 0..g.len() {
            g.point_into(i, &mut y);
            if norm(&y) >= 0.9 * r {
                for (s, v) in sum.iter_mut().zip(self.map.value(i)) {
                    *s += v;
                }
                count += 1;
            }
        }
        sum.iter().map(|s| s / count.max(1) as f64).collect()
    }
}

/// Largest rescaled radius whose preimage stays inside the source ball
/// (and above the face when the center is off it).
pub fn max_window_radius(grid: &HalfBallGrid, center: &[f64], lambda: f64) -> f64 {
    let n = grid.n();
    let mut room = grid.r() - norm(center);
    if grid.half() && center[n - 1] != 0.0 {
        room = room.min(center[n - 1]);
    }
    room / lambda
}

/// Samples `u(a + λy)` on a grid of radius `radius` and spacing `h/λ`.
///
/// The window is a half ball when the source is and `a` lies on the face.
/// Metric values are taken from the nearest source node.
pub fn rescale(
    map: &DiscreteMap,
    metric: &MetricField,
    center: &[f64],
    lambda: f64,
    radius: Option<f64>,
    min_scale_factor: f64,
) -> Result<Window, BubbleError> {
    let src = map.grid();
    let n = src.n();
    let h = src.h();
    if center.len() != n {
        return Err(BubbleError::Dimension { expected: n, got: center.len() });
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(BubbleError::Scale(lambda));
    }
    if lambda < h * min_scale_factor {
        return Err(BubbleError::SubResolution { lambda, limit: h * min_scale_factor });
    }
    let half = src.half() && center[n - 1] == 0.0;
    if src.half() && center[n - 1] < 0.0 {
        return Err(BubbleError::CenterOutside(center.to_vec()));
    }
    let room = max_window_radius(src, center, lambda);
    let radius = radius.unwrap_or(room).min(room);
    let step = h / lambda;
    if !(radius >= 2.0 * step) {
        return Err(BubbleError::WindowTooSmall { radius, spacing: step });
    }
    let grid = Arc::new(HalfBallGrid::new(n, radius, step, half)?);
    let source_point = |i: usize| -> Vec<f64> {
        let idx = grid.index(i);
        idx.iter().zip(center).map(|(&j, c)| c + j as f64 * h).collect()
    };
    let values = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = source_point(i);
            map.sample(&x).ok_or(BubbleError::OutsideSource(x))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let values: Vec<f64> = values.into_iter().flatten().collect();
    let out = DiscreteMap::new(grid.clone(), map.d(), values)?;
    let metric = if metric.is_euclidean() {
        MetricField::euclidean(n)
    } else {
        MetricField::from_fn(&grid, |y| {
            let x: Vec<f64> = y.iter().zip(center).map(|(v, c)| c + lambda * v).collect();
            let node = src.nearest_node(&x).expect("window lies inside the source");
            metric.g(node)
        })?
    };
    Ok(Window { map: out, metric, center: center.to_vec(), lambda })
}

/// A window placed back at `(center, scale)` in the source domain.
#[derive(Debug, Clone, Copy)]
pub struct Placement<'a> {
    pub window: &'a DiscreteMap,
    pub at_infinity: &'a [f64],
    pub center: &'a [f64],
    pub scale: f64,
}

impl Placement<'_> {
    /// `φ(|y|)·(ω(y) − ω(∞))` at `y = (x − a)/λ`, with `φ = 1` on `[0, R/2]`
    /// falling logarithmically to 0 at `R`. Half windows are extended evenly.
    pub fn profile(&self, x: &[f64], out: &mut [f64]) -> bool {
        let g = self.window.grid();
        let n = g.n();
        let r = g.r();
        let mut y: Vec<f64> = x.iter().zip(self.center).map(|(a, c)| (a - c) / self.scale).collect();
        let s = norm(&y);
        if s >= r {
            return false;
        }
        if g.half() && y[n - 1] < 0.0 {
            y[n - 1] = -y[n - 1];
        }
        let phi = if s <= 0.5 * r { 1.0 } else { (r / s).ln() / std::f64::consts::LN_2 };
        let Some(v) = self.window.sample(&y) else {
            return false;
        };
        for ((o, v), w) in out.iter_mut().zip(&v).zip(self.at_infinity) {
            *o = phi * (v - w);
        }
        true
    }
}

/// `w = u − Σ φ·(ω((x − a)/λ) − ω(∞))` on the grid of `u`.
pub fn subtract_bubbles(map: &DiscreteMap, bubbles: &[Placement<'_>]) -> DiscreteMap {
    let g = map.grid();
    let d = map.d();
    let mut values = map.values().to_vec();
    if bubbles.is_empty() {
        return map.clone();
    }
    values.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        let x = g.point(i);
        let mut tmp = vec![0.0; d];
        for b in bubbles {
            if b.profile(&x, &mut tmp) {
                out.iter_mut().zip(&tmp).for_each(|(o, t)| *o -= t);
            }
        }
    });
    DiscreteMap::new(g.clone(), d, values).expect("finite values on the same grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::p_energy;

    fn grid(n: usize, h: f64, half: bool) -> Arc<HalfBallGrid> {
        Arc::new(HalfBallGrid::new(n, 1.0, h, half).unwrap())
    }

    #[test]
    fn identity_rescale() {
        let g = grid(2, 1.0 / 16.0, true);
        let u = DiscreteMap::from_fn(g.clone(), 2, |x| vec![x[0].sin(), x[1] * x[0]]).unwrap();
        let w = rescale(&u, &MetricField::euclidean(2), &[0.0, 0.0], 1.0, None, 1.0).unwrap();
        assert_eq!(w.map.grid().len(), g.len());
        for (a, b) in w.map.values().iter().zip(u.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_rescale_is_exact() {
        let g = grid(2, 1.0 / 32.0, true);
        let u = DiscreteMap::from_fn(g, 1, |x| vec![2.0 * x[0] - 3.0 * x[1] + 0.5]).unwrap();
        let a = [0.25, 0.0];
        let lam = 0.25;
        let w = rescale(&u, &MetricField::euclidean(2), &a, lam, Some(2.0), 1.0).unwrap();
        let wg = w.map.grid();
        for i in 0..wg.len() {
            let y = wg.point(i);
            let want = 2.0 * (a[0] + lam * y[0]) - 3.0 * (a[1] + lam * y[1]) + 0.5;
            assert!((w.map.value(i)[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conformal_energy_is_preserved() {
        let g = grid(2, 1.0 / 64.0, true);
        let u = DiscreteMap::from_fn(g, 2, |x| vec![(3.0 * x[0]).cos() * x[1], x[0] * x[0] + x[1]]).unwrap();
        let e = MetricField::euclidean(2);
        let a = [0.1, 0.0];
        let lam = 0.5;
        let w = rescale(&u, &e, &a, lam, Some(1.0), 1.0).unwrap();
        let ew = p_energy(&w.map, &e, 2.0).unwrap().total;
        let pre = crate::maps::local_energy(&u, &e, 2.0, &a, lam).unwrap();
        assert!((ew - pre).abs() <= 0.03 * pre, "{ew} vs {pre}");
    }

    #[test]
    fn sub_resolution_refused() {
        let g = grid(2, 1.0 / 16.0, true);
        let u = DiscreteMap::constant(g, &[0.0, 1.0]);
        let err = rescale(&u, &MetricField::euclidean(2), &[0.0, 0.0], 0.01, None, 1.0).unwrap_err();
        assert!(matches!(err, BubbleError::SubResolution { .. }));
    }

    #[test]
    fn no_bubbles_is_identity() {
        let g = grid(2, 1.0 / 16.0, true);
        let u = DiscreteMap::from_fn(g, 2, |x| vec![x[0], x[1]]).unwrap();
        let w = subtract_bubbles(&u, &[]);
        assert_eq!(w.values(), u.values());
    }
}
