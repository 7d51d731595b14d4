//! Synthetic bubbling sequences built from half-space Möbius prototypes.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{separation_ratio, BubbleError, SequenceSpec};
use crate::analytic::half_space_chart_inv;
use crate::geometry::{norm, HalfBallGrid, MetricField, NodeKind};
use crate::maps::{p_energy, DiscreteMap};

/// `ω(y) = s·Q·π⁻¹(y)` for an orthogonal `Q` and sign `s`, evaluated at `(y', |yₙ|)`.
///
/// `π⁻¹` takes the upper half-space conformally onto the unit ball, so `ω`
/// has degree 1 on the face and `ω(∞) = s·Q·N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    n: usize,
    /// Row-major `n×n` rotation applied after `π⁻¹`.
    rotation: Vec<f64>,
}

impl Prototype {
    /// The bare chart inverse `π⁻¹`.
    pub fn chart_inverse(n: usize) -> Self {
        let mut rotation = vec![0.0; n * n];
        (0..n).for_each(|i| rotation[i * n + i] = 1.0);
        Prototype { n, rotation }
    }

    /// `−π⁻¹`, whose value at infinity is `−N = π⁻¹(0)`.
    pub fn antipodal(n: usize) -> Self {
        let mut p = Self::chart_inverse(n);
        p.rotation.iter_mut().for_each(|v| *v = -*v);
        p
    }

    /// Prototype with an explicit orthogonal matrix.
    pub fn with_rotation(n: usize, rotation: Vec<f64>) -> Result<Self, BubbleError> {
        if rotation.len() != n * n {
            return Err(BubbleError::Dimension { expected: n * n, got: rotation.len() });
        }
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| rotation[k * n + i] * rotation[k * n + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(BubbleError::NotOrthogonal);
                }
            }
        }
        Ok(Prototype { n, rotation })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn rotate(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n).map(|i| (0..n).map(|j| self.rotation[i * n + j] * v[j]).sum()).collect()
    }

    pub fn value(&self, y: &[f64]) -> Vec<f64> {
        let mut z = y.to_vec();
        let last = z.len() - 1;
        z[last] = z[last].abs();
        let x = half_space_chart_inv(&z).expect("denominator is at least 1 on the closed upper half-space");
        self.rotate(&x)
    }

    pub fn at_infinity(&self) -> Vec<f64> {
        let mut north = vec![0.0; self.n];
        north[self.n - 1] = 1.0;
        self.rotate(&north)
    }
}

/// One bubble with its center and scale at every sequence index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBubble {
    pub prototype: Prototype,
    pub centers: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
}

/// Limit map the bubbles are added to.
#[derive(Debug, Clone)]
pub enum Background {
    Constant(Vec<f64>),
    Map(DiscreteMap),
}

/// How bubbles are combined with the background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Superposition {
    /// `u + Σ [ω((x − a)/λ) − ω(∞)]`, renormalized on the face.
    #[default]
    Additive,
    /// `u · Π ω((x − a)/λ)/ω(∞)` as complex numbers (`n = d = 2`). Exactly
    /// conformal with unit modulus on the face, so nested bubbles at nearby
    /// scales cannot cancel.
    Product,
}

/// Generated sequence with its energy bound and any generator warnings.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub spec: SequenceSpec,
    /// `max_k E_{p_k}(u_k)`.
    pub energy_bound: f64,
    pub warnings: Vec<String>,
}

/// `u_k = u + Σ [ωᵢ((x − a_kᵢ)/λ_kᵢ) − ωᵢ(∞)]`, renormalized on the flat face.
pub fn make_synthetic_sequence(
    grid: Arc<HalfBallGrid>,
    background: &Background,
    bubbles: &[SyntheticBubble],
    ks: &[i64],
    alphas: &[f64],
    min_scale_factor: f64,
) -> Result<SyntheticSequence, BubbleError> {
    make_synthetic_sequence_with(grid, background, bubbles, ks, alphas, min_scale_factor, Superposition::Additive)
}

/// [`make_synthetic_sequence`] with an explicit superposition rule.
pub fn make_synthetic_sequence_with(
    grid: Arc<HalfBallGrid>,
    background: &Background,
    bubbles: &[SyntheticBubble],
    ks: &[i64],
    alphas: &[f64],
    min_scale_factor: f64,
    superposition: Superposition,
) -> Result<SyntheticSequence, BubbleError> {
    let n = grid.n();
    if ks.is_empty() {
        return Err(BubbleError::EmptySequence);
    }
    if alphas.len() != ks.len() {
        return Err(BubbleError::Length { what: "alphas", expected: ks.len(), got: alphas.len() });
    }
    let d = match background {
        Background::Constant(c) => c.len(),
        Background::Map(m) => {
            if m.grid() != &grid {
                return Err(BubbleError::Map(crate::maps::MapError::GridMismatch));
            }
            m.d()
        }
    };
    if superposition == Superposition::Product && (n != 2 || d != 2) {
        return Err(BubbleError::Dimension { expected: 2, got: n.max(d) });
    }
    let limit = grid.h() * min_scale_factor;
    for b in bubbles {
        if b.prototype.n() != n || d != n {
            return Err(BubbleError::Dimension { expected: n, got: b.prototype.n().min(d) });
        }
        if b.centers.len() != ks.len() || b.scales.len() != ks.len() {
            return Err(BubbleError::Length { what: "bubble centers/scales", expected: ks.len(), got: b.scales.len() });
        }
        for (i, (&lam, c)) in b.scales.iter().zip(&b.centers).enumerate() {
            if c.len() != n {
                return Err(BubbleError::Dimension { expected: n, got: c.len() });
            }
            if !(lam >= limit) {
                return Err(BubbleError::SubResolutionIndex { k: ks[i], lambda: lam, limit });
            }
        }
    }

    let mut warnings = Vec::new();
    for i in 0..bubbles.len() {
        for j in i + 1..bubbles.len() {
            let last = ks.len() - 1;
            let (bi, bj) = (&bubbles[i], &bubbles[j]);
            let r = separation_ratio(&bi.centers[last], bi.scales[last], &bj.centers[last], bj.scales[last]);
            if r <= 1.0 + 1e-12 {
                let msg = format!("bubbles {i} and {j} are not separated (ratio {r:.3} at k={})", ks[last]);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }

    let maps = (0..ks.len())
        .into_par_iter()
        .map(|idx| build(&grid, background, bubbles, idx, d, superposition))
        .collect::<Result<Vec<_>, _>>()?;
    let ps: Vec<f64> = alphas.iter().map(|a| n as f64 + a).collect();
    let spec = SequenceSpec::new(ks.to_vec(), ps, maps, MetricField::euclidean(n))?;
    let energy_bound = spec
        .maps
        .iter()
        .zip(&spec.ps)
        .map(|(m, &p)| p_energy(m, &spec.metric, p).map(|r| r.total))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(SyntheticSequence { spec, energy_bound, warnings })
}

fn build(
    grid: &Arc<HalfBallGrid>,
    background: &Background,
    bubbles: &[SyntheticBubble],
    idx: usize,
    d: usize,
    superposition: Superposition,
) -> Result<DiscreteMap, BubbleError> {
    let n = grid.n();
    let mut values = Vec::with_capacity(grid.len() * d);
    let mut x = vec![0.0; n];
    let infinities: Vec<Vec<f64>> = bubbles.iter().map(|b| b.prototype.at_infinity()).collect();
    for i in 0..grid.len() {
        grid.point_into(i, &mut x);
        let mut v = match background {
            Background::Constant(c) => c.clone(),
            Background::Map(m) => m.value(i).to_vec(),
        };
        for (b, inf) in bubbles.iter().zip(&infinities) {
            let lam = b.scales[idx];
            let y: Vec<f64> = x.iter().zip(&b.centers[idx]).map(|(xa, a)| (xa - a) / lam).collect();
            let w = b.prototype.value(&y);
            match superposition {
                Superposition::Additive => v.iter_mut().zip(w.iter().zip(inf)).for_each(|(o, (w, c))| *o += w - c),
                Superposition::Product => {
                    // v·w/c with |c| = 1, i.e. v·w·conj(c).
                    let (wr, wi) = (w[0] * inf[0] + w[1] * inf[1], w[1] * inf[0] - w[0] * inf[1]);
                    v = vec![v[0] * wr - v[1] * wi, v[0] * wi + v[1] * wr];
                }
            }
        }
        if grid.kind(i) == NodeKind::FlatBoundary {
            let r = norm(&v);
            if r == 0.0 {
                return Err(BubbleError::Degenerate { node: i });
            }
            v.iter_mut().for_each(|c| *c /= r);
        }
        values.extend(v);
    }
    Ok(DiscreteMap::new(grid.clone(), d, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::ball_volume;

    fn grid(h: f64) -> Arc<HalfBallGrid> {
        Arc::new(HalfBallGrid::new(2, 1.0, h, true).unwrap())
    }

    #[test]
    fn prototype_basics() {
        let p = Prototype::chart_inverse(2);
        assert_eq!(p.at_infinity(), vec![0.0, 1.0]);
        assert_eq!(p.value(&[0.0, 0.0]), vec![0.0, -1.0]);
        let big = p.value(&[1e8, 3.0]);
        assert!((big[1] - 1.0).abs() < 1e-7);
        let q = Prototype::antipodal(2);
        assert_eq!(q.at_infinity(), p.value(&[0.0, 0.0]));
        for t in [-3.0, -0.2, 0.0, 0.7, 5.0] {
            assert!((norm(&p.value(&[t, 0.0])) - 1.0).abs() < 1e-14);
        }
        assert_eq!(p.value(&[0.3, -0.4]), p.value(&[0.3, 0.4]));
        assert!(Prototype::with_rotation(2, vec![1.0, 1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn no_bubbles_gives_background() {
        let g = grid(1.0 / 16.0);
        let seq = make_synthetic_sequence(g, &Background::Constant(vec![0.0, 1.0]), &[], &[1, 2], &[0.0, 0.0], 1.0).unwrap();
        for m in &seq.spec.maps {
            assert!(m.values().chunks(2).all(|v| v == [0.0, 1.0]));
        }
        assert_eq!(seq.energy_bound, 0.0);
    }

    #[test]
    fn single_bubble_energy_approaches_mobius() {
        let g = grid(1.0 / 256.0);
        let ks = [3, 4, 5];
        let bubble = SyntheticBubble {
            prototype: Prototype::chart_inverse(2),
            centers: vec![vec![0.0, 0.0]; 3],
            scales: ks.iter().map(|&k| 2f64.powi(-k as i32)).collect(),
        };
        let seq =
            make_synthetic_sequence(g, &Background::Constant(vec![0.0, 1.0]), &[bubble], &ks, &[0.0; 3], 1.0).unwrap();
        let target = 2.0 * ball_volume(2);
        let last = p_energy(&seq.spec.maps[2], &seq.spec.metric, 2.0).unwrap().total;
        assert!((last - target).abs() <= 0.05 * target, "{last} vs {target}");
        assert!(seq.spec.maps.iter().all(|m| m.is_admissible(1e-12)));
    }

    #[test]
    fn sub_resolution_and_merge_warning() {
        let g = grid(1.0 / 32.0);
        let b = SyntheticBubble {
            prototype: Prototype::chart_inverse(2),
            centers: vec![vec![0.0, 0.0]; 2],
            scales: vec![0.25, 0.01],
        };
        let err = make_synthetic_sequence(g.clone(), &Background::Constant(vec![0.0, 1.0]), &[b], &[1, 2], &[0.0, 0.0], 1.0)
            .unwrap_err();
        assert!(matches!(err, BubbleError::SubResolutionIndex { k: 2, .. }));
        let b = SyntheticBubble {
            prototype: Prototype::chart_inverse(2),
            centers: vec![vec![0.0, 0.0]; 2],
            scales: vec![0.25, 0.125],
        };
        let seq = make_synthetic_sequence(
            g,
            &Background::Constant(vec![0.0, 1.0]),
            &[b.clone(), b],
            &[1, 2],
            &[0.0, 0.0],
            1.0,
        )
        .unwrap();
        assert_eq!(seq.warnings.len(), 1);
    }
}
