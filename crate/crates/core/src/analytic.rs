//! Closed-form maps: Möbius family, sphere inversion, the half-space chart,
//! the flat reflection and the logarithmic annulus comparator.

use std::f64::consts::PI;
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{norm, AnnulusSpec, GeometryError, HalfBallGrid, MetricField, Region};
use crate::maps::{p_energy, DiscreteMap, MapError};

/// Radius of the exclusion band around singular points.
pub const GUARD: f64 = 1e-9;
/// Step for central-difference Jacobians.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum AnalyticError {
    #[error("Möbius parameter must satisfy |a| < 1 (got |a| = {0})")]
    MobiusParameter(f64),
    #[error("evaluation within {GUARD:e} of a singular point")]
    Singular,
    #[error("comparator radii must satisfy 0 < R1 < R2")]
    ComparatorRadii,
    #[error("comparator endpoints have different dimensions")]
    EndpointDimension,
    #[error("exponent p={p} must be at least n={n}")]
    Exponent { p: f64, n: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Map(#[from] MapError),
}

type Result<T> = std::result::Result<T, AnalyticError>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Parameter of `M_a = ψ_a/|ψ_a|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct MobiusParams {
    a: Vec<f64>,
}

impl MobiusParams {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        let r = norm(&a);
        if !(r < 1.0) {
            return Err(AnalyticError::MobiusParameter(r));
        }
        Ok(MobiusParams { a })
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }
}

/// `ψ_a(x) = a + (1−|a|²)(a−x)/|a−x|²`.
pub fn psi(params: &MobiusParams, x: &[f64]) -> Result<Vec<f64>> {
    let a = &params.a;
    let diff: Vec<f64> = a.iter().zip(x).map(|(ai, xi)| ai - xi).collect();
    let d2 = dot(&diff, &diff);
    if d2.sqrt() < GUARD {
        return Err(AnalyticError::Singular);
    }
    let s = (1.0 - dot(a, a)) / d2;
    Ok(a.iter().zip(&diff).map(|(ai, di)| ai + s * di).collect())
}

/// `M_a(x) = ψ_a(x)/|ψ_a(x)|²`.
pub fn mobius(params: &MobiusParams, x: &[f64]) -> Result<Vec<f64>> {
    let p = psi(params, x)?;
    let p2 = dot(&p, &p);
    if p2.sqrt() < GUARD {
        return Err(AnalyticError::Singular);
    }
    Ok(p.iter().map(|v| v / p2).collect())
}

/// `M_a` with its removable point filled in: `M_a(a) = 0`.
///
/// Uses `M_a = N|a−x|²/|N|²` with `N = a|a−x|² + (1−|a|²)(a−x)`, which stays
/// well conditioned near `x = a`. Still singular at `a/|a|²`.
pub fn mobius_extended(params: &MobiusParams, x: &[f64]) -> Result<Vec<f64>> {
    let a = &params.a;
    let diff: Vec<f64> = a.iter().zip(x).map(|(ai, xi)| ai - xi).collect();
    let d2 = dot(&diff, &diff);
    if d2 == 0.0 {
        return Ok(vec![0.0; a.len()]);
    }
    let c = 1.0 - dot(a, a);
    let nv: Vec<f64> = a.iter().zip(&diff).map(|(ai, di)| ai * d2 + c * di).collect();
    let n2 = dot(&nv, &nv);
    if n2.sqrt() < GUARD * d2 {
        return Err(AnalyticError::Singular);
    }
    Ok(nv.iter().map(|v| v * d2 / n2).collect())
}

/// `ι(q) = q/|q|²`.
pub fn inversion(q: &[f64]) -> Result<Vec<f64>> {
    let q2 = dot(q, q);
    if q2.sqrt() < GUARD {
        return Err(AnalyticError::Singular);
    }
    Ok(q.iter().map(|v| v / q2).collect())
}

/// `Ξ(q) = dι(q) = Id/|q|² − 2 q⊗q/|q|⁴`, row-major.
pub fn d_inversion(q: &[f64]) -> Result<Vec<f64>> {
    let q2 = dot(q, q);
    if q2.sqrt() < GUARD {
        return Err(AnalyticError::Singular);
    }
    let d = q.len();
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = -2.0 * q[i] * q[j] / (q2 * q2);
        }
        m[i * d + i] += 1.0 / q2;
    }
    Ok(m)
}

/// `π(x) = (2x₁,…,2x_{n−1}, 1−|x|²)/(|x'|² + (1−xₙ)²)`, ball to upper half-space.
pub fn half_space_chart(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    let tail = 1.0 - x[n - 1];
    let den = dot(&x[..n - 1], &x[..n - 1]) + tail * tail;
    if den.sqrt() < GUARD {
        return Err(AnalyticError::Singular);
    }
    let mut y: Vec<f64> = x[..n - 1].iter().map(|v| 2.0 * v / den).collect();
    y.push((1.0 - dot(x, x)) / den);
    Ok(y)
}

/// `π⁻¹(y) = (2y', |y|²−1)/(|y'|² + (1+yₙ)²)`, upper half-space to ball.
pub fn half_space_chart_inv(y: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    let tail = 1.0 + y[n - 1];
    let den = dot(&y[..n - 1], &y[..n - 1]) + tail * tail;
    if den.sqrt() < GUARD {
        return Err(AnalyticError::Singular);
    }
    let mut x: Vec<f64> = y[..n - 1].iter().map(|v| 2.0 * v / den).collect();
    x.push((dot(y, y) - 1.0) / den);
    Ok(x)
}

/// `σ(x', xₙ) = (x', −xₙ)`.
pub fn flat_reflection(x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    let n = y.len();
    y[n - 1] = -y[n - 1];
    y
}

/// `dσ = diag(1,…,1,−1)`, row-major.
pub fn d_flat_reflection(n: usize) -> Vec<f64> {
    let mut m = crate::geometry::identity(n);
    m[n * n - 1] = -1.0;
    m
}

/// Central-difference Jacobian `J[i][j] = ∂fᵢ/∂xⱼ`, row-major `m×n`.
pub fn central_jacobian<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xp = x.to_vec();
    for j in 0..n {
        xp[j] = x[j] + step;
        let fp = f(&xp)?;
        xp[j] = x[j] - step;
        let fm = f(&xp)?;
        xp[j] = x[j];
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * step)).collect::<Vec<f64>>());
    }
    let m = cols[0].len();
    let mut jac = vec![0.0; m * n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..m {
            jac[i * n + j] = col[i];
        }
    }
    Ok(jac)
}

/// Volume of the unit sphere `|𝕊^{n−1}|`.
pub fn sphere_area(n: usize) -> f64 {
    // |S^{n-1}| = 2π^{n/2}/Γ(n/2), via the recursion |S^{n+1}| = 2π|S^{n-1}|/n.
    let mut area = if n % 2 == 0 { 2.0 * PI } else { 2.0 };
    let mut k = if n % 2 == 0 { 2 } else { 1 };
    while k < n {
        area *= 2.0 * PI / k as f64;
        k += 2;
    }
    area
}

/// Volume of the unit ball.
pub fn ball_volume(n: usize) -> f64 {
    sphere_area(n) / n as f64
}

/// Sample `M_a` on a full-ball grid around the unit ball.
pub fn sample_mobius(grid: Arc<HalfBallGrid>, params: &MobiusParams) -> Result<DiscreteMap> {
    let d = grid.n();
    Ok(DiscreteMap::try_from_fn(grid, d, |x| mobius_extended(params, x))??)
}

/// Grid quadrature of `E_n(M_a)` over the unit ball.
///
/// The map is sampled on a ball of radius `1 + 3h` so every node whose cell
/// meets the unit ball has centered differences, and cells cut by the unit
/// sphere are weighted by their volume fraction.
pub fn mobius_energy(n: usize, a: &[f64], h: f64) -> Result<f64> {
    let params = MobiusParams::new(a.to_vec())?;
    let grid = Arc::new(HalfBallGrid::new(n, 1.0 + 3.0 * h, h, false)?);
    let map = sample_mobius(grid, &params)?;
    let e = crate::maps::region_energy(
        &map,
        &MetricField::euclidean(n),
        n as f64,
        &Region::Ball {
            center: vec![0.0; n],
            radius: 1.0,
        },
    )?;
    Ok(e)
}

/// Radially logarithmic map between two constants on an annulus centered at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparatorSpec {
    pub n: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub r1: f64,
    pub r2: f64,
    pub p: f64,
}

impl ComparatorSpec {
    pub fn new(n: usize, a: Vec<f64>, b: Vec<f64>, r1: f64, r2: f64, p: f64) -> Result<Self> {
        if !(r1 > 0.0 && r2 > r1 && r2.is_finite()) {
            return Err(AnalyticError::ComparatorRadii);
        }
        if a.len() != b.len() || a.is_empty() {
            return Err(AnalyticError::EndpointDimension);
        }
        if !(p >= n as f64) {
            return Err(AnalyticError::Exponent { p, n });
        }
        Ok(ComparatorSpec { n, a, b, r1, r2, p })
    }

    fn gap(&self) -> f64 {
        self.a.iter().zip(&self.b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt()
    }

    /// `f(x) = a + log(|x|/R₁)/log(R₂/R₁)·(b−a)`; `|x|` is floored at `R₁/2`.
    pub fn value(&self, x: &[f64]) -> Vec<f64> {
        let r = norm(x).max(0.5 * self.r1);
        let t = (r / self.r1).ln() / (self.r2 / self.r1).ln();
        self.a.iter().zip(&self.b).map(|(a, b)| a + t * (b - a)).collect()
    }

    /// `|df|(x) = |b−a|/(|x| log(R₂/R₁))`.
    pub fn gradient_norm(&self, x: &[f64]) -> f64 {
        self.gap() / (norm(x) * (self.r2 / self.r1).ln())
    }

    pub fn annulus(&self) -> AnnulusSpec {
        AnnulusSpec {
            center: vec![0.0; self.n],
            r1: self.r1,
            r2: self.r2,
            clipped: false,
        }
    }
}

/// `∫_{R₁}^{R₂} ρ^{n−1−p} dρ`: `(R₂^{n−p} − R₁^{n−p})/(n−p)`, or `log(R₂/R₁)` at `p = n`.
pub fn radial_factor(n: usize, p: f64, r1: f64, r2: f64) -> f64 {
    let e = n as f64 - p;
    if e == 0.0 {
        (r2 / r1).ln()
    } else {
        (r2.powf(e) - r1.powf(e)) / e
    }
}

/// Closed-form p-energy of the comparator over the full annulus.
pub fn comparator_energy(spec: &ComparatorSpec) -> f64 {
    let l = (spec.r2 / spec.r1).ln();
    sphere_area(spec.n) * (spec.gap() / l).powf(spec.p) * radial_factor(spec.n, spec.p, spec.r1, spec.r2)
}

/// Comparator sampled on a full-ball grid of radius `R₂ + 3h`.
pub fn log_comparator(spec: &ComparatorSpec, h: f64) -> Result<DiscreteMap> {
    let grid = Arc::new(HalfBallGrid::new(spec.n, spec.r2 + 3.0 * h, h, false)?);
    Ok(DiscreteMap::from_fn(grid, spec.a.len(), |x| spec.value(x))?)
}

/// Grid quadrature of the comparator's energy over the annulus.
pub fn comparator_quadrature(spec: &ComparatorSpec, h: f64) -> Result<f64> {
    let map = log_comparator(spec, h)?;
    let e = p_energy(&map, &MetricField::euclidean(spec.n), spec.p)?;
    Ok(crate::maps::region_sum(map.grid(), &e, &Region::Annulus(spec.annulus())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn mobius_at_origin_is_antipodal() {
        let m = MobiusParams::new(vec![0.0, 0.0, 0.0]).unwrap();
        for x in [[0.3, -0.2, 0.1], [1.0, 0.0, 0.0], [-0.01, 0.5, 0.7]] {
            let y = mobius(&m, &x).unwrap();
            assert!(close(&y, &[-x[0], -x[1], -x[2]], 1e-14));
        }
        assert_eq!(mobius_extended(&m, &[0.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn mobius_displayed_value() {
        let m = MobiusParams::new(vec![0.5, 0.0]).unwrap();
        assert!(close(&mobius(&m, &[1.0, 0.0]).unwrap(), &[-1.0, 0.0], 1e-14));
        assert!(matches!(mobius(&m, &[0.5, 0.0]), Err(AnalyticError::Singular)));
        assert!(MobiusParams::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn extended_form_agrees() {
        let m = MobiusParams::new(vec![0.3, -0.4, 0.2]).unwrap();
        for x in [[0.1, 0.2, 0.3], [-0.9, 0.1, 0.0], [0.31, -0.4, 0.2]] {
            let a = mobius(&m, &x).unwrap();
            let b = mobius_extended(&m, &x).unwrap();
            assert!(close(&a, &b, 1e-12));
        }
    }

    #[test]
    fn inversion_examples() {
        assert_eq!(inversion(&[2.0, 0.0]).unwrap(), vec![0.5, 0.0]);
        let xi = d_inversion(&[1.0, 0.0]).unwrap();
        assert!(close(&[xi[1], xi[3]], &[0.0, 1.0], 1e-15));
        let q = [0.3, -1.2, 0.5];
        let xi = d_inversion(&q).unwrap();
        let q2 = dot(&q, &q);
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| xi[i * 3 + j] * q[j]).sum();
            assert!((row + q[i] / q2).abs() < 1e-14);
        }
        assert!(inversion(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn chart_examples() {
        assert!(close(&half_space_chart(&[0.0, 0.0, 0.0]).unwrap(), &[0.0, 0.0, 1.0], 1e-15));
        let x = [0.6, 0.0, -0.8];
        assert!(half_space_chart(&x).unwrap()[2].abs() < 1e-15);
        assert!(half_space_chart(&[0.0, 1.0]).is_err());
        // N is sent to infinity.
        let y = half_space_chart(&[0.0, 1.0 - 1e-6]).unwrap();
        assert!(norm(&y) > 1e5);
        // π⁻¹(0) = −N, π⁻¹ of a large point is close to N.
        assert!(close(&half_space_chart_inv(&[0.0, 0.0]).unwrap(), &[0.0, -1.0], 1e-15));
        assert!(close(&half_space_chart_inv(&[0.0, 1e8]).unwrap(), &[0.0, 1.0], 1e-7));
    }

    #[test]
    fn reflection_examples() {
        let x = [0.2, -0.3, 0.4];
        assert_eq!(flat_reflection(&flat_reflection(&x)), x.to_vec());
        assert_eq!(flat_reflection(&[0.2, 0.0]), vec![0.2, 0.0]);
        let d = d_flat_reflection(3);
        assert_eq!(d, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn sphere_constants() {
        assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-14);
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-14);
        assert!((sphere_area(4) - 2.0 * PI * PI).abs() < 1e-13);
        assert!((ball_volume(3) - 4.0 * PI / 3.0).abs() < 1e-14);
    }

    #[test]
    fn comparator_boundary_values_and_limit() {
        let s = ComparatorSpec::new(2, vec![0.0, 1.0], vec![1.0, 1.0], 0.25, 0.25 * 1f64.exp(), 2.0).unwrap();
        assert!(close(&s.value(&[0.25, 0.0]), &[0.0, 1.0], 1e-15));
        assert!(close(&s.value(&[0.0, 0.25 * 1f64.exp()]), &[1.0, 1.0], 1e-14));
        assert!((comparator_energy(&s) - 2.0 * PI).abs() < 1e-12);
        let same = ComparatorSpec::new(2, vec![0.5], vec![0.5], 0.1, 0.2, 2.0).unwrap();
        assert_eq!(comparator_energy(&same), 0.0);
        for n in [2usize, 3] {
            let l = (3.0f64).ln();
            for dp in [1e-8, -1e-8] {
                assert!((radial_factor(n, n as f64 + dp, 1.0, 3.0) - l).abs() < 1e-6);
            }
        }
    }
}
