//! Brouwer degree of the normalized boundary trace `u/|u|`.
//!
//! For `n = 2` angle increments are summed around the boundary curve; for
//! `n = 3` signed solid angles of a triangulated boundary surface are summed.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::BubbleError;
use crate::geometry::norm;
use crate::maps::DiscreteMap;

/// Closed boundary surface inside the grid, traversed with outward orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryComponent {
    /// `∂B(0, radius)` for a full-ball grid.
    Sphere { radius: f64 },
    /// Flat disk `{xₙ = 0, |x| ≤ radius}` together with the upper hemisphere.
    HalfBoundary { radius: f64 },
}

impl BoundaryComponent {
    /// One grid step inside the outer sphere.
    pub fn default_for(map: &DiscreteMap) -> Self {
        let g = map.grid();
        let radius = g.r() - g.h();
        if g.half() {
            BoundaryComponent::HalfBoundary { radius }
        } else {
            BoundaryComponent::Sphere { radius }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeResult {
    pub degree: i64,
    pub raw: f64,
}

/// Smallest `|u|` tolerated on the boundary.
pub const MIN_TRACE_NORM: f64 = 0.5;
/// Largest distance of the raw value from an integer.
pub const INTEGER_TOL: f64 = 0.1;

pub fn degree(map: &DiscreteMap, component: BoundaryComponent) -> Result<DegreeResult, BubbleError> {
    let g = map.grid();
    let n = g.n();
    if map.d() != n {
        return Err(BubbleError::Dimension { expected: n, got: map.d() });
    }
    let (radius, half) = match component {
        BoundaryComponent::Sphere { radius } => (radius, false),
        BoundaryComponent::HalfBoundary { radius } => (radius, true),
    };
    if half && !g.half() {
        return Err(BubbleError::Component("half boundary on a full-ball grid"));
    }
    if !half && g.half() {
        return Err(BubbleError::Component("sphere on a half-ball grid"));
    }
    if !(radius > 0.0 && radius <= g.r()) {
        return Err(BubbleError::Component("radius outside the grid"));
    }
    let trace = |x: &[f64]| -> Result<Vec<f64>, BubbleError> {
        let v = map.sample(x).ok_or_else(|| BubbleError::OutsideSource(x.to_vec()))?;
        let r = norm(&v);
        if r < MIN_TRACE_NORM {
            return Err(BubbleError::SmallTrace { point: x.to_vec(), norm: r });
        }
        Ok(v.iter().map(|c| c / r).collect())
    };
    let step = g.h() / 4.0;
    let raw = match n {
        2 => winding(&curve(radius, half, step), &trace)?,
        3 => {
            let (verts, tris) = surface(radius, half, g.h() / 2.0);
            let vals = verts.iter().map(|x| trace(x)).collect::<Result<Vec<_>, _>>()?;
            let omega: f64 = tris.iter().map(|&[a, b, c]| solid_angle(&vals[a], &vals[b], &vals[c])).sum();
            omega / (4.0 * PI)
        }
        _ => return Err(BubbleError::DegreeUnsupported(n)),
    };
    let degree = raw.round();
    if (raw - degree).abs() > INTEGER_TOL {
        return Err(BubbleError::UnresolvedDegree { raw });
    }
    Ok(DegreeResult { degree: degree as i64, raw })
}

/// Counterclockwise closed polyline; the last point is not repeated.
fn curve(radius: f64, half: bool, step: f64) -> Vec<[f64; 2]> {
    let mut pts = Vec::new();
    if half {
        let m = ((2.0 * radius) / step).ceil() as usize;
        for i in 0..m {
            pts.push([-radius + 2.0 * radius * i as f64 / m as f64, 0.0]);
        }
        let m = (PI * radius / step).ceil() as usize;
        for i in 0..m {
            let t = PI * i as f64 / m as f64;
            pts.push([radius * t.cos(), radius * t.sin()]);
        }
    } else {
        let m = (2.0 * PI * radius / step).ceil() as usize;
        for i in 0..m {
            let t = 2.0 * PI * i as f64 / m as f64;
            pts.push([radius * t.cos(), radius * t.sin()]);
        }
    }
    pts
}

fn winding<F>(pts: &[[f64; 2]], trace: &F) -> Result<f64, BubbleError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, BubbleError>,
{
    let vals = pts.iter().map(|p| trace(p)).collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    for i in 0..vals.len() {
        let a = &vals[i];
        let b = &vals[(i + 1) % vals.len()];
        let cross = a[0] * b[1] - a[1] * b[0];
        let dot = a[0] * b[0] + a[1] * b[1];
        total += cross.atan2(dot);
    }
    Ok(total / (2.0 * PI))
}

/// Signed solid angle of a spherical triangle with unit vertices.
fn solid_angle(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let bc = [b[1] * c[2] - b[2] * c[1], b[2] * c[0] - b[0] * c[2], b[0] * c[1] - b[1] * c[0]];
    let num = a[0] * bc[0] + a[1] * bc[1] + a[2] * bc[2];
    let dot = |u: &[f64], v: &[f64]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let den = 1.0 + dot(a, b) + dot(b, c) + dot(c, a);
    2.0 * num.atan2(den)
}

/// Outward-oriented triangulation of a sphere or of the half-ball boundary.
fn surface(radius: f64, half: bool, step: f64) -> (Vec<Vec<f64>>, Vec<[usize; 3]>) {
    let top = if half { PI / 2.0 } else { PI };
    let rings = ((top * radius) / step).ceil().max(2.0) as usize;
    let nphi = ((2.0 * PI * radius / step).ceil() as usize).max(8);
    let mut verts = vec![vec![0.0, 0.0, radius]];
    let mut tris = Vec::new();
    let ring_start = |i: usize| 1 + (i - 1) * nphi;
    // Latitude rings 1..=rings; the last one is the equator (half) or the south pole.
    let last = if half { rings } else { rings - 1 };
    for i in 1..=last {
        let th = top * i as f64 / rings as f64;
        for j in 0..nphi {
            let ph = 2.0 * PI * j as f64 / nphi as f64;
            verts.push(vec![radius * th.sin() * ph.cos(), radius * th.sin() * ph.sin(), radius * th.cos()]);
        }
    }
    for j in 0..nphi {
        let k = (j + 1) % nphi;
        tris.push([0, ring_start(1) + j, ring_start(1) + k]);
    }
    for i in 1..last {
        for j in 0..nphi {
            let k = (j + 1) % nphi;
            let (a, b, c, d) = (ring_start(i) + j, ring_start(i + 1) + j, ring_start(i + 1) + k, ring_start(i) + k);
            tris.push([a, b, c]);
            tris.push([a, c, d]);
        }
    }
    if half {
        // Flat disk with downward normal, sharing the equator ring.
        let nr = ((radius / step).ceil() as usize).max(2);
        let center = verts.len();
        verts.push(vec![0.0, 0.0, 0.0]);
        let mut disk_ring = vec![0usize; nr + 1];
        disk_ring[nr] = ring_start(last);
        for (i, slot) in disk_ring.iter_mut().enumerate().take(nr).skip(1) {
            *slot = verts.len();
            let rho = radius * i as f64 / nr as f64;
            for j in 0..nphi {
                let ph = 2.0 * PI * j as f64 / nphi as f64;
                verts.push(vec![rho * ph.cos(), rho * ph.sin(), 0.0]);
            }
        }
        for j in 0..nphi {
            let k = (j + 1) % nphi;
            tris.push([center, disk_ring[1] + k, disk_ring[1] + j]);
        }
        for i in 1..nr {
            for j in 0..nphi {
                let k = (j + 1) % nphi;
                let (a, b) = (disk_ring[i] + j, disk_ring[i] + k);
                let (c, d) = (disk_ring[i + 1] + k, disk_ring[i + 1] + j);
                tris.push([a, c, d]);
                tris.push([a, b, c]);
            }
        }
    } else {
        let south = verts.len();
        verts.push(vec![0.0, 0.0, -radius]);
        for j in 0..nphi {
            let k = (j + 1) % nphi;
            tris.push([south, ring_start(last) + k, ring_start(last) + j]);
        }
    }
    (verts, tris)
}
