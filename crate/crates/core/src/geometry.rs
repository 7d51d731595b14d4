//! Lattice discretization of half-balls and balls, metric fields and annuli.
//!
//! Nodes live on the lattice `h·ℤⁿ`. A node is addressed either by its
//! position in the active list (all non-outside nodes, lexicographic order
//! with the first axis most significant) or by its index in the bounding box.

use nalgebra::DMatrix;
use thiserror::Error;

/// Sentinel for a missing neighbor.
pub const NONE: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension must be at least 2, got {0}")]
    Dimension(usize),
    #[error("invalid radius or spacing (r={r}, h={h})")]
    BadParameters { r: f64, h: f64 },
    #[error("spacing h={h} is too coarse for radius r={r} (need h <= r/2)")]
    TooCoarse { r: f64, h: f64 },
    #[error("annulus radii must satisfy 0 < R1 < R2 (got R1={r1}, R2={r2})")]
    AnnulusRadii { r1: f64, r2: f64 },
    #[error("point has dimension {got}, expected {expected}")]
    PointDimension { expected: usize, got: usize },
    #[error("metric at node {node} is not symmetric positive definite")]
    NotSpd { node: usize },
    #[error("metric data has length {got}, expected {expected}")]
    MetricLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Interior,
    FlatBoundary,
    SphericalBoundary,
    Outside,
}

impl NodeKind {
    pub fn label(self) -> &'static str {
        match self {
            NodeKind::Interior => "interior",
            NodeKind::FlatBoundary => "flat",
            NodeKind::SphericalBoundary => "sphere",
            NodeKind::Outside => "outside",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Some(match s {
            "interior" => NodeKind::Interior,
            "flat" => NodeKind::FlatBoundary,
            "sphere" => NodeKind::SphericalBoundary,
            "outside" => NodeKind::Outside,
            _ => return None,
        })
    }
}

/// Lattice discretization of `B(0,r)⁺` (when `half`) or `B(0,r)`.
#[derive(Debug, Clone)]
pub struct HalfBallGrid {
    n: usize,
    r: f64,
    h: f64,
    half: bool,
    m: i64,
    lo: Vec<i64>,
    dims: Vec<usize>,
    strides: Vec<usize>,
    box_node: Vec<u32>,
    nodes: Vec<usize>,
    kinds: Vec<NodeKind>,
    nbr: Vec<u32>,
}

impl PartialEq for HalfBallGrid {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.r.to_bits() == other.r.to_bits()
            && self.h.to_bits() == other.h.to_bits()
            && self.half == other.half
    }
}

/// Number of lattice steps per half-axis for radius `r` and spacing `h`.
fn steps(r: f64, h: f64) -> i64 {
    (r / h + 1e-9).floor() as i64
}

impl HalfBallGrid {
    pub fn new(n: usize, r: f64, h: f64, half: bool) -> Result<Self, GeometryError> {
        if n < 2 {
            return Err(GeometryError::Dimension(n));
        }
        if !(r.is_finite() && h.is_finite() && r > 0.0 && h > 0.0) {
            return Err(GeometryError::BadParameters { r, h });
        }
        if h > r / 2.0 * (1.0 + 1e-12) {
            return Err(GeometryError::TooCoarse { r, h });
        }
        let m = steps(r, h);
        let mut lo = vec![-m; n];
        if half {
            lo[n - 1] = 0;
        }
        let dims: Vec<usize> = lo.iter().map(|&l| (m - l + 1) as usize).collect();
        let mut strides = vec![1usize; n];
        for a in (0..n - 1).rev() {
            strides[a] = strides[a + 1] * dims[a + 1];
        }
        let total: usize = dims.iter().product();

        // Squared radius in lattice units, with a relative slack so that nodes
        // exactly on the sphere count as inside.
        let r2 = (r / h) * (r / h) * (1.0 + 1e-12);
        let inner2 = ((r - h / 2.0) / h).powi(2);
        let mut idx = vec![0i64; n];
        let mut inside = vec![false; total];
        for (b, slot) in inside.iter_mut().enumerate() {
            decode(b, &lo, &strides, &mut idx);
            let s: i64 = idx.iter().map(|&i| i * i).sum();
            *slot = (s as f64) <= r2;
        }

        let mut box_node = vec![NONE; total];
        let mut nodes = Vec::new();
        for b in 0..total {
            if inside[b] {
                box_node[b] = nodes.len() as u32;
                nodes.push(b);
            }
        }

        let probe = |b: usize, a: usize, delta: i64, idx: &[i64]| -> Option<usize> {
            let j = idx[a] + delta;
            if j < lo[a] || j > m {
                return None;
            }
            let nb = (b as i64 + delta * strides[a] as i64) as usize;
            inside[nb].then_some(nb)
        };

        let mut kinds = Vec::with_capacity(nodes.len());
        let mut nbr = Vec::with_capacity(nodes.len() * 2 * n);
        for &b in &nodes {
            decode(b, &lo, &strides, &mut idx);
            let s: i64 = idx.iter().map(|&i| i * i).sum();
            let strictly_inner = (s as f64) < inner2;
            let mut all = true;
            let mut flat_ok = true;
            for a in 0..n {
                let minus = probe(b, a, -1, &idx);
                let plus = probe(b, a, 1, &idx);
                nbr.push(minus.map_or(NONE, |x| box_node[x]));
                nbr.push(plus.map_or(NONE, |x| box_node[x]));
                all &= minus.is_some() && plus.is_some();
                if a < n - 1 {
                    flat_ok &= minus.is_some() && plus.is_some();
                } else {
                    flat_ok &= plus.is_some();
                }
            }
            let on_face = half && idx[n - 1] == 0;
            let kind = if on_face {
                if strictly_inner && flat_ok {
                    NodeKind::FlatBoundary
                } else {
                    NodeKind::SphericalBoundary
                }
            } else if strictly_inner && all {
                NodeKind::Interior
            } else {
                NodeKind::SphericalBoundary
            };
            kinds.push(kind);
        }

        Ok(HalfBallGrid {
            n,
            r,
            h,
            half,
            m,
            lo,
            dims,
            strides,
            box_node,
            nodes,
            kinds,
            nbr,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn half(&self) -> bool {
        self.half
    }
    /// Lattice steps per half-axis.
    pub fn m(&self) -> i64 {
        self.m
    }
    /// Number of active (non-outside) nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }
    pub fn lo(&self) -> &[i64] {
        &self.lo
    }
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }
    pub fn box_len(&self) -> usize {
        self.box_node.len()
    }
    pub fn kind(&self, node: usize) -> NodeKind {
        self.kinds[node]
    }
    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }
    /// Box index of an active node.
    pub fn box_index(&self, node: usize) -> usize {
        self.nodes[node]
    }
    /// Active node at a box index, if any.
    pub fn node_of_box(&self, b: usize) -> Option<usize> {
        let v = self.box_node[b];
        (v != NONE).then_some(v as usize)
    }

    pub fn index_into(&self, node: usize, out: &mut [i64]) {
        decode(self.nodes[node], &self.lo, &self.strides, out);
    }

    pub fn index(&self, node: usize) -> Vec<i64> {
        let mut v = vec![0; self.n];
        self.index_into(node, &mut v);
        v
    }

    pub fn point_into(&self, node: usize, out: &mut [f64]) {
        let mut b = self.nodes[node];
        for a in 0..self.n {
            let q = b / self.strides[a];
            b -= q * self.strides[a];
            out[a] = (q as i64 + self.lo[a]) as f64 * self.h;
        }
    }

    pub fn point(&self, node: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        self.point_into(node, &mut v);
        v
    }

    /// Box index of a multi-index, if inside the bounding box.
    pub fn box_of_index(&self, idx: &[i64]) -> Option<usize> {
        let mut b = 0usize;
        for a in 0..self.n {
            if idx[a] < self.lo[a] || idx[a] > self.m {
                return None;
            }
            b += (idx[a] - self.lo[a]) as usize * self.strides[a];
        }
        Some(b)
    }

    /// Active node at a multi-index.
    pub fn node_at(&self, idx: &[i64]) -> Option<usize> {
        self.box_of_index(idx).and_then(|b| self.node_of_box(b))
    }

    /// Nearest lattice node to a point, if active.
    pub fn nearest_node(&self, x: &[f64]) -> Option<usize> {
        let idx: Vec<i64> = x.iter().map(|&c| (c / self.h).round() as i64).collect();
        self.node_at(&idx)
    }

    /// Neighbor along `axis` in direction `dir` (−1 or +1).
    pub fn neighbor(&self, node: usize, axis: usize, dir: i32) -> Option<usize> {
        let v = self.nbr[node * 2 * self.n + 2 * axis + usize::from(dir > 0)];
        (v != NONE).then_some(v as usize)
    }

    /// Raw neighbor table: entry `2·axis` is the minus side, `2·axis+1` the plus side.
    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.nbr[node * 2 * self.n..(node + 1) * 2 * self.n]
    }

    /// True for nodes on the flat face `xₙ = 0` of a half grid.
    pub fn on_flat_face(&self, node: usize) -> bool {
        self.half && (self.nodes[node] % self.dims[self.n - 1]) as i64 + self.lo[self.n - 1] == 0
    }

    /// Euclidean quadrature weight: `hⁿ`, halved on the flat face of a half grid.
    pub fn weight(&self, node: usize) -> f64 {
        let w = self.h.powi(self.n as i32);
        if self.on_flat_face(node) {
            0.5 * w
        } else {
            w
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight(i)).collect()
    }

    /// Total Euclidean volume by quadrature.
    pub fn volume(&self) -> f64 {
        (0..self.len()).map(|i| self.weight(i)).sum()
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    /// Axis-aligned cell of a node, clipped to `xₙ ≥ 0` on the flat face.
    pub fn cell(&self, node: usize) -> (Vec<f64>, Vec<f64>) {
        let x = self.point(node);
        let hh = self.h / 2.0;
        let lo: Vec<f64> = x.iter().map(|c| c - hh).collect();
        let hi: Vec<f64> = x.iter().map(|c| c + hh).collect();
        let mut lo = lo;
        if self.on_flat_face(node) {
            lo[self.n - 1] = 0.0;
        }
        (lo, hi)
    }
}

fn decode(mut b: usize, lo: &[i64], strides: &[usize], out: &mut [i64]) {
    for a in 0..lo.len() {
        let q = b / strides[a];
        b -= q * strides[a];
        out[a] = q as i64 + lo[a];
    }
}

/// Full-ball grid with the same lattice as `grid`.
pub fn full_grid_like(grid: &HalfBallGrid) -> HalfBallGrid {
    HalfBallGrid::new(grid.n(), grid.r(), grid.h(), false).expect("parameters already validated")
}

/// For each node of `full`, the node of `half` at `(i', |iₙ|)`.
pub fn fold_map(full: &HalfBallGrid, half: &HalfBallGrid) -> Option<Vec<usize>> {
    let n = full.n();
    let mut idx = vec![0i64; n];
    (0..full.len())
        .map(|i| {
            full.index_into(i, &mut idx);
            idx[n - 1] = idx[n - 1].abs();
            half.node_at(&idx)
        })
        .collect()
}

/// Mirror node of each node under `xₙ ↦ −xₙ` (`NONE` if missing).
pub fn mirror_nodes(grid: &HalfBallGrid) -> Vec<u32> {
    let n = grid.n();
    let mut idx = vec![0i64; n];
    (0..grid.len())
        .map(|i| {
            grid.index_into(i, &mut idx);
            idx[n - 1] = -idx[n - 1];
            grid.node_at(&idx).map_or(NONE, |j| j as u32)
        })
        .collect()
}

/// Annulus `A(x₀,R₁,R₂) = {R₁ ≤ |x − x₀| < R₂}`, optionally clipped to `xₙ ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnulusSpec {
    pub center: Vec<f64>,
    pub r1: f64,
    pub r2: f64,
    pub clipped: bool,
}

impl AnnulusSpec {
    pub fn new(center: Vec<f64>, r1: f64, r2: f64, clipped: bool) -> Result<Self, GeometryError> {
        if !(r1 > 0.0 && r2 > r1 && r2.is_finite()) {
            return Err(GeometryError::AnnulusRadii { r1, r2 });
        }
        Ok(AnnulusSpec {
            center,
            r1,
            r2,
            clipped,
        })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let d = dist(x, &self.center);
        d >= self.r1 && d < self.r2 && (!self.clipped || x[x.len() - 1] >= 0.0)
    }
}

pub(crate) fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Active nodes lying in the annulus (node-center test).
pub fn annulus_mask(grid: &HalfBallGrid, spec: &AnnulusSpec) -> Result<Vec<usize>, GeometryError> {
    if spec.center.len() != grid.n() {
        return Err(GeometryError::PointDimension {
            expected: grid.n(),
            got: spec.center.len(),
        });
    }
    let mut x = vec![0.0; grid.n()];
    Ok((0..grid.len())
        .filter(|&i| {
            grid.point_into(i, &mut x);
            spec.contains(&x)
        })
        .collect())
}

/// Region used for restricted integrals.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Ball { center: Vec<f64>, radius: f64 },
    Annulus(AnnulusSpec),
}

impl Region {
    fn center(&self) -> &[f64] {
        match self {
            Region::Ball { center, .. } => center,
            Region::Annulus(a) => &a.center,
        }
    }

    fn outer(&self) -> f64 {
        match self {
            Region::Ball { radius, .. } => *radius,
            Region::Annulus(a) => a.r2,
        }
    }

    fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Ball { center, radius } => dist(x, center) < *radius,
            Region::Annulus(a) => a.contains(x),
        }
    }

    /// Classify a box against the region: Some(true) fully in, Some(false) fully out.
    fn classify(&self, lo: &[f64], hi: &[f64]) -> Option<bool> {
        let c = self.center();
        let (mut dmin, mut dmax) = (0.0f64, 0.0f64);
        for a in 0..c.len() {
            let near = c[a].clamp(lo[a], hi[a]) - c[a];
            let far = (lo[a] - c[a]).abs().max((hi[a] - c[a]).abs());
            dmin += near * near;
            dmax += far * far;
        }
        let (dmin, dmax) = (dmin.sqrt(), dmax.sqrt());
        match self {
            Region::Ball { radius, .. } => {
                if dmax < *radius {
                    Some(true)
                } else if dmin >= *radius {
                    Some(false)
                } else {
                    None
                }
            }
            Region::Annulus(a) => {
                let last = c.len() - 1;
                if a.clipped && hi[last] <= 0.0 && lo[last] < 0.0 {
                    return Some(false);
                }
                let half_ok = !a.clipped || lo[last] >= 0.0;
                if dmin >= a.r2 || dmax < a.r1 {
                    Some(false)
                } else if dmin >= a.r1 && dmax < a.r2 && half_ok {
                    Some(true)
                } else {
                    None
                }
            }
        }
    }
}

/// Per-node volume fractions of a region (cut-cell quadrature).
///
/// Cells cut by a region boundary are subsampled on a regular sub-lattice.
/// Only nodes with a positive fraction are returned, in node order.
pub fn region_fractions(grid: &HalfBallGrid, region: &Region) -> Vec<(usize, f64)> {
    let n = grid.n();
    let h = grid.h();
    let c = region.center();
    let reach = region.outer() + h;
    let mut lo_idx = vec![0i64; n];
    let mut hi_idx = vec![0i64; n];
    for a in 0..n {
        lo_idx[a] = (((c[a] - reach) / h).floor() as i64).max(grid.lo()[a]);
        hi_idx[a] = (((c[a] + reach) / h).ceil() as i64).min(grid.m());
        if lo_idx[a] > hi_idx[a] {
            return Vec::new();
        }
    }
    let sub: usize = match n {
        2 => 8,
        3 => 6,
        _ => 4,
    };
    let mut out = Vec::new();
    let mut idx = lo_idx.clone();
    let mut sample = vec![0.0; n];
    let mut digits = vec![0usize; n];
    loop {
        if let Some(node) = grid.node_at(&idx) {
            let (clo, chi) = grid.cell(node);
            let frac = match region.classify(&clo, &chi) {
                Some(true) => 1.0,
                Some(false) => 0.0,
                None => {
                    let total = sub.pow(n as u32);
                    let mut hits = 0usize;
                    for t in 0..total {
                        let mut q = t;
                        for a in (0..n).rev() {
                            digits[a] = q % sub;
                            q /= sub;
                        }
                        for a in 0..n {
                            let s = (digits[a] as f64 + 0.5) / sub as f64;
                            sample[a] = clo[a] + s * (chi[a] - clo[a]);
                        }
                        if region.contains(&sample) {
                            hits += 1;
                        }
                    }
                    hits as f64 / total as f64
                }
            };
            if frac > 0.0 {
                out.push((node, frac));
            }
        }
        // Odometer increment, last axis fastest.
        let mut a = n;
        loop {
            if a == 0 {
                out.sort_by_key(|e| e.0);
                return out;
            }
            a -= 1;
            if idx[a] < hi_idx[a] {
                idx[a] += 1;
                break;
            }
            idx[a] = lo_idx[a];
        }
    }
}

/// SPD metric per node, stored with inverse and volume factor.
#[derive(Debug, Clone)]
pub enum MetricField {
    Euclidean { n: usize },
    Field {
        n: usize,
        g: Vec<f64>,
        ginv: Vec<f64>,
        sqrt_det: Vec<f64>,
    },
}

impl MetricField {
    pub fn euclidean(n: usize) -> Self {
        MetricField::Euclidean { n }
    }

    /// Build from row-major `n×n` matrices, one per active node.
    pub fn from_matrices(grid: &HalfBallGrid, g: Vec<f64>) -> Result<Self, GeometryError> {
        let n = grid.n();
        let nn = n * n;
        if g.len() != grid.len() * nn {
            return Err(GeometryError::MetricLength {
                expected: grid.len() * nn,
                got: g.len(),
            });
        }
        let mut ginv = vec![0.0; g.len()];
        let mut sqrt_det = vec![0.0; grid.len()];
        for node in 0..grid.len() {
            let block = &g[node * nn..(node + 1) * nn];
            let scale = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let sym = (0..n).all(|i| {
                (0..n).all(|j| {
                    (block[i * n + j] - block[j * n + i]).abs() <= 1e-12 * scale.max(1e-300)
                })
            });
            if !sym || !block.iter().all(|v| v.is_finite()) {
                return Err(GeometryError::NotSpd { node });
            }
            let mat = DMatrix::from_row_slice(n, n, block);
            let chol = mat.cholesky().ok_or(GeometryError::NotSpd { node })?;
            let det: f64 = chol.l().diagonal().iter().map(|v| v * v).product();
            let inv = chol.inverse();
            for i in 0..n {
                for j in 0..n {
                    ginv[node * nn + i * n + j] = inv[(i, j)];
                }
            }
            sqrt_det[node] = det.sqrt();
        }
        Ok(MetricField::Field {
            n,
            g,
            ginv,
            sqrt_det,
        })
    }

    /// Sample a metric given as a function of position.
    pub fn from_fn<F>(grid: &HalfBallGrid, f: F) -> Result<Self, GeometryError>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut g = Vec::with_capacity(grid.len() * grid.n() * grid.n());
        let mut x = vec![0.0; grid.n()];
        for node in 0..grid.len() {
            grid.point_into(node, &mut x);
            g.extend(f(&x));
        }
        Self::from_matrices(grid, g)
    }

    /// Pull back the Euclidean metric through a map with Jacobian `jac(x)` (row-major `n×n`).
    pub fn pullback<F>(grid: &HalfBallGrid, jac: F) -> Result<Self, GeometryError>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let n = grid.n();
        Self::from_fn(grid, |x| {
            let j = jac(x);
            let mut g = vec![0.0; n * n];
            for a in 0..n {
                for b in 0..n {
                    g[a * n + b] = (0..n).map(|k| j[k * n + a] * j[k * n + b]).sum();
                }
            }
            g
        })
    }

    pub fn n(&self) -> usize {
        match self {
            MetricField::Euclidean { n } | MetricField::Field { n, .. } => *n,
        }
    }

    pub fn is_euclidean(&self) -> bool {
        matches!(self, MetricField::Euclidean { .. })
    }

    /// Inverse metric at a node, `None` meaning the identity.
    pub fn ginv(&self, node: usize) -> Option<&[f64]> {
        match self {
            MetricField::Euclidean { .. } => None,
            MetricField::Field { n, ginv, .. } => Some(&ginv[node * n * n..(node + 1) * n * n]),
        }
    }

    /// Metric matrix at a node (identity for Euclidean).
    pub fn g(&self, node: usize) -> Vec<f64> {
        match self {
            MetricField::Euclidean { n } => identity(*n),
            MetricField::Field { n, g, .. } => g[node * n * n..(node + 1) * n * n].to_vec(),
        }
    }

    pub fn sqrt_det(&self, node: usize) -> f64 {
        match self {
            MetricField::Euclidean { .. } => 1.0,
            MetricField::Field { sqrt_det, .. } => sqrt_det[node],
        }
    }

    /// Check that this metric can be used with `grid`.
    pub fn check(&self, grid: &HalfBallGrid) -> Result<(), GeometryError> {
        if self.n() != grid.n() {
            return Err(GeometryError::PointDimension {
                expected: grid.n(),
                got: self.n(),
            });
        }
        if let MetricField::Field { sqrt_det, .. } = self {
            if sqrt_det.len() != grid.len() {
                return Err(GeometryError::MetricLength {
                    expected: grid.len(),
                    got: sqrt_det.len(),
                });
            }
        }
        Ok(())
    }

    /// Smallest eigenvalue over all nodes (1 for Euclidean).
    pub fn min_eigenvalue(&self) -> f64 {
        match self {
            MetricField::Euclidean { .. } => 1.0,
            MetricField::Field { n, g, .. } => g
                .chunks(n * n)
                .map(|b| {
                    DMatrix::from_row_slice(*n, *n, b)
                        .symmetric_eigenvalues()
                        .min()
                })
                .fold(f64::INFINITY, f64::min),
        }
    }
}

pub(crate) fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_count(n: usize, r: f64, h: f64, half: bool) -> usize {
        let m = (r / h + 1e-9).floor() as i64;
        let mut count = 0;
        let span = (2 * m + 1) as usize;
        for t in 0..span.pow(n as u32) {
            let mut q = t;
            let mut s = 0.0;
            let mut last = 0;
            for _ in 0..n {
                let i = (q % span) as i64 - m;
                q /= span;
                s += (i as f64 * h).powi(2);
                last = i;
            }
            if half && last < 0 {
                continue;
            }
            if s <= r * r * (1.0 + 1e-12) {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn flat_nodes_of_coarse_half_disk() {
        let g = HalfBallGrid::new(2, 1.0, 0.5, true).unwrap();
        let flat: Vec<Vec<f64>> = (0..g.len())
            .filter(|&i| g.kind(i) == NodeKind::FlatBoundary)
            .map(|i| g.point(i))
            .collect();
        assert_eq!(flat, vec![vec![-0.5, 0.0], vec![0.0, 0.0], vec![0.5, 0.0]]);
    }

    #[test]
    fn too_coarse_rejected() {
        assert!(matches!(
            HalfBallGrid::new(2, 1.0, 1.0, true),
            Err(GeometryError::TooCoarse { .. })
        ));
        assert!(HalfBallGrid::new(1, 1.0, 0.1, true).is_err());
    }

    #[test]
    fn node_count_matches_lattice_scan() {
        for &(n, h, half) in &[(3, 0.25, false), (2, 0.1, true), (3, 0.2, true), (2, 1.0 / 16.0, false)] {
            let g = HalfBallGrid::new(n, 1.0, h, half).unwrap();
            assert_eq!(g.len(), brute_count(n, 1.0, h, half));
        }
    }

    #[test]
    fn mask_invariants() {
        for &half in &[true, false] {
            let g = HalfBallGrid::new(3, 1.0, 0.125, half).unwrap();
            for i in 0..g.len() {
                let x = g.point(i);
                let r = norm(&x);
                match g.kind(i) {
                    NodeKind::FlatBoundary => {
                        assert!(x[2].abs() <= g.h() / 2.0 && r < 1.0);
                    }
                    NodeKind::Interior => {
                        assert!(r < 1.0 - g.h() / 2.0);
                        if half {
                            assert!(x[2] > 0.0);
                        }
                    }
                    NodeKind::SphericalBoundary => assert!(r <= 1.0 + 1e-12),
                    NodeKind::Outside => unreachable!(),
                }
            }
            if !half {
                assert_eq!(g.count(NodeKind::FlatBoundary), 0);
            }
        }
    }

    #[test]
    fn refinement_quadruples_interior() {
        let coarse = HalfBallGrid::new(2, 1.0, 1.0 / 16.0, true).unwrap();
        let fine = HalfBallGrid::new(2, 1.0, 1.0 / 32.0, true).unwrap();
        assert!(fine.count(NodeKind::Interior) >= 4 * coarse.count(NodeKind::Interior));
    }

    #[test]
    fn neighbors_are_lattice_adjacent() {
        let g = HalfBallGrid::new(2, 1.0, 0.125, true).unwrap();
        for i in 0..g.len() {
            let xi = g.index(i);
            for a in 0..2 {
                for dir in [-1, 1] {
                    if let Some(j) = g.neighbor(i, a, dir) {
                        let mut xj = xi.clone();
                        xj[a] += dir as i64;
                        assert_eq!(g.index(j), xj);
                    }
                }
            }
        }
    }

    #[test]
    fn annulus_mask_matches_distance_test() {
        let g = HalfBallGrid::new(2, 1.0, 1.0 / 16.0, false).unwrap();
        let spec = AnnulusSpec::new(vec![0.0, 0.0], 0.25, 0.5, false).unwrap();
        let mask = annulus_mask(&g, &spec).unwrap();
        let mut brute = 0;
        for i in -16i64..=16 {
            for j in -16i64..=16 {
                let d = ((i * i + j * j) as f64).sqrt() / 16.0;
                if (0.25..0.5).contains(&d) {
                    brute += 1;
                }
            }
        }
        assert_eq!(mask.len(), brute);
    }

    #[test]
    fn annulus_outside_grid_is_empty() {
        let g = HalfBallGrid::new(2, 1.0, 0.125, true).unwrap();
        let spec = AnnulusSpec::new(vec![5.0, 5.0], 0.5, 1.0, true).unwrap();
        assert!(annulus_mask(&g, &spec).unwrap().is_empty());
        assert!(AnnulusSpec::new(vec![0.0, 0.0], 0.5, 0.5, true).is_err());
    }

    #[test]
    fn cut_cell_ball_area() {
        let g = HalfBallGrid::new(2, 1.0, 1.0 / 32.0, false).unwrap();
        let fr = region_fractions(
            &g,
            &Region::Ball {
                center: vec![0.1, -0.05],
                radius: 0.6,
            },
        );
        let area: f64 = fr.iter().map(|(i, f)| f * g.weight(*i)).sum();
        let exact = std::f64::consts::PI * 0.36;
        assert!((area - exact).abs() / exact < 2e-3, "{area} vs {exact}");
    }

    #[test]
    fn euclidean_and_field_metrics() {
        let g = HalfBallGrid::new(2, 1.0, 0.25, true).unwrap();
        let e = MetricField::euclidean(2);
        assert_eq!(e.sqrt_det(3), 1.0);
        assert!(e.ginv(0).is_none());
        let f = MetricField::from_fn(&g, |x| vec![1.0 + x[0] * x[0], 0.0, 0.0, 1.0 + x[0] * x[0]]).unwrap();
        assert!(f.min_eigenvalue() > 0.0);
        let bad = MetricField::from_fn(&g, |_| vec![1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(bad, Err(GeometryError::NotSpd { .. })));
        let asym = MetricField::from_fn(&g, |_| vec![1.0, 0.1, 0.0, 1.0]);
        assert!(asym.is_err());
    }
}
