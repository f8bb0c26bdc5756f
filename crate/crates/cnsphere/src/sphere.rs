//! Geometry of the round sphere: discrete grids, geodesic distances, the
//! quadratic transport cost, and normal-coordinate charts.
//!
//! Grids are finite node sets with quadrature weights and a symmetric
//! neighbor structure. S^1 uses equispaced angles; S^2 uses a subdivided
//! icosahedron. Weights are equal per node (total 2*pi or 4*pi): on S^1 this
//! is the exact trapezoid rule, and on S^2 the icosahedral symmetry of the
//! node set makes degree-1 spherical harmonics integrate to zero exactly,
//! while keeping the discrete problem mass-symmetric under the entropic
//! solver (per-node masses enter the Schroedinger potentials, so unequal
//! weights would bias fixed points away from symmetric solutions).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use ndarray::Array2;

use crate::{Error, Result};

/// Points closer than this to the cut locus (distance pi) are rejected by
/// the tangent charts.
pub const ANTIPODAL_TOL: f64 = 1e-6;

const UNIT_TOL: f64 = 1e-12;
const MAX_S1_NODES: usize = 4096;
const MAX_S2_LEVEL: usize = 4;

/// Which round sphere the model lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SphereDim {
    /// The circle S^1, embedded in the z = 0 plane of R^3.
    S1,
    /// The 2-sphere S^2 in R^3.
    S2,
}

impl SphereDim {
    pub fn try_from_u8(d: u8) -> Result<Self> {
        match d {
            1 => Ok(SphereDim::S1),
            2 => Ok(SphereDim::S2),
            other => Err(Error::Grid(format!("dim must be 1 or 2, got {other}"))),
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            SphereDim::S1 => 1,
            SphereDim::S2 => 2,
        }
    }

    /// Dimension of the tangent space (1 on the circle, 2 on the sphere).
    pub fn tangent_dim(self) -> usize {
        self.as_u8() as usize
    }

    /// Total Riemannian measure of the sphere.
    pub fn surface_measure(self) -> f64 {
        match self {
            SphereDim::S1 => 2.0 * PI,
            SphereDim::S2 => 4.0 * PI,
        }
    }
}

/// A point on the unit sphere, stored as a unit vector in R^3.
/// Points on S^1 keep z = 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpherePoint {
    coords: [f64; 3],
}

impl SpherePoint {
    /// Wraps coordinates that are already unit length (within 1e-12).
    pub fn new(coords: [f64; 3]) -> Result<Self> {
        let norm = (coords[0] * coords[0] + coords[1] * coords[1] + coords[2] * coords[2]).sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::OffSphere { norm });
        }
        Ok(SpherePoint { coords })
    }

    /// Projects nonzero coordinates onto the sphere.
    pub fn normalized(coords: [f64; 3]) -> Result<Self> {
        let norm = (coords[0] * coords[0] + coords[1] * coords[1] + coords[2] * coords[2]).sqrt();
        if norm < 1e-300 {
            return Err(Error::OffSphere { norm });
        }
        Ok(SpherePoint { coords: [coords[0] / norm, coords[1] / norm, coords[2] / norm] })
    }

    /// The S^1 point at angle theta (counterclockwise from the x-axis).
    pub fn from_angle(theta: f64) -> Self {
        SpherePoint { coords: [theta.cos(), theta.sin(), 0.0] }
    }

    pub fn coords(&self) -> [f64; 3] {
        self.coords
    }

    pub fn dot(&self, other: &SpherePoint) -> f64 {
        self.coords[0] * other.coords[0]
            + self.coords[1] * other.coords[1]
            + self.coords[2] * other.coords[2]
    }

    /// Angle in [0, 2*pi) for S^1 points.
    pub fn angle(&self) -> f64 {
        let a = self.coords[1].atan2(self.coords[0]);
        if a < 0.0 {
            a + 2.0 * PI
        } else {
            a
        }
    }
}

/// Geodesic distance d(p, q) = atan2(|p x q|, <p, q>). The two-argument
/// arctangent is exact for coincident points and keeps full precision near
/// both poles of the formula, where arccos of a rounded inner product loses
/// half the significant digits.
pub fn geodesic_distance(p: &SpherePoint, q: &SpherePoint) -> f64 {
    let a = p.coords();
    let b = q.coords();
    let cx = a[1] * b[2] - a[2] * b[1];
    let cy = a[2] * b[0] - a[0] * b[2];
    let cz = a[0] * b[1] - a[1] * b[0];
    let sin_d = (cx * cx + cy * cy + cz * cz).sqrt();
    sin_d.atan2(p.dot(q))
}

/// Quadratic transport cost c(p, q) = d(p, q)^2 / 2.
pub fn cost(p: &SpherePoint, q: &SpherePoint) -> f64 {
    let d = geodesic_distance(p, q);
    0.5 * d * d
}

/// A quadrature grid on S^1 or S^2 with symmetric neighbor structure.
#[derive(Clone, Debug)]
pub struct SphereGrid {
    dim: SphereDim,
    nodes: Vec<SpherePoint>,
    weights: Vec<f64>,
    /// adjacency[i] lists (j, omega_ij) with omega_ij = omega_ji > 0.
    adjacency: Vec<Vec<(usize, f64)>>,
    total_weight: f64,
}

impl SphereGrid {
    /// Builds a grid. On S^1 `resolution` is the node count (>= 4); on S^2
    /// it is the icosahedron subdivision level (>= 1), giving
    /// 10 * 4^level + 2 nodes.
    pub fn build(dim: SphereDim, resolution: usize) -> Result<SphereGrid> {
        match dim {
            SphereDim::S1 => Self::build_circle(resolution),
            SphereDim::S2 => Self::build_icosphere(resolution),
        }
    }

    fn build_circle(n: usize) -> Result<SphereGrid> {
        if n < 4 {
            return Err(Error::Grid(format!(
                "S^1 grid needs at least 4 nodes, got {n}"
            )));
        }
        if n > MAX_S1_NODES {
            return Err(Error::Grid(format!(
                "S^1 grid capped at {MAX_S1_NODES} nodes (dense matrices), got {n}"
            )));
        }
        let nodes: Vec<SpherePoint> =
            (0..n).map(|k| SpherePoint::from_angle(2.0 * PI * k as f64 / n as f64)).collect();
        let w = 2.0 * PI / n as f64;
        let weights = vec![w; n];
        let mut adjacency = vec![Vec::with_capacity(2); n];
        for i in 0..n {
            let j = (i + 1) % n;
            let len = geodesic_distance(&nodes[i], &nodes[j]);
            let omega = 0.5 * (weights[i] + weights[j]) / (len * len);
            adjacency[i].push((j, omega));
            adjacency[j].push((i, omega));
        }
        let total_weight = weights.iter().sum();
        Ok(SphereGrid { dim: SphereDim::S1, nodes, weights, adjacency, total_weight })
    }

    fn build_icosphere(level: usize) -> Result<SphereGrid> {
        if level < 1 {
            return Err(Error::Grid(
                "S^2 grid needs subdivision level >= 1 (42 nodes)".to_string(),
            ));
        }
        if level > MAX_S2_LEVEL {
            return Err(Error::Grid(format!(
                "S^2 subdivision capped at level {MAX_S2_LEVEL} (dense matrices), got {level}"
            )));
        }
        let (verts, faces) = icosphere_mesh(level);
        let n = verts.len();
        let nodes: Vec<SpherePoint> =
            verts.into_iter().map(|c| SpherePoint { coords: c }).collect();
        let w = 4.0 * PI / n as f64;
        let weights = vec![w; n];

        // Collect undirected mesh edges once.
        let mut seen: HashMap<(usize, usize), ()> = HashMap::new();
        let mut adjacency = vec![Vec::new(); n];
        for f in &faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (a.min(b), a.max(b));
                if seen.insert(key, ()).is_none() {
                    let len = geodesic_distance(&nodes[a], &nodes[b]);
                    let omega = 0.5 * (weights[a] + weights[b]) / (len * len);
                    adjacency[a].push((b, omega));
                    adjacency[b].push((a, omega));
                }
            }
        }
        let total_weight = weights.iter().sum();
        Ok(SphereGrid { dim: SphereDim::S2, nodes, weights, adjacency, total_weight })
    }

    pub fn dim(&self) -> SphereDim {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &SpherePoint {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[SpherePoint] {
        &self.nodes
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Measured total quadrature weight; stands in for the sphere measure
    /// |S| in all model constants.
    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    /// Quadrature of a node function against the grid measure.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    /// Writes nodes and weights as CSV with header `x,y,z,weight`.
    pub fn export_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "x,y,z,weight")?;
        for (p, w) in self.nodes.iter().zip(&self.weights) {
            let c = p.coords();
            writeln!(out, "{},{},{},{}", c[0], c[1], c[2], w)?;
        }
        Ok(())
    }
}

/// Vertices and faces of the icosahedron subdivided `level` times, with all
/// vertices projected onto the unit sphere. Vertex order is deterministic.
fn icosphere_mesh(level: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let t = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let raw: [[f64; 3]; 12] = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut verts: Vec<[f64; 3]> = raw.iter().map(|v| unit3(*v)).collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
                let key = (a.min(b), a.max(b));
                *midpoints.entry(key).or_insert_with(|| {
                    let m = [
                        verts[a][0] + verts[b][0],
                        verts[a][1] + verts[b][1],
                        verts[a][2] + verts[b][2],
                    ];
                    verts.push(unit3(m));
                    verts.len() - 1
                })
            };
            let (a, b, c) = (f[0], f[1], f[2]);
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    (verts, faces)
}

fn unit3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Dense matrix of pairwise transport costs c(x_i, x_j) over a grid.
/// Symmetric with zero diagonal; entries lie in [0, pi^2/2].
#[derive(Clone, Debug)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    pub fn from_grid(grid: &SphereGrid) -> CostMatrix {
        let n = grid.len();
        let mut values = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let c = cost(grid.node(i), grid.node(j));
                values[[i, j]] = c;
                values[[j, i]] = c;
            }
        }
        CostMatrix { values }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn view(&self) -> ndarray::ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |a, &b| a.max(b))
    }
}

/// Deterministic orthonormal tangent frame at `p`. On S^1 the single basis
/// vector is the counterclockwise unit tangent; on S^2 the frame comes from
/// Gram-Schmidt against a fixed helper axis (switched away from the poles).
pub fn tangent_frame(dim: SphereDim, p: &SpherePoint) -> [[f64; 3]; 2] {
    let c = p.coords();
    match dim {
        SphereDim::S1 => [[-c[1], c[0], 0.0], [0.0, 0.0, 0.0]],
        SphereDim::S2 => {
            let helper = if c[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
            let hp = helper[0] * c[0] + helper[1] * c[1] + helper[2] * c[2];
            let e1 = unit3([helper[0] - hp * c[0], helper[1] - hp * c[1], helper[2] - hp * c[2]]);
            let e2 = [
                c[1] * e1[2] - c[2] * e1[1],
                c[2] * e1[0] - c[0] * e1[2],
                c[0] * e1[1] - c[1] * e1[0],
            ];
            [e1, e2]
        }
    }
}

/// Riemannian logarithm of `q` at `base`, expressed in the deterministic
/// tangent frame. The returned coordinates have Euclidean norm equal to the
/// geodesic distance. Errors on (near-)antipodal inputs, where the chart
/// degenerates.
pub fn chart_log(dim: SphereDim, base: &SpherePoint, q: &SpherePoint) -> Result<[f64; 2]> {
    let cosd = base.dot(q).clamp(-1.0, 1.0);
    let d = cosd.acos();
    if d > PI - ANTIPODAL_TOL {
        return Err(Error::CutLocus { distance: d });
    }
    if d == 0.0 {
        return Ok([0.0, 0.0]);
    }
    // v = d * (q - cos(d) base) / sin(d) lies in T_base and |v| = d.
    let b = base.coords();
    let qq = q.coords();
    let sind = d.sin();
    let v = [
        d * (qq[0] - cosd * b[0]) / sind,
        d * (qq[1] - cosd * b[1]) / sind,
        d * (qq[2] - cosd * b[2]) / sind,
    ];
    let frame = tangent_frame(dim, base);
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    Ok([dot(v, frame[0]), dot(v, frame[1])])
}

/// Riemannian exponential at `base` of tangent coordinates `v` in the
/// deterministic frame. Errors when |v| reaches the cut locus.
pub fn chart_exp(dim: SphereDim, base: &SpherePoint, v: [f64; 2]) -> Result<SpherePoint> {
    let v = match dim {
        SphereDim::S1 => [v[0], 0.0],
        SphereDim::S2 => v,
    };
    let theta = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if theta > PI - ANTIPODAL_TOL {
        return Err(Error::CutLocus { distance: theta });
    }
    if theta == 0.0 {
        return Ok(*base);
    }
    let frame = tangent_frame(dim, base);
    let b = base.coords();
    let dir = [
        (v[0] * frame[0][0] + v[1] * frame[1][0]) / theta,
        (v[0] * frame[0][1] + v[1] * frame[1][1]) / theta,
        (v[0] * frame[0][2] + v[1] * frame[1][2]) / theta,
    ];
    let (s, c) = theta.sin_cos();
    SpherePoint::normalized([
        c * b[0] + s * dir[0],
        c * b[1] + s * dir[1],
        c * b[2] + s * dir[2],
    ])
}
