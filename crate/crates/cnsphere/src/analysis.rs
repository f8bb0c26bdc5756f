//! Verification layer: a priori bounds, the linearized equilibrium operator,
//! and the cost-curvature (regularity) check.
//!
//! Everything here runs *at* a solved equilibrium and certifies properties
//! the solver itself never assumed: oscillation and density bounds, spectral
//! invertibility of the linearization L = A - diag(h) - diag(h) J A (A the
//! source-weighted grid Laplacian, J the interaction Jacobian along the
//! transport map), and nonnegativity of the fourth-order cost-curvature
//! tensor on orthogonal direction pairs, evaluated by finite differences in
//! normal coordinates.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::equilibrium::EquilibriumResult;
use crate::model::{h_max, nu_bounds, DiscreteMeasure, Scenario, COST_OSC};
use crate::sphere::{chart_exp, cost, SphereDim, SphereGrid, SpherePoint};
use crate::transport::TransportMap;
use crate::{Error, Result};

/// Admissible finite-difference steps for the curvature check.
pub const FD_STEP_MIN: f64 = 1e-3;
pub const FD_STEP_MAX: f64 = 1e-1;
/// Tangent directions probed per sampled point pair.
const MTW_DIRECTIONS: usize = 16;
/// Sampled pairs keep geodesic distance in [this, pi - this].
const MTW_DISTANCE_MARGIN: f64 = 0.2;

/// Graph Laplacian of the grid in the source-measure geometry:
/// (A eta)_i = (1/mu_i) sum_{j ~ i} omega_ij (eta_j - eta_i), with omega the
/// grid edge weights and mu_i the source masses. Self-adjoint and negative
/// semidefinite in the mu-weighted inner product, with constants in its
/// kernel.
pub fn build_laplacian(grid: &SphereGrid, mu: &DiscreteMeasure) -> Result<Array2<f64>> {
    let masses = mu.masses();
    if masses.len() != grid.len() {
        return Err(Error::ModelParameter(format!(
            "measure has {} nodes but the grid has {}",
            masses.len(),
            grid.len()
        )));
    }
    let adjacency: Vec<Vec<(usize, f64)>> =
        (0..grid.len()).map(|i| grid.neighbors(i).to_vec()).collect();
    laplacian_from_adjacency(&masses, &adjacency)
}

pub(crate) fn laplacian_from_adjacency(
    masses: &[f64],
    adjacency: &[Vec<(usize, f64)>],
) -> Result<Array2<f64>> {
    let n = masses.len();
    // The Laplacian only sees one graph component; reject the rest.
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for &(j, _) in &adjacency[i] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    if let Some(node) = seen.iter().position(|s| !s) {
        return Err(Error::Disconnected { node });
    }
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for &(j, omega) in &adjacency[i] {
            a[[i, j]] += omega / masses[i];
            a[[i, i]] -= omega / masses[i];
        }
    }
    Ok(a)
}

/// The linearization of the equilibrium system at a solution, in source-node
/// coordinates.
#[derive(Clone, Debug)]
pub struct LinearizedOperator {
    /// L = A - diag(h) - diag(h) J A.
    pub matrix: Array2<f64>,
    /// The grid Laplacian A.
    pub laplacian: Array2<f64>,
    /// h_i = h(Q_i): congestion response along the map.
    pub h: Vec<f64>,
    /// J_iz = phi(T x_i, T x_z) mu_z: interaction Jacobian along the map.
    pub interaction_jacobian: Array2<f64>,
    /// Q_i = -u_i - c(x_i, T x_i) - (phi * nu)(T x_i) - V(T x_i), the
    /// congestion value f(nu) seen through the map.
    pub q: Vec<f64>,
    /// Source masses, defining the weighted operator norms.
    pub mu_masses: Vec<f64>,
}

/// Assembles the linearized operator at a solved equilibrium. Refuses to
/// linearize when the equilibrium residual exceeds the grid-scale threshold:
/// the expansion is only meaningful at a genuine solution.
pub fn assemble_linearized(
    scenario: &Scenario,
    result: &EquilibriumResult,
) -> Result<LinearizedOperator> {
    let grid = scenario.grid();
    let n = grid.len();
    let threshold = residual_threshold(scenario.solver().eps_final(), n);
    if result.residual > threshold {
        return Err(Error::NotConverged { residual: result.residual, threshold });
    }

    let laplacian = build_laplacian(grid, scenario.mu())?;
    let mu_masses = scenario.mu().masses();
    let phi = scenario.phi_matrix();
    let v_values = scenario.v_values();
    let cost_m = scenario.cost();
    let map = &result.map;

    let mut q = Vec::with_capacity(n);
    for i in 0..n {
        let ti = map.assignment[i];
        let mut conv = 0.0;
        for z in 0..n {
            conv += phi[[ti, map.assignment[z]]] * mu_masses[z];
        }
        q.push(-result.u[i] - cost_m.get(i, ti) - conv - v_values[ti]);
    }
    let h: Vec<f64> = q.iter().map(|&qi| scenario.congestion().h(qi)).collect();

    let jac = Array2::from_shape_fn((n, n), |(i, z)| {
        phi[[map.assignment[i], map.assignment[z]]] * mu_masses[z]
    });

    // L = A - diag(h) - diag(h) J A
    let ja = jac.dot(&laplacian);
    let mut matrix = laplacian.clone();
    for i in 0..n {
        matrix[[i, i]] -= h[i];
        for z in 0..n {
            matrix[[i, z]] -= h[i] * ja[[i, z]];
        }
    }

    Ok(LinearizedOperator { matrix, laplacian, h, interaction_jacobian: jac, q, mu_masses })
}

/// Grid-scale slack on the equilibrium residual: 5 eps ln N plus a fixed
/// quadrature allowance. Sharp bounds are verified up to this.
pub fn residual_threshold(eps_min: f64, n: usize) -> f64 {
    5.0 * eps_min * (n as f64).ln() + 1e-6
}

/// Operator norm of diag(h) J in the mu-weighted L^2 norm, computed as the
/// largest singular value of D^{1/2} (diag(h) J) D^{-1/2}, D = diag(mu).
/// Cauchy-Schwarz bounds this by max h * ||phi||_inf, which is what the
/// invertibility condition controls.
pub fn hj_norm(op: &LinearizedOperator) -> f64 {
    let n = op.h.len();
    let m = DMatrix::from_fn(n, n, |i, z| {
        let scale = (op.mu_masses[i] / op.mu_masses[z]).sqrt();
        scale * op.h[i] * op.interaction_jacobian[[i, z]]
    });
    m.svd(false, false).singular_values.iter().cloned().fold(0.0, f64::max)
}

/// Spectral kernel check of the linearized operator.
#[derive(Clone, Debug, Serialize)]
pub struct KernelReport {
    pub min_singular: f64,
    pub max_singular: f64,
    /// True when the smallest singular value clears 1e-10 * the largest:
    /// the operator has trivial kernel at working precision.
    pub invertible: bool,
}

pub fn kernel_check(op: &LinearizedOperator) -> KernelReport {
    // Singular values taken in the mu-weighted norm via the similarity
    // D^{1/2} L D^{-1/2}; invertibility is similarity-invariant.
    let n = op.h.len();
    let m = DMatrix::from_fn(n, n, |i, z| {
        let scale = (op.mu_masses[i] / op.mu_masses[z]).sqrt();
        scale * op.matrix[[i, z]]
    });
    let sv = m.svd(false, false).singular_values;
    let max_singular = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min_singular = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    KernelReport { min_singular, max_singular, invertible: min_singular > 1e-10 * max_singular }
}

/// A priori estimate verification at a solved equilibrium.
#[derive(Clone, Debug, Serialize)]
pub struct AprioriReport {
    /// Oscillation of the source potential u.
    pub osc_u: f64,
    /// Theoretical bound pi^2 / 2 plus the grid-scale slack.
    pub osc_u_bound: f64,
    pub nu_min: f64,
    pub nu_max: f64,
    /// A priori density bounds from the congestion inverse.
    pub nu_lower: f64,
    pub nu_upper: f64,
    pub max_displacement: f64,
    /// Displacement must stay short of the cut locus.
    pub displacement_bound: f64,
    /// 1 - h_max * ||phi||_inf.
    pub condition_margin: f64,
    pub h_max: f64,
    pub phi_sup_norm: f64,
    pub phi_osc: f64,
    /// Grid-scale slack 5 * eps_min * ln N + 1e-6 applied to sharp bounds.
    pub delta_grid: f64,
    pub osc_u_pass: bool,
    pub density_pass: bool,
    pub displacement_pass: bool,
}

impl AprioriReport {
    pub fn all_pass(&self) -> bool {
        self.osc_u_pass && self.density_pass && self.displacement_pass
    }
}

/// Checks every a priori estimate at a solution: potential oscillation,
/// density bounds, displacement short of the cut locus.
pub fn verify_apriori(
    scenario: &Scenario,
    nu: &DiscreteMeasure,
    u: &[f64],
    map: &TransportMap,
    eps_min: f64,
) -> AprioriReport {
    let grid = scenario.grid();
    let n = grid.len();
    let delta_grid = residual_threshold(eps_min, n);

    let osc_u = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - u.iter().cloned().fold(f64::INFINITY, f64::min);
    let osc_u_bound = COST_OSC + delta_grid;

    let nu_min = nu.density().iter().cloned().fold(f64::INFINITY, f64::min);
    let nu_max = nu.density().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (nu_lower, nu_upper) =
        nu_bounds(scenario.congestion(), scenario.interaction(), scenario.potential(), grid);

    let max_displacement = map.max_displacement();
    let displacement_bound = PI - 1e-3;

    let hm = h_max(scenario.congestion(), scenario.interaction(), scenario.potential(), grid);
    let phi_sup_norm = scenario.interaction().sup_norm();
    let phi = scenario.phi_matrix();
    let phi_osc = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - phi.iter().cloned().fold(f64::INFINITY, f64::min);

    AprioriReport {
        osc_u,
        osc_u_bound,
        nu_min,
        nu_max,
        nu_lower,
        nu_upper,
        max_displacement,
        displacement_bound,
        condition_margin: 1.0 - hm * phi_sup_norm,
        h_max: hm,
        phi_sup_norm,
        phi_osc,
        delta_grid,
        osc_u_pass: osc_u <= osc_u_bound,
        density_pass: nu_min >= nu_lower - delta_grid && nu_max <= nu_upper + delta_grid,
        displacement_pass: max_displacement <= displacement_bound,
    }
}

/// Cost-curvature (fourth-order regularity) check.
#[derive(Clone, Debug, Serialize)]
pub struct MtwReport {
    pub samples: usize,
    /// Smallest quadratic-form value over all sampled pairs and directions.
    pub min_value: f64,
    pub mean_value: f64,
    pub fd_step: f64,
    /// Finite-difference truncation allowance (scales with step^2).
    pub tolerance: f64,
    pub nonnegative: bool,
}

/// Estimates the cost-curvature tensor of c = d^2/2 at randomly sampled
/// point pairs by central finite differences in normal-coordinate charts,
/// and minimizes its quadratic form over orthogonal unit direction pairs.
/// Only meaningful on S^2: the circle has no orthogonal tangent pairs.
pub fn mtw_check(grid: &SphereGrid, samples: usize, fd_step: f64, seed: u64) -> Result<MtwReport> {
    if grid.dim() == SphereDim::S1 {
        return Err(Error::MtwVacuousOnCircle);
    }
    if !(FD_STEP_MIN..=FD_STEP_MAX).contains(&fd_step) {
        return Err(Error::FdStep { value: fd_step, lo: FD_STEP_MIN, hi: FD_STEP_MAX });
    }
    if samples == 0 {
        return Err(Error::Config("curvature check needs at least one sample".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_value = f64::INFINITY;
    let mut sum = 0.0;
    for _ in 0..samples {
        let (x, y) = sample_pair(&mut rng)?;
        let v = mtw_min_at_pair(&x, &y, fd_step)?;
        min_value = min_value.min(v);
        sum += v;
    }
    let tolerance = 10.0 * fd_step * fd_step;
    Ok(MtwReport {
        samples,
        min_value,
        mean_value: sum / samples as f64,
        fd_step,
        tolerance,
        nonnegative: min_value >= -tolerance,
    })
}

fn random_sphere_point(rng: &mut ChaCha8Rng) -> SpherePoint {
    // Marsaglia's method: uniform on S^2 without a normal sampler.
    loop {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        let s = u * u + v * v;
        if s < 1.0 && s > 1e-12 {
            let factor = 2.0 * (1.0 - s).sqrt();
            return SpherePoint::normalized([u * factor, v * factor, 1.0 - 2.0 * s])
                .expect("construction is unit length");
        }
    }
}

fn sample_pair(rng: &mut ChaCha8Rng) -> Result<(SpherePoint, SpherePoint)> {
    for _ in 0..10_000 {
        let x = random_sphere_point(rng);
        let y = random_sphere_point(rng);
        let d = crate::sphere::geodesic_distance(&x, &y);
        if (MTW_DISTANCE_MARGIN..=PI - MTW_DISTANCE_MARGIN).contains(&d) {
            return Ok((x, y));
        }
    }
    Err(Error::Config("could not sample a point pair away from the cut locus".into()))
}

/// 3^4 table of cost values over {-h, 0, h} offsets in both charts.
type CostTable = [[[[f64; 3]; 3]; 3]; 3];

fn cost_table(x: &SpherePoint, y: &SpherePoint, h: f64) -> Result<CostTable> {
    let offs = [-h, 0.0, h];
    let mut xs = [[*x; 3]; 3];
    let mut ys = [[*y; 3]; 3];
    for (i, &oi) in offs.iter().enumerate() {
        for (j, &oj) in offs.iter().enumerate() {
            xs[i][j] = chart_exp(SphereDim::S2, x, [oi, oj])?;
            ys[i][j] = chart_exp(SphereDim::S2, y, [oi, oj])?;
        }
    }
    let mut table = [[[[0.0; 3]; 3]; 3]; 3];
    for a1 in 0..3 {
        for a2 in 0..3 {
            for b1 in 0..3 {
                for b2 in 0..3 {
                    table[a1][a2][b1][b2] = cost(&xs[a1][a2], &ys[b1][b2]);
                }
            }
        }
    }
    Ok(table)
}

/// Central-difference weights over {-h, 0, h} for derivative `order` 0..=2.
fn deriv_weights(order: usize, h: f64) -> [f64; 3] {
    match order {
        0 => [0.0, 1.0, 0.0],
        1 => [-0.5 / h, 0.0, 0.5 / h],
        2 => [1.0 / (h * h), -2.0 / (h * h), 1.0 / (h * h)],
        _ => unreachable!("derivative order is at most 2 per axis"),
    }
}

/// Derivative orders per chart axis for differentiating in directions i, j
/// (either may repeat).
fn axis_orders(indices: &[usize]) -> (usize, usize) {
    let a0 = indices.iter().filter(|&&k| k == 0).count();
    let a1 = indices.iter().filter(|&&k| k == 1).count();
    (a0, a1)
}

fn apply_stencil(table: &CostTable, h: f64, a_idx: &[usize], b_idx: &[usize]) -> f64 {
    let (a0, a1) = axis_orders(a_idx);
    let (b0, b1) = axis_orders(b_idx);
    let wa1 = deriv_weights(a0, h);
    let wa2 = deriv_weights(a1, h);
    let wb1 = deriv_weights(b0, h);
    let wb2 = deriv_weights(b1, h);
    let mut s = 0.0;
    for p in 0..3 {
        if wa1[p] == 0.0 {
            continue;
        }
        for q in 0..3 {
            if wa2[q] == 0.0 {
                continue;
            }
            for r in 0..3 {
                if wb1[r] == 0.0 {
                    continue;
                }
                for t in 0..3 {
                    if wb2[t] == 0.0 {
                        continue;
                    }
                    s += wa1[p] * wa2[q] * wb1[r] * wb2[t] * table[p][q][r][t];
                }
            }
        }
    }
    s
}

/// Full cost-curvature tensor S[i][j][k][l] at the pair (x, y), with every
/// index expressed in the x-chart: the y-indices of the raw tensor
/// -c_(ij),(pr) + c_(ij),s c^(s,m) c_m,(pr) are raised through the inverse
/// mixed Hessian.
pub(crate) fn mtw_tensor(
    x: &SpherePoint,
    y: &SpherePoint,
    h: f64,
) -> Result<[[[[f64; 2]; 2]; 2]; 2]> {
    let table = cost_table(x, y, h)?;

    // Mixed Hessian E[s][m] = d_a_s d_b_m c and its inverse G (EG = GE = I).
    let mut e = [[0.0; 2]; 2];
    for s in 0..2 {
        for m in 0..2 {
            e[s][m] = apply_stencil(&table, h, &[s], &[m]);
        }
    }
    let det = e[0][0] * e[1][1] - e[0][1] * e[1][0];
    if det.abs() < 1e-12 {
        return Err(Error::NonFinite { context: "cost mixed Hessian is singular" });
    }
    let g = [[e[1][1] / det, -e[0][1] / det], [-e[1][0] / det, e[0][0] / det]];

    let mut tensor = [[[[0.0; 2]; 2]; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for p in 0..2 {
                for r in 0..2 {
                    let c4 = apply_stencil(&table, h, &[i, j], &[p, r]);
                    let mut correction = 0.0;
                    for s in 0..2 {
                        for m in 0..2 {
                            let c3a = apply_stencil(&table, h, &[i, j], &[s]);
                            let c3b = apply_stencil(&table, h, &[m], &[p, r]);
                            correction += c3a * g[s][m] * c3b;
                        }
                    }
                    // Raw tensor entry with y-indices p, r.
                    let b = -c4 + correction;
                    for k in 0..2 {
                        for l in 0..2 {
                            tensor[i][j][k][l] += b * g[p][k] * g[r][l];
                        }
                    }
                }
            }
        }
    }
    Ok(tensor)
}

/// Minimum of the curvature quadratic form over orthogonal unit pairs at one
/// point pair.
pub(crate) fn mtw_min_at_pair(x: &SpherePoint, y: &SpherePoint, h: f64) -> Result<f64> {
    let tensor = mtw_tensor(x, y, h)?;
    let mut min_value = f64::INFINITY;
    for step in 0..MTW_DIRECTIONS {
        let theta = PI * step as f64 / MTW_DIRECTIONS as f64;
        let tau = [theta.cos(), theta.sin()];
        let xi = [-theta.sin(), theta.cos()];
        let mut v = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        v += tensor[i][j][k][l] * xi[i] * xi[j] * tau[k] * tau[l];
                    }
                }
            }
        }
        min_value = min_value.min(v);
    }
    Ok(min_value)
}
