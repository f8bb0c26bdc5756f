//! Model data for the equilibrium problem: congestion penalties, interaction
//! kernels, external potentials, discrete measures, and the derived
//! quantities the estimates are built from (marginal cost field, total
//! energy, a priori density bounds, and the congestion response factor h).
//!
//! Congestion functions satisfy the Inada-type conditions: strictly
//! increasing, f(0+) = -inf, f(+inf) = +inf. The response factor
//! h(q) = (f^-1)'(q) / f^-1(q) controls invertibility of the linearized
//! operator; both built-in families have t f'(t) = alpha + beta t, so
//! h(q) = 1 / (alpha + beta f^-1(q)), identically 1 for the log family.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::sphere::{geodesic_distance, CostMatrix, SphereGrid, SpherePoint};
use crate::{Error, Result};

/// Oscillation of the quadratic cost over the whole sphere: c ranges over
/// [0, pi^2/2] regardless of dimension.
pub const COST_OSC: f64 = PI * PI / 2.0;

/// Congestion penalty f applied to the equilibrium density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CongestionFn {
    /// f(t) = ln t.
    Log,
    /// f(t) = alpha ln t + beta t with alpha > 0, beta >= 0.
    LogLinear { alpha: f64, beta: f64 },
}

impl CongestionFn {
    pub fn log_linear(alpha: f64, beta: f64) -> Result<CongestionFn> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::ModelParameter(format!(
                "log-linear congestion needs alpha > 0, got {alpha}"
            )));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::ModelParameter(format!(
                "log-linear congestion needs beta >= 0, got {beta}"
            )));
        }
        Ok(CongestionFn::LogLinear { alpha, beta })
    }

    pub(crate) fn slopes(&self) -> (f64, f64) {
        match *self {
            CongestionFn::Log => (1.0, 0.0),
            CongestionFn::LogLinear { alpha, beta } => (alpha, beta),
        }
    }

    /// f(t) for t > 0.
    pub fn value(&self, t: f64) -> f64 {
        let (alpha, beta) = self.slopes();
        alpha * t.ln() + beta * t
    }

    /// f'(t) = alpha/t + beta.
    pub fn derivative(&self, t: f64) -> f64 {
        let (alpha, beta) = self.slopes();
        alpha / t + beta
    }

    /// f^-1(s), the positive root of f(t) = s. Solved in x = ln t, where
    /// g(x) = alpha x + beta e^x - s is increasing and convex; bracketed
    /// bisection is exact enough for all downstream tolerances.
    pub fn inverse(&self, s: f64) -> f64 {
        let (alpha, beta) = self.slopes();
        if beta == 0.0 {
            return (s / alpha).exp();
        }
        let g = |x: f64| {
            if x > 700.0 {
                f64::INFINITY
            } else {
                alpha * x + beta * x.exp() - s
            }
        };
        let mut lo = (s / alpha).min((s.max(1e-300) / beta).ln()) - 2.0;
        let mut hi = lo + 4.0;
        while g(lo) > 0.0 {
            lo -= 8.0;
        }
        while g(hi) < 0.0 {
            hi += 8.0;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if g(mid) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi)).exp()
    }

    /// Antiderivative F with F(t) -> 0 as t -> 0+:
    /// F(t) = alpha (t ln t - t) + beta t^2 / 2.
    pub fn antiderivative(&self, t: f64) -> f64 {
        let (alpha, beta) = self.slopes();
        if t == 0.0 {
            return 0.0;
        }
        alpha * (t * t.ln() - t) + 0.5 * beta * t * t
    }

    /// Congestion response h(q) = (f^-1)'(q) / f^-1(q) = 1 / (alpha + beta f^-1(q)).
    pub fn h(&self, q: f64) -> f64 {
        let (alpha, beta) = self.slopes();
        if beta == 0.0 {
            return 1.0 / alpha;
        }
        1.0 / (alpha + beta * self.inverse(q))
    }
}

/// Symmetric interaction kernel phi(y, z), a function of geodesic distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InteractionKernel {
    Zero,
    /// phi = amplitude * cos d(y, z); equals amplitude * <y, z>.
    Cosine { amplitude: f64 },
    /// phi = amplitude * exp(-d(y, z)^2 / sigma^2), sigma > 0.
    Gaussian { amplitude: f64, sigma: f64 },
}

impl InteractionKernel {
    pub fn gaussian(amplitude: f64, sigma: f64) -> Result<InteractionKernel> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::ModelParameter(format!(
                "gaussian kernel needs sigma > 0, got {sigma}"
            )));
        }
        if !amplitude.is_finite() {
            return Err(Error::ModelParameter("gaussian amplitude must be finite".into()));
        }
        Ok(InteractionKernel::Gaussian { amplitude, sigma })
    }

    pub fn cosine(amplitude: f64) -> Result<InteractionKernel> {
        if !amplitude.is_finite() {
            return Err(Error::ModelParameter("cosine amplitude must be finite".into()));
        }
        Ok(InteractionKernel::Cosine { amplitude })
    }

    pub fn eval(&self, p: &SpherePoint, q: &SpherePoint) -> f64 {
        match *self {
            InteractionKernel::Zero => 0.0,
            InteractionKernel::Cosine { amplitude } => amplitude * p.dot(q).clamp(-1.0, 1.0),
            InteractionKernel::Gaussian { amplitude, sigma } => {
                let d = geodesic_distance(p, q);
                amplitude * (-d * d / (sigma * sigma)).exp()
            }
        }
    }

    /// Sup norm ||phi||_inf over the sphere; both families peak at d = 0.
    pub fn sup_norm(&self) -> f64 {
        match *self {
            InteractionKernel::Zero => 0.0,
            InteractionKernel::Cosine { amplitude } => amplitude.abs(),
            InteractionKernel::Gaussian { amplitude, .. } => amplitude.abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sup_norm() == 0.0
    }

    /// Dense kernel matrix phi(y_i, y_j) over grid nodes.
    pub fn matrix(&self, grid: &SphereGrid) -> Array2<f64> {
        let n = grid.len();
        let mut m = Array2::zeros((n, n));
        if self.is_zero() {
            return m;
        }
        for i in 0..n {
            m[[i, i]] = self.eval(grid.node(i), grid.node(i));
            for j in (i + 1)..n {
                let v = self.eval(grid.node(i), grid.node(j));
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        m
    }
}

/// External potential V on the sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Potential {
    Zero,
    /// V(y) = amplitude * <y, axis> with a unit axis.
    Linear { amplitude: f64, axis: [f64; 3] },
}

impl Potential {
    pub fn linear(amplitude: f64, axis: [f64; 3]) -> Result<Potential> {
        if !amplitude.is_finite() {
            return Err(Error::ModelParameter("potential amplitude must be finite".into()));
        }
        let p = SpherePoint::normalized(axis)?;
        Ok(Potential::Linear { amplitude, axis: p.coords() })
    }

    pub fn eval(&self, p: &SpherePoint) -> f64 {
        match *self {
            Potential::Zero => 0.0,
            Potential::Linear { amplitude, axis } => {
                let c = p.coords();
                amplitude * (c[0] * axis[0] + c[1] * axis[1] + c[2] * axis[2])
            }
        }
    }

    pub fn values(&self, grid: &SphereGrid) -> Vec<f64> {
        grid.nodes().iter().map(|p| self.eval(p)).collect()
    }

    /// Oscillation max - min over grid nodes.
    pub fn osc_on(&self, grid: &SphereGrid) -> f64 {
        match self {
            Potential::Zero => 0.0,
            _ => {
                let vals = self.values(grid);
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                max - min
            }
        }
    }
}

/// A probability measure on a grid, stored as a strictly positive density
/// against the grid's quadrature measure. Mass is 1 within 1e-10.
#[derive(Clone, Debug)]
pub struct DiscreteMeasure {
    grid: Arc<SphereGrid>,
    density: Array1<f64>,
}

pub const MASS_TOL: f64 = 1e-10;

impl DiscreteMeasure {
    /// The uniform probability density 1/|S|.
    pub fn uniform(grid: Arc<SphereGrid>) -> DiscreteMeasure {
        let d = 1.0 / grid.total_weight();
        let density = Array1::from_elem(grid.len(), d);
        DiscreteMeasure { grid, density }
    }

    /// Wraps a density that must already integrate to 1.
    pub fn from_density(grid: Arc<SphereGrid>, density: Vec<f64>) -> Result<DiscreteMeasure> {
        check_positive(&density)?;
        if density.len() != grid.len() {
            return Err(Error::ModelParameter(format!(
                "density has {} entries for a grid of {} nodes",
                density.len(),
                grid.len()
            )));
        }
        let mass: f64 = density.iter().zip(grid.weights()).map(|(d, w)| d * w).sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::BadMass { mass, tol: MASS_TOL });
        }
        Ok(DiscreteMeasure { grid, density: Array1::from_vec(density) })
    }

    /// Rescales an arbitrary positive density to unit mass.
    pub fn from_unnormalized(grid: Arc<SphereGrid>, density: Vec<f64>) -> Result<DiscreteMeasure> {
        check_positive(&density)?;
        if density.len() != grid.len() {
            return Err(Error::ModelParameter(format!(
                "density has {} entries for a grid of {} nodes",
                density.len(),
                grid.len()
            )));
        }
        let mass: f64 = density.iter().zip(grid.weights()).map(|(d, w)| d * w).sum();
        if !mass.is_finite() || mass <= 0.0 {
            return Err(Error::BadMass { mass, tol: MASS_TOL });
        }
        let density = Array1::from_vec(density.into_iter().map(|d| d / mass).collect());
        Ok(DiscreteMeasure { grid, density })
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn density(&self) -> &Array1<f64> {
        &self.density
    }

    pub fn density_at(&self, i: usize) -> f64 {
        self.density[i]
    }

    /// Per-node masses density_i * w_i.
    pub fn masses(&self) -> Vec<f64> {
        self.density.iter().zip(self.grid.weights()).map(|(d, w)| d * w).collect()
    }

    pub fn mass(&self) -> f64 {
        self.masses().iter().sum()
    }

    /// Sup-norm distance between densities.
    pub fn sup_distance(&self, other: &DiscreteMeasure) -> f64 {
        self.density
            .iter()
            .zip(other.density.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_positive(density: &[f64]) -> Result<()> {
    for (node, &d) in density.iter().enumerate() {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NonPositiveDensity { node, value: d });
        }
    }
    Ok(())
}

/// Marginal cost field V[nu](y) = f(nu(y)) + integral phi(y, z) dnu(z) + V(y),
/// evaluated at every grid node.
pub fn v_field(
    nu: &DiscreteMeasure,
    congestion: &CongestionFn,
    interaction: &InteractionKernel,
    potential: &Potential,
) -> Result<Vec<f64>> {
    let phi = interaction.matrix(nu.grid());
    v_field_raw(nu.grid(), nu.density().as_slice().unwrap(), congestion, &phi, potential)
}

/// Core of `v_field` on raw densities; guards the Inada blow-up at zero.
pub(crate) fn v_field_raw(
    grid: &SphereGrid,
    density: &[f64],
    congestion: &CongestionFn,
    phi_matrix: &Array2<f64>,
    potential: &Potential,
) -> Result<Vec<f64>> {
    let masses: Vec<f64> = density.iter().zip(grid.weights()).map(|(d, w)| d * w).collect();
    let mut out = Vec::with_capacity(grid.len());
    for j in 0..grid.len() {
        if !(density[j] > 0.0) {
            return Err(Error::NonPositiveDensity { node: j, value: density[j] });
        }
        let congest = congestion.value(density[j]);
        let mut inter = 0.0;
        for (z, m) in masses.iter().enumerate() {
            inter += phi_matrix[[j, z]] * m;
        }
        let v = congest + inter + potential.eval(grid.node(j));
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "v_field" });
        }
        out.push(v);
    }
    Ok(out)
}

/// Total energy E[nu] = int F(nu) dm + 1/2 int int phi dnu dnu + int V dnu,
/// where F is the congestion antiderivative. Its directional derivative in
/// mean-zero directions is integration against `v_field`.
pub fn energy(
    nu: &DiscreteMeasure,
    congestion: &CongestionFn,
    interaction: &InteractionKernel,
    potential: &Potential,
) -> Result<f64> {
    let grid = nu.grid();
    let density = nu.density();
    let masses = nu.masses();
    let mut total = 0.0;
    for j in 0..grid.len() {
        if !(density[j] > 0.0) {
            return Err(Error::NonPositiveDensity { node: j, value: density[j] });
        }
        total += congestion.antiderivative(density[j]) * grid.weight(j);
        total += potential.eval(grid.node(j)) * masses[j];
    }
    if !interaction.is_zero() {
        let phi = interaction.matrix(grid);
        let mut inter = 0.0;
        for j in 0..grid.len() {
            for k in 0..grid.len() {
                inter += phi[[j, k]] * masses[j] * masses[k];
            }
        }
        total += 0.5 * inter;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite { context: "energy" });
    }
    Ok(total)
}

/// A priori density bounds (nu_lower, nu_upper):
/// f^-1(f(1/|S|) -+ (2 osc c + 2 ||phi||_inf + osc V)), with osc c = pi^2/2.
pub fn nu_bounds(
    congestion: &CongestionFn,
    interaction: &InteractionKernel,
    potential: &Potential,
    grid: &SphereGrid,
) -> (f64, f64) {
    let base = congestion.value(1.0 / grid.total_weight());
    let spread = 2.0 * COST_OSC + 2.0 * interaction.sup_norm() + potential.osc_on(grid);
    (congestion.inverse(base - spread), congestion.inverse(base + spread))
}

/// Congestion response factor h at argument q.
pub fn h_factor(congestion: &CongestionFn, q: f64) -> f64 {
    congestion.h(q)
}

/// Supremum of h over the admissible argument range
/// [f(nu_lower), f(nu_upper)], located by dense sampling.
pub fn h_max(
    congestion: &CongestionFn,
    interaction: &InteractionKernel,
    potential: &Potential,
    grid: &SphereGrid,
) -> f64 {
    let (lo, hi) = nu_bounds(congestion, interaction, potential, grid);
    let (qlo, qhi) = (congestion.value(lo), congestion.value(hi));
    let samples = 10_000;
    let mut best = f64::NEG_INFINITY;
    for k in 0..=samples {
        let q = qlo + (qhi - qlo) * k as f64 / samples as f64;
        best = best.max(congestion.h(q));
    }
    best
}

/// Solver knobs shared by the transport and fixed-point layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverParams {
    /// Strictly decreasing positive epsilon schedule for Sinkhorn.
    pub eps_schedule: Vec<f64>,
    /// Marginal violation target per epsilon level.
    pub tol_marginal: f64,
    /// Iteration cap per epsilon level.
    pub max_sinkhorn_iters: usize,
    /// Damping factor in (0, 1] for manual best-reply iteration. The stage
    /// solver converges without damping and ignores it; accepted for config
    /// compatibility.
    pub tau: f64,
    /// Sup-norm tolerance on the density movement of a full stage sweep.
    pub tol_fixed: f64,
    /// Sweep cap at the final regularization level per continuation step.
    pub max_fixed_iters: usize,
    /// Number of continuation steps from t = 0 to t = 1.
    pub continuation_steps: usize,
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if self.eps_schedule.is_empty() {
            return Err(Error::Schedule("epsilon schedule is empty".into()));
        }
        for pair in self.eps_schedule.windows(2) {
            if !(pair[1] < pair[0]) {
                return Err(Error::Schedule(format!(
                    "epsilon schedule must be strictly decreasing, saw {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        let last = *self.eps_schedule.last().unwrap();
        if !(last > 0.0) || !self.eps_schedule.iter().all(|e| e.is_finite()) {
            return Err(Error::Schedule("epsilon values must be finite and positive".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Schedule(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.tol_fixed > 0.0) || !(self.tol_marginal > 0.0) {
            return Err(Error::Schedule("tolerances must be positive".into()));
        }
        if self.continuation_steps == 0 {
            return Err(Error::Continuation("continuation needs at least one step".into()));
        }
        Ok(())
    }

    pub fn eps_final(&self) -> f64 {
        *self.eps_schedule.last().unwrap()
    }
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            eps_schedule: default_eps_schedule(1.0, 1e-3, 0.7),
            tol_marginal: 1e-9,
            max_sinkhorn_iters: 50_000,
            tau: 0.5,
            tol_fixed: 1e-8,
            max_fixed_iters: 1_000,
            continuation_steps: 5,
        }
    }
}

/// Geometric epsilon schedule from `start` down to exactly `stop`.
pub fn default_eps_schedule(start: f64, stop: f64, factor: f64) -> Vec<f64> {
    assert!(start > stop && stop > 0.0 && factor > 0.0 && factor < 1.0);
    let mut schedule = Vec::new();
    let mut eps = start;
    while eps > stop {
        schedule.push(eps);
        eps *= factor;
    }
    schedule.push(stop);
    schedule
}

/// A full problem instance: geometry, agent measure, model terms, solver knobs.
/// Caches the cost and interaction matrices used by every solver layer.
#[derive(Clone, Debug)]
pub struct Scenario {
    grid: Arc<SphereGrid>,
    mu: DiscreteMeasure,
    congestion: CongestionFn,
    interaction: InteractionKernel,
    potential: Potential,
    solver: SolverParams,
    cost: Arc<CostMatrix>,
    phi_matrix: Arc<Array2<f64>>,
    v_values: Arc<Vec<f64>>,
}

impl Scenario {
    pub fn new(
        grid: Arc<SphereGrid>,
        mu: DiscreteMeasure,
        congestion: CongestionFn,
        interaction: InteractionKernel,
        potential: Potential,
        solver: SolverParams,
    ) -> Result<Scenario> {
        if !Arc::ptr_eq(&grid, mu.grid()) {
            return Err(Error::ModelParameter(
                "mu is defined on a different grid instance".into(),
            ));
        }
        solver.validate()?;
        let cost = Arc::new(CostMatrix::from_grid(&grid));
        let phi_matrix = Arc::new(interaction.matrix(&grid));
        let v_values = Arc::new(potential.values(&grid));
        Ok(Scenario { grid, mu, congestion, interaction, potential, solver, cost, phi_matrix, v_values })
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    /// Shared handle to the grid, for constructing measures on it.
    pub fn grid_arc(&self) -> Arc<SphereGrid> {
        Arc::clone(&self.grid)
    }

    pub fn mu(&self) -> &DiscreteMeasure {
        &self.mu
    }

    pub fn congestion(&self) -> &CongestionFn {
        &self.congestion
    }

    pub fn interaction(&self) -> &InteractionKernel {
        &self.interaction
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn solver(&self) -> &SolverParams {
        &self.solver
    }

    pub fn cost(&self) -> &CostMatrix {
        &self.cost
    }

    pub fn phi_matrix(&self) -> &Array2<f64> {
        &self.phi_matrix
    }

    pub fn v_values(&self) -> &[f64] {
        &self.v_values
    }

    /// v_field against the cached matrices.
    pub fn v_field_of(&self, density: &[f64]) -> Result<Vec<f64>> {
        v_field_raw(&self.grid, density, &self.congestion, &self.phi_matrix, &self.potential)
    }
}
