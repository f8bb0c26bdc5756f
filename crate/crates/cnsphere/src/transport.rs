//! Discrete optimal transport between measures on a sphere grid.
//!
//! Two independent routes solve the same Kantorovich problem: a log-domain
//! Sinkhorn solver with a decreasing epsilon schedule (the production path,
//! whose entropic potentials select the canonical dual limit), and an exact
//! dense transportation simplex (the oracle path, zero duality gap). Both
//! report potentials in the sign convention -u(x) + u*(y) <= c(x, y) with
//! objective J(u, u*) = int -u dmu + int u* dnu.
//!
//! `u_star` is the c-transform tightening of the returned `u`, so the pair
//! is always dual-feasible for the unregularized problem: feasibility holds
//! with zero slack and J(u, u*) <= <plan, cost> exactly, while the raw
//! entropic duals (kept internally for warm starts) would overshoot by
//! eps * KL(plan | mu x nu).

mod lp;

pub use lp::{exact_ot_lp, exact_ot_lp_masses};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};

use crate::model::DiscreteMeasure;
use crate::sphere::{geodesic_distance, CostMatrix, SphereGrid};
use crate::{Error, Result};

/// Default marginal violation target per epsilon level.
pub const DEFAULT_TOL_MARGINAL: f64 = 1e-9;
/// Default iteration cap per epsilon level.
pub const DEFAULT_MAX_ITERS: usize = 50_000;
/// Ties in map extraction closer than this are broken by plan mass.
pub const TIE_TOL: f64 = 1e-9;
/// Below this marginal violation the solver tries Newton steps on the
/// column duals; above it plain alternation still makes fast progress.
const NEWTON_TRIGGER: f64 = 1e-3;
/// Backtracking halvings before a Newton step is rejected.
const NEWTON_SHRINKS: usize = 12;

/// A solved transport problem: primal plan and dual potentials.
#[derive(Clone, Debug)]
pub struct TransportSolution {
    /// Coupling matrix; row sums are mu masses, column sums nu masses.
    pub plan: Array2<f64>,
    /// Source potential, paper sign: -u(x) + u*(y) <= c(x, y).
    pub u: Vec<f64>,
    /// Target potential, c-transform tightened (dual feasible, zero slack).
    pub u_star: Vec<f64>,
    /// Primal objective <plan, cost>.
    pub transport_cost: f64,
    /// Final regularization strength (0 for the exact LP).
    pub eps_final: f64,
    /// Raw entropic duals for warm starts (equal to (-u, u*) for the LP).
    dual_f: Vec<f64>,
    dual_g: Vec<f64>,
}

impl TransportSolution {
    pub(crate) fn duals(&self) -> (&[f64], &[f64]) {
        (&self.dual_f, &self.dual_g)
    }

    /// Largest row/column marginal violation against the given masses.
    pub fn marginal_violation(&self, mu_masses: &[f64], nu_masses: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for (i, &m) in mu_masses.iter().enumerate() {
            worst = worst.max((self.plan.row(i).sum() - m).abs());
        }
        for (j, &m) in nu_masses.iter().enumerate() {
            worst = worst.max((self.plan.column(j).sum() - m).abs());
        }
        worst
    }

    /// Dual objective J(u, u*) = sum -u_i mu_i + sum u*_j nu_j.
    pub fn dual_objective(&self, mu_masses: &[f64], nu_masses: &[f64]) -> f64 {
        let j1: f64 = self.u.iter().zip(mu_masses).map(|(u, m)| -u * m).sum();
        let j2: f64 = self.u_star.iter().zip(nu_masses).map(|(v, m)| v * m).sum();
        j1 + j2
    }
}

/// Entropic feasibility slack at regularization eps on an n-node grid.
pub fn slack(eps: f64, n: usize) -> f64 {
    eps * (n as f64).ln()
}

/// Log-domain Sinkhorn over a decreasing epsilon schedule with warm-started
/// potentials across levels. Converges each level to a marginal violation
/// below `DEFAULT_TOL_MARGINAL`.
pub fn sinkhorn(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
    schedule: &[f64],
) -> Result<TransportSolution> {
    sinkhorn_masses(
        &mu.masses(),
        &nu.masses(),
        cost.view(),
        schedule,
        DEFAULT_TOL_MARGINAL,
        DEFAULT_MAX_ITERS,
        None,
    )
}

/// Core Sinkhorn on raw positive masses. `warm` seeds the dual pair.
pub(crate) fn sinkhorn_masses(
    a: &[f64],
    b: &[f64],
    cost: ArrayView2<f64>,
    schedule: &[f64],
    tol_marginal: f64,
    max_iters: usize,
    warm: Option<(&[f64], &[f64])>,
) -> Result<TransportSolution> {
    let (m, n) = (a.len(), b.len());
    if cost.nrows() != m || cost.ncols() != n {
        return Err(Error::ModelParameter(format!(
            "cost matrix is {}x{}, masses are {}x{}",
            cost.nrows(),
            cost.ncols(),
            m,
            n
        )));
    }
    validate_schedule(schedule)?;
    for (i, &x) in a.iter().enumerate() {
        if !(x > 0.0) {
            return Err(Error::NonPositiveDensity { node: i, value: x });
        }
    }
    for (j, &x) in b.iter().enumerate() {
        if !(x > 0.0) {
            return Err(Error::NonPositiveDensity { node: j, value: x });
        }
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 {
        return Err(Error::Unbalanced { mu_mass: sa, nu_mass: sb });
    }

    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let (mut f, mut g) = match warm {
        Some((wf, wg)) if wf.len() == m && wg.len() == n => (wf.to_vec(), wg.to_vec()),
        _ => (vec![0.0; m], vec![0.0; n]),
    };

    let mut terms = vec![0.0; m.max(n)];
    let mut colsum = vec![0.0; n];
    let mut ptilde = Array2::<f64>::zeros((m, n));
    let mut g_save = vec![0.0; n];

    for &eps in schedule {
        let mut converged = false;
        let mut violation = f64::INFINITY;
        for _iter in 0..max_iters {
            // g_j <- -eps lse_i(ln a_i + (f_i - C_ij)/eps)
            for j in 0..n {
                let mut mx = f64::NEG_INFINITY;
                for i in 0..m {
                    let t = la[i] + (f[i] - cost[[i, j]]) / eps;
                    terms[i] = t;
                    if t > mx {
                        mx = t;
                    }
                }
                let s: f64 = terms[..m].iter().map(|t| (t - mx).exp()).sum();
                g[j] = -eps * (mx + s.ln());
            }
            violation =
                exact_row_update(eps, &lb, cost, a, b, &g, &mut f, &mut colsum, &mut ptilde);
            if !violation.is_finite() {
                return Err(Error::NonFinite { context: "sinkhorn marginals" });
            }
            if violation < tol_marginal {
                converged = true;
                break;
            }
            // Alternation alone slows to a crawl once the plan is nearly
            // deterministic: mass corrections must diffuse through plan
            // entries of size exp(-gap/eps). A damped Newton step on the
            // column duals makes the endgame quadratic; rejected steps fall
            // back to plain iteration.
            if violation < NEWTON_TRIGGER {
                if let Some(delta) = newton_direction(eps, b, &colsum, &ptilde) {
                    g_save.copy_from_slice(&g);
                    let mut beta = 1.0;
                    let mut best = violation;
                    for _ in 0..=NEWTON_SHRINKS {
                        for (gj, (&gs, &dj)) in g.iter_mut().zip(g_save.iter().zip(&delta)) {
                            *gj = gs + beta * dj;
                        }
                        let trial = exact_row_update(
                            eps,
                            &lb,
                            cost,
                            a,
                            b,
                            &g,
                            &mut f,
                            &mut colsum,
                            &mut ptilde,
                        );
                        if trial.is_finite() && trial < 0.999 * best {
                            best = trial;
                            break;
                        }
                        beta *= 0.5;
                    }
                    if best < violation {
                        violation = best;
                        if violation < tol_marginal {
                            converged = true;
                            break;
                        }
                    } else {
                        g.copy_from_slice(&g_save);
                        exact_row_update(
                            eps,
                            &lb,
                            cost,
                            a,
                            b,
                            &g,
                            &mut f,
                            &mut colsum,
                            &mut ptilde,
                        );
                    }
                }
            }
        }
        if !converged {
            return Err(Error::SinkhornStalled { eps, violation, iters: max_iters });
        }
        if f.iter().any(|x| !x.is_finite()) || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "sinkhorn potentials" });
        }
    }

    let eps_final = *schedule.last().unwrap();
    let mut plan = Array2::zeros((m, n));
    let mut transport_cost = 0.0;
    for i in 0..m {
        for j in 0..n {
            let p = (la[i] + lb[j] + (f[i] + g[j] - cost[[i, j]]) / eps_final).exp();
            plan[[i, j]] = p;
            transport_cost += p * cost[[i, j]];
        }
    }

    let u: Vec<f64> = f.iter().map(|x| -x).collect();
    let u_star = tighten_partner(&u, cost);
    Ok(TransportSolution { plan, u, u_star, transport_cost, eps_final, dual_f: f, dual_g: g })
}

/// Exact row-dual update at fixed column duals: recomputes `f` so every row
/// of the plan sums to `a` by construction, accumulating column sums and the
/// scaled rows P_ij / sqrt(a_i) consumed by the Newton corrector. Returns the
/// sup-norm column violation against `b`. Row terms stay in [0, 1] before
/// scaling, so the pass cannot overflow however far the duals are from
/// converged. The equilibrium stage solver reuses this pass with the grid
/// weights as the column reference measure.
#[allow(clippy::too_many_arguments)]
pub(crate) fn exact_row_update(
    eps: f64,
    lb: &[f64],
    cost: ArrayView2<f64>,
    a: &[f64],
    b: &[f64],
    g: &[f64],
    f: &mut [f64],
    colsum: &mut [f64],
    ptilde: &mut Array2<f64>,
) -> f64 {
    let (m, n) = (a.len(), b.len());
    let mut terms = vec![0.0; n];
    colsum.iter_mut().for_each(|c| *c = 0.0);
    for i in 0..m {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..n {
            let t = lb[j] + (g[j] - cost[[i, j]]) / eps;
            terms[j] = t;
            if t > mx {
                mx = t;
            }
        }
        let mut s = 0.0;
        for j in 0..n {
            let e = (terms[j] - mx).exp();
            terms[j] = e;
            s += e;
        }
        f[i] = -eps * (mx + s.ln());
        let scale = a[i] / s;
        let root = a[i].sqrt() / s;
        for j in 0..n {
            colsum[j] += scale * terms[j];
            ptilde[[i, j]] = root * terms[j];
        }
    }
    colsum
        .iter()
        .zip(b)
        .map(|(c, bb)| (c - bb).abs())
        .fold(0.0, f64::max)
}

/// Newton direction for the column duals with rows kept exact. The column-sum
/// map g -> colsum(g) has Jacobian (diag(colsum) - Ptilde^T Ptilde) / eps,
/// positive semidefinite with constants in its kernel (the dual gauge); a
/// rank-one shift pins the gauge without disturbing mean-zero residuals.
/// Returns None when the linear solve fails or blows up.
fn newton_direction(
    eps: f64,
    b: &[f64],
    colsum: &[f64],
    ptilde: &Array2<f64>,
) -> Option<Vec<f64>> {
    let n = b.len();
    let total: f64 = colsum.iter().sum();
    let shift = total / (n as f64 * n as f64);
    let gram = ptilde.t().dot(ptilde);
    let h = DMatrix::from_fn(n, n, |j, l| {
        let diag = if j == l { colsum[j] } else { 0.0 };
        diag - gram[[j, l]] + shift
    });
    let rhs = DVector::from_fn(n, |j, _| eps * (b[j] - colsum[j]));
    let delta = h.lu().solve(&rhs)?;
    if delta.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some(delta.iter().copied().collect())
}

fn validate_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Schedule("epsilon schedule is empty".into()));
    }
    for pair in schedule.windows(2) {
        if !(pair[1] < pair[0]) {
            return Err(Error::Schedule(format!(
                "epsilon schedule must be strictly decreasing, saw {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if !schedule.iter().all(|e| e.is_finite() && *e > 0.0) {
        return Err(Error::Schedule("epsilon values must be finite and positive".into()));
    }
    Ok(())
}

/// c-transform envelope u_hat(y_j) = max_i (-u_i - cost_ij).
pub fn c_transform(u: &[f64], cost: &CostMatrix) -> Vec<f64> {
    c_transform_view(u, cost.view())
}

pub(crate) fn c_transform_view(u: &[f64], cost: ArrayView2<f64>) -> Vec<f64> {
    let n = cost.ncols();
    let mut out = vec![f64::NEG_INFINITY; n];
    for (i, &ui) in u.iter().enumerate() {
        for j in 0..n {
            let v = -ui - cost[[i, j]];
            if v > out[j] {
                out[j] = v;
            }
        }
    }
    out
}

/// Tightest dual-feasible partner of u: u*(y_j) = min_i (cost_ij + u_i),
/// equal to minus the c-transform envelope.
pub(crate) fn tighten_partner(u: &[f64], cost: ArrayView2<f64>) -> Vec<f64> {
    c_transform_view(u, cost).into_iter().map(|v| -v).collect()
}

/// A transport map sampled on grid nodes.
#[derive(Clone, Debug)]
pub struct TransportMap {
    /// assignment[i] = index of T(x_i) in the target grid.
    pub assignment: Vec<usize>,
    /// displacement[i] = d(x_i, T(x_i)).
    pub displacement: Vec<f64>,
}

impl TransportMap {
    pub fn max_displacement(&self) -> f64 {
        self.displacement.iter().cloned().fold(0.0, f64::max)
    }
}

/// Selects the transport map T(x_i) = argmin_j (cost_ij - u*_j); ties within
/// `tie_tol` are broken toward the plan's heaviest entry in the row.
/// `TIE_TOL` is the standard choice.
pub fn extract_map(
    solution: &TransportSolution,
    grid: &SphereGrid,
    tie_tol: f64,
) -> Result<TransportMap> {
    let cost = CostMatrix::from_grid(grid);
    extract_map_with(solution, &cost, grid, tie_tol)
}

pub(crate) fn extract_map_with(
    solution: &TransportSolution,
    cost: &CostMatrix,
    grid: &SphereGrid,
    tie_tol: f64,
) -> Result<TransportMap> {
    if !(tie_tol >= 0.0) || !tie_tol.is_finite() {
        return Err(Error::ModelParameter(format!(
            "tie tolerance must be finite and nonnegative, got {tie_tol}"
        )));
    }
    let n = cost.n();
    let mut assignment = Vec::with_capacity(n);
    let mut displacement = Vec::with_capacity(n);
    for i in 0..n {
        let row = solution.plan.row(i);
        if row.sum() <= 0.0 {
            return Err(Error::EmptyPlanRow { row: i });
        }
        let mut best = f64::INFINITY;
        for j in 0..n {
            let s = cost.get(i, j) - solution.u_star[j];
            if s < best {
                best = s;
            }
        }
        let mut pick = usize::MAX;
        let mut pick_mass = f64::NEG_INFINITY;
        for j in 0..n {
            let s = cost.get(i, j) - solution.u_star[j];
            if s <= best + tie_tol && row[j] > pick_mass {
                pick = j;
                pick_mass = row[j];
            }
        }
        assignment.push(pick);
        displacement.push(geodesic_distance(grid.node(i), grid.node(pick)));
    }
    Ok(TransportMap { assignment, displacement })
}
