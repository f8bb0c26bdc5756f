//! Equilibrium computation by continuation over a blended model family.
//!
//! Each continuation stage is a jointly convex problem in the transport plan
//! and the density: entropic transport from the blended source, plus the
//! congestion integral and the stage-scaled interaction and potential
//! energies. The stage solver is block-coordinate ascent on the entropic
//! dual. Row potentials update in closed form (source marginals hold
//! exactly); column potentials solve a pointwise congestion relation
//!
//!   ln w_j + ln nu_j = lk_j + (-f(nu_j) - t (phi * nu)_j - t V_j - eta) / eps
//!
//! with eta normalizing the mass. A damped Newton corrector on the column
//! block makes the endgame quadratic: its Hessian is the transport curvature
//! plus a strictly positive congestion elasticity, so it stays well
//! conditioned at the sharpest regularization level, where plain alternation
//! crawls and near-degenerate transport duals wobble inside their polytope.
//!
//! The continuation parameter t in [0, 1] blends the source toward the
//! uniform measure and scales the interaction and potential, walking from
//! the trivial problem at t = 0 to the full one at t = 1. A stage converges
//! when one full sweep (interaction field refreshed, both dual blocks
//! updated) moves the density less than the fixed-point tolerance in sup
//! norm, certifying stationarity of the coupled system at the reported nu.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{verify_apriori, AprioriReport};
use crate::model::{CongestionFn, DiscreteMeasure, Scenario};
use crate::transport::{
    exact_row_update, extract_map_with, sinkhorn_masses, tighten_partner, TransportMap,
    TransportSolution, TIE_TOL,
};
use crate::{Error, Result};

/// Bisection iterations for the mass-normalizing lambda.
const LAMBDA_BISECTIONS: usize = 200;
/// Warm-started stages rerun only this multiple of eps_min and below.
const WARM_TAIL_FACTOR: f64 = 12.0;
/// Sweep cap per warm-up epsilon level; the final level uses the solver's
/// fixed-point budget.
const RAMP_SWEEP_CAP: usize = 200;
/// Warm-up levels only need to park the duals near the basin; the final
/// level owns the real tolerance.
const RAMP_TOL: f64 = 1e-6;
/// Below this sweep step the stage solver attempts Newton corrections.
const STAGE_NEWTON_TRIGGER: f64 = 1e-2;
/// Backtracking halvings before a stage Newton step is rejected.
const STAGE_NEWTON_SHRINKS: usize = 12;

/// One stage-solver sweep at the final regularization level, as recorded in
/// the solver history.
#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    /// Continuation parameter of the stage.
    pub t: f64,
    /// 1-based sweep index within the stage's final regularization level.
    pub iter: usize,
    /// Density movement of the sweep, ||nu_new - nu_old||_inf.
    pub step_norm: f64,
    /// Equilibrium residual of the current iterate at this t.
    pub residual: f64,
    /// Mass-normalizing constant in the tightened dual gauge.
    pub lambda: f64,
    /// Newton backtracking factor accepted this sweep (1 when none applied).
    pub tau: f64,
}

/// Strictly increasing continuation values from 0 to 1.
#[derive(Clone, Debug)]
pub struct ContinuationSchedule(Vec<f64>);

impl ContinuationSchedule {
    /// Jump straight from the trivial problem to the full one.
    pub fn direct() -> Self {
        ContinuationSchedule(vec![0.0, 1.0])
    }

    /// Uniform schedule 0, 1/n, ..., 1.
    pub fn with_steps(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Continuation("need at least one continuation step".into()));
        }
        Self::from_values((0..=n).map(|k| k as f64 / n as f64).collect())
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.first() != Some(&0.0) || values.last() != Some(&1.0) {
            return Err(Error::Continuation(format!(
                "continuation must start at 0 and end at 1, got {values:?}"
            )));
        }
        if values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Continuation(format!(
                "continuation values must be strictly increasing, got {values:?}"
            )));
        }
        Ok(ContinuationSchedule(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Output of one best-reply evaluation.
pub struct BestReply {
    pub measure: DiscreteMeasure,
    pub lambda: f64,
    pub transport: TransportSolution,
}

/// A solved equilibrium with its transport structure and diagnostics.
#[derive(Clone)]
pub struct EquilibriumResult {
    /// Equilibrium density.
    pub nu: DiscreteMeasure,
    /// Source potential in the gauge min_y Phi(x, y) = -u(x) (so u* = 0).
    pub u: Vec<f64>,
    /// Mass-normalizing constant at the fixed point.
    pub lambda: f64,
    /// Final transport solve from mu to nu.
    pub transport: TransportSolution,
    /// Node-to-node transport map.
    pub map: TransportMap,
    /// Equilibrium residual max_i [Phi(x_i, T x_i) - min_j Phi(x_i, y_j)].
    pub residual: f64,
    /// Per-iteration history across all continuation stages.
    pub history: Vec<IterationRecord>,
    /// A priori bound verification at the solution.
    pub bounds: AprioriReport,
}

/// Invertibility condition margin for the linearized operator.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionReport {
    /// Supremum of h = (f^{-1})'/f^{-1} over the admissible density range.
    pub h_max: f64,
    /// Supremum norm of the interaction kernel.
    pub phi_sup_norm: f64,
    /// 1 - h_max * ||phi||_inf; positive margin guarantees invertibility.
    pub margin: f64,
    pub satisfied: bool,
}

/// Checks the smallness condition 1 - h_max * ||phi||_inf > 0 that makes the
/// linearized equilibrium operator invertible.
pub fn check_condition(scenario: &Scenario) -> ConditionReport {
    let h_max = crate::model::h_max(
        scenario.congestion(),
        scenario.interaction(),
        scenario.potential(),
        scenario.grid(),
    );
    let phi_sup_norm = scenario.interaction().sup_norm();
    let margin = 1.0 - h_max * phi_sup_norm;
    ConditionReport { h_max, phi_sup_norm, margin, satisfied: margin > 0.0 }
}

/// Source density blended toward uniform: t * mu + (1 - t) * uniform.
fn blended_source(scenario: &Scenario, t: f64) -> Vec<f64> {
    let uniform = 1.0 / scenario.grid().total_weight();
    scenario
        .mu()
        .density()
        .iter()
        .map(|&d| t * d + (1.0 - t) * uniform)
        .collect()
}

/// Best reply to `nu` at continuation parameter `t`. `warm` optionally seeds
/// the transport duals; a stalled warm solve falls back to a cold one.
pub fn best_reply(
    scenario: &Scenario,
    t: f64,
    nu: &DiscreteMeasure,
    warm: Option<(&[f64], &[f64])>,
) -> Result<BestReply> {
    let grid = scenario.grid();
    let weights = grid.weights();
    let solver = scenario.solver();
    let schedule = &solver.eps_schedule;
    let eps_min = *schedule.last().unwrap();

    let source_density = blended_source(scenario, t);
    let a: Vec<f64> = source_density.iter().zip(weights).map(|(d, w)| d * w).collect();
    let b = nu.masses();

    let transport = match warm {
        Some(w) => {
            let cutoff = eps_min * WARM_TAIL_FACTOR;
            let tail: Vec<f64> = schedule.iter().cloned().filter(|e| *e <= cutoff).collect();
            match sinkhorn_masses(
                &a,
                &b,
                scenario.cost().view(),
                &tail,
                solver.tol_marginal,
                solver.max_sinkhorn_iters,
                Some(w),
            ) {
                Ok(sol) => sol,
                Err(Error::SinkhornStalled { .. }) => sinkhorn_masses(
                    &a,
                    &b,
                    scenario.cost().view(),
                    schedule,
                    solver.tol_marginal,
                    solver.max_sinkhorn_iters,
                    None,
                )?,
                Err(other) => return Err(other),
            }
        }
        None => sinkhorn_masses(
            &a,
            &b,
            scenario.cost().view(),
            schedule,
            solver.tol_marginal,
            solver.max_sinkhorn_iters,
            None,
        )?,
    };

    // Target envelope u_hat = -u* (u* is the tightened partner potential).
    let phi_conv = interaction_field(scenario, nu);
    let v_values = scenario.v_values();
    let psi: Vec<f64> = (0..grid.len())
        .map(|j| -transport.u_star[j] - t * phi_conv[j] - t * v_values[j])
        .collect();
    let (density, lambda) = normalize_lambda(scenario.congestion(), &psi, weights)?;
    let measure = DiscreteMeasure::from_unnormalized(scenario.grid_arc(), density)?;
    Ok(BestReply { measure, lambda, transport })
}

/// (phi * nu)(y_j) = sum_z phi(y_j, y_z) nu(y_z) w_z.
fn interaction_field(scenario: &Scenario, nu: &DiscreteMeasure) -> Vec<f64> {
    let masses = Array1::from_vec(nu.masses());
    scenario.phi_matrix().dot(&masses).to_vec()
}

/// Solves sum_j f^{-1}(psi_j + lambda) w_j = 1 for lambda by bisection.
/// Returns the normalized density and lambda.
pub(crate) fn normalize_lambda(
    congestion: &CongestionFn,
    psi: &[f64],
    weights: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let mass_at = |lambda: f64| -> f64 {
        psi.iter()
            .zip(weights)
            .map(|(p, w)| congestion.inverse(p + lambda) * w)
            .sum::<f64>()
    };
    // Initial bracket from the data scale; expand geometrically if needed.
    let scale = psi.iter().fold(0.0_f64, |acc, p| acc.max(p.abs()));
    let mut lo = -(scale + 1.0);
    let mut hi = scale + 1.0;
    let mut expansions = 0;
    while mass_at(lo) > 1.0 {
        lo *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::Bracket { bound: lo });
        }
    }
    while mass_at(hi) < 1.0 {
        hi *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::Bracket { bound: hi });
        }
    }
    for _ in 0..LAMBDA_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mass_at(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * (1.0 + hi.abs()) {
            break;
        }
    }
    let lambda = 0.5 * (lo + hi);
    let density: Vec<f64> = psi.iter().map(|p| congestion.inverse(p + lambda)).collect();
    if density.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite { context: "best-reply density" });
    }
    Ok((density, lambda))
}

/// Effective target-side cost Phi(x_i, y_j) at continuation parameter t.
fn phi_rows(scenario: &Scenario, t: f64, nu: &DiscreteMeasure) -> Vec<f64> {
    let phi_conv = interaction_field(scenario, nu);
    let v_values = scenario.v_values();
    nu.density()
        .iter()
        .enumerate()
        .map(|(j, &d)| scenario.congestion().value(d) + t * phi_conv[j] + t * v_values[j])
        .collect()
}

fn residual_at(scenario: &Scenario, t: f64, nu: &DiscreteMeasure, map: &TransportMap) -> f64 {
    let tail = phi_rows(scenario, t, nu);
    let cost = scenario.cost();
    let n = tail.len();
    let mut worst = 0.0_f64;
    for i in 0..n {
        let mut row_min = f64::INFINITY;
        for j in 0..n {
            row_min = row_min.min(cost.get(i, j) + tail[j]);
        }
        let at_map = cost.get(i, map.assignment[i]) + tail[map.assignment[i]];
        worst = worst.max(at_map - row_min);
    }
    worst
}

/// Equilibrium residual of (nu, T) for the full problem (t = 1): the largest
/// gap between Phi along the transport map and the row minimum of Phi.
pub fn equilibrium_residual(scenario: &Scenario, nu: &DiscreteMeasure, map: &TransportMap) -> f64 {
    residual_at(scenario, 1.0, nu, map)
}

/// Source potential in the gauge u*(y) = 0: u_i = -min_j Phi(x_i, y_j).
fn envelope_potential(scenario: &Scenario, t: f64, nu: &DiscreteMeasure) -> Vec<f64> {
    let tail = phi_rows(scenario, t, nu);
    let cost = scenario.cost();
    let n = tail.len();
    (0..n)
        .map(|i| {
            let mut row_min = f64::INFINITY;
            for j in 0..n {
                row_min = row_min.min(cost.get(i, j) + tail[j]);
            }
            -row_min
        })
        .collect()
}

struct StageOutcome {
    nu: DiscreteMeasure,
    lambda: f64,
    transport: TransportSolution,
}

/// Congestion-free part of the stage cost on the target side:
/// t (phi * nu)_j + t V_j, with nu given by its density values.
fn stage_drive(scenario: &Scenario, t: f64, dens: &[f64]) -> Vec<f64> {
    let weights = scenario.grid().weights();
    let masses = Array1::from_iter(dens.iter().zip(weights).map(|(d, w)| d * w));
    let conv = scenario.phi_matrix().dot(&masses);
    let v_values = scenario.v_values();
    (0..dens.len()).map(|j| t * conv[j] + t * v_values[j]).collect()
}

/// Solves the per-column stationarity relation
///
///   ln w_j + ln nu_j = lk_j + (-f(nu_j) - s_j - eta) / eps
///
/// for the density together with the constant eta that gives unit mass. In
/// y = ln nu the left-right gap is (1 + alpha/eps) y + (beta/eps) e^y minus a
/// constant, strictly increasing, so each column is a bracketed scalar root;
/// eta has a closed form for pure log congestion and a monotone bracket
/// otherwise (mass is strictly decreasing in eta).
fn elastic_columns(
    congestion: &CongestionFn,
    eps: f64,
    lk: &[f64],
    lw: &[f64],
    s: &[f64],
    eta_init: f64,
) -> Result<(Vec<f64>, f64)> {
    let n = lk.len();
    let (alpha, beta) = congestion.slopes();
    let aa = 1.0 + alpha / eps;

    if beta == 0.0 {
        // y_j = p_j - eta / (eps + alpha); unit mass pins eta through a
        // log-sum-exp, so the returned density has exact unit mass.
        let q: Vec<f64> = (0..n).map(|j| lw[j] + (lk[j] - lw[j] - s[j] / eps) / aa).collect();
        let mx = q.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        if !mx.is_finite() {
            return Err(Error::NonFinite { context: "elastic column solve" });
        }
        let lse = mx + q.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let eta = (eps + alpha) * lse;
        let dens: Vec<f64> = (0..n).map(|j| (q[j] - lw[j] - lse).exp()).collect();
        return Ok((dens, eta));
    }

    let bb = beta / eps;
    let node = |j: usize, eta: f64| -> f64 {
        let d = lk[j] - lw[j] - (s[j] + eta) / eps;
        // aa y + bb e^y = d: the root lies below d/aa; expand down to bracket.
        let gap = |y: f64| aa * y + bb * y.min(700.0).exp() - d;
        let mut hi = d / aa;
        let mut span = 1.0;
        let mut lo = hi - span;
        while gap(lo) > 0.0 && span < 1e9 {
            span *= 2.0;
            lo = hi - span;
        }
        for _ in 0..90 {
            let mid = 0.5 * (lo + hi);
            if gap(mid) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi)).exp()
    };
    let mass_at =
        |eta: f64| -> f64 { (0..n).map(|j| lw[j].exp() * node(j, eta)).sum::<f64>() };

    let mut lo = eta_init;
    let mut hi = eta_init;
    let mut span = 1.0 + eta_init.abs();
    let mut expansions = 0;
    while mass_at(lo) < 1.0 {
        lo -= span;
        span *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::Bracket { bound: lo });
        }
    }
    span = 1.0 + eta_init.abs();
    while mass_at(hi) > 1.0 {
        hi += span;
        span *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::Bracket { bound: hi });
        }
    }
    for _ in 0..LAMBDA_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mass_at(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * (1.0 + hi.abs()) {
            break;
        }
    }
    let eta = 0.5 * (lo + hi);
    let dens: Vec<f64> = (0..n).map(|j| node(j, eta)).collect();
    Ok((dens, eta))
}

/// Solves one continuation stage as the joint convex problem in the plan and
/// the density, by block-coordinate dual ascent with a damped Newton
/// corrector on the column block. `nu0` seeds the density (and hence the
/// interaction field); `warm` carries transport duals across stages.
fn stage_solve(
    scenario: &Scenario,
    t: f64,
    nu0: DiscreteMeasure,
    warm: &mut Option<(Vec<f64>, Vec<f64>)>,
    history: &mut Vec<IterationRecord>,
) -> Result<StageOutcome> {
    let grid = scenario.grid();
    let n = grid.len();
    let weights = grid.weights();
    let solver = scenario.solver();
    let congestion = scenario.congestion();
    let cost_view = scenario.cost().view();
    let eps_min = *solver.eps_schedule.last().unwrap();
    let (c_alpha, c_beta) = congestion.slopes();

    let source_density = blended_source(scenario, t);
    let a: Vec<f64> = source_density.iter().zip(weights).map(|(d, w)| d * w).collect();
    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lw: Vec<f64> = weights.iter().map(|w| w.ln()).collect();

    // Warm duals let the stage skip the wide part of the epsilon ramp.
    let (mut f, mut g, levels): (Vec<f64>, Vec<f64>, Vec<f64>) = match warm.take() {
        Some((wf, wg)) if wf.len() == n && wg.len() == n => {
            let cutoff = eps_min * WARM_TAIL_FACTOR;
            let tail: Vec<f64> =
                solver.eps_schedule.iter().cloned().filter(|e| *e <= cutoff).collect();
            (wf, wg, tail)
        }
        _ => (vec![0.0; n], vec![0.0; n], solver.eps_schedule.clone()),
    };

    let mut dens: Vec<f64> = nu0.density().to_vec();
    let mut eta = 0.0;
    let mut terms = vec![0.0; n];
    let mut lk = vec![0.0; n];
    let mut colsum = vec![0.0; n];
    let mut ptilde = Array2::<f64>::zeros((n, n));
    let mut last_step = f64::INFINITY;

    for (level, &eps) in levels.iter().enumerate() {
        let is_final = level + 1 == levels.len();
        let cap = if is_final { solver.max_fixed_iters } else { RAMP_SWEEP_CAP };
        let tol = if is_final { solver.tol_fixed } else { RAMP_TOL.max(solver.tol_fixed) };
        let mut converged = false;

        for sweep in 1..=cap {
            let s = stage_drive(scenario, t, &dens);
            // Column log-kernel sums at the current row duals.
            for j in 0..n {
                let mut mx = f64::NEG_INFINITY;
                for i in 0..n {
                    let v = la[i] + (f[i] - cost_view[[i, j]]) / eps;
                    terms[i] = v;
                    if v > mx {
                        mx = v;
                    }
                }
                let sum: f64 = terms.iter().map(|v| (v - mx).exp()).sum();
                lk[j] = mx + sum.ln();
            }
            let (dens_new, eta_new) = elastic_columns(congestion, eps, &lk, &lw, &s, eta)?;
            eta = eta_new;
            for j in 0..n {
                g[j] = -(congestion.value(dens_new[j]) + s[j] + eta);
            }
            let step = dens
                .iter()
                .zip(&dens_new)
                .map(|(o, v)| (o - v).abs())
                .fold(0.0_f64, f64::max);
            if !step.is_finite() {
                return Err(Error::NonFinite { context: "stage sweep" });
            }
            dens = dens_new;

            // Rows exact against the new columns; the sup violation of the
            // column relation is the self-consistency score Newton drives.
            let b_elastic: Vec<f64> =
                dens.iter().zip(weights).map(|(d, w)| d * w).collect();
            let mut violation = exact_row_update(
                eps, &lw, cost_view, &a, &b_elastic, &g, &mut f, &mut colsum, &mut ptilde,
            );

            let mut beta_used = 1.0;
            if step < STAGE_NEWTON_TRIGGER && violation > solver.tol_marginal {
                // Hessian in g alone (eta folds into the gauge the next sweep
                // re-splits): transport curvature plus the congestion
                // elasticity e_j > 0, symmetric positive definite.
                let elastic: Vec<f64> = dens
                    .iter()
                    .zip(weights)
                    .map(|(d, w)| w * d / (c_alpha + c_beta * d))
                    .collect();
                let gram = ptilde.t().dot(&ptilde);
                let jmat = DMatrix::from_fn(n, n, |j, l| {
                    let curv = ((if j == l { colsum[j] } else { 0.0 }) - gram[[j, l]]) / eps;
                    curv + if j == l { elastic[j] } else { 0.0 }
                });
                let rhs = DVector::from_fn(n, |j, _| b_elastic[j] - colsum[j]);
                if let Some(delta) = jmat.lu().solve(&rhs) {
                    if delta.iter().all(|d| d.is_finite()) {
                        let g_save = g.clone();
                        let f_save = f.clone();
                        let mut bt = 1.0;
                        let mut accepted = false;
                        for _ in 0..=STAGE_NEWTON_SHRINKS {
                            for j in 0..n {
                                g[j] = g_save[j] + bt * delta[j];
                            }
                            let dens_try: Vec<f64> = (0..n)
                                .map(|j| congestion.inverse(-g[j] - s[j] - eta))
                                .collect();
                            let b_try: Vec<f64> =
                                dens_try.iter().zip(weights).map(|(d, w)| d * w).collect();
                            let viol_try = exact_row_update(
                                eps, &lw, cost_view, &a, &b_try, &g, &mut f, &mut colsum,
                                &mut ptilde,
                            );
                            if viol_try.is_finite() && viol_try < 0.999 * violation {
                                violation = viol_try;
                                dens = dens_try;
                                beta_used = bt;
                                accepted = true;
                                break;
                            }
                            bt *= 0.5;
                        }
                        if !accepted {
                            g.copy_from_slice(&g_save);
                            f.copy_from_slice(&f_save);
                        }
                    }
                }
            }
            last_step = step;

            if is_final {
                let u: Vec<f64> = f.iter().map(|x| -x).collect();
                let u_star = tighten_partner(&u, cost_view);
                let mut residual = 0.0_f64;
                for i in 0..n {
                    let mut best = f64::INFINITY;
                    let mut pick = 0;
                    let mut row_min = f64::INFINITY;
                    for j in 0..n {
                        let score = cost_view[[i, j]] - u_star[j];
                        if score < best {
                            best = score;
                            pick = j;
                        }
                        let envelope =
                            cost_view[[i, j]] + congestion.value(dens[j]) + s[j];
                        row_min = row_min.min(envelope);
                    }
                    let at_map = cost_view[[i, pick]] + congestion.value(dens[pick]) + s[pick];
                    residual = residual.max(at_map - row_min);
                }
                let lambda: f64 = (0..n)
                    .map(|j| {
                        dens[j] * weights[j] * (congestion.value(dens[j]) + u_star[j] + s[j])
                    })
                    .sum();
                history.push(IterationRecord {
                    t,
                    iter: sweep,
                    step_norm: step,
                    residual,
                    lambda,
                    tau: beta_used,
                });
            }
            if step < tol {
                converged = true;
                break;
            }
        }

        if is_final && !converged {
            return Err(Error::FixedPointCap {
                cap,
                t,
                last_step,
                history: history.clone(),
            });
        }
    }

    // Certify the solved duals as a transport solution against the
    // renormalized density (the marginal check reruns at eps_min).
    let nu = DiscreteMeasure::from_unnormalized(scenario.grid_arc(), dens)?;
    let b = nu.masses();
    let g_bref: Vec<f64> =
        (0..n).map(|j| g[j] + eps_min * (lw[j] - b[j].ln())).collect();
    let transport = sinkhorn_masses(
        &a,
        &b,
        cost_view,
        &[eps_min],
        solver.tol_marginal,
        solver.max_sinkhorn_iters,
        Some((&f, &g_bref)),
    )?;
    let (tf, tg) = transport.duals();
    let g_wref: Vec<f64> =
        (0..n).map(|j| tg[j] - eps_min * (lw[j] - b[j].ln())).collect();
    *warm = Some((tf.to_vec(), g_wref));

    let dens_final = nu.density().to_vec();
    let s = stage_drive(scenario, t, &dens_final);
    let lambda: f64 = (0..n)
        .map(|j| b[j] * (congestion.value(dens_final[j]) + transport.u_star[j] + s[j]))
        .sum();
    Ok(StageOutcome { nu, lambda, transport })
}

/// Solves for the equilibrium density along a continuation schedule, then
/// verifies the a priori bounds at the solution.
pub fn solve_equilibrium(
    scenario: &Scenario,
    schedule: &ContinuationSchedule,
) -> Result<EquilibriumResult> {
    let mut nu = DiscreteMeasure::uniform(scenario.grid_arc());
    let mut warm: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut history = Vec::new();
    let mut outcome = None;

    for &t in schedule.values() {
        let stage = stage_solve(scenario, t, nu, &mut warm, &mut history)?;
        nu = stage.nu.clone();
        outcome = Some(stage);
    }
    let outcome = outcome.expect("schedule is never empty");

    let map = extract_map_with(&outcome.transport, scenario.cost(), scenario.grid(), TIE_TOL)?;
    let residual = equilibrium_residual(scenario, &nu, &map);
    let u = envelope_potential(scenario, 1.0, &nu);
    let eps_min = *scenario.solver().eps_schedule.last().unwrap();
    let bounds = verify_apriori(scenario, &nu, &u, &map, eps_min);

    Ok(EquilibriumResult {
        nu,
        u,
        lambda: outcome.lambda,
        transport: outcome.transport,
        map,
        residual,
        history,
        bounds,
    })
}

/// Reruns the full-problem fixed point from seeded random initial densities
/// and reports the sup distance of each rerun to `baseline`. Informational:
/// agreement across restarts is evidence (not proof) of uniqueness.
pub fn uniqueness_probe(
    scenario: &Scenario,
    baseline: &DiscreteMeasure,
    seeds: &[u64],
) -> Result<Vec<f64>> {
    let uniform = 1.0 / scenario.grid().total_weight();
    let mut distances = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let density: Vec<f64> =
            (0..scenario.grid().len()).map(|_| uniform * rng.random_range(0.5..1.5)).collect();
        let init = DiscreteMeasure::from_unnormalized(scenario.grid_arc(), density)?;
        let mut warm = None;
        let mut history = Vec::new();
        let stage = stage_solve(scenario, 1.0, init, &mut warm, &mut history)?;
        distances.push(stage.nu.sup_distance(baseline));
    }
    Ok(distances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        default_eps_schedule, CongestionFn, InteractionKernel, Potential, SolverParams,
    };
    use crate::sphere::{SphereDim, SphereGrid};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn scenario(
        n: usize,
        congestion: CongestionFn,
        interaction: InteractionKernel,
        potential: Potential,
    ) -> Scenario {
        let grid = Arc::new(SphereGrid::build(SphereDim::S1, n).unwrap());
        let mu = DiscreteMeasure::uniform(Arc::clone(&grid));
        Scenario::new(grid, mu, congestion, interaction, potential, SolverParams::default())
            .unwrap()
    }

    fn trivial(n: usize) -> Scenario {
        scenario(n, CongestionFn::Log, InteractionKernel::Zero, Potential::Zero)
    }

    #[test]
    fn trivial_scenario_fixes_the_uniform_density() {
        let sc = trivial(32);
        let result = solve_equilibrium(&sc, &ContinuationSchedule::direct()).unwrap();
        let uniform = DiscreteMeasure::uniform(sc.grid_arc());
        assert!(result.nu.sup_distance(&uniform) < 1e-8);
        assert!(result.history.last().unwrap().step_norm < 1e-8);
        // Symmetry kills every departure from uniformity: one iteration per
        // continuation stage suffices.
        assert!(result.history.len() <= 4, "history: {:?}", result.history);
        assert_abs_diff_eq!(result.nu.mass(), 1.0, epsilon = 1e-12);
        // Identity map against a constant tail: the best-reply gap vanishes.
        assert!(result.residual <= 1e-8, "residual {}", result.residual);
    }

    #[test]
    fn reported_potential_is_the_envelope_in_the_zero_gauge() {
        let sc = scenario(
            32,
            CongestionFn::Log,
            InteractionKernel::gaussian(0.3, 1.0).unwrap(),
            Potential::linear(0.2, [1.0, 0.0, 0.0]).unwrap(),
        );
        let result = solve_equilibrium(&sc, &ContinuationSchedule::direct()).unwrap();
        let tail = phi_rows(&sc, 1.0, &result.nu);
        for i in 0..32 {
            let sup = (0..32)
                .map(|j| -result.u[i] - sc.cost().get(i, j) - tail[j])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_abs_diff_eq!(sup, 0.0, epsilon = 1e-12);
            let tm = result.map.assignment[i];
            let at_map = -result.u[i] - sc.cost().get(i, tm) - tail[tm];
            assert!(
                at_map.abs() <= result.residual + 1e-12,
                "map misses the envelope argmax by {at_map}"
            );
        }
    }

    #[test]
    fn lambda_bisection_matches_log_closed_form() {
        let grid = Arc::new(SphereGrid::build(SphereDim::S1, 24).unwrap());
        let weights = grid.weights();
        let psi: Vec<f64> =
            (0..24).map(|i| 0.7 * (i as f64 * 0.41).sin() - 0.2 * (i as f64 * 0.13).cos()).collect();
        let (density, lambda) = normalize_lambda(&CongestionFn::Log, &psi, weights).unwrap();
        // For f = ln, mass 1 forces lambda = -ln sum_j e^{psi_j} w_j.
        let closed: f64 = -psi
            .iter()
            .zip(weights)
            .map(|(p, w)| p.exp() * w)
            .sum::<f64>()
            .ln();
        assert_abs_diff_eq!(lambda, closed, epsilon = 1e-10);
        let mass: f64 = density.iter().zip(weights).map(|(d, w)| d * w).sum();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn lambda_bisection_handles_log_linear_congestion() {
        let grid = Arc::new(SphereGrid::build(SphereDim::S1, 16).unwrap());
        let weights = grid.weights();
        let congestion = CongestionFn::log_linear(1.0, 0.5).unwrap();
        let psi: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let (density, _) = normalize_lambda(&congestion, &psi, weights).unwrap();
        let mass: f64 = density.iter().zip(weights).map(|(d, w)| d * w).sum();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-10);
        assert!(density.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn elastic_columns_satisfy_the_stationarity_relation() {
        let grid = Arc::new(SphereGrid::build(SphereDim::S1, 20).unwrap());
        let weights = grid.weights();
        let lw: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let lk: Vec<f64> = (0..20).map(|j| (j as f64 * 0.31).sin() - 2.0).collect();
        let s: Vec<f64> = (0..20).map(|j| 0.3 * (j as f64 * 0.17).cos()).collect();
        let eps = 1e-2;
        for congestion in [CongestionFn::Log, CongestionFn::log_linear(0.7, 0.4).unwrap()] {
            let (dens, eta) = elastic_columns(&congestion, eps, &lk, &lw, &s, 0.0).unwrap();
            let mass: f64 = dens.iter().zip(weights).map(|(d, w)| d * w).sum();
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-9);
            for j in 0..20 {
                let lhs = lw[j] + dens[j].ln();
                let rhs = lk[j] + (-congestion.value(dens[j]) - s[j] - eta) / eps;
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn trivial_stage_recovers_uniform_from_a_perturbed_start() {
        let sc = trivial(24);
        let uniform = 1.0 / sc.grid().total_weight();
        let density: Vec<f64> =
            (0..24).map(|i| uniform * (1.0 + 0.2 * (i as f64 * 0.9).cos())).collect();
        let init = DiscreteMeasure::from_unnormalized(sc.grid_arc(), density).unwrap();
        let mut warm = None;
        let mut history = Vec::new();
        let stage = stage_solve(&sc, 0.0, init, &mut warm, &mut history).unwrap();
        let target = DiscreteMeasure::uniform(sc.grid_arc());
        assert!(stage.nu.sup_distance(&target) < 1e-6, "stage did not return to uniform");
    }

    #[test]
    fn potential_pushes_density_toward_its_minimum() {
        let sc = scenario(
            48,
            CongestionFn::Log,
            InteractionKernel::Zero,
            Potential::linear(0.3, [1.0, 0.0, 0.0]).unwrap(),
        );
        let result = solve_equilibrium(&sc, &ContinuationSchedule::direct()).unwrap();
        let v = sc.v_values();
        let (mut argmin, mut argmax) = (0, 0);
        for i in 0..48 {
            if v[i] < v[argmin] {
                argmin = i;
            }
            if v[i] > v[argmax] {
                argmax = i;
            }
        }
        let d = result.nu.density();
        assert!(
            d[argmin] > d[argmax],
            "density must concentrate where the potential is low: {} vs {}",
            d[argmin],
            d[argmax]
        );
        assert_abs_diff_eq!(result.nu.mass(), 1.0, epsilon = 1e-12);
        assert!(result.nu.density().iter().all(|x| *x > 0.0));
    }

    #[test]
    fn interacting_solve_contracts_and_certifies_the_fixed_point() {
        let sc = scenario(
            32,
            CongestionFn::Log,
            InteractionKernel::gaussian(0.5, 1.0).unwrap(),
            Potential::Zero,
        );
        let result = solve_equilibrium(&sc, &ContinuationSchedule::direct()).unwrap();
        let last = result.history.last().unwrap();
        assert!(last.step_norm < 1e-8, "stage certificate step {}", last.step_norm);
        // Step norms of the full-problem stage shrink monotonically near the end.
        let steps: Vec<f64> = result
            .history
            .iter()
            .filter(|r| r.t == 1.0)
            .map(|r| r.step_norm)
            .collect();
        if steps.len() >= 3 {
            let k = steps.len();
            assert!(steps[k - 1] <= steps[k - 2] && steps[k - 2] <= steps[k - 3]);
        }
        let reply = best_reply(&sc, 1.0, &result.nu, None).unwrap();
        assert!(result.nu.sup_distance(&reply.measure) < 1e-7);
    }

    #[test]
    fn residual_grows_under_perturbation_of_the_solution() {
        let sc = scenario(
            32,
            CongestionFn::Log,
            InteractionKernel::gaussian(0.3, 1.0).unwrap(),
            Potential::linear(0.2, [0.0, 1.0, 0.0]).unwrap(),
        );
        let result = solve_equilibrium(&sc, &ContinuationSchedule::direct()).unwrap();
        let perturbed: Vec<f64> = result
            .nu
            .density()
            .iter()
            .enumerate()
            .map(|(i, d)| d * (1.0 + 0.01 * (2.0 * std::f64::consts::PI * i as f64 / 32.0).cos()))
            .collect();
        let nu2 = DiscreteMeasure::from_unnormalized(sc.grid_arc(), perturbed).unwrap();
        let reply = best_reply(&sc, 1.0, &nu2, None).unwrap();
        let map2 = extract_map_with(&reply.transport, sc.cost(), sc.grid(), TIE_TOL).unwrap();
        let r2 = equilibrium_residual(&sc, &nu2, &map2);
        assert!(
            r2 > result.residual,
            "perturbed residual {r2} should exceed solved residual {}",
            result.residual
        );
    }

    #[test]
    fn condition_margin_tracks_the_interaction_amplitude() {
        let ok = scenario(
            16,
            CongestionFn::Log,
            InteractionKernel::gaussian(0.5, 1.0).unwrap(),
            Potential::Zero,
        );
        let report = check_condition(&ok);
        assert_abs_diff_eq!(report.h_max, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.margin, 0.5, epsilon = 1e-12);
        assert!(report.satisfied);

        let bad = scenario(
            16,
            CongestionFn::Log,
            InteractionKernel::gaussian(1.5, 1.0).unwrap(),
            Potential::Zero,
        );
        let report = check_condition(&bad);
        assert_abs_diff_eq!(report.margin, -0.5, epsilon = 1e-12);
        assert!(!report.satisfied);
    }

    #[test]
    fn iteration_cap_reports_history() {
        let grid = Arc::new(SphereGrid::build(SphereDim::S1, 16).unwrap());
        let mu = DiscreteMeasure::uniform(Arc::clone(&grid));
        let mut solver = SolverParams::default();
        solver.max_fixed_iters = 1;
        solver.eps_schedule = default_eps_schedule(1.0, 1e-2, 0.7);
        let sc = Scenario::new(
            grid,
            mu,
            CongestionFn::Log,
            InteractionKernel::Zero,
            Potential::linear(0.5, [1.0, 0.0, 0.0]).unwrap(),
            solver,
        )
        .unwrap();
        match solve_equilibrium(&sc, &ContinuationSchedule::direct()) {
            Err(Error::FixedPointCap { cap, t, history, .. }) => {
                assert_eq!(cap, 1);
                assert_eq!(t, 1.0);
                assert!(!history.is_empty());
            }
            other => panic!("expected iteration cap, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn restarts_agree_on_the_trivial_equilibrium() {
        let sc = trivial(16);
        let result = solve_equilibrium(&sc, &ContinuationSchedule::direct()).unwrap();
        let distances = uniqueness_probe(&sc, &result.nu, &[1, 2]).unwrap();
        for d in distances {
            assert!(d < 1e-6, "restart landed {d} away");
        }
    }

    #[test]
    fn continuation_schedules_validate() {
        assert!(ContinuationSchedule::from_values(vec![0.0, 0.5, 1.0]).is_ok());
        assert!(ContinuationSchedule::from_values(vec![0.1, 1.0]).is_err());
        assert!(ContinuationSchedule::from_values(vec![0.0, 0.9]).is_err());
        assert!(ContinuationSchedule::from_values(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(ContinuationSchedule::with_steps(0).is_err());
        assert_eq!(ContinuationSchedule::with_steps(5).unwrap().values().len(), 6);
        assert_eq!(ContinuationSchedule::direct().values(), &[0.0, 1.0]);
    }
}
