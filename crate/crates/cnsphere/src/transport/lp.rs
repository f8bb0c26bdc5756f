//! Exact discrete optimal transport via the transportation simplex.
//!
//! Dense formulation: basic cells form a spanning tree of the bipartite
//! supply/demand graph. Starts from the northwest-corner rule, prices with
//! tree-propagated duals, and enters the most negative reduced cost (falling
//! back to Bland's rule after a degenerate streak to guarantee termination).
//! Intended as a small-instance oracle, so sizes are capped.

use ndarray::{Array2, ArrayView2};

use super::TransportSolution;
use crate::model::DiscreteMeasure;
use crate::sphere::CostMatrix;
use crate::{Error, Result};

/// Largest side length the simplex accepts.
pub const LP_SIZE_CAP: usize = 256;

const PIVOT_CAP: usize = 200_000;
const DEGENERATE_STREAK: usize = 64;

/// Exact optimal transport between two measures on a grid.
pub fn exact_ot_lp(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
) -> Result<TransportSolution> {
    exact_ot_lp_masses(&mu.masses(), &nu.masses(), cost.view())
}

/// Exact optimal transport on raw nonnegative masses (zeros allowed).
pub fn exact_ot_lp_masses(
    a: &[f64],
    b: &[f64],
    cost: ArrayView2<f64>,
) -> Result<TransportSolution> {
    let (m, n) = (a.len(), b.len());
    if m > LP_SIZE_CAP || n > LP_SIZE_CAP {
        return Err(Error::LpTooLarge { size: m.max(n), cap: LP_SIZE_CAP });
    }
    if m == 0 || n == 0 {
        return Err(Error::ModelParameter("transport problem has an empty side".into()));
    }
    if cost.nrows() != m || cost.ncols() != n {
        return Err(Error::ModelParameter(format!(
            "cost matrix is {}x{}, masses are {}x{}",
            cost.nrows(),
            cost.ncols(),
            m,
            n
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::ModelParameter("masses must be finite and nonnegative".into()));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 || sa <= 0.0 {
        return Err(Error::Unbalanced { mu_mass: sa, nu_mass: sb });
    }
    // Rescale demands so supplies and demands balance exactly in floats.
    let b: Vec<f64> = b.iter().map(|x| x * sa / sb).collect();

    let mut basis = northwest_corner(a, &b);
    debug_assert_eq!(basis.len(), m + n - 1);

    let cmax = cost.iter().cloned().fold(0.0_f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-11 * (1.0 + cmax);
    let mut alpha = vec![0.0; m];
    let mut beta = vec![0.0; n];
    let mut degenerate_streak = 0usize;
    let mut bland = false;

    for _pivot in 0..PIVOT_CAP {
        compute_duals(&basis, cost, &mut alpha, &mut beta);

        let mut enter: Option<(usize, usize)> = None;
        let mut most_negative = -tol;
        'scan: for i in 0..m {
            for j in 0..n {
                let reduced = cost[[i, j]] - alpha[i] - beta[j];
                if reduced < most_negative {
                    enter = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    most_negative = reduced;
                }
            }
        }
        let Some((ei, ej)) = enter else {
            return Ok(assemble(a, &b, cost, &basis, &alpha, &beta));
        };

        // The unique tree path from row ei to column ej closes the cycle.
        let path = tree_path(&basis, m, n, ei, ej);
        // Entering cell gets +theta; path cells alternate -,+,-,... from ej.
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (k, &cell) in path.iter().enumerate() {
            if k % 2 == 0 {
                let flow = basis[cell].2;
                if flow < theta {
                    theta = flow;
                    leave = cell;
                }
            }
        }
        for (k, &cell) in path.iter().enumerate() {
            if k % 2 == 0 {
                basis[cell].2 -= theta;
            } else {
                basis[cell].2 += theta;
            }
        }
        basis[leave] = (ei, ej, theta);

        if theta <= 1e-15 {
            degenerate_streak += 1;
            if degenerate_streak > DEGENERATE_STREAK {
                bland = true;
            }
        } else {
            degenerate_streak = 0;
        }
    }
    Err(Error::LpStalled { pivots: PIVOT_CAP })
}

/// Northwest-corner initial basis: exactly m+n-1 cells forming a staircase.
fn northwest_corner(a: &[f64], b: &[f64]) -> Vec<(usize, usize, f64)> {
    let (m, n) = (a.len(), b.len());
    let mut ra = a.to_vec();
    let mut rb = b.to_vec();
    let mut cells = Vec::with_capacity(m + n - 1);
    let (mut i, mut j) = (0, 0);
    loop {
        let x = ra[i].min(rb[j]).max(0.0);
        cells.push((i, j, x));
        ra[i] -= x;
        rb[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if ra[i] <= 0.0 && i < m - 1 {
            i += 1;
        } else if j < n - 1 {
            j += 1;
        } else {
            i += 1;
        }
    }
    cells
}

/// Solves alpha_i + beta_j = C_ij over the basis tree, rooted at alpha_0 = 0.
fn compute_duals(
    basis: &[(usize, usize, f64)],
    cost: ArrayView2<f64>,
    alpha: &mut [f64],
    beta: &mut [f64],
) {
    let (m, n) = (alpha.len(), beta.len());
    // Node ids: rows 0..m, columns m..m+n.
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m + n];
    for (k, &(i, j, _)) in basis.iter().enumerate() {
        adj[i].push((m + j, k));
        adj[m + j].push((i, k));
    }
    let mut seen = vec![false; m + n];
    let mut stack = vec![0usize];
    alpha[0] = 0.0;
    seen[0] = true;
    while let Some(node) = stack.pop() {
        for &(next, k) in &adj[node] {
            if seen[next] {
                continue;
            }
            seen[next] = true;
            let (i, j, _) = basis[k];
            if next >= m {
                beta[next - m] = cost[[i, j]] - alpha[i];
            } else {
                alpha[next] = cost[[i, j]] - beta[j];
            }
            stack.push(next);
        }
    }
}

/// Basis-cell indices along the tree path from row node `ei` to column node
/// `ej`, ordered starting with the cell adjacent to `ej`.
fn tree_path(
    basis: &[(usize, usize, f64)],
    m: usize,
    n: usize,
    ei: usize,
    ej: usize,
) -> Vec<usize> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m + n];
    for (k, &(i, j, _)) in basis.iter().enumerate() {
        adj[i].push((m + j, k));
        adj[m + j].push((i, k));
    }
    let target = m + ej;
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; m + n];
    let mut seen = vec![false; m + n];
    let mut queue = std::collections::VecDeque::new();
    seen[ei] = true;
    queue.push_back(ei);
    while let Some(node) = queue.pop_front() {
        if node == target {
            break;
        }
        for &(next, k) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, k));
                queue.push_back(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = target;
    while let Some((prev, k)) = parent[node] {
        path.push(k);
        node = prev;
    }
    debug_assert_eq!(node, ei, "basis graph must stay a spanning tree");
    path
}

fn assemble(
    a: &[f64],
    b: &[f64],
    cost: ArrayView2<f64>,
    basis: &[(usize, usize, f64)],
    alpha: &[f64],
    beta: &[f64],
) -> TransportSolution {
    let (m, n) = (a.len(), b.len());
    let mut plan = Array2::zeros((m, n));
    let mut transport_cost = 0.0;
    for &(i, j, x) in basis {
        plan[[i, j]] += x;
        transport_cost += x * cost[[i, j]];
    }
    // Paper sign convention: -u + u* <= c with alpha + beta <= c.
    let u: Vec<f64> = alpha.iter().map(|x| -x).collect();
    let u_star = beta.to_vec();
    TransportSolution {
        plan,
        u,
        u_star,
        transport_cost,
        eps_final: 0.0,
        dual_f: alpha.to_vec(),
        dual_g: beta.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Array2<f64>) {
        let mut a: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        a.iter_mut().for_each(|x| *x /= sa);
        b.iter_mut().for_each(|x| *x /= sb);
        let cost =
            Array2::from_shape_fn((m, n), |_| rng.random_range(0.0..5.0));
        (a, b, cost)
    }

    /// Optimality certificate: feasible primal + feasible dual + zero gap.
    fn assert_certified_optimal(a: &[f64], b: &[f64], cost: ArrayView2<f64>, sol: &TransportSolution) {
        let (m, n) = (a.len(), b.len());
        for i in 0..m {
            assert_abs_diff_eq!(sol.plan.row(i).sum(), a[i], epsilon = 1e-12);
        }
        for j in 0..n {
            assert_abs_diff_eq!(sol.plan.column(j).sum(), b[j], epsilon = 1e-12);
        }
        assert!(sol.plan.iter().all(|x| *x >= 0.0));
        let (alpha, beta) = sol.duals();
        for i in 0..m {
            for j in 0..n {
                assert!(
                    cost[[i, j]] - alpha[i] - beta[j] >= -1e-9,
                    "dual infeasible at ({i},{j})"
                );
            }
        }
        let dual: f64 = alpha.iter().zip(a).map(|(x, w)| x * w).sum::<f64>()
            + beta.iter().zip(b).map(|(x, w)| x * w).sum::<f64>();
        assert_abs_diff_eq!(dual, sol.transport_cost, epsilon = 1e-9);
    }

    #[test]
    fn forced_two_by_two_assignment() {
        let cost = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let sol = exact_ot_lp_masses(&[1.0, 0.0], &[0.0, 1.0], cost.view()).unwrap();
        assert_abs_diff_eq!(sol.plan[[0, 1]], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.plan[[0, 0]], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.transport_cost, 1.0, epsilon = 1e-12);
        assert_eq!(sol.eps_final, 0.0);
    }

    #[test]
    fn identical_marginals_cost_nothing_on_zero_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 12;
        let mut a: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let sa: f64 = a.iter().sum();
        a.iter_mut().for_each(|x| *x /= sa);
        let cost = Array2::from_shape_fn((m, m), |(i, j)| {
            if i == j {
                0.0
            } else {
                1.0 + rng.random_range(0.0..2.0)
            }
        });
        let sol = exact_ot_lp_masses(&a, &a, cost.view()).unwrap();
        assert_abs_diff_eq!(sol.transport_cost, 0.0, epsilon = 1e-12);
        for i in 0..m {
            assert_abs_diff_eq!(sol.plan[[i, i]], a[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn random_instances_are_certified_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..25 {
            let m = 2 + (trial % 9);
            let n = 2 + ((trial * 5) % 11);
            let (a, b, cost) = random_instance(&mut rng, m, n);
            let sol = exact_ot_lp_masses(&a, &b, cost.view()).unwrap();
            assert_certified_optimal(&a, &b, cost.view(), &sol);
        }
    }

    #[test]
    fn degenerate_equal_masses_terminate() {
        // Many ties force degenerate pivots; the Bland fallback must finish.
        let m = 10;
        let a = vec![0.1; m];
        let cost = Array2::from_shape_fn((m, m), |(i, j)| ((i + j) % 3) as f64);
        let sol = exact_ot_lp_masses(&a, &a, cost.view()).unwrap();
        assert_certified_optimal(&a, &a, cost.view(), &sol);
    }

    #[test]
    fn oversized_and_unbalanced_inputs_error() {
        let big = vec![1.0 / 300.0; 300];
        let cost = Array2::zeros((300, 300));
        assert!(matches!(
            exact_ot_lp_masses(&big, &big, cost.view()),
            Err(Error::LpTooLarge { size: 300, cap: LP_SIZE_CAP })
        ));
        let cost = Array2::zeros((2, 2));
        assert!(matches!(
            exact_ot_lp_masses(&[0.6, 0.6], &[0.5, 0.5], cost.view()),
            Err(Error::Unbalanced { .. })
        ));
        assert!(matches!(
            exact_ot_lp_masses(&[0.5, -0.5], &[0.0, 0.0], cost.view()),
            Err(Error::ModelParameter(_))
        ));
    }
}
