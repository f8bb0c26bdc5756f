//! End-to-end acceptance checks for the equilibrium solver and its
//! verification suite. Each test prints exactly one `[PASS]`/`[FAIL]` line;
//! run with `cargo test --test acceptance -- --nocapture` to see all ten.
//!
//! The built-in scenario suite is solved once (analyses enabled) and shared
//! across the criteria that quantify over it.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use cnsphere::analysis::{assemble_linearized, mtw_check};
use cnsphere::cli::{
    build_scenario, parse_config, run, run_scenario, scenario_suite, ResultBundle, RunConfig,
};
use cnsphere::equilibrium::{solve_equilibrium, EquilibriumResult};
use cnsphere::model::{
    default_eps_schedule, energy, nu_bounds, v_field, CongestionFn, DiscreteMeasure,
    InteractionKernel, Potential,
};
use cnsphere::sphere::{CostMatrix, SphereDim, SphereGrid};
use cnsphere::transport::{exact_ot_lp, sinkhorn, slack};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

struct SuiteEntry {
    config: RunConfig,
    outcome: Result<(ResultBundle, EquilibriumResult), String>,
}

/// Solves the whole built-in suite once; later criteria quantify over it.
fn suite() -> &'static [SuiteEntry] {
    static SUITE: OnceLock<Vec<SuiteEntry>> = OnceLock::new();
    SUITE.get_or_init(|| {
        scenario_suite()
            .into_iter()
            .map(|config| {
                let outcome = run_scenario(&config).map_err(|e| e.to_string());
                SuiteEntry { config, outcome }
            })
            .collect()
    })
}

fn converged() -> impl Iterator<Item = (&'static RunConfig, &'static ResultBundle, &'static EquilibriumResult)>
{
    suite().iter().filter_map(|e| e.outcome.as_ref().ok().map(|(b, r)| (&e.config, b, r)))
}

fn report(criterion: usize, pass: bool, detail: &str) -> bool {
    let tag = if pass { "[PASS]" } else { "[FAIL]" };
    println!("{tag} criterion {criterion}: {detail}");
    pass
}

#[test]
fn criterion_01_trivial_equilibrium_is_uniform() {
    let mut pass = true;
    let mut parts = Vec::new();
    let start = Instant::now();
    for (dim, resolution, label) in [(1u8, 64usize, "S1/64"), (2, 2, "S2/162")] {
        let text = format!(
            r#"{{"name": "trivial", "dim": {dim}, "resolution": {resolution}, "f": "log"}}"#
        );
        let config = parse_config(&text).unwrap();
        let (scenario, schedule) = build_scenario(&config).unwrap();
        let result = solve_equilibrium(&scenario, &schedule).unwrap();
        let uniform = DiscreteMeasure::uniform(scenario.grid_arc());
        let dist = result.nu.sup_distance(&uniform);
        pass &= dist < 1e-6 && result.residual < 1e-6;
        parts.push(format!("{label} sup {dist:.1e} residual {:.1e}", result.residual));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 5.0;
    let ok = report(
        1,
        pass,
        &format!("trivial equilibria are uniform ({}; {secs:.2}s < 5s)", parts.join(", ")),
    );
    assert!(ok);
}

#[test]
fn criterion_02_potential_oscillation_bound() {
    let mut pass = true;
    let mut count = 0;
    let mut tightest = f64::INFINITY;
    for (config, _, result) in converged() {
        let n = result.u.len() as f64;
        let bound = PI * PI / 2.0 + 5.0 * config.solver.eps_stop * n.ln();
        let osc = result.u.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - result.u.iter().cloned().fold(f64::INFINITY, f64::min);
        pass &= osc <= bound;
        tightest = tightest.min(bound - osc);
        count += 1;
    }
    pass &= count >= 10;
    let ok = report(
        2,
        pass,
        &format!(
            "osc u <= pi^2/2 + grid slack on all {count} converged suite runs \
             (smallest headroom {tightest:.3})"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_03_density_sandwich() {
    let mut pass = true;
    let mut count = 0;
    let mut tightest = f64::INFINITY;
    for (config, _, result) in converged() {
        let (scenario, _) = build_scenario(config).unwrap();
        let (lo, hi) = nu_bounds(
            scenario.congestion(),
            scenario.interaction(),
            scenario.potential(),
            scenario.grid(),
        );
        let delta = 5.0 * config.solver.eps_stop * (scenario.grid().len() as f64).ln();
        let dmin = result.nu.density().iter().cloned().fold(f64::INFINITY, f64::min);
        let dmax = result.nu.density().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        pass &= dmin >= lo - delta && dmax <= hi + delta;
        tightest = tightest.min((dmin - (lo - delta)).min((hi + delta) - dmax));
        count += 1;
    }
    pass &= count >= 10;
    let ok = report(
        3,
        pass,
        &format!(
            "density inside [nu_lower - delta, nu_upper + delta] on all {count} runs \
             (smallest headroom {tightest:.2e})"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_04_map_stays_away_from_the_cut_locus() {
    let mut pass = true;
    let mut count = 0;
    let mut longest = 0.0_f64;
    for (_, _, result) in converged() {
        let d = result.map.max_displacement();
        pass &= d < PI - 1e-3;
        longest = longest.max(d);
        count += 1;
    }
    pass &= count >= 10;
    let ok = report(
        4,
        pass,
        &format!(
            "max displacement {longest:.3} < pi - 1e-3 = {:.3} on all {count} runs",
            PI - 1e-3
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_invertibility_regime_is_consistent() {
    let mut pass = true;
    let mut checked = 0;
    let mut worst_hj = 0.0_f64;
    let mut h_dev = 0.0_f64;
    for (config, bundle, result) in converged() {
        if bundle.condition.margin <= 0.0 {
            continue;
        }
        let hj = bundle.hj_norm.expect("suite runs enable the linearized analysis");
        let kernel = bundle.kernel.as_ref().expect("suite runs enable the linearized analysis");
        pass &= hj < 1.0 && kernel.invertible;
        worst_hj = worst_hj.max(hj);
        if config.f.as_str() == Some("log") {
            let (scenario, _) = build_scenario(config).unwrap();
            let op = assemble_linearized(&scenario, result).unwrap();
            for h in &op.h {
                h_dev = h_dev.max((h - 1.0).abs());
            }
        }
        checked += 1;
    }
    pass &= checked >= 8 && h_dev <= 1e-12;
    let ok = report(
        5,
        pass,
        &format!(
            "on {checked} positive-margin runs: hj_norm <= {worst_hj:.3} < 1, kernels \
             invertible, log-congestion h within {h_dev:.1e} of 1"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_06_transport_matches_the_exact_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2026);
    let schedule = default_eps_schedule(0.5, 1e-3, 0.7);
    let eps_min = *schedule.last().unwrap();
    let mut pass = true;
    let mut cases = 0;
    let mut worst_gap = 0.0_f64;
    let mut worst_marginal = 0.0_f64;
    for k in 0..20 {
        let n = 8 + (k % 8) * 8;
        let grid = Arc::new(SphereGrid::build(SphereDim::S1, n).unwrap());
        let cost = CostMatrix::from_grid(&grid);
        let da: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let db: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let mu = DiscreteMeasure::from_unnormalized(Arc::clone(&grid), da).unwrap();
        let nu = DiscreteMeasure::from_unnormalized(Arc::clone(&grid), db).unwrap();
        let entropic = sinkhorn(&mu, &nu, &cost, &schedule).unwrap();
        let lp = exact_ot_lp(&mu, &nu, &cost).unwrap();
        let gap = (entropic.transport_cost - lp.transport_cost).abs();
        let allowed = slack(eps_min, n) + 1e-8;
        let marginal = entropic.marginal_violation(&mu.masses(), &nu.masses());
        pass &= gap <= allowed && marginal <= 1e-9;
        worst_gap = worst_gap.max(gap / allowed);
        worst_marginal = worst_marginal.max(marginal);
        cases += 1;
    }
    let ok = report(
        6,
        pass,
        &format!(
            "{cases} random instances: |entropic - exact| <= eps ln N (worst gap at \
             {worst_gap:.1e} of the allowance), marginals <= {worst_marginal:.1e}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_energy_differential_matches_v_field() {
    let n = 48;
    let grid = Arc::new(SphereGrid::build(SphereDim::S1, n).unwrap());
    let congestion = CongestionFn::log_linear(1.0, 0.5).unwrap();
    let kernel = InteractionKernel::gaussian(0.4, 0.8).unwrap();
    let potential = Potential::linear(0.3, [0.0, 1.0, 0.0]).unwrap();
    let uniform = 1.0 / grid.total_weight();
    let base: Vec<f64> = (0..n)
        .map(|i| uniform * (1.0 + 0.3 * (2.0 * PI * i as f64 / n as f64).cos()))
        .collect();
    // Mean-zero direction: a pure second harmonic integrates to zero exactly
    // on the equally weighted circle grid.
    let delta: Vec<f64> = (0..n)
        .map(|i| 0.5 * uniform * (4.0 * PI * i as f64 / n as f64).cos())
        .collect();
    let nu = DiscreteMeasure::from_density(Arc::clone(&grid), base.clone()).unwrap();
    let e0 = energy(&nu, &congestion, &kernel, &potential).unwrap();
    let vf = v_field(&nu, &congestion, &kernel, &potential).unwrap();
    let pairing: f64 = vf
        .iter()
        .zip(&delta)
        .zip(grid.weights())
        .map(|((v, d), w)| v * d * w)
        .sum();
    let mut errs = Vec::new();
    for t in [1e-3, 1e-4] {
        let moved: Vec<f64> = base.iter().zip(&delta).map(|(b, d)| b + t * d).collect();
        let nu_t = DiscreteMeasure::from_density(Arc::clone(&grid), moved).unwrap();
        let e1 = energy(&nu_t, &congestion, &kernel, &potential).unwrap();
        errs.push(((e1 - e0) / t - pairing).abs());
    }
    let order = (errs[0] / errs[1]).log10();
    let pass = order >= 0.9 && errs[0] <= 1e-3 && errs[1] <= 1e-4;
    let ok = report(
        7,
        pass,
        &format!(
            "finite differences of the energy match <v_field, delta>_m: errors {:.2e} @1e-3, \
             {:.2e} @1e-4, observed order {order:.2}",
            errs[0], errs[1]
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_cost_curvature_is_positive_on_the_sphere() {
    let grid = SphereGrid::build(SphereDim::S2, 2).unwrap();
    let start = Instant::now();
    let coarse = mtw_check(&grid, 200, 1e-2, 7).unwrap();
    let halved = mtw_check(&grid, 200, 5e-3, 7).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let drift = (halved.min_value - coarse.min_value).abs();
    let pass = coarse.min_value > 0.0
        && halved.min_value > 0.0
        && drift <= 0.2 * coarse.min_value
        && secs < 60.0;
    let ok = report(
        8,
        pass,
        &format!(
            "curvature form min {:.4} > 0 over {} pairs, step-halving drift {:.1}% \
             ({secs:.2}s < 60s)",
            coarse.min_value,
            coarse.samples,
            100.0 * drift / coarse.min_value
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_continuation_agrees_with_the_direct_solve() {
    let find = |name: &str| {
        suite()
            .iter()
            .find(|e| e.config.name == name)
            .and_then(|e| e.outcome.as_ref().ok())
            .map(|(_, r)| r)
    };
    let (direct, walked) = (find("continued-direct"), find("continued-walked"));
    let (pass, detail) = match (direct, walked) {
        (Some(d), Some(w)) => {
            let dist = d.nu.sup_distance(&w.nu);
            (dist < 1e-6, format!("5-step and direct solves agree: sup distance {dist:.2e} < 1e-6"))
        }
        _ => (false, "continuation pair did not converge".to_string()),
    };
    let ok = report(9, pass, &detail);
    assert!(ok);
}

#[test]
fn criterion_10_runs_are_byte_deterministic() {
    let config = scenario_suite()
        .into_iter()
        .find(|c| c.name == "margin-half")
        .expect("suite contains margin-half");
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run(&config, dir_a.path()).unwrap();
    run(&config, dir_b.path()).unwrap();
    let csv_a = std::fs::read(dir_a.path().join("margin-half.density.csv")).unwrap();
    let csv_b = std::fs::read(dir_b.path().join("margin-half.density.csv")).unwrap();
    let pass = !csv_a.is_empty() && csv_a == csv_b;
    let ok = report(
        10,
        pass,
        &format!("identical config + seed give byte-identical density CSVs ({} bytes)", csv_a.len()),
    );
    assert!(ok);
}
