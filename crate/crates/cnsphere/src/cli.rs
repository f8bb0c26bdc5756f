//! JSON-configured runs: parse a config, build the scenario, solve it, run
//! the enabled analyses, and write a result bundle (JSON) plus density and
//! iteration-history CSVs.
//!
//! A config is self-contained: the result bundle echoes it back with all
//! defaults resolved, so a bundle can be re-run verbatim. Scenario families
//! are given either as a bare name (`"f": "log"`) or as an object with a
//! `family` key and its parameters (`"phi": {"family": "gaussian",
//! "amplitude": 0.5, "sigma": 1.0}`). Unknown keys and missing parameters
//! are rejected by name.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::analysis::{
    assemble_linearized, hj_norm, kernel_check, mtw_check, residual_threshold, AprioriReport,
    KernelReport, MtwReport,
};
use crate::equilibrium::{
    check_condition, solve_equilibrium, ConditionReport, ContinuationSchedule, EquilibriumResult,
};
use crate::model::{
    default_eps_schedule, CongestionFn, DiscreteMeasure, InteractionKernel, Potential, Scenario,
    SolverParams,
};
use crate::sphere::{SphereDim, SphereGrid, SpherePoint};
use crate::{Error, Result};

fn default_name() -> String {
    "run".into()
}

fn default_uniform() -> Value {
    Value::String("uniform".into())
}

fn default_zero() -> Value {
    Value::String("zero".into())
}

/// One solvable problem instance, as read from JSON.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Used to name output files.
    #[serde(default = "default_name")]
    pub name: String,
    /// 1 for the circle, 2 for the sphere.
    pub dim: u8,
    /// Node count on S^1, subdivision level on S^2.
    pub resolution: usize,
    /// Source measure family: "uniform" or cosine_bump {amplitude, axis}.
    #[serde(default = "default_uniform")]
    pub mu: Value,
    /// Congestion family: "log" or log_linear {alpha, beta}.
    pub f: Value,
    /// Interaction family: "zero", gaussian {amplitude, sigma}, or
    /// cosine {amplitude}.
    #[serde(default = "default_zero")]
    pub phi: Value,
    /// External potential family: "zero" or linear {amplitude, axis}.
    #[serde(default = "default_zero", rename = "V")]
    pub v: Value,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    /// Output directory; the CLI --out flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Seeds the curvature-check sampler.
    #[serde(default)]
    pub seed: u64,
}

/// Solver knobs, all optional in the JSON.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub eps_start: f64,
    pub eps_stop: f64,
    pub eps_factor: f64,
    pub tol_marginal: f64,
    pub max_sinkhorn_iters: usize,
    pub tau: f64,
    pub tol_fixed: f64,
    pub max_fixed_iters: usize,
    /// 1 solves the full problem directly; n > 1 walks t = 0, 1/n, ..., 1.
    pub continuation_steps: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let p = SolverParams::default();
        SolverSpec {
            eps_start: p.eps_schedule[0],
            eps_stop: p.eps_final(),
            eps_factor: 0.7,
            tol_marginal: p.tol_marginal,
            max_sinkhorn_iters: p.max_sinkhorn_iters,
            tau: p.tau,
            tol_fixed: p.tol_fixed,
            max_fixed_iters: p.max_fixed_iters,
            continuation_steps: p.continuation_steps,
        }
    }
}

impl SolverSpec {
    fn to_params(&self) -> Result<SolverParams> {
        if !(self.eps_start > self.eps_stop
            && self.eps_stop > 0.0
            && self.eps_factor > 0.0
            && self.eps_factor < 1.0)
        {
            return Err(Error::Config(format!(
                "solver: need eps_start > eps_stop > 0 and eps_factor in (0, 1), \
                 got eps_start {}, eps_stop {}, eps_factor {}",
                self.eps_start, self.eps_stop, self.eps_factor
            )));
        }
        let params = SolverParams {
            eps_schedule: default_eps_schedule(self.eps_start, self.eps_stop, self.eps_factor),
            tol_marginal: self.tol_marginal,
            max_sinkhorn_iters: self.max_sinkhorn_iters,
            tau: self.tau,
            tol_fixed: self.tol_fixed,
            max_fixed_iters: self.max_fixed_iters,
            continuation_steps: self.continuation_steps,
        };
        params.validate().map_err(|e| Error::Config(format!("solver: {e}")))?;
        Ok(params)
    }
}

/// Which post-solve analyses to run.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSpec {
    /// Include the a priori bound report in the bundle.
    pub apriori: bool,
    /// Assemble the linearized operator; report its interaction norm and
    /// kernel check.
    pub linearized: bool,
    /// Sample the cost-curvature form (S^2 only; vacuous on the circle).
    pub mtw: bool,
    pub mtw_samples: usize,
    pub fd_step: f64,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec { apriori: true, linearized: true, mtw: true, mtw_samples: 200, fd_step: 1e-2 }
    }
}

impl AnalysisSpec {
    pub fn disabled() -> Self {
        AnalysisSpec { apriori: false, linearized: false, mtw: false, ..AnalysisSpec::default() }
    }
}

/// Parses and validates a JSON config. Family names, their parameters, and
/// solver knobs are all checked here so errors carry the offending field.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    SphereDim::try_from_u8(config.dim)?;
    MuSpec::parse(&config.mu)?;
    parse_congestion(&config.f)?;
    parse_interaction(&config.phi)?;
    parse_potential(&config.v)?;
    config.solver.to_params()?;
    if config.analysis.mtw_samples == 0 && config.analysis.mtw {
        return Err(Error::Config("analysis: mtw_samples must be positive".into()));
    }
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Splits a family value into its name and parameter map.
fn family_of(value: &Value, field: &str) -> Result<(String, Map<String, Value>)> {
    match value {
        Value::String(s) => Ok((s.clone(), Map::new())),
        Value::Object(map) => {
            let name = map
                .get("family")
                .and_then(Value::as_str)
                .ok_or_else(|| {
                    Error::Config(format!("{field}: family object needs a string 'family' key"))
                })?
                .to_string();
            let mut rest = map.clone();
            rest.remove("family");
            Ok((name, rest))
        }
        other => Err(Error::Config(format!(
            "{field}: expected a family name or object, got {other}"
        ))),
    }
}

fn take_f64(map: &mut Map<String, Value>, field: &str, key: &str) -> Result<f64> {
    let value = map
        .remove(key)
        .ok_or_else(|| Error::Config(format!("{field}: missing required parameter '{key}'")))?;
    value
        .as_f64()
        .ok_or_else(|| Error::Config(format!("{field}: parameter '{key}' must be a number")))
}

fn take_axis(map: &mut Map<String, Value>, field: &str, default: [f64; 3]) -> Result<[f64; 3]> {
    let Some(value) = map.remove("axis") else {
        return Ok(default);
    };
    let parts: Vec<f64> = value
        .as_array()
        .map(|a| a.iter().filter_map(Value::as_f64).collect())
        .unwrap_or_default();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "{field}: parameter 'axis' must be an array of 3 numbers"
        )));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn reject_leftovers(map: &Map<String, Value>, field: &str) -> Result<()> {
    if let Some(key) = map.keys().next() {
        return Err(Error::Config(format!("{field}: unknown parameter '{key}'")));
    }
    Ok(())
}

/// Source measure family, validated before any grid exists.
enum MuSpec {
    Uniform,
    CosineBump { amplitude: f64, axis: [f64; 3] },
}

impl MuSpec {
    fn parse(value: &Value) -> Result<MuSpec> {
        let (name, mut params) = family_of(value, "mu")?;
        match name.as_str() {
            "uniform" => {
                reject_leftovers(&params, "mu")?;
                Ok(MuSpec::Uniform)
            }
            "cosine_bump" => {
                let amplitude = take_f64(&mut params, "mu", "amplitude")?;
                let axis = take_axis(&mut params, "mu", [1.0, 0.0, 0.0])?;
                reject_leftovers(&params, "mu")?;
                if !(amplitude.abs() < 1.0) {
                    return Err(Error::Config(format!(
                        "mu: cosine_bump amplitude must satisfy |a| < 1 to stay positive, got {amplitude}"
                    )));
                }
                Ok(MuSpec::CosineBump { amplitude, axis })
            }
            other => Err(Error::Config(format!(
                "mu: unknown family '{other}' (expected 'uniform' or 'cosine_bump')"
            ))),
        }
    }

    fn instantiate(&self, grid: &Arc<SphereGrid>) -> Result<DiscreteMeasure> {
        match *self {
            MuSpec::Uniform => Ok(DiscreteMeasure::uniform(Arc::clone(grid))),
            MuSpec::CosineBump { amplitude, axis } => {
                let axis = SpherePoint::normalized(axis)?;
                let density: Vec<f64> =
                    grid.nodes().iter().map(|p| 1.0 + amplitude * p.dot(&axis)).collect();
                DiscreteMeasure::from_unnormalized(Arc::clone(grid), density)
            }
        }
    }
}

fn parse_congestion(value: &Value) -> Result<CongestionFn> {
    let (name, mut params) = family_of(value, "f")?;
    match name.as_str() {
        "log" => {
            reject_leftovers(&params, "f")?;
            Ok(CongestionFn::Log)
        }
        "log_linear" => {
            let alpha = take_f64(&mut params, "f", "alpha")?;
            let beta = take_f64(&mut params, "f", "beta")?;
            reject_leftovers(&params, "f")?;
            CongestionFn::log_linear(alpha, beta).map_err(|e| Error::Config(format!("f: {e}")))
        }
        other => Err(Error::Config(format!(
            "f: unknown family '{other}' (expected 'log' or 'log_linear')"
        ))),
    }
}

fn parse_interaction(value: &Value) -> Result<InteractionKernel> {
    let (name, mut params) = family_of(value, "phi")?;
    match name.as_str() {
        "zero" => {
            reject_leftovers(&params, "phi")?;
            Ok(InteractionKernel::Zero)
        }
        "gaussian" => {
            let amplitude = take_f64(&mut params, "phi", "amplitude")?;
            let sigma = take_f64(&mut params, "phi", "sigma")?;
            reject_leftovers(&params, "phi")?;
            InteractionKernel::gaussian(amplitude, sigma)
                .map_err(|e| Error::Config(format!("phi: {e}")))
        }
        "cosine" => {
            let amplitude = take_f64(&mut params, "phi", "amplitude")?;
            reject_leftovers(&params, "phi")?;
            InteractionKernel::cosine(amplitude).map_err(|e| Error::Config(format!("phi: {e}")))
        }
        other => Err(Error::Config(format!(
            "phi: unknown family '{other}' (expected 'zero', 'gaussian', or 'cosine')"
        ))),
    }
}

fn parse_potential(value: &Value) -> Result<Potential> {
    let (name, mut params) = family_of(value, "V")?;
    match name.as_str() {
        "zero" => {
            reject_leftovers(&params, "V")?;
            Ok(Potential::Zero)
        }
        "linear" => {
            let amplitude = take_f64(&mut params, "V", "amplitude")?;
            let axis = take_axis(&mut params, "V", [0.0, 0.0, 1.0])?;
            reject_leftovers(&params, "V")?;
            Potential::linear(amplitude, axis).map_err(|e| Error::Config(format!("V: {e}")))
        }
        other => Err(Error::Config(format!(
            "V: unknown family '{other}' (expected 'zero' or 'linear')"
        ))),
    }
}

/// Builds the scenario and continuation schedule a config describes.
pub fn build_scenario(config: &RunConfig) -> Result<(Scenario, ContinuationSchedule)> {
    let dim = SphereDim::try_from_u8(config.dim)?;
    let grid = Arc::new(SphereGrid::build(dim, config.resolution)?);
    let mu = MuSpec::parse(&config.mu)?.instantiate(&grid)?;
    let congestion = parse_congestion(&config.f)?;
    let interaction = parse_interaction(&config.phi)?;
    let potential = parse_potential(&config.v)?;
    let solver = config.solver.to_params()?;
    let steps = solver.continuation_steps;
    let scenario = Scenario::new(grid, mu, congestion, interaction, potential, solver)?;
    let schedule = ContinuationSchedule::with_steps(steps)?;
    Ok((scenario, schedule))
}

/// Everything a run produces, ready for serialization.
#[derive(Clone, Debug, Serialize)]
pub struct ResultBundle {
    /// The config, with defaults resolved; re-running it reproduces the rest
    /// of this bundle.
    pub config: RunConfig,
    pub nodes: usize,
    pub lambda: f64,
    pub residual: f64,
    /// Residuals at or below this count as converged at grid scale.
    pub residual_threshold: f64,
    pub transport_cost: f64,
    pub eps_final: f64,
    pub iterations: usize,
    pub condition: ConditionReport,
    /// Present when the invertibility condition fails; the run still
    /// proceeds, since the condition is sufficient, not necessary.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub apriori: Option<AprioriReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hj_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mtw: Option<MtwReport>,
    pub solve_ms: u128,
    pub analysis_ms: u128,
}

/// Solves a config and runs its enabled analyses, returning the bundle and
/// the raw result. Performs no file IO; see [`run`] for the writing wrapper.
pub fn run_scenario(config: &RunConfig) -> Result<(ResultBundle, EquilibriumResult)> {
    let (scenario, schedule) = build_scenario(config)?;
    let condition = check_condition(&scenario);
    let warning = (!condition.satisfied).then(|| {
        format!(
            "invertibility margin {:.3} is not positive; uniqueness is not guaranteed",
            condition.margin
        )
    });

    let solve_start = Instant::now();
    let result = solve_equilibrium(&scenario, &schedule)?;
    let solve_ms = solve_start.elapsed().as_millis();

    let analysis_start = Instant::now();
    let mut hj = None;
    let mut kernel = None;
    let mut mtw = None;
    if config.analysis.linearized {
        let op = assemble_linearized(&scenario, &result)?;
        hj = Some(hj_norm(&op));
        kernel = Some(kernel_check(&op));
    }
    if config.analysis.mtw && scenario.grid().dim() == SphereDim::S2 {
        mtw = Some(mtw_check(
            scenario.grid(),
            config.analysis.mtw_samples,
            config.analysis.fd_step,
            config.seed,
        )?);
    }
    let analysis_ms = analysis_start.elapsed().as_millis();

    let n = scenario.grid().len();
    let bundle = ResultBundle {
        config: config.clone(),
        nodes: n,
        lambda: result.lambda,
        residual: result.residual,
        residual_threshold: residual_threshold(scenario.solver().eps_final(), n),
        transport_cost: result.transport.transport_cost,
        eps_final: result.transport.eps_final,
        iterations: result.history.len(),
        condition,
        warning,
        apriori: config.analysis.apriori.then(|| result.bounds.clone()),
        hj_norm: hj,
        kernel,
        mtw,
        solve_ms,
        analysis_ms,
    };
    Ok((bundle, result))
}

/// Node-by-node solution table. Columns: node index, coordinates, node
/// weight, source density, equilibrium density, potential, target index of
/// the transport map, and geodesic displacement.
pub fn density_csv(scenario: &Scenario, result: &EquilibriumResult) -> String {
    let grid = scenario.grid();
    let mut out = String::from("index,x,y,z,weight,mu,nu,u,T_index,displacement\n");
    for i in 0..grid.len() {
        let c = grid.node(i).coords();
        out.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{}\n",
            c[0],
            c[1],
            c[2],
            grid.weight(i),
            scenario.mu().density_at(i),
            result.nu.density_at(i),
            result.u[i],
            result.map.assignment[i],
            result.map.displacement[i],
        ));
    }
    out
}

/// Iteration history table, one row per stage-solver sweep at the final
/// regularization level.
pub fn history_csv(result: &EquilibriumResult) -> String {
    let mut out = String::from("t,iter,step_norm,residual,lambda,tau\n");
    for r in &result.history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.t, r.iter, r.step_norm, r.residual, r.lambda, r.tau
        ));
    }
    out
}

/// Solves a config and writes `<name>.result.json`, `<name>.density.csv`,
/// and `<name>.history.csv` into `out_dir`. A run that hits the fixed-point
/// cap leaves `<name>.failure.json` with the iteration history attached.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<ResultBundle> {
    match run_scenario(config) {
        Ok((bundle, result)) => {
            let (scenario, _) = build_scenario(config)?;
            fs::create_dir_all(out_dir)?;
            let json = serde_json::to_string_pretty(&bundle)
                .map_err(|e| Error::Config(format!("cannot serialize result: {e}")))?;
            fs::write(out_dir.join(format!("{}.result.json", config.name)), json)?;
            fs::write(
                out_dir.join(format!("{}.density.csv", config.name)),
                density_csv(&scenario, &result),
            )?;
            fs::write(
                out_dir.join(format!("{}.history.csv", config.name)),
                history_csv(&result),
            )?;
            Ok(bundle)
        }
        Err(err) => {
            if let Error::FixedPointCap { history, .. } = &err {
                let record = json!({
                    "config": config,
                    "error": err.to_string(),
                    "history": history,
                });
                if fs::create_dir_all(out_dir).is_ok() {
                    let _ = fs::write(
                        out_dir.join(format!("{}.failure.json", config.name)),
                        serde_json::to_string_pretty(&record).unwrap_or_default(),
                    );
                }
            }
            Err(err)
        }
    }
}

/// The built-in scenario suite: both dimensions, both congestion families,
/// interaction strengths walking the invertibility margin down to failure,
/// a non-uniform source, and a direct-vs-continued pair.
pub fn scenario_suite() -> Vec<RunConfig> {
    let texts = [
        r#"{"name": "trivial-circle", "dim": 1, "resolution": 64, "f": "log"}"#,
        r#"{"name": "trivial-sphere", "dim": 2, "resolution": 2, "f": "log"}"#,
        r#"{"name": "potential-circle", "dim": 1, "resolution": 64, "f": "log",
            "V": {"family": "linear", "amplitude": 0.3, "axis": [1.0, 0.0, 0.0]}}"#,
        r#"{"name": "potential-sphere", "dim": 2, "resolution": 2, "f": "log",
            "V": {"family": "linear", "amplitude": 0.3, "axis": [0.0, 0.0, 1.0]}}"#,
        r#"{"name": "margin-wide", "dim": 1, "resolution": 64, "f": "log",
            "phi": {"family": "gaussian", "amplitude": 0.1, "sigma": 1.0}}"#,
        r#"{"name": "margin-half", "dim": 1, "resolution": 64, "f": "log",
            "phi": {"family": "gaussian", "amplitude": 0.5, "sigma": 1.0}}"#,
        r#"{"name": "margin-thin", "dim": 1, "resolution": 64, "f": "log",
            "phi": {"family": "gaussian", "amplitude": 0.9, "sigma": 1.0}}"#,
        r#"{"name": "condition-violating", "dim": 1, "resolution": 64, "f": "log",
            "phi": {"family": "gaussian", "amplitude": 1.5, "sigma": 1.0}}"#,
        r#"{"name": "log-linear", "dim": 1, "resolution": 64,
            "f": {"family": "log_linear", "alpha": 1.0, "beta": 0.5},
            "V": {"family": "linear", "amplitude": 0.2, "axis": [1.0, 0.0, 0.0]}}"#,
        r#"{"name": "bump-source", "dim": 1, "resolution": 64, "f": "log",
            "mu": {"family": "cosine_bump", "amplitude": 0.5, "axis": [1.0, 0.0, 0.0]},
            "V": {"family": "linear", "amplitude": 0.2, "axis": [0.0, 1.0, 0.0]}}"#,
        r#"{"name": "continued-direct", "dim": 1, "resolution": 48, "f": "log",
            "phi": {"family": "gaussian", "amplitude": 0.3, "sigma": 1.0},
            "V": {"family": "linear", "amplitude": 0.2, "axis": [1.0, 0.0, 0.0]},
            "solver": {"continuation_steps": 1}}"#,
        r#"{"name": "continued-walked", "dim": 1, "resolution": 48, "f": "log",
            "phi": {"family": "gaussian", "amplitude": 0.3, "sigma": 1.0},
            "V": {"family": "linear", "amplitude": 0.2, "axis": [1.0, 0.0, 0.0]},
            "solver": {"continuation_steps": 5}}"#,
    ];
    texts
        .iter()
        .map(|t| parse_config(t).expect("suite configs are well-formed"))
        .collect()
}

/// Runs the whole suite. Scenarios that violate the invertibility condition
/// are informational: their failures are reported but don't fail the suite.
pub fn run_suite(out_dir: &Path, verbose: bool) -> Result<()> {
    let mut hard_failure: Option<Error> = None;
    for config in scenario_suite() {
        let (scenario, _) = build_scenario(&config)?;
        let informational = !check_condition(&scenario).satisfied;
        match run(&config, out_dir) {
            Ok(bundle) => {
                let flag = if bundle.warning.is_some() { " [condition violated]" } else { "" };
                println!(
                    "{}: residual {:.2e}, lambda {:.4}, margin {:.3}{}",
                    config.name,
                    bundle.residual,
                    bundle.lambda,
                    bundle.condition.margin,
                    flag
                );
                if verbose {
                    println!(
                        "  {} iterations, solve {} ms, analysis {} ms",
                        bundle.iterations, bundle.solve_ms, bundle.analysis_ms
                    );
                }
            }
            Err(err) if informational => {
                println!("{}: did not converge ({err}) [condition violated]", config.name);
            }
            Err(err) => {
                println!("{}: FAILED ({err})", config.name);
                if hard_failure.is_none() {
                    hard_failure = Some(err);
                }
            }
        }
    }
    match hard_failure {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

/// Process exit code for an error: 2 for config problems, 3 for solver
/// non-convergence, 4 for anything internal.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Grid(_)
        | Error::ModelParameter(_)
        | Error::Schedule(_)
        | Error::Continuation(_)
        | Error::FdStep { .. } => 2,
        Error::SinkhornStalled { .. }
        | Error::FixedPointCap { .. }
        | Error::Bracket { .. }
        | Error::NotConverged { .. }
        | Error::LpStalled { .. } => 3,
        _ => 4,
    }
}
