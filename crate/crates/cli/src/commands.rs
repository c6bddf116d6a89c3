//! One function per subcommand. Each writes its artifacts into `out` and
//! returns a JSON summary plus whether the run counts as a pass.

use std::collections::BTreeMap;
use std::path::Path;

use mfbsde::acceptance;
use mfbsde::applications::{
    antithetic, lq_control, lq_fixed_point, lq_problem, optimality_gap, portfolio_control, portfolio_foc_residual,
    portfolio_problem, portfolio_riccati, random_directions, shifted_control, GapTable, LQParams, MarketParams,
    RiccatiSolution,
};
use mfbsde::coefficients::{assemble_a, example_3_2_reduced_gap, ProbeBox};
use mfbsde::continuation::{continuity_sweep, solve_fbsde, SolveReport, SolveStatus, SolverContext};
use mfbsde::control::ControlPath;
use mfbsde::grid::{MarkSpace, NoisePanel, TimeGrid};
use mfbsde::maximum_principle::{smp_residual, solve_adjoint, solve_controlled_fbsde, ControlProblem, SmpReport};
use mfbsde::monotonicity::{check_constants, probe_monotonicity, MonotonicityData, Variant};
use mfbsde::registry::{self, ExampleParams, Instance};
use mfbsde::report::{write_json, write_table_csv};
use mfbsde::{Error, Result};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

/// Result of a command: `Pass` maps to exit 0, `Fail` to exit 2.
pub enum Verdict {
    Pass,
    Fail,
}

pub struct Run {
    pub verdict: Verdict,
    pub status: String,
    pub summary: Value,
    pub generator: Option<String>,
}

impl Run {
    fn new(pass: bool, status: impl Into<String>, summary: Value) -> Self {
        Self {
            verdict: if pass { Verdict::Pass } else { Verdict::Fail },
            status: status.into(),
            summary,
            generator: None,
        }
    }

    fn with_generator(mut self, noise: &NoisePanel) -> Self {
        self.generator = Some(noise.generator().to_string());
        self
    }
}

fn instance(cfg: &ExperimentConfig) -> Result<Instance> {
    let mut overrides = cfg.parameters.clone();
    if let Some(h) = cfg.grid.horizon {
        overrides.insert("horizon".into(), json!(h));
    }
    registry::lookup(&cfg.problem, &overrides)
}

fn example(cfg: &ExperimentConfig) -> Result<(String, ExampleParams, mfbsde::continuation::FbsdeProblem)> {
    match instance(cfg)? {
        Instance::Fbsde { name, params, problem } => Ok((name, params, problem)),
        _ => Err(Error::InvalidInput(format!(
            "`{}` is a control problem; use the `portfolio`, `lq` or `smp` command",
            cfg.problem
        ))),
    }
}

fn context<'a>(
    cfg: &ExperimentConfig,
    grid: TimeGrid,
    marks: &'a MarkSpace,
    noise: &'a NoisePanel,
) -> SolverContext<'a> {
    let mut ctx = SolverContext::new(grid, marks, noise);
    ctx.config = cfg.solver;
    ctx.regression = cfg.regression;
    ctx
}

fn write_solve(report: &SolveReport, out: &Path) -> Result<()> {
    if let Some(sol) = &report.solution {
        sol.write_means_csv(&out.join("solution_means.csv"))?;
    }
    let rows: Vec<Vec<f64>> = report
        .residual_history
        .iter()
        .map(|r| vec![r.alpha0, r.delta, r.iteration as f64, r.residual, r.inner_sweeps as f64])
        .collect();
    write_table_csv(&out.join("residuals.csv"), &["alpha0", "delta", "iteration", "residual", "inner_sweeps"], &rows)?;
    write_json(&out.join("solve_report.json"), report)
}

fn solve_example(cfg: &ExperimentConfig, out: &Path) -> Result<(SolveReport, NoisePanel, f64)> {
    let (_, params, problem) = example(cfg)?;
    let grid = TimeGrid::new(params.horizon, cfg.grid.steps)?;
    let marks = cfg.example_marks(params.marks)?;
    let noise = NoisePanel::generate(&grid, &marks, cfg.particles, problem.coeffs.dims().d, cfg.seed)?;
    let report = solve_fbsde(&problem, &context(cfg, grid, &marks, &noise))?;
    write_solve(&report, out)?;
    Ok((report, noise, params.horizon))
}

pub fn solve(cfg: &ExperimentConfig, out: &Path) -> Result<Run> {
    let (report, noise, _) = solve_example(cfg, out)?;
    let summary = json!({
        "status": report.status,
        "alpha_reached": report.alpha_reached,
        "y0": report.solution.as_ref().map(|s| s.mean_y(0)),
        "picard_iterations": report.residual_history.len(),
        "diagnostics": report.diagnostics,
    });
    Ok(Run::new(report.solved(), format!("{:?}", report.status), summary).with_generator(&noise))
}

/// Exit 0 iff the instance is reported unsolvable.
pub fn nonsolvable_demo(cfg: &ExperimentConfig, out: &Path) -> Result<Run> {
    let (report, noise, horizon) = solve_example(cfg, out)?;
    let gaps: Vec<f64> = [-2.0, 0.0, 1.0, 3.0].iter().map(|c| example_3_2_reduced_gap(horizon, *c)).collect();
    let summary = json!({
        "status": report.status,
        "alpha_reached": report.alpha_reached,
        "reduced_terminal_gap": {"free_constants": [-2.0, 0.0, 1.0, 3.0], "y_plus_x_at_T": gaps},
        "diagnostics": report.diagnostics,
    });
    let unsolvable = report.status == SolveStatus::Unsolvable;
    Ok(Run::new(unsolvable, format!("{:?}", report.status), summary).with_generator(&noise))
}

pub fn sweep_alpha(cfg: &ExperimentConfig, out: &Path) -> Result<Run> {
    let (name, params, base) = example(cfg)?;
    if name != "example_3_1" {
        return Err(Error::InvalidInput("sweep-alpha perturbs the terminal coefficient of example_3_1".into()));
    }
    let grid = TimeGrid::new(params.horizon, cfg.grid.steps)?;
    let marks = cfg.example_marks(params.marks)?;
    let noise = NoisePanel::generate(&grid, &marks, cfg.particles, base.coeffs.dims().d, cfg.seed)?;
    let ctx = context(cfg, grid, &marks, &noise);
    let family = |a: f64| {
        let mut o: BTreeMap<String, Value> = cfg.parameters.clone();
        o.insert("terminal".into(), json!(params.terminal + a));
        o.insert("horizon".into(), json!(params.horizon));
        match registry::lookup(&name, &o) {
            Ok(Instance::Fbsde { problem, .. }) => problem,
            _ => base.clone(),
        }
    };
    let rows = continuity_sweep(family, cfg.options.base_alpha, &cfg.options.alphas, &ctx)?;
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            vec![
                r.alpha,
                if r.status == SolveStatus::Solved { 1.0 } else { 0.0 },
                r.distance.unwrap_or(f64::NAN),
                r.perturbation.unwrap_or(f64::NAN),
            ]
        })
        .collect();
    write_table_csv(&out.join("sweep.csv"), &["alpha", "solved", "distance", "perturbation"], &table)?;
    let solved = rows.iter().all(|r| r.status == SolveStatus::Solved);
    Ok(Run::new(solved, if solved { "Solved" } else { "Unsolvable" }, json!({ "rows": rows })).with_generator(&noise))
}

fn default_monotonicity(params: &ExampleParams) -> MonotonicityData {
    MonotonicityData {
        g: vec![vec![1.0]],
        beta1: params.beta1,
        beta2: params.beta1,
        beta3: params.beta1,
        mu1: params.beta1,
        c0: 1.0,
        lambda1: None,
        l_a: 1.0,
        l_phi: 1.0,
        l_f: 0.0,
        l_g: 0.0,
        horizon: params.horizon,
    }
}

pub fn check_mono(cfg: &ExperimentConfig, out: &Path) -> Result<Run> {
    let (_, params, problem) = example(cfg)?;
    let data = cfg.options.monotonicity.clone().unwrap_or_else(|| default_monotonicity(&params));
    let certificate = check_constants(&data, Variant::H32);
    let marks = cfg.example_marks(params.marks)?;
    let field = assemble_a(problem.coeffs.clone(), problem.g.clone())?;
    let probe = probe_monotonicity(
        &field,
        &marks,
        cfg.options.probe_samples,
        cfg.seed,
        ProbeBox { horizon: params.horizon, ..ProbeBox::default() },
    )?;
    let summary = json!({ "constants": data, "certificate": certificate, "probe": probe });
    write_json(&out.join("monotonicity.json"), &summary)?;
    let pass = certificate.pass && probe.violation_count == 0;
    Ok(Run::new(pass, if pass { "Pass" } else { "Fail" }, summary))
}

fn write_riccati(sol: &RiccatiSolution, path: &Path) -> Result<()> {
    let mut header = vec!["t", "phi", "psi"];
    if sol.theta.is_some() {
        header.push("theta");
    }
    header.push("p");
    let rows: Vec<Vec<f64>> = (0..sol.times.len())
        .map(|i| {
            let mut r = vec![sol.times[i], sol.phi[i], sol.psi[i]];
            if let Some(th) = &sol.theta {
                r.push(th[i]);
            }
            r.push(sol.p[i]);
            r
        })
        .collect();
    write_table_csv(path, &header, &rows)
}

fn write_gap(table: &GapTable, path: &Path) -> Result<()> {
    let rows: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| vec![r.direction as f64, r.rho, r.j_candidate, r.j_perturbed, r.gap, if r.pass { 1.0 } else { 0.0 }])
        .collect();
    write_table_csv(path, &["direction", "rho", "j_candidate", "j_perturbed", "gap", "pass"], &rows)
}

fn gap_summary(table: &GapTable) -> Value {
    json!({
        "j_candidate": table.j_candidate,
        "cost_scale": table.cost_scale,
        "tol": table.tol,
        "min_gap": table.rows.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min),
        "exponent": table.exponent,
        "pass": table.pass,
    })
}

fn directions(cfg: &ExperimentConfig, horizon: f64) -> Vec<ControlPath> {
    antithetic(&random_directions(cfg.options.directions, horizon, cfg.options.direction_seed))
}

fn market(cfg: &ExperimentConfig) -> Result<(MarketParams, f64)> {
    match instance(cfg)? {
        Instance::Portfolio { params, horizon } => Ok((params, horizon)),
        _ => Err(Error::InvalidInput(format!("`{}` is not the portfolio problem", cfg.problem))),
    }
}

fn lq_params(cfg: &ExperimentConfig) -> Result<(LQParams, f64)> {
    match instance(cfg)? {
        Instance::Lq { params, horizon } => Ok((params, horizon)),
        _ => Err(Error::InvalidInput(format!("`{}` is not the linear-quadratic problem", cfg.problem))),
    }
}

pub fn portfolio(cfg: &ExperimentConfig, out: &Path) -> Result<Run> {
    let (params, horizon) = market(cfg)?;
    let rgrid = TimeGrid::new(horizon, cfg.options.riccati_steps)?;
    let sol = portfolio_riccati(&params, &rgrid)?;
    write_riccati(&sol, &out.join("riccati.csv"))?;
    write_json(&out.join("closed_form_checks.json"), &sol.checks)?;
    let mut foc = 0.0f64;
    for &t in sol.times.iter().step_by((sol.times.len() / 100).max(1)) {
        for j in 0..=20 {
            foc = foc.max(portfolio_foc_residual(&sol, &params, t, -3.0 + 0.4 * j as f64)?.abs());
        }
    }
    let grid = TimeGrid::new(horizon, cfg.grid.steps)?;
    let marks = params.marks()?;
    let noise = NoisePanel::generate(&grid, &marks, cfg.particles, 1, cfg.seed)?;
    let ctx = context(cfg, grid, &marks, &noise);
    let table = optimality_gap(
        &portfolio_problem(&params),
        &ctx,
        &portfolio_control(&sol, &params),
        &directions(cfg, horizon),
        &cfg.options.rhos,
    )?;
    write_gap(&table, &out.join("optimality_gap.csv"))?;
    let pass = table.pass && foc <= 1e-10;
    let summary = json!({
        "phi0": sol.phi[0],
        "psi0": sol.psi[0],
        "foc_max_residual": foc,
        "discrepancies": sol.discrepancies(),
        "optimality_gap": gap_summary(&table),
    });
    Ok(Run::new(pass, if pass { "Pass" } else { "Fail" }, summary).with_generator(&noise))
}

pub fn lq(cfg: &ExperimentConfig, out: &Path) -> Result<Run> {
    let (params, horizon) = lq_params(cfg)?;
    let grid = TimeGrid::new(horizon, cfg.grid.steps)?;
    let marks = params.marks()?;
    let noise = NoisePanel::generate(&grid, &marks, cfg.particles, 1, cfg.seed)?;
    let ctx = context(cfg, grid, &marks, &noise);
    let options =
        mfbsde::applications::FixedPointOptions { riccati_steps: cfg.options.riccati_steps, ..cfg.options.fixed_point };
    let fp = lq_fixed_point(&params, &ctx, &options)?;
    let history: Vec<Vec<f64>> =
        fp.history.iter().enumerate().map(|(k, (g, i))| vec![(k + 1) as f64, *g, *i]).collect();
    write_table_csv(&out.join("fixed_point.csv"), &["iteration", "guess", "image"], &history)?;
    write_riccati(&fp.riccati, &out.join("riccati.csv"))?;
    write_json(&out.join("closed_form_checks.json"), &fp.riccati.checks)?;
    let table = optimality_gap(
        &lq_problem(&params),
        &ctx,
        &lq_control(&fp.riccati, &params),
        &directions(cfg, horizon),
        &cfg.options.rhos,
    )?;
    write_gap(&table, &out.join("optimality_gap.csv"))?;
    let summary = json!({
        "y0": fp.y0,
        "iterations": fp.iterations,
        "cost": fp.cost,
        "discrepancies": fp.riccati.discrepancies(),
        "optimality_gap": gap_summary(&table),
    });
    Ok(Run::new(table.pass, if table.pass { "Pass" } else { "Fail" }, summary).with_generator(&noise))
}

fn write_smp(report: &SmpReport, path: &Path) -> Result<()> {
    let rows: Vec<Vec<f64>> =
        report.nodes.iter().map(|n| vec![n.node as f64, n.t, n.min_residual, if n.pass { 1.0 } else { 0.0 }]).collect();
    write_table_csv(path, &["node", "t", "min_residual", "pass"], &rows)
}

fn smp_report(
    problem: &ControlProblem,
    ctx: &SolverContext,
    control: &ControlPath,
    cfg: &ExperimentConfig,
) -> Result<SmpReport> {
    let base = solve_controlled_fbsde(problem, control, ctx)?;
    let adjoint = solve_adjoint(problem, ctx, &base)?;
    smp_residual(problem, ctx, &base, &adjoint, &cfg.options.smp)
}

/// Residual at the candidate of `portfolio` or `lq`, and at the candidate
/// shifted on an initial interval.
pub fn smp(cfg: &ExperimentConfig, out: &Path) -> Result<Run> {
    let (problem, candidate, marks, horizon) = match instance(cfg)? {
        Instance::Portfolio { params, horizon } => {
            let sol = portfolio_riccati(&params, &TimeGrid::new(horizon, cfg.options.riccati_steps)?)?;
            (portfolio_problem(&params), portfolio_control(&sol, &params), params.marks()?, horizon)
        }
        Instance::Lq { params, horizon } => {
            // the candidate needs the fixed point, which needs a simulation
            let grid = TimeGrid::new(horizon, cfg.grid.steps)?;
            let marks = params.marks()?;
            let noise = NoisePanel::generate(&grid, &marks, cfg.particles, 1, cfg.seed)?;
            let ctx = context(cfg, grid, &marks, &noise);
            let options = mfbsde::applications::FixedPointOptions {
                riccati_steps: cfg.options.riccati_steps,
                ..cfg.options.fixed_point
            };
            let fp = lq_fixed_point(&params, &ctx, &options)?;
            (lq_problem(&params), lq_control(&fp.riccati, &params), marks, horizon)
        }
        Instance::Fbsde { .. } => {
            return Err(Error::InvalidInput("smp needs a control problem (`portfolio` or `lq`)".into()));
        }
    };
    let grid = TimeGrid::new(horizon, cfg.grid.steps)?;
    let noise = NoisePanel::generate(&grid, &marks, cfg.particles, 1, cfg.seed)?;
    let ctx = context(cfg, grid, &marks, &noise);
    let at_candidate = smp_report(&problem, &ctx, &candidate, cfg)?;
    let shifted = shifted_control(&candidate, cfg.options.shift, cfg.options.shift_until);
    let perturbed = smp_report(&problem, &ctx, &shifted, cfg)?;
    write_smp(&at_candidate, &out.join("smp_candidate.csv"))?;
    write_smp(&perturbed, &out.join("smp_perturbed.csv"))?;
    let summary = json!({
        "candidate": {"pass": at_candidate.pass, "tol": at_candidate.tol, "min_residual": at_candidate.min_residual, "failing_nodes": at_candidate.failing_nodes},
        "perturbed": {"pass": perturbed.pass, "tol": perturbed.tol, "min_residual": perturbed.min_residual, "failing_nodes": perturbed.failing_nodes},
    });
    let pass = at_candidate.pass;
    Ok(Run::new(pass, if pass { "Pass" } else { "Fail" }, summary).with_generator(&noise))
}

pub fn selftest(scale: acceptance::Scale, out: &Path) -> Result<Run> {
    let mut outcomes = Vec::new();
    for id in 1..=acceptance::CRITERIA.len() {
        let o = acceptance::run(id, scale);
        println!("{}", o.line());
        outcomes.push(o);
    }
    write_json(&out.join("acceptance.json"), &outcomes)?;
    let passed = outcomes.iter().filter(|o| o.pass).count();
    let pass = passed == outcomes.len();
    let summary = json!({ "scale": scale, "passed": passed, "total": outcomes.len(), "outcomes": outcomes });
    Ok(Run::new(pass, if pass { "Pass" } else { "Fail" }, summary))
}
