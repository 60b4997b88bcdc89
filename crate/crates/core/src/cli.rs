//! Command line front end.
//!
//! Four subcommands share one configuration file and one flag set:
//!
//! * `simulate` solves the coupled forward-backward system under the
//!   configured control and writes the trajectory tables.
//! * `optimize` runs the projected descent from the configured control and
//!   writes the iteration log plus the final iterate.
//! * `verify` runs the full optimality battery at the configured control:
//!   three derivative estimators against each other, the stationarity
//!   residual, the pointwise minimization falsifier, the convexity probe,
//!   the product-rule fixtures and the quadratic-moment diagnostics.
//! * `bench` runs a named builtin fixture against its committed values.
//!
//! Flags override file values and both end up recorded in the report, so a
//! report plus the binary version pins the run exactly. The exit code is the
//! machine-readable verdict: 0 success, 2 validation failure, 3 solver
//! divergence, 4 a verification or benchmark tolerance breach.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use crate::benchmarks::{fixture, no_jump_pair, Benchmark, Fixture, LqBenchmark, LQ_ORACLE_STEPS};
use crate::config::{ControlConfig, ModelConfig, Overrides, OutputFormat, RunConfig};
use crate::csvio;
use crate::error::{Error, Result};
use crate::fbsde::{
    estimate_cost, solve_adjoint, solve_fbsde, ControlProcess, DirectionProcess, SolverParams,
    Trajectory,
};
use crate::hamiltonian::{convexity_probe, max_condition_check};
use crate::maxprinciple::{
    gateaux_fd, gateaux_hamiltonian, gateaux_variational, ibp_fixture_suite, moment_diagnostics,
    stationarity_residual, FD_STEP, MOMENT_THRESHOLD,
};
use crate::maxprinciple::verify_ibp;
use crate::model::{FiltrationSpec, ProblemSpec};
use crate::optimizer::{
    average_multipliers, is_divergence, optimize, IterationRecord, OptimizerConfig,
    OptimizerReport, TerminationReason, CANDIDATES_PER_AXIS, CONVEXITY_RADIUS, CONVEXITY_SAMPLES,
};
use crate::report::{float_array, float_table, Report};
use crate::scenario::{RngSpec, ScenarioBatch, TimeGrid};

const EXIT_OK: i32 = 0;
const EXIT_VALIDATION: i32 = 2;
const EXIT_DIVERGED: i32 = 3;
const EXIT_VERIFICATION: i32 = 4;

/// Absolute floor of the pairwise agreement gates between the three
/// derivative estimators; the statistical part is three pooled standard
/// errors on top.
const GATEAUX_TOL: f64 = 1e-3;
/// Coefficient of the O(dt) allowance in the product-rule gates; covers the
/// committed fixtures' exact drift-product bias with margin.
const IBP_DT_COEFF: f64 = 2.0;
/// Sup norm the backward components must stay under when the driver and the
/// terminal data vanish.
const PURE_FORWARD_TOL: f64 = 1e-8;
/// Relative distance to the Riccati cost the LQ fixtures must meet.
const LQ_COST_TOLERANCE: f64 = 1e-2;
/// Directions probed by the estimator-agreement fixture.
const BENCH_DIRECTIONS: usize = 5;

#[derive(Parser)]
#[command(
    name = "fbsdectl",
    version,
    about = "Simulate, optimize and verify stochastic control problems with jumps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the coupled forward-backward system under the configured control.
    Simulate(Common),
    /// Run the projected descent from the configured control.
    Optimize(Common),
    /// Run the optimality battery at the configured control.
    Verify(Common),
    /// Run a named builtin fixture against its committed values.
    Bench(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate(c)
            | Command::Optimize(c)
            | Command::Verify(c)
            | Command::Bench(c) => c,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides numerics.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides numerics.paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Overrides numerics.steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides output.dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Caps the worker threads; the default uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

/// Process entry point: parses `std::env` arguments and returns the exit
/// code for the caller to pass to `std::process::exit`.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Same as [`run`] on an explicit argument list, for tests.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = err.print();
            return code;
        }
    };
    let common = cli.command.common();
    let over = Overrides {
        seed: common.seed,
        paths: common.paths,
        steps: common.steps,
        out: common.out.clone(),
    };
    let mut config = match RunConfig::from_path(&common.config) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("error: {err}");
            return EXIT_VALIDATION;
        }
    };
    config.apply_overrides(&over);
    if let Err(err) = config.validate_numerics() {
        eprintln!("error: {err}");
        return EXIT_VALIDATION;
    }
    match common.workers {
        None => run_command(&cli.command, &config, &over, None),
        Some(0) => {
            eprintln!("error: --workers must be at least 1");
            EXIT_VALIDATION
        }
        Some(w) => {
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
                Ok(pool) => pool,
                Err(err) => {
                    eprintln!("error: {err}");
                    return EXIT_VALIDATION;
                }
            };
            pool.install(|| run_command(&cli.command, &config, &over, Some(w)))
        }
    }
}

fn run_command(command: &Command, config: &RunConfig, over: &Overrides, workers: Option<usize>) -> i32 {
    match command {
        Command::Simulate(_) => cmd_simulate(config, workers),
        Command::Optimize(_) => cmd_optimize(config, workers),
        Command::Verify(_) => cmd_verify(config, workers),
        Command::Bench(_) => cmd_bench(config, over, workers),
    }
}

/// Everything the model-driven commands share: the validated problem, the
/// solver numerics, the noise batch and the configured control.
struct Prepared {
    spec: ProblemSpec,
    params: SolverParams,
    grid: TimeGrid,
    batch: ScenarioBatch,
    control: ControlProcess,
}

fn prepare(config: &RunConfig) -> Result<Prepared> {
    let spec = config.build_problem()?;
    let params = config.solver_params()?;
    let grid = TimeGrid::new(spec.horizon, config.numerics.steps)?;
    let batch = ScenarioBatch::generate(
        grid,
        config.numerics.paths,
        spec.dims.d,
        &spec.marks.weights,
        RngSpec { seed: config.numerics.seed },
    )?;
    let control = initial_control(config, &spec, &batch)?;
    Ok(Prepared { spec, params, grid, batch, control })
}

fn initial_control(
    config: &RunConfig,
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
) -> Result<ControlProcess> {
    let steps = batch.grid.steps;
    let control = match &config.control {
        ControlConfig::Zero => ControlProcess::shared_zero(spec.dims.k, steps),
        ControlConfig::Constant { value } => {
            if value.len() != spec.dims.k {
                return Err(Error::Shape(format!(
                    "control.constant: expected length {}, got {}",
                    spec.dims.k,
                    value.len()
                )));
            }
            ControlProcess::shared_from_fn(spec.dims.k, steps, |_, slot| {
                slot.copy_from_slice(value)
            })
        }
        ControlConfig::Csv { path } => {
            let control = csvio::read_control(path, batch.paths)?;
            if control.dim() != spec.dims.k || control.steps() != steps {
                return Err(Error::Shape(format!(
                    "control table has dim {} over {} steps but the run needs dim {} over {}",
                    control.dim(),
                    control.steps(),
                    spec.dims.k,
                    steps
                )));
            }
            control
        }
        ControlConfig::Riccati => {
            let Some(ModelConfig::Lq(lq)) = &config.model else {
                return Err(Error::Invalid(
                    "the riccati control requires a [model.lq] section".into(),
                ));
            };
            let bench = lq.benchmark();
            let table = bench.solve_riccati(LQ_ORACLE_STEPS);
            bench.feedback_control(&table, batch)
        }
    };
    if !control.admissible(&spec.control_set, 1e-9) {
        return Err(Error::Invalid("the configured control leaves the admissible set".into()));
    }
    Ok(control)
}

/// Prints the error, writes a failure report into the output directory on a
/// best-effort basis and returns the contract exit code for the error.
fn fail(config: &RunConfig, command: &str, workers: Option<usize>, err: &Error) -> i32 {
    let code = if is_divergence(err) { EXIT_DIVERGED } else { EXIT_VALIDATION };
    eprintln!("error: {err}");
    let mut report = Report::new(command, config.numerics.seed, workers);
    report.set("outcome", if code == EXIT_DIVERGED { "diverged" } else { "validation-error" });
    report.set("error", err.to_string());
    if let Error::PicardDiverged { residuals } = err {
        report.section("picard").insert("residuals".into(), float_array(residuals));
    }
    let _ = report.embed_config(config);
    if std::fs::create_dir_all(&config.output.dir).is_ok() {
        let _ = report.write(&config.output.dir);
    }
    code
}

/// Embeds the resolved config, writes `report.toml` and echoes its path.
fn finish(mut report: Report, config: &RunConfig, code: i32) -> i32 {
    if let Err(err) = report.embed_config(config) {
        eprintln!("error: {err}");
        return EXIT_VALIDATION;
    }
    match std::fs::create_dir_all(&config.output.dir)
        .map_err(Error::from)
        .and_then(|()| report.write(&config.output.dir))
    {
        Ok(path) => {
            println!("report: {}", path.display());
            code
        }
        Err(err) => {
            eprintln!("error: {err}");
            EXIT_VALIDATION
        }
    }
}

/// Writes the data files selected by `output.formats` and records their
/// names under the `files` key.
fn write_data(
    report: &mut Report,
    config: &RunConfig,
    batch: &ScenarioBatch,
    grid: &TimeGrid,
    traj: Option<&Trajectory>,
    control: Option<&ControlProcess>,
    records: Option<&[IterationRecord]>,
) -> Result<()> {
    let dir = &config.output.dir;
    std::fs::create_dir_all(dir)?;
    let mut files: Vec<Value> = Vec::new();
    if config.output.formats.contains(&OutputFormat::Csv) {
        if let Some(traj) = traj {
            csvio::write_trajectory(&dir.join("trajectory.csv"), traj)?;
            files.push("trajectory.csv".into());
        }
        if let Some(control) = control {
            csvio::write_control(&dir.join("control.csv"), control, grid)?;
            files.push("control.csv".into());
        }
        if let Some(records) = records {
            csvio::write_iterations(&dir.join("iterations.csv"), records)?;
            files.push("iterations.csv".into());
        }
    }
    if config.output.formats.contains(&OutputFormat::Scenario) {
        let file = std::fs::File::create(dir.join("scenario.bin"))?;
        batch.dump(std::io::BufWriter::new(file))?;
        files.push("scenario.bin".into());
    }
    report.set("files", Value::Array(files));
    Ok(())
}

fn cmd_simulate(config: &RunConfig, workers: Option<usize>) -> i32 {
    let started = Instant::now();
    let prepared = match prepare(config) {
        Ok(p) => p,
        Err(e) => return fail(config, "simulate", workers, &e),
    };
    let traj = match solve_fbsde(&prepared.spec, &prepared.batch, &prepared.control, &prepared.params)
    {
        Ok(t) => t,
        Err(e) => return fail(config, "simulate", workers, &e),
    };
    let cost = match estimate_cost(&prepared.spec, &traj, &prepared.control) {
        Ok(c) => c,
        Err(e) => return fail(config, "simulate", workers, &e),
    };
    let mut report = Report::new("simulate", config.numerics.seed, workers);
    report.set("outcome", "ok");
    report.set("paths", prepared.batch.paths as i64);
    report.set("steps", prepared.grid.steps as i64);
    *report.section("cost") =
        float_table(&[("value", cost.value), ("se", cost.se), ("h_term", cost.h_term)]);
    report.section("cost").insert("y0".into(), float_array(&cost.y0));
    let picard = report.section("picard");
    picard.insert("sweeps".into(), (traj.residuals.len() as i64).into());
    picard.insert("residuals".into(), float_array(&traj.residuals));
    if let Err(e) = write_data(
        &mut report,
        config,
        &prepared.batch,
        &prepared.grid,
        Some(&traj),
        Some(&prepared.control),
        None,
    ) {
        return fail(config, "simulate", workers, &e);
    }
    report.set_float("elapsed_seconds", started.elapsed().as_secs_f64());
    finish(report, config, EXIT_OK)
}

/// Records the descent run: termination, last iterate measurements, the
/// fresh-batch replay and the sufficiency verdicts.
fn fill_optimizer_section(report: &mut Report, outcome: &OptimizerReport) {
    let section = report.section("optimizer");
    section.insert("termination".into(), outcome.termination.label().into());
    section.insert("iterations".into(), (outcome.records.len() as i64).into());
    if let Some(last) = outcome.final_record() {
        section.insert("cost".into(), last.cost.into());
        section.insert("cost_se".into(), last.cost_se.into());
        section.insert("residual".into(), last.residual.into());
        section.insert("step_size".into(), last.step_size.into());
    }
    if let Some(fresh) = &outcome.fresh_cost {
        let table = float_table(&[("value", fresh.value), ("se", fresh.se)]);
        section.insert("fresh_cost".into(), Value::Table(table));
    }
    if let Some(suff) = &outcome.sufficiency {
        let mut table = float_table(&[
            ("convexity_worst", suff.convexity.worst),
            ("max_condition_worst", suff.max_condition.worst),
        ]);
        table.insert("convexity_pass".into(), suff.convexity.pass.into());
        table.insert("max_condition_pass".into(), suff.max_condition.pass.into());
        table.insert("pass".into(), suff.pass().into());
        section.insert("sufficiency".into(), Value::Table(table));
    }
}

/// Rebuilds the configured model under full information and optimizes it on
/// the same batch; `None` when that twin run diverged.
fn full_information_cost(
    config: &RunConfig,
    prepared: &Prepared,
    opt: &OptimizerConfig,
) -> Result<Option<(f64, f64, &'static str)>> {
    let mut full = config.clone();
    match full.model.as_mut() {
        Some(ModelConfig::Affine(a)) => a.filtration = FiltrationSpec::Full,
        Some(ModelConfig::Lq(l)) => l.filtration = FiltrationSpec::Full,
        None => return Ok(None),
    }
    let spec = full.build_problem()?;
    let outcome = optimize(&spec, &prepared.batch, &prepared.control, opt)?;
    if outcome.termination == TerminationReason::Diverged {
        return Ok(None);
    }
    Ok(outcome
        .final_record()
        .map(|last| (last.cost, last.cost_se, outcome.termination.label())))
}

fn cmd_optimize(config: &RunConfig, workers: Option<usize>) -> i32 {
    let started = Instant::now();
    let prepared = match prepare(config) {
        Ok(p) => p,
        Err(e) => return fail(config, "optimize", workers, &e),
    };
    let opt_config = match config.optimizer_config() {
        Ok(c) => c,
        Err(e) => return fail(config, "optimize", workers, &e),
    };
    let outcome = match optimize(&prepared.spec, &prepared.batch, &prepared.control, &opt_config) {
        Ok(o) => o,
        Err(e) => return fail(config, "optimize", workers, &e),
    };
    let mut report = Report::new("optimize", config.numerics.seed, workers);
    fill_optimizer_section(&mut report, &outcome);
    if outcome.termination == TerminationReason::Diverged {
        report.set("outcome", "diverged");
        let _ = write_data(
            &mut report,
            config,
            &prepared.batch,
            &prepared.grid,
            None,
            None,
            Some(&outcome.records),
        );
        eprintln!("error: the descent run diverged; see the iteration log");
        return finish(report, config, EXIT_DIVERGED);
    }
    // The solve of the final iterate is repeated for the data files; the
    // batch is unchanged, so this reproduces the last accepted evaluation.
    let traj = match solve_fbsde(&prepared.spec, &prepared.batch, &outcome.final_control, &prepared.params)
    {
        Ok(t) => t,
        Err(e) => return fail(config, "optimize", workers, &e),
    };
    if matches!(prepared.spec.filtration, FiltrationSpec::Delayed { .. }) {
        match full_information_cost(config, &prepared, &opt_config) {
            Ok(Some((full_cost, full_se, full_termination))) => {
                if let Some(last) = outcome.final_record() {
                    let pooled = (last.cost_se * last.cost_se + full_se * full_se).sqrt();
                    let pass = last.cost >= full_cost - 3.0 * pooled;
                    let section = report.section("info_monotonicity");
                    section.insert("delayed_cost".into(), last.cost.into());
                    section.insert("full_cost".into(), full_cost.into());
                    section.insert("pooled_se".into(), pooled.into());
                    section.insert("full_termination".into(), full_termination.into());
                    section.insert("pass".into(), pass.into());
                }
            }
            Ok(None) => {
                report
                    .section("info_monotonicity")
                    .insert("note".into(), "full-information twin diverged".into());
            }
            Err(e) => return fail(config, "optimize", workers, &e),
        }
    }
    if let Err(e) = write_data(
        &mut report,
        config,
        &prepared.batch,
        &prepared.grid,
        Some(&traj),
        Some(&outcome.final_control),
        Some(&outcome.records),
    ) {
        return fail(config, "optimize", workers, &e);
    }
    report.set("outcome", "ok");
    report.set_float("elapsed_seconds", started.elapsed().as_secs_f64());
    finish(report, config, EXIT_OK)
}

fn pass_label(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "fail"
    }
}

fn cmd_verify(config: &RunConfig, workers: Option<usize>) -> i32 {
    let started = Instant::now();
    let prepared = match prepare(config) {
        Ok(p) => p,
        Err(e) => return fail(config, "verify", workers, &e),
    };
    let traj = match solve_fbsde(&prepared.spec, &prepared.batch, &prepared.control, &prepared.params)
    {
        Ok(t) => t,
        Err(e) => return fail(config, "verify", workers, &e),
    };
    let adjoint = match solve_adjoint(&prepared.spec, &prepared.batch, &traj, &prepared.control, &prepared.params)
    {
        Ok(a) => a,
        Err(e) => return fail(config, "verify", workers, &e),
    };
    let mut report = Report::new("verify", config.numerics.seed, workers);
    let seed = config.numerics.seed;
    let no_marks = prepared.spec.marks.is_empty();
    if no_marks {
        report.set("note", "mark space is empty; jump fixtures and jump moments are omitted");
    }

    // Three derivative estimators on random bounded directions; every pair
    // must agree within three pooled standard errors plus the floor.
    let mut gateaux_pass = true;
    let mut rows: Vec<Value> = Vec::new();
    for idx in 0..config.numerics.directions {
        let direction_seed = seed ^ (0xd15ec7 + 131 * idx as u64);
        let direction = DirectionProcess::bounded_random(
            direction_seed,
            prepared.spec.dims.k,
            prepared.grid.steps,
            1.0,
        );
        let radius =
            direction.admissible_radius(&prepared.control, &prepared.spec.control_set, prepared.batch.paths);
        if !(radius > 0.0) {
            gateaux_pass = false;
            let mut row = toml::Table::new();
            row.insert("note".into(), "direction inadmissible at every radius".into());
            rows.push(Value::Table(row));
            continue;
        }
        let step = FD_STEP.min(0.25 * radius);
        let fd = match gateaux_fd(&prepared.spec, &prepared.batch, &prepared.control, &direction, step, &prepared.params)
        {
            Ok(g) => g,
            Err(e) => return fail(config, "verify", workers, &e),
        };
        let var = match gateaux_variational(
            &prepared.spec,
            &prepared.batch,
            &traj,
            &prepared.control,
            &direction,
            &prepared.params,
        ) {
            Ok(g) => g,
            Err(e) => return fail(config, "verify", workers, &e),
        };
        let ham = match gateaux_hamiltonian(&prepared.spec, &traj, &prepared.control, &direction, &adjoint)
        {
            Ok(g) => g,
            Err(e) => return fail(config, "verify", workers, &e),
        };
        let pass = fd.agrees(&var, GATEAUX_TOL)
            && fd.agrees(&ham, GATEAUX_TOL)
            && var.agrees(&ham, GATEAUX_TOL);
        gateaux_pass &= pass;
        let mut row = float_table(&[
            ("fd", fd.value),
            ("fd_se", fd.se),
            ("variational", var.value),
            ("variational_se", var.se),
            ("hamiltonian", ham.value),
            ("hamiltonian_se", ham.se),
            ("step", step),
        ]);
        row.insert("pass".into(), pass.into());
        rows.push(Value::Table(row));
    }
    {
        let section = report.section("gateaux");
        section.insert("directions".into(), Value::Array(rows));
        section.insert("tolerance".into(), GATEAUX_TOL.into());
        section.insert("pass".into(), gateaux_pass.into());
    }

    let stationarity = match stationarity_residual(
        &prepared.spec,
        &traj,
        &prepared.control,
        &adjoint,
        &prepared.params.basis,
    ) {
        Ok(s) => s,
        Err(e) => return fail(config, "verify", workers, &e),
    };
    let stationarity_pass = stationarity.norm <= config.numerics.verify_tolerance;
    {
        let section = report.section("stationarity");
        section.insert("norm".into(), stationarity.norm.into());
        section.insert("tolerance".into(), config.numerics.verify_tolerance.into());
        section.insert("per_step".into(), float_array(&stationarity.per_step));
        section.insert("pass".into(), stationarity_pass.into());
    }

    let max_condition = match max_condition_check(
        &prepared.spec,
        &traj,
        &prepared.control,
        &adjoint,
        CANDIDATES_PER_AXIS,
        &prepared.params.basis,
    ) {
        Ok(m) => m,
        Err(e) => return fail(config, "verify", workers, &e),
    };
    {
        let section = report.section("max_condition");
        section.insert("worst_margin".into(), max_condition.worst.into());
        section.insert("candidates_per_axis".into(), (CANDIDATES_PER_AXIS as i64).into());
        section.insert("pass".into(), max_condition.pass.into());
    }

    let mult = average_multipliers(&adjoint);
    let convexity = convexity_probe(
        &prepared.spec,
        &mult,
        0.5 * prepared.spec.horizon,
        CONVEXITY_SAMPLES,
        CONVEXITY_RADIUS,
        prepared.batch.seed ^ 0x636f6e76,
    );
    {
        let section = report.section("convexity");
        section.insert("worst".into(), convexity.worst.into());
        section.insert("hamiltonian_worst".into(), convexity.hamiltonian_worst.into());
        section.insert("terminal_worst".into(), convexity.terminal_worst.into());
        section.insert("initial_worst".into(), convexity.initial_worst.into());
        section.insert("pass".into(), convexity.pass.into());
    }

    // Product-rule fixtures on fresh batches over the same grid. The gate is
    // statistical plus an O(dt) discretization allowance.
    let mut ibp_pass = true;
    let mut ibp_rows: Vec<Value> = Vec::new();
    for (idx, fx) in ibp_fixture_suite().iter().enumerate() {
        if no_marks && !fx.marks.is_empty() {
            let mut row = toml::Table::new();
            row.insert("name".into(), fx.name.into());
            row.insert("note".into(), "skipped: run has no marks".into());
            ibp_rows.push(Value::Table(row));
            continue;
        }
        let batch = match ScenarioBatch::generate(
            prepared.grid,
            config.numerics.paths,
            1,
            &fx.marks.weights,
            RngSpec { seed: seed.wrapping_add(0x1b9 + idx as u64) },
        ) {
            Ok(b) => b,
            Err(e) => return fail(config, "verify", workers, &e),
        };
        let ibp = match verify_ibp(&fx.first, &fx.second, &fx.marks, &batch) {
            Ok(r) => r,
            Err(e) => return fail(config, "verify", workers, &e),
        };
        let gate = 3.0 * ibp.se + IBP_DT_COEFF * prepared.grid.dt();
        let pass = ibp.difference.abs() <= gate;
        ibp_pass &= pass;
        let mut row = float_table(&[
            ("lhs", ibp.lhs),
            ("rhs", ibp.rhs),
            ("difference", ibp.difference),
            ("se", ibp.se),
            ("gate", gate),
        ]);
        row.insert("name".into(), fx.name.into());
        row.insert("pass".into(), pass.into());
        ibp_rows.push(Value::Table(row));
    }
    {
        let section = report.section("ibp");
        section.insert("fixtures".into(), Value::Array(ibp_rows));
        section.insert("pass".into(), ibp_pass.into());
    }

    let moments = match moment_diagnostics(
        &prepared.spec,
        &traj,
        &prepared.control,
        &adjoint,
        None,
        MOMENT_THRESHOLD,
    ) {
        Ok(m) => m,
        Err(e) => return fail(config, "verify", workers, &e),
    };
    let jump_labels = ["dx_beta", "dy_gradrH", "p_sigma", "k_rr"];
    let moments_pass = !moments.any_flagged();
    {
        let section = report.section("moments");
        for entry in &moments.entries {
            if no_marks && jump_labels.contains(&entry.label) {
                continue;
            }
            section.insert(entry.label.into(), entry.value.into());
        }
        section.insert("threshold".into(), moments.threshold.into());
        section.insert("pass".into(), moments_pass.into());
    }

    let checks = [
        ("gateaux", gateaux_pass),
        ("stationarity", stationarity_pass),
        ("max_condition", max_condition.pass),
        ("convexity", convexity.pass),
        ("ibp", ibp_pass),
        ("moments", moments_pass),
    ];
    let all_pass = checks.iter().all(|(_, pass)| *pass);
    for (name, pass) in checks {
        println!("check {name}: {}", pass_label(pass));
    }
    report.set("outcome", if all_pass { "ok" } else { "verification-failed" });
    report.set_float("elapsed_seconds", started.elapsed().as_secs_f64());
    if !all_pass {
        eprintln!("error: verification failed; see the report for margins");
    }
    finish(report, config, if all_pass { EXIT_OK } else { EXIT_VERIFICATION })
}

/// Benchmark verdict plus the files the run wrote.
struct BenchOutcome {
    pass: bool,
    traj: Option<Trajectory>,
    control: Option<ControlProcess>,
    records: Option<Vec<IterationRecord>>,
}

fn bench_optimizer_config(fx: &Fixture) -> OptimizerConfig {
    OptimizerConfig {
        step_size: fx.step_size,
        max_iterations: fx.max_iterations,
        tolerance: fx.tolerance,
        ..OptimizerConfig::default()
    }
}

fn pooled_se(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

fn cmd_bench(config: &RunConfig, over: &Overrides, workers: Option<usize>) -> i32 {
    let started = Instant::now();
    let bench_cfg = match &config.bench {
        Some(b) => b,
        None => {
            let e = Error::Invalid("the bench command requires a [bench] section".into());
            return fail(config, "bench", workers, &e);
        }
    };
    let benchmark = match Benchmark::from_name(&bench_cfg.name) {
        Ok(b) => b,
        Err(e) => return fail(config, "bench", workers, &e),
    };
    let fx = fixture(benchmark);
    // Flags override the fixture's committed numerics; the config file's
    // numerics stay out of benchmark runs so the committed values bind.
    let steps = over.steps.unwrap_or(fx.steps);
    let paths = over.paths.unwrap_or(fx.paths);
    let seed = over.seed.unwrap_or(fx.seed);
    let params = SolverParams::default();
    let grid = match TimeGrid::new(fx.spec.horizon, steps) {
        Ok(g) => g,
        Err(e) => return fail(config, "bench", workers, &e),
    };
    let batch = match ScenarioBatch::generate(
        grid,
        paths,
        fx.spec.dims.d,
        &fx.spec.marks.weights,
        RngSpec { seed },
    ) {
        Ok(b) => b,
        Err(e) => return fail(config, "bench", workers, &e),
    };
    let mut report = Report::new("bench", seed, workers);
    report.set("benchmark", benchmark.name());
    {
        let section = report.section("fixture");
        section.insert("steps".into(), (steps as i64).into());
        section.insert("paths".into(), (paths as i64).into());
        section.insert("seed".into(), (seed as i64).into());
    }

    let outcome = match benchmark {
        Benchmark::LqFull => bench_lq_full(&fx, &batch, &params, &mut report),
        Benchmark::LqDelayed => bench_lq_delayed(&fx, &batch, &mut report),
        Benchmark::PureForward => bench_pure_forward(&fx, &batch, &params, &mut report),
        Benchmark::NoJump => bench_no_jump(grid, paths, seed, &params, &mut report),
        Benchmark::NonlinearCoupled => bench_nonlinear(&fx, &batch, &params, &mut report),
        Benchmark::Diverging => bench_diverging(&fx, &batch, &params, &mut report),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => return fail(config, "bench", workers, &e),
    };
    if let Err(e) = write_data(
        &mut report,
        config,
        &batch,
        &grid,
        outcome.traj.as_ref(),
        outcome.control.as_ref(),
        outcome.records.as_deref(),
    ) {
        return fail(config, "bench", workers, &e);
    }
    println!("bench {}: {}", benchmark.name(), pass_label(outcome.pass));
    report.set("outcome", if outcome.pass { "ok" } else { "tolerance-breach" });
    report.set_float("elapsed_seconds", started.elapsed().as_secs_f64());
    if !outcome.pass {
        eprintln!("error: benchmark missed its committed tolerance; see the report");
    }
    finish(report, config, if outcome.pass { EXIT_OK } else { EXIT_VERIFICATION })
}

fn bench_lq_full(
    fx: &Fixture,
    batch: &ScenarioBatch,
    _params: &SolverParams,
    report: &mut Report,
) -> Result<BenchOutcome> {
    let opt = bench_optimizer_config(fx);
    let initial = ControlProcess::shared_zero(fx.spec.dims.k, batch.grid.steps);
    let outcome = optimize(&fx.spec, batch, &initial, &opt)?;
    fill_optimizer_section(report, &outcome);
    if outcome.termination == TerminationReason::Diverged {
        return Err(Error::PicardDiverged { residuals: vec![] });
    }
    let lq = LqBenchmark::canonical();
    let oracle = lq.optimal_cost(&lq.solve_riccati(LQ_ORACLE_STEPS));
    let last = *outcome.final_record().expect("a non-diverged run has records");
    let rel_error = (last.cost - oracle).abs() / oracle;
    let pass = rel_error <= LQ_COST_TOLERANCE;
    let section = report.section("bench");
    section.insert("oracle_cost".into(), oracle.into());
    section.insert("final_cost".into(), last.cost.into());
    section.insert("rel_error".into(), rel_error.into());
    section.insert("tolerance".into(), LQ_COST_TOLERANCE.into());
    section.insert("pass".into(), pass.into());
    let traj = solve_fbsde(&fx.spec, batch, &outcome.final_control, &opt.solver)?;
    Ok(BenchOutcome {
        pass,
        traj: Some(traj),
        control: Some(outcome.final_control),
        records: Some(outcome.records),
    })
}

fn bench_lq_delayed(fx: &Fixture, batch: &ScenarioBatch, report: &mut Report) -> Result<BenchOutcome> {
    let opt = bench_optimizer_config(fx);
    let initial = ControlProcess::shared_zero(fx.spec.dims.k, batch.grid.steps);
    let delayed = optimize(&fx.spec, batch, &initial, &opt)?;
    fill_optimizer_section(report, &delayed);
    let full_fx = fixture(Benchmark::LqFull);
    let full = optimize(&full_fx.spec, batch, &initial, &bench_optimizer_config(&full_fx))?;
    if delayed.termination == TerminationReason::Diverged
        || full.termination == TerminationReason::Diverged
    {
        return Err(Error::PicardDiverged { residuals: vec![] });
    }
    let d = *delayed.final_record().expect("a non-diverged run has records");
    let f = *full.final_record().expect("a non-diverged run has records");
    let pooled = pooled_se(d.cost_se, f.cost_se);
    // Shrinking the filtration cannot lower the optimal cost; the gate
    // allows the sampling error of the two runs.
    let pass = d.cost >= f.cost - 3.0 * pooled;
    let section = report.section("bench");
    section.insert("delayed_cost".into(), d.cost.into());
    section.insert("full_cost".into(), f.cost.into());
    section.insert("pooled_se".into(), pooled.into());
    section.insert("pass".into(), pass.into());
    let traj = solve_fbsde(&fx.spec, batch, &delayed.final_control, &opt.solver)?;
    Ok(BenchOutcome {
        pass,
        traj: Some(traj),
        control: Some(delayed.final_control),
        records: Some(delayed.records),
    })
}

fn bench_pure_forward(
    fx: &Fixture,
    batch: &ScenarioBatch,
    params: &SolverParams,
    report: &mut Report,
) -> Result<BenchOutcome> {
    let control = ControlProcess::shared_zero(fx.spec.dims.k, batch.grid.steps);
    let traj = solve_fbsde(&fx.spec, batch, &control, params)?;
    let sup = traj.backward_sup_norm();
    let pass = sup <= PURE_FORWARD_TOL;
    let section = report.section("bench");
    section.insert("backward_sup".into(), sup.into());
    section.insert("tolerance".into(), PURE_FORWARD_TOL.into());
    section.insert("pass".into(), pass.into());
    Ok(BenchOutcome { pass, traj: Some(traj), control: Some(control), records: None })
}

fn bench_no_jump(
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    params: &SolverParams,
    report: &mut Report,
) -> Result<BenchOutcome> {
    let (plain, inert) = no_jump_pair();
    let control = ControlProcess::shared_from_fn(plain.dims.k, grid.steps, |_, slot| {
        slot.fill(0.2)
    });
    let batch_plain =
        ScenarioBatch::generate(grid, paths, plain.dims.d, &plain.marks.weights, RngSpec { seed })?;
    let batch_inert =
        ScenarioBatch::generate(grid, paths, inert.dims.d, &inert.marks.weights, RngSpec { seed })?;
    let traj_plain = solve_fbsde(&plain, &batch_plain, &control, params)?;
    let traj_inert = solve_fbsde(&inert, &batch_inert, &control, params)?;
    let same_tables = |a: &[f64], b: &[f64]| {
        a.len() == b.len() && a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits())
    };
    let tables_equal = same_tables(&traj_plain.x, &traj_inert.x)
        && same_tables(&traj_plain.y, &traj_inert.y)
        && same_tables(&traj_plain.z, &traj_inert.z);
    let cost_plain = estimate_cost(&plain, &traj_plain, &control)?;
    let cost_inert = estimate_cost(&inert, &traj_inert, &control)?;
    let costs_equal = cost_plain.value.to_bits() == cost_inert.value.to_bits();
    let pass = tables_equal && costs_equal;
    let section = report.section("bench");
    section.insert("tables_bit_identical".into(), tables_equal.into());
    section.insert("costs_bit_identical".into(), costs_equal.into());
    section.insert("cost".into(), cost_plain.value.into());
    section.insert("pass".into(), pass.into());
    Ok(BenchOutcome { pass, traj: Some(traj_plain), control: Some(control), records: None })
}

fn bench_nonlinear(
    fx: &Fixture,
    batch: &ScenarioBatch,
    params: &SolverParams,
    report: &mut Report,
) -> Result<BenchOutcome> {
    let control = ControlProcess::shared_zero(fx.spec.dims.k, batch.grid.steps);
    let traj = solve_fbsde(&fx.spec, batch, &control, params)?;
    let adjoint = solve_adjoint(&fx.spec, batch, &traj, &control, params)?;
    let mut pass = true;
    let mut rows: Vec<Value> = Vec::new();
    for idx in 0..BENCH_DIRECTIONS {
        let direction = DirectionProcess::bounded_random(
            batch.seed ^ (0xbe4c + 97 * idx as u64),
            fx.spec.dims.k,
            batch.grid.steps,
            1.0,
        );
        let fd = gateaux_fd(&fx.spec, batch, &control, &direction, FD_STEP, params)?;
        let var = gateaux_variational(&fx.spec, batch, &traj, &control, &direction, params)?;
        let ham = gateaux_hamiltonian(&fx.spec, &traj, &control, &direction, &adjoint)?;
        let agree = fd.agrees(&var, GATEAUX_TOL)
            && fd.agrees(&ham, GATEAUX_TOL)
            && var.agrees(&ham, GATEAUX_TOL);
        pass &= agree;
        let mut row = float_table(&[
            ("fd", fd.value),
            ("variational", var.value),
            ("hamiltonian", ham.value),
        ]);
        row.insert("pass".into(), agree.into());
        rows.push(Value::Table(row));
    }
    let section = report.section("bench");
    section.insert("directions".into(), Value::Array(rows));
    section.insert("pass".into(), pass.into());
    Ok(BenchOutcome { pass, traj: Some(traj), control: Some(control), records: None })
}

fn bench_diverging(
    fx: &Fixture,
    batch: &ScenarioBatch,
    params: &SolverParams,
    report: &mut Report,
) -> Result<BenchOutcome> {
    let control = ControlProcess::shared_zero(fx.spec.dims.k, batch.grid.steps);
    // This fixture passes exactly when the solver refuses it.
    match solve_fbsde(&fx.spec, batch, &control, params) {
        Ok(_) => {
            let section = report.section("bench");
            section.insert("note".into(), "solver accepted a diverging system".into());
            section.insert("pass".into(), false.into());
            Ok(BenchOutcome { pass: false, traj: None, control: None, records: None })
        }
        Err(Error::PicardDiverged { residuals }) => {
            let section = report.section("bench");
            section.insert("residuals".into(), float_array(&residuals));
            section.insert("pass".into(), true.into());
            Ok(BenchOutcome { pass: true, traj: None, control: None, records: None })
        }
        Err(e) if is_divergence(&e) => {
            let section = report.section("bench");
            section.insert("error".into(), e.to_string().into());
            section.insert("pass".into(), true.into());
            Ok(BenchOutcome { pass: true, traj: None, control: None, records: None })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_match_the_dispatch_table() {
        let cli = Cli::try_parse_from(["fbsdectl", "simulate", "--config", "run.toml"]).unwrap();
        assert!(matches!(cli.command, Command::Simulate(_)));
        assert_eq!(cli.command.common().config, PathBuf::from("run.toml"));
        let cli = Cli::try_parse_from([
            "fbsdectl", "bench", "--config", "b.toml", "--workers", "2", "--seed", "7",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Bench(_)));
        assert_eq!(cli.command.common().workers, Some(2));
        assert_eq!(cli.command.common().seed, Some(7));
    }

    #[test]
    fn unknown_flags_and_missing_config_are_parse_errors() {
        assert!(Cli::try_parse_from(["fbsdectl", "simulate"]).is_err());
        assert!(Cli::try_parse_from(["fbsdectl", "simulate", "--nope", "x"]).is_err());
        assert!(Cli::try_parse_from(["fbsdectl", "explode", "--config", "a"]).is_err());
    }

    #[test]
    fn missing_config_file_exits_with_the_validation_code() {
        let code = run_from(["fbsdectl", "simulate", "--config", "/nonexistent/run.toml"]);
        assert_eq!(code, EXIT_VALIDATION);
    }
}
