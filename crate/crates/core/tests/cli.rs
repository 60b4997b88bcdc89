//! End-to-end tests of the `fbsdectl` binary: exit codes, file outputs and
//! report contents for each subcommand, on models small enough to run in
//! seconds.

use std::path::{Path, PathBuf};
use std::process::Command;

struct RunOutput {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> RunOutput {
    let out = Command::new(env!("CARGO_BIN_EXE_fbsdectl"))
        .args(args)
        .output()
        .expect("binary should run");
    RunOutput {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn write_file(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn report_table(dir: &Path) -> toml::Table {
    read(&dir.join("report.toml")).parse::<toml::Table>().expect("report parses as TOML")
}

/// Parses a CSV body into rows of f64 columns, skipping the header.
fn csv_rows(text: &str, skip_cols: usize) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|line| {
            line.split(',')
                .skip(skip_cols)
                .map(|cell| cell.parse::<f64>().unwrap_or_else(|e| panic!("{cell:?}: {e}")))
                .collect()
        })
        .collect()
}

const ZERO_DYNAMICS: &str = "
[model.affine]
horizon = 1.0
initial = [0.7, -0.2]

[model.affine.dimensions]
n = 2
m = 1
d = 1
k = 1

[model.affine.control_set]
kind = 'box'
lower = [-1.0]
upper = [1.0]

[numerics]
steps = 8
paths = 16
seed = 5

[output]
formats = ['csv', 'scenario']
";

#[test]
fn simulate_zero_dynamics_writes_exact_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_file(tmp.path(), "run.toml", ZERO_DYNAMICS);
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 0, "stderr: {}", out.stderr);

    // Columns: path, step, t, x0, x1, y0, z0_0. With every coefficient zero
    // the state stays at its initial point and the backward parts vanish.
    let rows = csv_rows(&read(&out_dir.join("trajectory.csv")), 3);
    assert_eq!(rows.len(), 16 * 9);
    for row in &rows {
        assert_eq!(row[0], 0.7);
        assert_eq!(row[1], -0.2);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[3], 0.0);
    }
    assert!(out_dir.join("control.csv").is_file());
    assert!(out_dir.join("scenario.bin").is_file());

    let report = report_table(&out_dir);
    assert_eq!(report["outcome"].as_str(), Some("ok"));
    assert_eq!(report["seed"].as_integer(), Some(5));
    let cost = report["cost"].as_table().unwrap();
    assert_eq!(cost["value"].as_float(), Some(0.0));
    assert!(report["config"].as_table().unwrap().contains_key("numerics"));
}

#[test]
fn negative_mark_weight_fails_validation_with_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_file(
        tmp.path(),
        "run.toml",
        "
[model.affine]
horizon = 1.0
initial = [0.5]

[model.affine.dimensions]
n = 1
m = 1
d = 1
k = 1

[model.affine.marks]
atoms = [1.0]
weights = [-0.5]

[model.affine.control_set]
kind = 'box'
lower = [-1.0]
upper = [1.0]

[numerics]
steps = 4
paths = 8
",
    );
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 2, "stderr: {}", out.stderr);
    let report = report_table(&out_dir);
    assert_eq!(report["outcome"].as_str(), Some("validation-error"));
    let error = report["error"].as_str().unwrap();
    assert!(error.contains("weight"), "error should name the violation: {error}");
}

#[test]
fn diverging_model_exits_with_the_divergence_code() {
    let tmp = tempfile::tempdir().unwrap();
    // Coupling gains of 10 over a horizon of 5 sit far outside the
    // contraction regime; the run must refuse rather than emit garbage.
    let config = write_file(
        tmp.path(),
        "run.toml",
        "
[model.affine]
horizon = 5.0
initial = [1.0]

[model.affine.dimensions]
n = 1
m = 1
d = 1
k = 1

[model.affine.drift]
y = [[10.0]]

[model.affine.diffusion]
constant = [0.2]

[model.affine.driver]
x = [[10.0]]

[model.affine.cost]
qx = [1.0]
qv = [1.0]

[model.affine.control_set]
kind = 'box'
lower = [-5.0]
upper = [5.0]

[numerics]
steps = 40
paths = 64
seed = 7
basis_degree = 1
",
    );
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 3, "stderr: {}", out.stderr);
    let report = report_table(&out_dir);
    assert_eq!(report["outcome"].as_str(), Some("diverged"));
    let residuals: Vec<f64> = report["picard"].as_table().unwrap()["residuals"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_float().unwrap())
        .collect();
    assert!(residuals.len() >= 2, "residual log: {residuals:?}");
    assert!(residuals.windows(2).all(|w| w[0] <= w[1]), "log should not decrease: {residuals:?}");
    assert!(!residuals.last().unwrap().is_finite(), "iterates should have escaped");
}

#[test]
fn optimize_pure_control_cost_recovers_the_target() {
    let tmp = tempfile::tempdir().unwrap();
    // Cost (1/2) qv v^2 + lv v with zero dynamics: the unique minimizer is
    // v = 0.3, reached exactly in one unit step.
    let config = write_file(
        tmp.path(),
        "run.toml",
        "
[model.affine]
horizon = 1.0
initial = [0.0]

[model.affine.dimensions]
n = 1
m = 1
d = 1
k = 1

[model.affine.cost]
qv = [1.0]
lv = [-0.3]

[model.affine.control_set]
kind = 'box'
lower = [-2.0]
upper = [2.0]

[numerics]
steps = 8
paths = 32
seed = 11

[numerics.optimizer]
step_size = 1.0
step_rule = 'fixed'
max_iterations = 25
tolerance = 1e-9
",
    );
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "optimize",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 0, "stderr: {}", out.stderr);
    // Columns after the scope label: path, step, t, v0. Every entry of the
    // final iterate must sit at the analytic minimizer.
    let rows = csv_rows(&read(&out_dir.join("control.csv")), 1);
    assert!(!rows.is_empty());
    for row in &rows {
        let v = row[3];
        assert!((v - 0.3).abs() <= 1e-6, "control should sit at 0.3, got {v}");
    }
    let report = report_table(&out_dir);
    assert_eq!(report["outcome"].as_str(), Some("ok"));
    let optimizer = report["optimizer"].as_table().unwrap();
    assert_eq!(optimizer["termination"].as_str(), Some("converged"));
    assert!(out_dir.join("iterations.csv").is_file());
    assert!(out_dir.join("trajectory.csv").is_file());
}

const LQ_VERIFY: &str = "
[model.lq]

[numerics]
steps = 32
paths = 2048
seed = 17
directions = 2
verify_tolerance = 8e-3
";

#[test]
fn verify_passes_at_the_riccati_control_and_fails_at_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_file(
        tmp.path(),
        "riccati.toml",
        &format!("{LQ_VERIFY}\ncontrol = 'riccati'\n"),
    );
    let good_dir = tmp.path().join("good");
    let out = run(&[
        "verify",
        "--config",
        good.to_str().unwrap(),
        "--out",
        good_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 0, "stdout: {}\nstderr: {}", out.stdout, out.stderr);
    for check in ["gateaux", "stationarity", "max_condition", "convexity", "ibp", "moments"] {
        assert!(
            out.stdout.contains(&format!("check {check}: pass")),
            "{check} should pass:\n{}",
            out.stdout
        );
    }
    let report = report_table(&good_dir);
    assert_eq!(report["outcome"].as_str(), Some("ok"));

    let bad = write_file(tmp.path(), "zero.toml", &format!("{LQ_VERIFY}\ncontrol = 'zero'\n"));
    let bad_dir = tmp.path().join("bad");
    let out = run(&[
        "verify",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        bad_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 4, "stdout: {}\nstderr: {}", out.stdout, out.stderr);
    assert!(out.stdout.contains("check stationarity: fail"), "stdout: {}", out.stdout);
    assert!(out.stdout.contains("check max_condition: fail"), "stdout: {}", out.stdout);
    let report = report_table(&bad_dir);
    assert_eq!(report["outcome"].as_str(), Some("verification-failed"));
}

#[test]
fn verify_notes_the_mark_free_reduction() {
    let tmp = tempfile::tempdir().unwrap();
    // No marks, pure control cost, zero control: exactly stationary, so the
    // battery passes while the jump fixtures and jump moments are skipped.
    let config = write_file(
        tmp.path(),
        "run.toml",
        "
[model.affine]
horizon = 1.0
initial = [0.5]

[model.affine.dimensions]
n = 1
m = 1
d = 1
k = 1

[model.affine.diffusion]
constant = [0.2]

[model.affine.cost]
qv = [1.0]

[model.affine.control_set]
kind = 'box'
lower = [-1.0]
upper = [1.0]

[numerics]
steps = 8
paths = 64
seed = 3
directions = 1
",
    );
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 0, "stdout: {}\nstderr: {}", out.stdout, out.stderr);
    let report = report_table(&out_dir);
    assert!(report["note"].as_str().unwrap().contains("mark space is empty"));
    let moments = report["moments"].as_table().unwrap();
    assert!(moments.contains_key("p_gg"));
    assert!(!moments.contains_key("p_sigma"), "jump moments should be omitted");
    let fixtures = report["ibp"].as_table().unwrap()["fixtures"].as_array().unwrap();
    let jump = fixtures
        .iter()
        .find(|f| f.as_table().unwrap()["name"].as_str() == Some("jump"))
        .expect("jump fixture row");
    assert!(jump.as_table().unwrap()["note"].as_str().unwrap().contains("skipped"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_file(tmp.path(), "run.toml", "[numerics]\npathz = 3\n");
    let out = run(&["simulate", "--config", config.to_str().unwrap()]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("unknown"), "stderr: {}", out.stderr);
}

#[test]
fn worker_count_does_not_change_the_csv_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_file(
        tmp.path(),
        "run.toml",
        "
[model.lq]

[numerics]
steps = 16
paths = 256
seed = 23
",
    );
    let mut tables: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for workers in ["1", "3"] {
        let out_dir = tmp.path().join(format!("w{workers}"));
        let out = run(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--workers",
            workers,
        ]);
        assert_eq!(out.code, 0, "stderr: {}", out.stderr);
        tables.push((
            std::fs::read(out_dir.join("trajectory.csv")).unwrap(),
            std::fs::read(out_dir.join("control.csv")).unwrap(),
        ));
    }
    assert_eq!(tables[0].0, tables[1].0, "trajectory bytes differ across workers");
    assert_eq!(tables[0].1, tables[1].1, "control bytes differ across workers");
}

#[test]
fn bench_cheap_fixtures_report_their_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    let forward = write_file(tmp.path(), "fwd.toml", "[bench]\nname = 'pure-forward'\n");
    let fwd_dir = tmp.path().join("fwd");
    let out = run(&[
        "bench",
        "--config",
        forward.to_str().unwrap(),
        "--out",
        fwd_dir.to_str().unwrap(),
        "--steps",
        "16",
        "--paths",
        "128",
    ]);
    assert_eq!(out.code, 0, "stderr: {}", out.stderr);
    assert!(out.stdout.contains("bench pure-forward: pass"), "stdout: {}", out.stdout);
    let report = report_table(&fwd_dir);
    assert_eq!(report["outcome"].as_str(), Some("ok"));
    assert!(report["bench"].as_table().unwrap()["backward_sup"].as_float().unwrap() <= 1e-8);

    let diverging = write_file(tmp.path(), "div.toml", "[bench]\nname = 'diverging'\n");
    let div_dir = tmp.path().join("div");
    let out = run(&[
        "bench",
        "--config",
        diverging.to_str().unwrap(),
        "--out",
        div_dir.to_str().unwrap(),
        "--paths",
        "64",
    ]);
    assert_eq!(out.code, 0, "stderr: {}", out.stderr);
    assert!(out.stdout.contains("bench diverging: pass"), "stdout: {}", out.stdout);

    let unknown = write_file(tmp.path(), "bad.toml", "[bench]\nname = 'warp-drive'\n");
    let out = run(&["bench", "--config", unknown.to_str().unwrap()]);
    assert_eq!(out.code, 2);
}

#[test]
fn optimize_on_a_delayed_model_reports_the_information_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_file(
        tmp.path(),
        "run.toml",
        "
[model.lq]
filtration = { kind = 'delayed', delay = 0.25 }

[numerics]
steps = 16
paths = 256
seed = 29

[numerics.optimizer]
step_size = 0.5
step_rule = 'halving'
max_iterations = 8
tolerance = 1e-3
",
    );
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "optimize",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 0, "stderr: {}", out.stderr);
    let report = report_table(&out_dir);
    let mono = report["info_monotonicity"].as_table().unwrap();
    assert!(mono.contains_key("delayed_cost"));
    assert!(mono.contains_key("full_cost"));
    assert!(mono.contains_key("pass"));
}
