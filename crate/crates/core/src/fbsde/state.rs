//! Forward simulation and the damped Picard solve of the coupled system.
//!
//! One Picard sweep simulates the forward state with the current backward
//! surrogate tables plugged into the coefficients, then regresses the
//! backward unknowns on the refreshed forward paths. Sweeps repeat with a
//! damped update of the coefficient tables until the per-path iterates stop
//! moving in the relative sup-over-grid L2 metric.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CoeffArgs, CoeffId, ProblemSpec};
use crate::scenario::ScenarioBatch;

use super::control::ControlProcess;
use super::regression::{CondExpOp, FeatureMap, SurrogateFn};
use super::{check_batch, picard_residual, SolverParams, StepSurrogate, Trajectory};

/// Simulates the forward state with all backward surrogates frozen at zero.
/// The returned trajectory has y, z, r identically zero; it is the plain
/// controlled SDE simulation.
pub fn simulate_forward(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    control: &ControlProcess,
) -> Result<Trajectory> {
    check_batch(spec, batch)?;
    check_control(spec, batch, control)?;
    let mut traj = Trajectory::zeros(&spec.dims, spec.marks.len(), batch.grid, batch.paths);
    forward_pass(spec, batch, control, None, &mut traj)?;
    Ok(traj)
}

/// Simulates the forward state reading (y, z, r) from the given surrogate
/// tables, as one Picard sweep does. The tables must have been fitted over
/// `map`.
pub fn simulate_with_surrogates(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    control: &ControlProcess,
    surrogates: &[StepSurrogate],
    map: &FeatureMap,
) -> Result<Trajectory> {
    check_batch(spec, batch)?;
    check_control(spec, batch, control)?;
    if surrogates.len() != batch.grid.steps {
        return Err(Error::Shape(format!(
            "{} surrogate tables for {} steps",
            surrogates.len(),
            batch.grid.steps
        )));
    }
    let mut traj = Trajectory::zeros(&spec.dims, spec.marks.len(), batch.grid, batch.paths);
    forward_pass(spec, batch, control, Some((surrogates, map)), &mut traj)?;
    Ok(traj)
}

/// Solves the coupled system under the given control by damped Picard
/// iteration. Returns the converged trajectory with its residual history;
/// fails with `PicardDiverged` when the sweep budget is exhausted or an
/// iterate escapes to non-finite values after the first sweep.
pub fn solve_fbsde(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    control: &ControlProcess,
    params: &SolverParams,
) -> Result<Trajectory> {
    params.validate()?;
    check_batch(spec, batch)?;
    check_control(spec, batch, control)?;
    let dims = spec.dims;
    let marks = spec.marks.len();
    let map = FeatureMap::new(dims.n, params.basis.degree);

    let mut surrogates: Vec<StepSurrogate> =
        (0..batch.grid.steps).map(|_| StepSurrogate::zero(&dims, marks)).collect();
    let mut traj = Trajectory::zeros(&dims, marks, batch.grid, batch.paths);
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut residuals: Vec<f64> = Vec::new();

    for sweep in 0..params.picard.max_sweeps {
        let run = forward_pass(spec, batch, control, Some((&surrogates, &map)), &mut traj)
            .and_then(|()| backward_sweep(spec, batch, control, &mut traj, &map, params.basis.ridge));
        let fresh = match run {
            Ok(fresh) => fresh,
            // After the first sweep, a state that escapes to non-finite
            // values or wrecks the regression conditioning is the coupling
            // blowing up; report divergence with the residual history
            // instead of a bare evaluation error.
            Err(Error::NonFiniteState { .. } | Error::SingularRegression { .. }) if sweep > 0 => {
                residuals.push(f64::INFINITY);
                return Err(Error::PicardDiverged { residuals });
            }
            Err(e) => return Err(e),
        };
        if let Some((px, py)) = &prev {
            let res = picard_residual(
                &traj.x,
                px,
                &traj.y,
                py,
                batch.paths,
                batch.grid.steps,
                dims.n,
                dims.m,
            );
            residuals.push(res);
            if res <= params.picard.tol {
                traj.surrogates = fresh;
                traj.residuals = residuals;
                return Ok(traj);
            }
            if !res.is_finite() {
                return Err(Error::PicardDiverged { residuals });
            }
        }
        prev = Some((traj.x.clone(), traj.y.clone()));
        for (slot, new) in surrogates.iter_mut().zip(&fresh) {
            *slot = slot.blend(new, params.picard.damping);
        }
    }
    Err(Error::PicardDiverged { residuals })
}

pub(crate) fn check_control(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    control: &ControlProcess,
) -> Result<()> {
    if control.dim() != spec.dims.k {
        return Err(Error::Shape(format!(
            "control dimension {} does not match k = {}",
            control.dim(),
            spec.dims.k
        )));
    }
    if control.steps() != batch.grid.steps {
        return Err(Error::Shape(format!(
            "control has {} steps, grid has {}",
            control.steps(),
            batch.grid.steps
        )));
    }
    if let ControlProcess::PerPath { paths, .. } = control {
        if *paths != batch.paths {
            return Err(Error::Shape(format!(
                "control has {} paths, scenario has {}",
                paths, batch.paths
            )));
        }
    }
    Ok(())
}

/// Per-path slab widths of the four trajectory arrays.
#[derive(Clone, Copy)]
struct PathWidths {
    x: usize,
    y: usize,
    z: usize,
    r: usize,
}

/// Runs `f` once per path with mutable access to that path's slab of each
/// array, fanning out with binary splits. Unlike zipped chunk iterators this
/// tolerates zero-width slabs (no marks, or other empty blocks).
fn par_paths<F>(
    first: usize,
    x: &mut [f64],
    y: &mut [f64],
    z: &mut [f64],
    r: &mut [f64],
    widths: PathWidths,
    f: &F,
) -> Result<()>
where
    F: Fn(usize, &mut [f64], &mut [f64], &mut [f64], &mut [f64]) -> Result<()> + Sync,
{
    let count = x.len() / widths.x;
    if count == 0 {
        return Ok(());
    }
    if count == 1 {
        return f(first, x, y, z, r);
    }
    let half = count / 2;
    let (x1, x2) = x.split_at_mut(half * widths.x);
    let (y1, y2) = y.split_at_mut(half * widths.y);
    let (z1, z2) = z.split_at_mut(half * widths.z);
    let (r1, r2) = r.split_at_mut(half * widths.r);
    let (left, right) = rayon::join(
        || par_paths(first, x1, y1, z1, r1, widths, f),
        || par_paths(first + half, x2, y2, z2, r2, widths, f),
    );
    left.and(right)
}

/// Explicit Euler forward pass. Writes x for every step and, when surrogate
/// tables are supplied, the (y, z, r) values read by the coefficients; with
/// no tables those values are zero.
fn forward_pass(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    control: &ControlProcess,
    surrogates: Option<(&[StepSurrogate], &FeatureMap)>,
    traj: &mut Trajectory,
) -> Result<()> {
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let marks = spec.marks.len();
    let steps = batch.grid.steps;
    let dt = batch.grid.dt();
    let zw = m * d;
    let rw = marks * m;
    let coeffs = spec.coefficients.as_ref();

    let widths =
        PathWidths { x: (steps + 1) * n, y: (steps + 1) * m, z: steps * zw, r: steps * rw };
    par_paths(
        0,
        &mut traj.x,
        &mut traj.y,
        &mut traj.z,
        &mut traj.r,
        widths,
        &|p, xs, ys, zs, rs| -> Result<()> {
            let mut x = spec.initial.clone();
            let mut y = DVector::zeros(m);
            let mut z = DMatrix::zeros(m, d);
            let mut r: Vec<DVector<f64>> = (0..marks).map(|_| DVector::zeros(m)).collect();
            let mut v = DVector::zeros(dims.k);
            let mut features = surrogates.map(|(_, map)| vec![0.0; map.len()]);
            xs[..n].copy_from_slice(x.as_slice());

            for i in 0..steps {
                if let Some((tables, map)) = surrogates {
                    let feats = features.as_mut().expect("feature buffer");
                    map.eval(x.as_slice(), feats);
                    let table = &tables[i];
                    table.y.eval(feats, y.as_mut_slice());
                    table.z.eval(feats, &mut zs[i * zw..(i + 1) * zw]);
                    table.r.eval(feats, &mut rs[i * rw..(i + 1) * rw]);
                    for row in 0..m {
                        for col in 0..d {
                            z[(row, col)] = zs[i * zw + row * d + col];
                        }
                    }
                    for (j, rj) in r.iter_mut().enumerate() {
                        rj.as_mut_slice().copy_from_slice(&rs[i * rw + j * m..i * rw + (j + 1) * m]);
                    }
                    ys[i * m..(i + 1) * m].copy_from_slice(y.as_slice());
                }
                v.as_mut_slice().copy_from_slice(control.at(p, i));
                let args = CoeffArgs { t: batch.grid.t(i), x: &x, y: &y, z: &z, r: &r, v: &v };
                let b = coeffs.value(CoeffId::Drift, &args);
                let g = coeffs.value(CoeffId::Diffusion, &args);
                let db = batch.db(p, i);
                let mut next = x.clone();
                for c in 0..n {
                    let mut acc = b[c] * dt;
                    for ch in 0..d {
                        acc += g[c * d + ch] * db[ch];
                    }
                    next[c] += acc;
                }
                for j in 0..marks {
                    let jump = coeffs.value(CoeffId::Jump(j), &args);
                    let dn = batch.compensated(p, i, j);
                    for c in 0..n {
                        next[c] += jump[c] * dn;
                    }
                }
                if next.iter().any(|w| !w.is_finite()) {
                    return Err(Error::NonFiniteState { path: p, step: i + 1 });
                }
                x = next;
                xs[(i + 1) * n..(i + 2) * n].copy_from_slice(x.as_slice());
            }
            Ok(())
        })
}

/// One backward regression sweep on frozen forward paths. Writes y, z, r
/// per path and returns the freshly fitted surrogate tables.
fn backward_sweep(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    control: &ControlProcess,
    traj: &mut Trajectory,
    map: &FeatureMap,
    ridge: f64,
) -> Result<Vec<StepSurrogate>> {
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let marks = spec.marks.len();
    let paths = traj.paths;
    let steps = traj.grid.steps;
    let dt = traj.grid.dt();
    let zw = m * d;
    let rw = marks * m;
    let coeffs = spec.coefficients.as_ref();

    let Trajectory { x, y, z, r, .. } = traj;
    let x: &[f64] = x.as_slice();
    let x_at = |p: usize, i: usize| &x[(p * (steps + 1) + i) * n..(p * (steps + 1) + i) * n + n];

    // Terminal condition.
    y.par_chunks_mut((steps + 1) * m).enumerate().for_each(|(p, yrow)| {
        let x_terminal = DVector::from_column_slice(x_at(p, steps));
        let xi = spec.terminal.evaluate(
            spec.horizon,
            &spec.marks,
            &batch.brownian_total(p),
            &batch.counts_total(p),
            &x_terminal,
        );
        yrow[steps * m..(steps + 1) * m].copy_from_slice(xi.as_slice());
    });

    let mut tables: Vec<StepSurrogate> =
        (0..steps).map(|_| StepSurrogate::zero(&dims, marks)).collect();
    let mut regressors = vec![0.0; paths * n];
    let mut targets_y = vec![0.0; paths * m];
    let mut targets_z = vec![0.0; paths * zw];
    let mut targets_r = vec![0.0; paths * rw];
    let mut y_step = vec![0.0; paths * m];

    for i in (0..steps).rev() {
        // Conditional expectation given the step-i state. Step 0 carries no
        // randomness, so the operator degenerates to the cross-path mean.
        let op = if i == 0 {
            CondExpOp::mean(paths)
        } else {
            for p in 0..paths {
                regressors[p * n..(p + 1) * n].copy_from_slice(x_at(p, i));
            }
            CondExpOp::regress(&regressors, paths, map, ridge, i)?
        };

        for p in 0..paths {
            let base = (p * (steps + 1) + i + 1) * m;
            targets_y[p * m..(p + 1) * m].copy_from_slice(&y[base..base + m]);
        }
        let (y_prior, _) = op.apply(&targets_y, m);

        // Martingale-increment targets for the z and r extractions.
        for p in 0..paths {
            let db = batch.db(p, i);
            for c in 0..m {
                let dev = targets_y[p * m + c] - y_prior[p * m + c];
                for ch in 0..d {
                    targets_z[p * zw + c * d + ch] = dev * db[ch] / dt;
                }
                for j in 0..marks {
                    let weight = spec.marks.weights[j] * dt;
                    targets_r[p * rw + j * m + c] = dev * batch.compensated(p, i, j) / weight;
                }
            }
        }
        let (z_fit, coeff_z) = op.apply(&targets_z, zw);
        let (r_fit, coeff_r) = op.apply(&targets_r, rw);

        // Euler step of y through the driver at the fitted arguments.
        let t = traj.grid.t(i);
        y_step
            .par_chunks_mut(m)
            .enumerate()
            .try_for_each(|(p, out)| -> Result<()> {
                let xv = DVector::from_column_slice(x_at(p, i));
                let yv = DVector::from_column_slice(&y_prior[p * m..(p + 1) * m]);
                let zv = DMatrix::from_row_slice(m, d, &z_fit[p * zw..(p + 1) * zw]);
                let rv: Vec<DVector<f64>> = (0..marks)
                    .map(|j| {
                        DVector::from_column_slice(&r_fit[p * rw + j * m..p * rw + (j + 1) * m])
                    })
                    .collect();
                let vv = DVector::from_column_slice(control.at(p, i));
                let args = CoeffArgs { t, x: &xv, y: &yv, z: &zv, r: &rv, v: &vv };
                let f = coeffs.value(CoeffId::Driver, &args);
                for c in 0..m {
                    out[c] = y_prior[p * m + c] + dt * f[c];
                    if !out[c].is_finite() {
                        return Err(Error::NonFiniteState { path: p, step: i });
                    }
                }
                Ok(())
            })?;

        for p in 0..paths {
            let base = (p * (steps + 1) + i) * m;
            y[base..base + m].copy_from_slice(&y_step[p * m..(p + 1) * m]);
            let zb = (p * steps + i) * zw;
            z[zb..zb + zw].copy_from_slice(&z_fit[p * zw..(p + 1) * zw]);
            let rb = (p * steps + i) * rw;
            r[rb..rb + rw].copy_from_slice(&r_fit[p * rw..(p + 1) * rw]);
        }

        // Surrogate tables for the next forward pass. The y table refits the
        // driver-updated values so the forward state reads y_i, not yhat_i.
        let (_, coeff_y) = op.apply(&y_step, m);
        tables[i] = StepSurrogate {
            y: to_surrogate(&op, coeff_y),
            z: to_surrogate(&op, coeff_z),
            r: to_surrogate(&op, coeff_r),
        };
    }
    Ok(tables)
}

fn to_surrogate(op: &CondExpOp, coeffs: DMatrix<f64>) -> SurrogateFn {
    match op {
        CondExpOp::Mean { .. } => SurrogateFn::Const(coeffs.row(0).iter().copied().collect()),
        CondExpOp::Fit { .. } => SurrogateFn::Poly(coeffs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AffineModel;
    use crate::model::{
        ControlSet, Dimensions, DriverTerminal, FiltrationSpec, MarkSpace, TerminalSpec,
    };
    use crate::scenario::RngSpec;
    use nalgebra::dmatrix;
    use std::sync::Arc;

    fn scalar_dims() -> Dimensions {
        Dimensions { n: 1, m: 1, d: 1, k: 1 }
    }

    fn spec_from(model: AffineModel, horizon: f64, initial: f64) -> ProblemSpec {
        let dims = model.dims;
        let marks = model.marks.clone();
        ProblemSpec {
            dims,
            horizon,
            initial: DVector::from_element(dims.n, initial),
            marks: marks.clone(),
            control_set: ControlSet::Box { lower: vec![-5.0; dims.k], upper: vec![5.0; dims.k] },
            filtration: FiltrationSpec::Full,
            terminal: TerminalSpec::zero(&dims, &marks),
            coefficients: Arc::new(model),
        }
    }

    fn one_mark() -> MarkSpace {
        MarkSpace::new(vec![0.5], vec![1.0]).unwrap()
    }

    #[test]
    fn pure_forward_reduction_is_exactly_zero() {
        // Forward coefficients free of (y, z, r), zero driver and terminal:
        // the backward unknowns must vanish to the last bit.
        let mut model = AffineModel::zeros(scalar_dims(), one_mark());
        model.drift.constant[0] = 0.1;
        model.drift.x_mat[(0, 0)] = 0.2;
        model.drift.v_mat[(0, 0)] = 1.0;
        model.diffusion.constant[0] = 0.4;
        model.diffusion.x_mat[(0, 0)] = 0.1;
        model.jump.constant[0] = 0.8;
        model.nonlin_scale = 0.5;
        let spec = spec_from(model, 1.0, 1.0);
        let grid = crate::scenario::TimeGrid::new(1.0, 16).unwrap();
        let batch = ScenarioBatch::generate(grid, 256, 1, &[1.0], RngSpec { seed: 42 }).unwrap();
        let control = ControlProcess::constant(&[0.3], 16);
        let traj = solve_fbsde(&spec, &batch, &control, &SolverParams::default()).unwrap();
        assert_eq!(traj.backward_sup_norm(), 0.0, "backward unknowns must be bit-zero");
        assert_eq!(traj.residuals.len(), 1, "decoupled solve converges at the first check");
        assert_eq!(traj.residuals[0], 0.0);
    }

    #[test]
    fn constant_driver_integrates_time_to_go() {
        // f = c with zero terminal gives y(t) = c (T - t) on every path.
        let mut model = AffineModel::zeros(scalar_dims(), one_mark());
        model.diffusion.constant[0] = 0.4;
        model.driver.constant[0] = 0.7;
        let spec = spec_from(model, 1.0, 1.0);
        let grid = crate::scenario::TimeGrid::new(1.0, 16).unwrap();
        let batch = ScenarioBatch::generate(grid, 128, 1, &[1.0], RngSpec { seed: 7 }).unwrap();
        let control = ControlProcess::constant(&[0.0], 16);
        let traj = solve_fbsde(&spec, &batch, &control, &SolverParams::default()).unwrap();
        let dt = grid.dt();
        for p in 0..batch.paths {
            for i in 0..=16 {
                let want = 0.7 * (1.0 - i as f64 * dt);
                assert!(
                    (traj.y(p, i)[0] - want).abs() < 1e-10,
                    "y({p},{i}) = {} want {want}",
                    traj.y(p, i)[0]
                );
            }
            for i in 0..16 {
                assert!(traj.z(p, i)[0].abs() < 1e-12);
                assert!(traj.r(p, i)[0].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_coupled_system_matches_closed_form() {
        // x' = y, y' = -x with x(0) = 1, y(T) = 0 at T = 1/2 has the unique
        // solution x = cos t + tan(T) sin t, y = x'. No noise enters: the
        // diffusion and jumps are absent, so every path must agree.
        let dims = scalar_dims();
        let marks = MarkSpace::none();
        let mut model = AffineModel::zeros(dims, marks.clone());
        model.drift.y_mat[(0, 0)] = 1.0;
        model.driver.x_mat[(0, 0)] = 1.0;
        let spec = spec_from(model, 0.5, 1.0);
        let steps = 400;
        let grid = crate::scenario::TimeGrid::new(0.5, steps).unwrap();
        let batch = ScenarioBatch::generate(grid, 8, 1, &[], RngSpec { seed: 3 }).unwrap();
        let control = ControlProcess::constant(&[0.0], steps);
        let traj = solve_fbsde(&spec, &batch, &control, &SolverParams::default()).unwrap();

        let tan_t = 0.5f64.tan();
        let mut worst = 0.0f64;
        for i in 0..=steps {
            let t = grid.t(i);
            let x_exact = t.cos() + tan_t * t.sin();
            let y_exact = -t.sin() + tan_t * t.cos();
            worst = worst.max((traj.x(0, i)[0] - x_exact).abs());
            worst = worst.max((traj.y(0, i)[0] - y_exact).abs());
            // All paths see the same deterministic dynamics.
            for p in 1..batch.paths {
                assert!((traj.x(p, i)[0] - traj.x(0, i)[0]).abs() < 1e-9);
                assert!((traj.y(p, i)[0] - traj.y(0, i)[0]).abs() < 1e-9);
            }
        }
        assert!(worst < 2e-3, "two-point boundary solution off by {worst}");
        assert!((traj.y(0, steps)[0]).abs() < 1e-12, "terminal condition violated");
    }

    #[test]
    fn decoupled_linear_sde_matches_discrete_moments() {
        // dx = -kappa x dt + s dB under Euler has exactly
        // E x_N = a (1 - kappa dt)^N and Var x_N = s^2 dt sum (1 - kappa dt)^{2i}.
        let dims = scalar_dims();
        let marks = MarkSpace::none();
        let mut model = AffineModel::zeros(dims, marks.clone());
        model.drift.x_mat[(0, 0)] = -0.8;
        model.diffusion.constant[0] = 0.3;
        let spec = spec_from(model, 1.0, 1.2);
        let steps = 32;
        let paths = 20000;
        let grid = crate::scenario::TimeGrid::new(1.0, steps).unwrap();
        let batch = ScenarioBatch::generate(grid, paths, 1, &[], RngSpec { seed: 11 }).unwrap();
        let control = ControlProcess::constant(&[0.0], steps);
        let traj = simulate_forward(&spec, &batch, &control).unwrap();

        let dt = grid.dt();
        let decay = 1.0 - 0.8 * dt;
        let mean_exact = 1.2 * decay.powi(steps as i32);
        let var_exact: f64 =
            (0..steps).map(|i| 0.09 * dt * decay.powi(2 * i as i32)).sum();
        let xs: Vec<f64> = (0..paths).map(|p| traj.x(p, steps)[0]).collect();
        let mean: f64 = xs.iter().sum::<f64>() / paths as f64;
        let var: f64 =
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (paths - 1) as f64;
        let se_mean = (var / paths as f64).sqrt();
        assert!(
            (mean - mean_exact).abs() < 4.0 * se_mean,
            "mean {mean} vs exact {mean_exact} (se {se_mean})"
        );
        let se_var = var_exact * (2.0 / (paths - 1) as f64).sqrt();
        assert!(
            (var - var_exact).abs() < 4.0 * se_var,
            "var {var} vs exact {var_exact} (se {se_var})"
        );
    }

    #[test]
    fn terminal_condition_is_planted_on_each_path() {
        let dims = scalar_dims();
        let marks = one_mark();
        let mut model = AffineModel::zeros(dims, marks.clone());
        model.diffusion.constant[0] = 0.5;
        let mut spec = spec_from(model, 1.0, 0.0);
        spec.terminal = TerminalSpec::Driver(DriverTerminal {
            constant: DVector::from_element(1, 0.2),
            brownian: dmatrix![0.7],
            counts: dmatrix![0.3],
            squash: 2.0,
        });
        let grid = crate::scenario::TimeGrid::new(1.0, 8).unwrap();
        let batch = ScenarioBatch::generate(grid, 64, 1, &[1.0], RngSpec { seed: 5 }).unwrap();
        let control = ControlProcess::constant(&[0.0], 8);
        let traj = solve_fbsde(&spec, &batch, &control, &SolverParams::default()).unwrap();
        for p in 0..batch.paths {
            let x_terminal = DVector::from_column_slice(traj.x(p, 8));
            let xi = spec.terminal.evaluate(
                1.0,
                &spec.marks,
                &batch.brownian_total(p),
                &batch.counts_total(p),
                &x_terminal,
            );
            assert_eq!(traj.y(p, 8)[0], xi[0]);
        }
    }

    #[test]
    fn runaway_coupling_reports_divergence() {
        // Strong positive feedback between x and y over a long horizon makes
        // the Picard map expansive; the solve must fail with its residual
        // history rather than return garbage.
        let dims = scalar_dims();
        let marks = MarkSpace::none();
        let mut model = AffineModel::zeros(dims, marks.clone());
        model.drift.y_mat[(0, 0)] = 10.0;
        model.driver.x_mat[(0, 0)] = 10.0;
        let spec = spec_from(model, 5.0, 1.0);
        let grid = crate::scenario::TimeGrid::new(5.0, 16).unwrap();
        let batch = ScenarioBatch::generate(grid, 16, 1, &[], RngSpec { seed: 9 }).unwrap();
        let control = ControlProcess::constant(&[0.0], 16);
        match solve_fbsde(&spec, &batch, &control, &SolverParams::default()) {
            Err(Error::PicardDiverged { residuals }) => {
                assert!(!residuals.is_empty());
                assert!(residuals.last().copied().unwrap() > 1.0 || residuals.len() >= 49);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_scenario_is_rejected() {
        let model = AffineModel::zeros(scalar_dims(), one_mark());
        let spec = spec_from(model, 1.0, 1.0);
        let grid = crate::scenario::TimeGrid::new(1.0, 8).unwrap();
        // Wrong mark intensity.
        let batch = ScenarioBatch::generate(grid, 16, 1, &[2.0], RngSpec { seed: 1 }).unwrap();
        let control = ControlProcess::constant(&[0.0], 8);
        assert!(matches!(
            simulate_forward(&spec, &batch, &control),
            Err(Error::Shape(_))
        ));
        // Wrong control width.
        let batch = ScenarioBatch::generate(grid, 16, 1, &[1.0], RngSpec { seed: 1 }).unwrap();
        let control = ControlProcess::constant(&[0.0, 0.0], 8);
        assert!(matches!(
            simulate_forward(&spec, &batch, &control),
            Err(Error::Shape(_))
        ));
    }
}
