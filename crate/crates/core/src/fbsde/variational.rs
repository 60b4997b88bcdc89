//! First-order response of the coupled system to a control perturbation.
//!
//! Around a solved trajectory under control u, a direction theta induces the
//! linear FBSDE for the variation (x1, y1, z1, r1):
//!
//! ```text
//! dx1 = Db[Xi] dt + Dg[Xi] dB + sum_j Dsigma_j[Xi] (dN_j - pi_j dt),  x1(0) = 0
//! dy1 = -Df[Xi] dt + z1 dB + sum_j r1_j (dN_j - pi_j dt),             y1(T) = Dxi[x1(T)]
//! ```
//!
//! where `Dc[Xi]` is the total derivative of coefficient c along the frozen
//! base arguments applied to `Xi = (x1, y1, z1, r1, theta)`, with the r
//! directions entering through the pi-weighted pairing kernels. The
//! discretization copies the state solve: forward Euler for x1, centered
//! martingale projections for (z1, r1), and damped Picard sweeps on the
//! per-path backward values. The base state is frozen, so the regression
//! operators are built once and the map theta -> (x1, y1, z1, r1) is linear.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CoeffArgs, CoeffId, Dimensions, ProblemSpec, TerminalSpec, VarId};
use crate::scenario::{ScenarioBatch, TimeGrid};

use super::control::{ControlProcess, DirectionProcess};
use super::regression::{CondExpOp, FeatureMap};
use super::state::check_control;
use super::{picard_residual, ArgsBuf, SolverParams, Trajectory};

/// Solved variational system, laid out exactly like [`Trajectory`]:
/// x1 is P x (N+1) x n, y1 is P x (N+1) x m, z1 is P x N x (m d) row-major
/// and r1 is P x N x (marks m) mark-major.
#[derive(Clone, PartialEq)]
pub struct VariationalTrajectory {
    pub dims: Dimensions,
    pub marks: usize,
    pub grid: TimeGrid,
    pub paths: usize,
    pub x1: Vec<f64>,
    pub y1: Vec<f64>,
    pub z1: Vec<f64>,
    pub r1: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl VariationalTrajectory {
    #[inline]
    pub fn x1(&self, path: usize, step: usize) -> &[f64] {
        let n = self.dims.n;
        let base = (path * (self.grid.steps + 1) + step) * n;
        &self.x1[base..base + n]
    }

    #[inline]
    pub fn y1(&self, path: usize, step: usize) -> &[f64] {
        let m = self.dims.m;
        let base = (path * (self.grid.steps + 1) + step) * m;
        &self.y1[base..base + m]
    }

    /// Row-major m x d block, step < N.
    #[inline]
    pub fn z1(&self, path: usize, step: usize) -> &[f64] {
        let w = self.dims.m * self.dims.d;
        let base = (path * self.grid.steps + step) * w;
        &self.z1[base..base + w]
    }

    /// Mark-major (marks x m) block, step < N.
    #[inline]
    pub fn r1(&self, path: usize, step: usize) -> &[f64] {
        let w = self.marks * self.dims.m;
        let base = (path * self.grid.steps + step) * w;
        &self.r1[base..base + w]
    }

    /// Initial backward variation, identical across paths by construction.
    pub fn y1_0(&self) -> Vec<f64> {
        let m = self.dims.m;
        let mut out = vec![0.0; m];
        for p in 0..self.paths {
            for a in 0..m {
                out[a] += self.y1(p, 0)[a];
            }
        }
        for w in &mut out {
            *w /= self.paths as f64;
        }
        out
    }
}

impl std::fmt::Debug for VariationalTrajectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VariationalTrajectory")
            .field("paths", &self.paths)
            .field("steps", &self.grid.steps)
            .field("dims", &self.dims)
            .field("marks", &self.marks)
            .field("residuals", &self.residuals)
            .finish_non_exhaustive()
    }
}

/// One variation argument bundle at a grid point, all slices borrowed from
/// the sweep tables.
pub(crate) struct XiSlices<'a> {
    pub x1: &'a [f64],
    pub y1: &'a [f64],
    pub z1: &'a [f64],
    pub r1: &'a [f64],
    pub theta: &'a [f64],
}

/// Total derivative of coefficient `id` at `args` applied to `xi`; the r
/// blocks enter with their mark weights, matching the pairing convention of
/// the stored kernels.
pub(crate) fn apply_linearization(
    spec: &ProblemSpec,
    id: CoeffId,
    args: &CoeffArgs,
    xi: &XiSlices,
) -> DVector<f64> {
    let m = spec.dims.m;
    let mut out = DVector::zeros(spec.coeff_rows(id));
    let mut add = |var: VarId, dir: &[f64], weight: f64| {
        if dir.iter().all(|w| *w == 0.0) {
            return;
        }
        let jac = spec.coefficients.jacobian(id, var, args);
        let dir = DVector::from_column_slice(dir);
        out.gemv(weight, &jac, &dir, 1.0);
    };
    add(VarId::X, xi.x1, 1.0);
    add(VarId::Y, xi.y1, 1.0);
    add(VarId::Z, xi.z1, 1.0);
    for j in 0..spec.marks.len() {
        add(VarId::R(j), &xi.r1[j * m..(j + 1) * m], spec.marks.weights[j]);
    }
    add(VarId::V, xi.theta, 1.0);
    out
}

/// Derivative of the terminal condition applied to the terminal variation.
fn terminal_variation(
    spec: &ProblemSpec,
    x_terminal: &[f64],
    x1_terminal: &[f64],
) -> DVector<f64> {
    match &spec.terminal {
        TerminalSpec::Driver(_) => DVector::zeros(spec.dims.m),
        TerminalSpec::State(s) => {
            let x = DVector::from_column_slice(x_terminal);
            let x1 = DVector::from_column_slice(x1_terminal);
            let w = &s.linear * &x + &s.constant;
            let mut out = &s.linear * &x1;
            if s.squash > 0.0 {
                for row in 0..out.len() {
                    let t = (w[row] / s.squash).tanh();
                    out[row] *= 1.0 - t * t;
                }
            }
            out
        }
    }
}

pub fn solve_variational(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    traj: &Trajectory,
    control: &ControlProcess,
    direction: &DirectionProcess,
    params: &SolverParams,
) -> Result<VariationalTrajectory> {
    params.validate()?;
    check_control(spec, batch, control)?;
    check_control(spec, batch, &direction.process)?;
    if traj.paths != batch.paths || traj.grid != batch.grid {
        return Err(Error::Shape("trajectory and scenario batch disagree".into()));
    }
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let marks = spec.marks.len();
    let paths = traj.paths;
    let steps = traj.grid.steps;
    let zw = m * d;
    let rw = marks * m;

    // Frozen base state, so the projection operators are sweep-invariant.
    let map = FeatureMap::new(n, params.basis.degree);
    let mut regressors = vec![0.0; paths * n];
    let ops: Vec<CondExpOp> = (0..steps)
        .map(|i| {
            if i == 0 {
                Ok(CondExpOp::mean(paths))
            } else {
                for p in 0..paths {
                    regressors[p * n..(p + 1) * n].copy_from_slice(traj.x(p, i));
                }
                CondExpOp::regress(&regressors, paths, &map, params.basis.ridge, i)
            }
        })
        .collect::<Result<_>>()?;

    let mut y_damped = vec![0.0; paths * (steps + 1) * m];
    let mut z_damped = vec![0.0; paths * steps * zw];
    let mut r_damped = vec![0.0; paths * steps * rw];
    let mut x1 = vec![0.0; paths * (steps + 1) * n];
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut residuals: Vec<f64> = Vec::new();

    for sweep in 0..params.picard.max_sweeps {
        let run = (|| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            forward_variation(
                spec, batch, traj, control, direction, &y_damped, &z_damped, &r_damped, &mut x1,
            )?;
            backward_variation(spec, batch, traj, control, direction, &ops, &x1)
        })();
        let (y_new, z_new, r_new) = match run {
            Ok(out) => out,
            Err(Error::NonFiniteState { .. } | Error::SingularRegression { .. }) if sweep > 0 => {
                residuals.push(f64::INFINITY);
                return Err(Error::PicardDiverged { residuals });
            }
            Err(e) => return Err(e),
        };
        if let Some((x_old, y_old)) = &prev {
            let res = picard_residual(&x1, x_old, &y_new, y_old, paths, steps, n, m);
            residuals.push(res);
            if res <= params.picard.tol {
                return Ok(VariationalTrajectory {
                    dims,
                    marks,
                    grid: traj.grid,
                    paths,
                    x1,
                    y1: y_new,
                    z1: z_new,
                    r1: r_new,
                    residuals,
                });
            }
            if !res.is_finite() {
                return Err(Error::PicardDiverged { residuals });
            }
        }
        prev = Some((x1.clone(), y_new.clone()));
        let damping = params.picard.damping;
        for (slot, fresh) in y_damped.iter_mut().zip(&y_new) {
            *slot = damping * fresh + (1.0 - damping) * *slot;
        }
        for (slot, fresh) in z_damped.iter_mut().zip(&z_new) {
            *slot = damping * fresh + (1.0 - damping) * *slot;
        }
        for (slot, fresh) in r_damped.iter_mut().zip(&r_new) {
            *slot = damping * fresh + (1.0 - damping) * *slot;
        }
    }
    Err(Error::PicardDiverged { residuals })
}

/// Euler march of x1 along each path, reading the backward variation from
/// the damped tables of the previous sweep.
#[allow(clippy::too_many_arguments)]
fn forward_variation(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    traj: &Trajectory,
    control: &ControlProcess,
    direction: &DirectionProcess,
    y_arr: &[f64],
    z_arr: &[f64],
    r_arr: &[f64],
    x1: &mut [f64],
) -> Result<()> {
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let marks = spec.marks.len();
    let steps = traj.grid.steps;
    let dt = traj.grid.dt();
    let zw = m * d;
    let rw = marks * m;

    x1.par_chunks_mut((steps + 1) * n)
        .enumerate()
        .try_for_each(|(p, xrow)| -> Result<()> {
            let mut buf = ArgsBuf::new(&dims, marks);
            xrow[..n].fill(0.0);
            for i in 0..steps {
                buf.load(traj, control, p, i);
                let yb = (p * (steps + 1) + i) * m;
                let zb = (p * steps + i) * zw;
                let rb = (p * steps + i) * rw;
                let (head, tail) = xrow.split_at_mut((i + 1) * n);
                let xi = XiSlices {
                    x1: &head[i * n..(i + 1) * n],
                    y1: &y_arr[yb..yb + m],
                    z1: &z_arr[zb..zb + zw],
                    r1: &r_arr[rb..rb + rw],
                    theta: direction.process.at(p, i),
                };
                let args = buf.args();
                let db1 = apply_linearization(spec, CoeffId::Drift, &args, &xi);
                let dg1 = apply_linearization(spec, CoeffId::Diffusion, &args, &xi);
                let db = batch.db(p, i);
                for a in 0..n {
                    let mut next = xi.x1[a] + db1[a] * dt;
                    for c in 0..d {
                        next += dg1[a * d + c] * db[c];
                    }
                    tail[a] = next;
                }
                for j in 0..marks {
                    let ds1 = apply_linearization(spec, CoeffId::Jump(j), &args, &xi);
                    let comp = batch.compensated(p, i, j);
                    for a in 0..n {
                        tail[a] += ds1[a] * comp;
                    }
                }
                if tail[..n].iter().any(|w| !w.is_finite()) {
                    return Err(Error::NonFiniteState { path: p, step: i + 1 });
                }
            }
            Ok(())
        })
}

/// Backward projection sweep of (y1, z1, r1) with x1 frozen at the current
/// march.
fn backward_variation(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    traj: &Trajectory,
    control: &ControlProcess,
    direction: &DirectionProcess,
    ops: &[CondExpOp],
    x1: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let marks = spec.marks.len();
    let paths = traj.paths;
    let steps = traj.grid.steps;
    let dt = traj.grid.dt();
    let zw = m * d;
    let rw = marks * m;

    let mut y_new = vec![0.0; paths * (steps + 1) * m];
    let mut z_new = vec![0.0; paths * steps * zw];
    let mut r_new = vec![0.0; paths * steps * rw];

    y_new.par_chunks_mut((steps + 1) * m).enumerate().for_each(|(p, yrow)| {
        let xb = (p * (steps + 1) + steps) * n;
        let value = terminal_variation(spec, traj.x(p, steps), &x1[xb..xb + n]);
        yrow[steps * m..(steps + 1) * m].copy_from_slice(value.as_slice());
    });

    let mut targets_y = vec![0.0; paths * m];
    let mut targets_z = vec![0.0; paths * zw];
    let mut targets_r = vec![0.0; paths * rw];
    let mut y_step = vec![0.0; paths * m];

    for i in (0..steps).rev() {
        let op = &ops[i];
        for p in 0..paths {
            let base = (p * (steps + 1) + i + 1) * m;
            targets_y[p * m..(p + 1) * m].copy_from_slice(&y_new[base..base + m]);
        }
        let (y_prior, _) = op.apply(&targets_y, m);

        for p in 0..paths {
            let db = batch.db(p, i);
            for a in 0..m {
                let dev = targets_y[p * m + a] - y_prior[p * m + a];
                for c in 0..d {
                    targets_z[p * zw + a * d + c] = dev * db[c] / dt;
                }
                for j in 0..marks {
                    let weight = spec.marks.weights[j] * dt;
                    targets_r[p * rw + j * m + a] = dev * batch.compensated(p, i, j) / weight;
                }
            }
        }
        let (z_fit, _) = op.apply(&targets_z, zw);
        let (r_fit, _) = op.apply(&targets_r, rw);

        y_step
            .par_chunks_mut(m)
            .enumerate()
            .try_for_each(|(p, out)| -> Result<()> {
                let mut buf = ArgsBuf::new(&dims, marks);
                buf.load(traj, control, p, i);
                let xb = (p * (steps + 1) + i) * n;
                let xi = XiSlices {
                    x1: &x1[xb..xb + n],
                    y1: &y_prior[p * m..(p + 1) * m],
                    z1: &z_fit[p * zw..(p + 1) * zw],
                    r1: &r_fit[p * rw..(p + 1) * rw],
                    theta: direction.process.at(p, i),
                };
                let df = apply_linearization(spec, CoeffId::Driver, &buf.args(), &xi);
                for a in 0..m {
                    out[a] = y_prior[p * m + a] + dt * df[a];
                    if !out[a].is_finite() {
                        return Err(Error::NonFiniteState { path: p, step: i });
                    }
                }
                Ok(())
            })?;

        for p in 0..paths {
            let base = (p * (steps + 1) + i) * m;
            y_new[base..base + m].copy_from_slice(&y_step[p * m..(p + 1) * m]);
            let zb = (p * steps + i) * zw;
            z_new[zb..zb + zw].copy_from_slice(&z_fit[p * zw..(p + 1) * zw]);
            let rb = (p * steps + i) * rw;
            r_new[rb..rb + rw].copy_from_slice(&r_fit[p * rw..(p + 1) * rw]);
        }
    }
    Ok((y_new, z_new, r_new))
}
