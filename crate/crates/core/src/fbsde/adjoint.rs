//! The adjoint system attached to a solved trajectory and control.
//!
//! The multiplier k rides the backward equation and runs forward from
//! k(0) = -grad h(y_0):
//!
//! ```text
//! dk = -grad_y H dt - grad_z H dB - sum_j grad_r H(e_j) (dN_j - pi_j dt)
//! ```
//!
//! The multipliers (p, q, beta) ride the forward equation and run backward
//! from p(T) = grad phi(x_T):
//!
//! ```text
//! dp = -grad_x H dt + q dB + sum_j beta_j (dN_j - pi_j dt)
//! ```
//!
//! discretized exactly like the state solve: q and beta are extracted from
//! centered martingale increments of p, and the drift uses the fitted prior.
//! All Hamiltonian gradients are evaluated along the frozen state
//! trajectory, so the coupling between k and (p, q, beta) is resolved by
//! damped Picard sweeps on the per-path multiplier values themselves.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::{grad_hamiltonian, Multipliers};
use crate::model::{Dimensions, ProblemSpec, VarId};
use crate::scenario::{ScenarioBatch, TimeGrid};

use super::control::ControlProcess;
use super::regression::{CondExpOp, FeatureMap};
use super::{picard_residual, ArgsBuf, SolverParams, Trajectory};

/// Solved adjoint system, path-major like [`Trajectory`]: k is
/// P x (N+1) x m, p is P x (N+1) x n, q is P x N x (n d) row-major and
/// beta is P x N x (marks n) mark-major.
#[derive(Clone, PartialEq)]
pub struct AdjointTrajectory {
    pub dims: Dimensions,
    pub marks: usize,
    pub grid: TimeGrid,
    pub paths: usize,
    pub k: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub beta: Vec<f64>,
    /// k(0), deterministic: minus the initial-cost gradient at y_0.
    pub k0: DVector<f64>,
    pub residuals: Vec<f64>,
}

impl AdjointTrajectory {
    #[inline]
    pub fn k(&self, path: usize, step: usize) -> &[f64] {
        let m = self.dims.m;
        let base = (path * (self.grid.steps + 1) + step) * m;
        &self.k[base..base + m]
    }

    #[inline]
    pub fn p(&self, path: usize, step: usize) -> &[f64] {
        let n = self.dims.n;
        let base = (path * (self.grid.steps + 1) + step) * n;
        &self.p[base..base + n]
    }

    /// Row-major n x d block, step < N.
    #[inline]
    pub fn q(&self, path: usize, step: usize) -> &[f64] {
        let w = self.dims.n * self.dims.d;
        let base = (path * self.grid.steps + step) * w;
        &self.q[base..base + w]
    }

    /// Mark-major (marks x n) block, step < N.
    #[inline]
    pub fn beta(&self, path: usize, step: usize) -> &[f64] {
        let w = self.marks * self.dims.n;
        let base = (path * self.grid.steps + step) * w;
        &self.beta[base..base + w]
    }

    /// Multiplier bundle at (path, step), step < N.
    pub fn multipliers(&self, path: usize, step: usize) -> Multipliers {
        let (n, d) = (self.dims.n, self.dims.d);
        let qrow = self.q(path, step);
        let brow = self.beta(path, step);
        Multipliers {
            k: DVector::from_column_slice(self.k(path, step)),
            p: DVector::from_column_slice(self.p(path, step)),
            q: DMatrix::from_row_slice(n, d, qrow),
            beta: (0..self.marks)
                .map(|j| DVector::from_column_slice(&brow[j * n..(j + 1) * n]))
                .collect(),
        }
    }
}

impl std::fmt::Debug for AdjointTrajectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdjointTrajectory")
            .field("paths", &self.paths)
            .field("steps", &self.grid.steps)
            .field("dims", &self.dims)
            .field("marks", &self.marks)
            .field("residuals", &self.residuals)
            .finish_non_exhaustive()
    }
}

pub fn solve_adjoint(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    traj: &Trajectory,
    control: &ControlProcess,
    params: &SolverParams,
) -> Result<AdjointTrajectory> {
    params.validate()?;
    if traj.paths != batch.paths || traj.grid != batch.grid {
        return Err(Error::Shape("trajectory and scenario batch disagree".into()));
    }
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let marks = spec.marks.len();
    let paths = traj.paths;
    let steps = traj.grid.steps;
    let qw = n * d;
    let bw = marks * n;

    // k(0) is deterministic: y_0 is the cross-path regression value.
    let y0 = DVector::from_column_slice(&traj.y0());
    let k0 = -spec.coefficients.initial_cost_grad(&y0);

    // The state paths are frozen, so the regression operators can be
    // prepared once and shared by every sweep.
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

    let mut p_cur = vec![0.0; paths * (steps + 1) * n];
    let mut q_cur = vec![0.0; paths * steps * qw];
    let mut b_cur = vec![0.0; paths * steps * bw];
    let mut k_arr = vec![0.0; paths * (steps + 1) * m];
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut residuals: Vec<f64> = Vec::new();

    for sweep in 0..params.picard.max_sweeps {
        let run = (|| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            k_march(
                spec, batch, traj, control, &p_cur, &q_cur, &b_cur, &k0, &mut k_arr,
            )?;
            p_sweep(spec, batch, traj, control, &ops, &k_arr)
        })();
        let (p_new, q_new, b_new) = match run {
            Ok(out) => out,
            Err(Error::NonFiniteState { .. } | Error::SingularRegression { .. }) if sweep > 0 => {
                residuals.push(f64::INFINITY);
                return Err(Error::PicardDiverged { residuals });
            }
            Err(e) => return Err(e),
        };
        if let Some((k_old, p_old)) = &prev {
            let res =
                picard_residual(&k_arr, k_old, &p_new, p_old, paths, steps, m, n);
            residuals.push(res);
            if res <= params.picard.tol {
                return Ok(AdjointTrajectory {
                    dims,
                    marks,
                    grid: traj.grid,
                    paths,
                    k: k_arr,
                    p: p_new,
                    q: q_new,
                    beta: b_new,
                    k0,
                    residuals,
                });
            }
            if !res.is_finite() {
                return Err(Error::PicardDiverged { residuals });
            }
        }
        prev = Some((k_arr.clone(), p_new.clone()));
        let damping = params.picard.damping;
        for (slot, fresh) in p_cur.iter_mut().zip(&p_new) {
            *slot = damping * fresh + (1.0 - damping) * *slot;
        }
        for (slot, fresh) in q_cur.iter_mut().zip(&q_new) {
            *slot = damping * fresh + (1.0 - damping) * *slot;
        }
        for (slot, fresh) in b_cur.iter_mut().zip(&b_new) {
            *slot = damping * fresh + (1.0 - damping) * *slot;
        }
    }
    Err(Error::PicardDiverged { residuals })
}

/// Forward Euler march of k along each path, reading (p, q, beta) from the
/// previous sweep and the current k value; the jump integrand is the
/// pairing kernel, point-evaluated per mark against the compensated counts.
#[allow(clippy::too_many_arguments)]
fn k_march(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    traj: &Trajectory,
    control: &ControlProcess,
    p_arr: &[f64],
    q_arr: &[f64],
    b_arr: &[f64],
    k0: &DVector<f64>,
    k_arr: &mut [f64],
) -> Result<()> {
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let marks = spec.marks.len();
    let steps = traj.grid.steps;
    let dt = traj.grid.dt();
    let qw = n * d;
    let bw = marks * n;

    k_arr
        .par_chunks_mut((steps + 1) * m)
        .enumerate()
        .try_for_each(|(p, krow)| -> Result<()> {
            let mut buf = ArgsBuf::new(&dims, marks);
            let mut mult = Multipliers {
                k: DVector::from_column_slice(k0.as_slice()),
                p: DVector::zeros(n),
                q: DMatrix::zeros(n, d),
                beta: (0..marks).map(|_| DVector::zeros(n)).collect(),
            };
            krow[..m].copy_from_slice(k0.as_slice());
            for i in 0..steps {
                buf.load(traj, control, p, i);
                mult.k.as_mut_slice().copy_from_slice(&krow[i * m..(i + 1) * m]);
                let pb = (p * (steps + 1) + i) * n;
                mult.p.as_mut_slice().copy_from_slice(&p_arr[pb..pb + n]);
                let qb = (p * steps + i) * qw;
                for a in 0..n {
                    for c in 0..d {
                        mult.q[(a, c)] = q_arr[qb + a * d + c];
                    }
                }
                let bb = (p * steps + i) * bw;
                for (j, beta) in mult.beta.iter_mut().enumerate() {
                    beta.as_mut_slice().copy_from_slice(&b_arr[bb + j * n..bb + (j + 1) * n]);
                }

                let args = buf.args();
                let gy = grad_hamiltonian(spec, VarId::Y, &args, &mult);
                let gz = grad_hamiltonian(spec, VarId::Z, &args, &mult);
                let db = batch.db(p, i);
                for a in 0..m {
                    let mut next = krow[i * m + a] - gy[a] * dt;
                    for c in 0..d {
                        next -= gz[a * d + c] * db[c];
                    }
                    krow[(i + 1) * m + a] = next;
                }
                for j in 0..marks {
                    let gr = grad_hamiltonian(spec, VarId::R(j), &args, &mult);
                    let comp = batch.compensated(p, i, j);
                    for a in 0..m {
                        krow[(i + 1) * m + a] -= gr[a] * comp;
                    }
                }
                if krow[(i + 1) * m..(i + 2) * m].iter().any(|w| !w.is_finite()) {
                    return Err(Error::NonFiniteState { path: p, step: i + 1 });
                }
            }
            Ok(())
        })
}

/// Backward regression sweep of (p, q, beta) with k frozen at the current
/// march.
fn p_sweep(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    traj: &Trajectory,
    control: &ControlProcess,
    ops: &[CondExpOp],
    k_arr: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let marks = spec.marks.len();
    let paths = traj.paths;
    let steps = traj.grid.steps;
    let dt = traj.grid.dt();
    let qw = n * d;
    let bw = marks * n;

    let mut p_new = vec![0.0; paths * (steps + 1) * n];
    let mut q_new = vec![0.0; paths * steps * qw];
    let mut b_new = vec![0.0; paths * steps * bw];

    // Terminal condition p(T) = grad phi(x_T).
    p_new.par_chunks_mut((steps + 1) * n).enumerate().for_each(|(p, prow)| {
        let x_terminal = DVector::from_column_slice(traj.x(p, steps));
        let grad = spec.coefficients.terminal_cost_grad(&x_terminal);
        prow[steps * n..(steps + 1) * n].copy_from_slice(grad.as_slice());
    });

    let mut targets_p = vec![0.0; paths * n];
    let mut targets_q = vec![0.0; paths * qw];
    let mut targets_b = vec![0.0; paths * bw];
    let mut p_step = vec![0.0; paths * n];

    for i in (0..steps).rev() {
        let op = &ops[i];
        for p in 0..paths {
            let base = (p * (steps + 1) + i + 1) * n;
            targets_p[p * n..(p + 1) * n].copy_from_slice(&p_new[base..base + n]);
        }
        let (p_prior, _) = op.apply(&targets_p, n);

        for p in 0..paths {
            let db = batch.db(p, i);
            for a in 0..n {
                let dev = targets_p[p * n + a] - p_prior[p * n + a];
                for c in 0..d {
                    targets_q[p * qw + a * d + c] = dev * db[c] / dt;
                }
                for j in 0..marks {
                    let weight = spec.marks.weights[j] * dt;
                    targets_b[p * bw + j * n + a] = dev * batch.compensated(p, i, j) / weight;
                }
            }
        }
        let (q_fit, _) = op.apply(&targets_q, qw);
        let (b_fit, _) = op.apply(&targets_b, bw);

        p_step
            .par_chunks_mut(n)
            .enumerate()
            .try_for_each(|(p, out)| -> Result<()> {
                let mut buf = ArgsBuf::new(&dims, marks);
                buf.load(traj, control, p, i);
                let kb = (p * (steps + 1) + i) * m;
                let mult = Multipliers {
                    k: DVector::from_column_slice(&k_arr[kb..kb + m]),
                    p: DVector::from_column_slice(&p_prior[p * n..(p + 1) * n]),
                    q: DMatrix::from_row_slice(n, d, &q_fit[p * qw..(p + 1) * qw]),
                    beta: (0..marks)
                        .map(|j| {
                            DVector::from_column_slice(
                                &b_fit[p * bw + j * n..p * bw + (j + 1) * n],
                            )
                        })
                        .collect(),
                };
                let gx = grad_hamiltonian(spec, VarId::X, &buf.args(), &mult);
                for a in 0..n {
                    out[a] = p_prior[p * n + a] + dt * gx[a];
                    if !out[a].is_finite() {
                        return Err(Error::NonFiniteState { path: p, step: i });
                    }
                }
                Ok(())
            })?;

        for p in 0..paths {
            let base = (p * (steps + 1) + i) * n;
            p_new[base..base + n].copy_from_slice(&p_step[p * n..(p + 1) * n]);
            let qb = (p * steps + i) * qw;
            q_new[qb..qb + qw].copy_from_slice(&q_fit[p * qw..(p + 1) * qw]);
            let bb = (p * steps + i) * bw;
            b_new[bb..bb + bw].copy_from_slice(&b_fit[p * bw..(p + 1) * bw]);
        }
    }
    Ok((p_new, q_new, b_new))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::state::solve_fbsde;
    use crate::fbsde::SolverParams;
    use crate::model::{
        AffineModel, ControlSet, Dimensions, FiltrationSpec, MarkSpace, TerminalSpec,
    };
    use crate::scenario::RngSpec;
    use std::sync::Arc;

    fn build(model: AffineModel, horizon: f64, initial: f64) -> ProblemSpec {
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

    fn dims1() -> Dimensions {
        Dimensions { n: 1, m: 1, d: 1, k: 1 }
    }

    #[test]
    fn deterministic_costate_integrates_backward_exactly() {
        // Static state (b = 0, no noise): p_i = q_phi a + qx a (T - t_i)
        // exactly under the left-endpoint scheme, and k stays at zero.
        let mut model = AffineModel::zeros(dims1(), MarkSpace::none());
        model.cost.qx[0] = 1.0;
        model.cost.q_phi[0] = 3.0;
        let spec = build(model, 1.0, 2.0);
        let grid = crate::scenario::TimeGrid::new(1.0, 16).unwrap();
        let batch = ScenarioBatch::generate(grid, 16, 1, &[], RngSpec { seed: 4 }).unwrap();
        let control = ControlProcess::constant(&[0.0], 16);
        let params = SolverParams::default();
        let traj = solve_fbsde(&spec, &batch, &control, &params).unwrap();
        let adj = solve_adjoint(&spec, &batch, &traj, &control, &params).unwrap();
        for p in 0..batch.paths {
            for i in 0..=16 {
                let want = 3.0 * 2.0 + 1.0 * 2.0 * (1.0 - grid.t(i));
                assert!(
                    (adj.p(p, i)[0] - want).abs() < 1e-10,
                    "p({p},{i}) = {} want {want}",
                    adj.p(p, i)[0]
                );
                assert!(adj.k(p, i)[0].abs() < 1e-12);
            }
            for i in 0..16 {
                assert!(adj.q(p, i)[0].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn k_march_accumulates_the_y_cost_gradient() {
        // Driver constant c makes y deterministic: y_i = c (T - t_i). With
        // l = qy y^2 / 2 and h = p_h y0, k must follow the discrete sum
        // k_i = -p_h - qy dt sum_{s<i} y_s, exactly.
        let mut model = AffineModel::zeros(dims1(), MarkSpace::none());
        model.driver.constant[0] = 0.7;
        model.cost.qy[0] = 1.4;
        model.cost.p_h[0] = 0.3;
        let spec = build(model, 1.0, 1.0);
        let grid = crate::scenario::TimeGrid::new(1.0, 16).unwrap();
        let batch = ScenarioBatch::generate(grid, 16, 1, &[], RngSpec { seed: 5 }).unwrap();
        let control = ControlProcess::constant(&[0.0], 16);
        let params = SolverParams::default();
        let traj = solve_fbsde(&spec, &batch, &control, &params).unwrap();
        let adj = solve_adjoint(&spec, &batch, &traj, &control, &params).unwrap();
        assert!((adj.k0[0] + 0.3).abs() < 1e-12);
        let dt = grid.dt();
        for i in 0..=16 {
            let mut want = -0.3;
            for s in 0..i {
                let ys = 0.7 * (1.0 - grid.t(s));
                want -= 1.4 * ys * dt;
            }
            assert!(
                (adj.k(3, i)[0] - want).abs() < 1e-9,
                "k at {i}: {} want {want}",
                adj.k(3, i)[0]
            );
        }
    }

    #[test]
    fn q_and_beta_recover_terminal_gradient_loadings() {
        // Additive noise, quadratic phi: p_{i+1} - E_i p_{i+1} =
        // q_phi (s dB + sigma dN~) at the last step, so q ~ q_phi s and
        // beta ~ q_phi sigma up to Monte Carlo noise.
        let marks = MarkSpace::new(vec![1.0], vec![1.0]).unwrap();
        let mut model = AffineModel::zeros(dims1(), marks);
        model.diffusion.constant[0] = 0.6;
        model.jump.constant[0] = 0.25;
        model.cost.q_phi[0] = 2.0;
        let spec = build(model, 1.0, 0.5);
        let steps = 16;
        let paths = 8192;
        let grid = crate::scenario::TimeGrid::new(1.0, steps).unwrap();
        let batch =
            ScenarioBatch::generate(grid, paths, 1, &[1.0], RngSpec { seed: 6 }).unwrap();
        let control = ControlProcess::constant(&[0.0], steps);
        let params = SolverParams::default();
        let traj = solve_fbsde(&spec, &batch, &control, &params).unwrap();
        let adj = solve_adjoint(&spec, &batch, &traj, &control, &params).unwrap();

        let i = steps - 1;
        let mean_q: f64 = (0..paths).map(|p| adj.q(p, i)[0]).sum::<f64>() / paths as f64;
        let mean_b: f64 = (0..paths).map(|p| adj.beta(p, i)[0]).sum::<f64>() / paths as f64;
        let want_q = 2.0 * 0.6;
        let want_b = 2.0 * 0.25;
        assert!((mean_q - want_q).abs() < 0.08 * want_q, "q {mean_q} want {want_q}");
        assert!((mean_b - want_b).abs() < 0.20 * want_b, "beta {mean_b} want {want_b}");
    }

    #[test]
    fn coupled_multipliers_converge_and_report_residuals() {
        // Mild two-way coupling through the driver and drift exercises the
        // damped iteration; the residual history must be recorded and end
        // below tolerance.
        let marks = MarkSpace::new(vec![0.5], vec![1.0]).unwrap();
        let mut model = AffineModel::zeros(dims1(), marks);
        model.drift.x_mat[(0, 0)] = -0.3;
        model.drift.y_mat[(0, 0)] = 0.2;
        model.drift.v_mat[(0, 0)] = 1.0;
        model.diffusion.constant[0] = 0.4;
        model.diffusion.x_mat[(0, 0)] = 0.1;
        model.jump.constant[0] = 0.3;
        model.driver.x_mat[(0, 0)] = 0.25;
        model.driver.y_mat[(0, 0)] = -0.2;
        model.driver.z_mat[(0, 0)] = 0.1;
        model.cost.qx[0] = 1.0;
        model.cost.qy[0] = 0.5;
        model.cost.qv[0] = 1.0;
        model.cost.q_phi[0] = 1.0;
        model.cost.q_h[0] = 0.4;
        model.nonlin_scale = 0.3;
        let spec = build(model, 1.0, 1.0);
        let grid = crate::scenario::TimeGrid::new(1.0, 12).unwrap();
        let batch =
            ScenarioBatch::generate(grid, 512, 1, &[1.0], RngSpec { seed: 7 }).unwrap();
        let control = ControlProcess::constant(&[0.1], 12);
        let params = SolverParams::default();
        let traj = solve_fbsde(&spec, &batch, &control, &params).unwrap();
        let adj = solve_adjoint(&spec, &batch, &traj, &control, &params).unwrap();
        assert!(!adj.residuals.is_empty());
        assert!(*adj.residuals.last().unwrap() <= params.picard.tol);
        // k(0) = -grad h(y0) on every path.
        let y0 = DVector::from_column_slice(&traj.y0());
        let want = -spec.coefficients.initial_cost_grad(&y0)[0];
        for p in 0..batch.paths {
            assert_eq!(adj.k(p, 0)[0], want);
        }
        let mult = adj.multipliers(0, 3);
        assert_eq!(mult.beta.len(), 1);
        assert_eq!(mult.q.shape(), (1, 1));
    }
}
