//! Discretized forward-backward systems with jumps.
//!
//! The continuous system on [0, T] is
//!
//! ```text
//! dx =  b(t,x,y,z,r,v) dt + g(t,x,y,z,r,v) dB + sum_j sigma(t,x,y,z,r,v,e_j) dN~_j
//! dy = -f(t,x,y,z,r,v) dt + z dB            + sum_j r(e_j) dN~_j
//! x(0) = a,  y(T) = xi,
//! ```
//!
//! with `dN~_j` the compensated jump increments of a finite mark space.
//! Time is discretized on a uniform grid with explicit Euler forward steps.
//! The backward unknowns (y, z, r) are recovered by one-step regression:
//! with `E_i` the least-squares projection onto polynomials of the state at
//! step i,
//!
//! ```text
//! yhat_i = E_i[y_{i+1}]
//! z_i    = E_i[(y_{i+1} - yhat_i) dB_i^T] / dt
//! r_ij   = E_i[(y_{i+1} - yhat_i)(dN_ij - pi_j dt)] / (pi_j dt)
//! y_i    = yhat_i + dt f(t_i, x_i, yhat_i, z_i, r_i, v_i)
//! ```
//!
//! Centering on the martingale increment `y_{i+1} - yhat_i` makes the z and
//! r extractions vanish identically whenever y is deterministic given step-i
//! information. The forward-backward coupling is resolved by damped Picard
//! sweeps over the regression coefficient tables.

pub mod adjoint;
pub mod control;
pub mod cost;
pub mod regression;
pub mod state;
pub mod variational;

pub use adjoint::{solve_adjoint, AdjointTrajectory};
pub use control::{ControlProcess, DirectionProcess};
pub use cost::{estimate_cost, CostEstimate};
pub use regression::{CondExpOp, FeatureMap, RegressionBasis, SurrogateFn};
pub use state::{simulate_forward, solve_fbsde};
pub use variational::{solve_variational, VariationalTrajectory};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{Dimensions, FiltrationSpec, ProblemSpec};
use crate::scenario::{ScenarioBatch, TimeGrid};

/// Picard iteration controls for the coupled solves.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PicardParams {
    /// Sweep budget before the solve is declared divergent.
    pub max_sweeps: usize,
    /// Relative sup-over-grid L2 change below which the sweep has converged.
    pub tol: f64,
    /// Weight of the fresh iterate in the damped update, in (0, 1].
    pub damping: f64,
}

impl Default for PicardParams {
    fn default() -> Self {
        PicardParams { max_sweeps: 50, tol: 1e-6, damping: 0.5 }
    }
}

/// Everything the numerical solvers need besides the problem and scenario.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SolverParams {
    pub basis: RegressionBasis,
    pub picard: PicardParams,
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if self.basis.ridge < 0.0 || !self.basis.ridge.is_finite() {
            return Err(Error::Invalid("regression ridge must be finite and >= 0".into()));
        }
        if self.picard.max_sweeps == 0 {
            return Err(Error::Invalid("picard sweep budget must be positive".into()));
        }
        if !(self.picard.tol > 0.0) {
            return Err(Error::Invalid("picard tolerance must be positive".into()));
        }
        if !(self.picard.damping > 0.0 && self.picard.damping <= 1.0) {
            return Err(Error::Invalid("picard damping must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Fitted conditional-expectation tables for one grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSurrogate {
    pub y: SurrogateFn,
    pub z: SurrogateFn,
    pub r: SurrogateFn,
}

impl StepSurrogate {
    pub fn zero(dims: &Dimensions, marks: usize) -> Self {
        StepSurrogate {
            y: SurrogateFn::zero(dims.m),
            z: SurrogateFn::zero(dims.m * dims.d),
            r: SurrogateFn::zero(marks * dims.m),
        }
    }

    pub fn blend(&self, fresh: &StepSurrogate, damping: f64) -> StepSurrogate {
        StepSurrogate {
            y: self.y.blend(&fresh.y, damping),
            z: self.z.blend(&fresh.z, damping),
            r: self.r.blend(&fresh.r, damping),
        }
    }
}

/// Solved state system: per-path arrays for x, y, z, r plus the fitted
/// per-step surrogate tables and the Picard residual history.
///
/// Layouts are path-major: x is P x (N+1) x n, y is P x (N+1) x m, z is
/// P x N x (m d) with z(p,i) row-major over (component, channel), and r is
/// P x N x (marks m) with r(p,i) mark-major.
#[derive(Clone, PartialEq)]
pub struct Trajectory {
    pub dims: Dimensions,
    pub marks: usize,
    pub grid: TimeGrid,
    pub paths: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub surrogates: Vec<StepSurrogate>,
    pub residuals: Vec<f64>,
}

impl Trajectory {
    pub fn zeros(dims: &Dimensions, marks: usize, grid: TimeGrid, paths: usize) -> Self {
        let n1 = grid.steps + 1;
        Trajectory {
            dims: *dims,
            marks,
            grid,
            paths,
            x: vec![0.0; paths * n1 * dims.n],
            y: vec![0.0; paths * n1 * dims.m],
            z: vec![0.0; paths * grid.steps * dims.m * dims.d],
            r: vec![0.0; paths * grid.steps * marks * dims.m],
            surrogates: (0..grid.steps).map(|_| StepSurrogate::zero(dims, marks)).collect(),
            residuals: Vec::new(),
        }
    }

    #[inline]
    pub fn x(&self, path: usize, step: usize) -> &[f64] {
        let n = self.dims.n;
        let base = (path * (self.grid.steps + 1) + step) * n;
        &self.x[base..base + n]
    }

    #[inline]
    pub fn y(&self, path: usize, step: usize) -> &[f64] {
        let m = self.dims.m;
        let base = (path * (self.grid.steps + 1) + step) * m;
        &self.y[base..base + m]
    }

    /// Row-major m x d block at (path, step), step < N.
    #[inline]
    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let w = self.dims.m * self.dims.d;
        let base = (path * self.grid.steps + step) * w;
        &self.z[base..base + w]
    }

    /// Mark-major (marks x m) block at (path, step), step < N.
    #[inline]
    pub fn r(&self, path: usize, step: usize) -> &[f64] {
        let w = self.marks * self.dims.m;
        let base = (path * self.grid.steps + step) * w;
        &self.r[base..base + w]
    }

    /// Cross-path regression value of y at step 0. The initial state is
    /// deterministic, so this is the conditional expectation there; it is
    /// the argument of the initial cost h.
    pub fn y0(&self) -> Vec<f64> {
        let m = self.dims.m;
        let mut out = vec![0.0; m];
        for p in 0..self.paths {
            for c in 0..m {
                out[c] += self.y(p, 0)[c];
            }
        }
        for v in &mut out {
            *v /= self.paths as f64;
        }
        out
    }

    /// Largest absolute value over the backward unknowns (y, z, r).
    pub fn backward_sup_norm(&self) -> f64 {
        let mut sup = 0.0f64;
        for v in self.y.iter().chain(&self.z).chain(&self.r) {
            sup = sup.max(v.abs());
        }
        sup
    }
}

impl std::fmt::Debug for Trajectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trajectory")
            .field("paths", &self.paths)
            .field("steps", &self.grid.steps)
            .field("dims", &self.dims)
            .field("marks", &self.marks)
            .field("residuals", &self.residuals)
            .finish_non_exhaustive()
    }
}

/// Builds the conditional-expectation operator for `step` under the given
/// information structure, regressing on the observed state at the lagged
/// index. Degenerates to the cross-path mean under trivial information and
/// whenever the lagged index is 0 (the initial state carries no randomness).
pub fn observation_op(
    traj: &Trajectory,
    filtration: &FiltrationSpec,
    basis: &RegressionBasis,
    map: &FeatureMap,
    step: usize,
) -> Result<CondExpOp> {
    match filtration.lag_index(&traj.grid, step) {
        None | Some(0) => Ok(CondExpOp::mean(traj.paths)),
        Some(lag) => {
            let n = traj.dims.n;
            let mut regressors = vec![0.0; traj.paths * n];
            for p in 0..traj.paths {
                regressors[p * n..(p + 1) * n].copy_from_slice(traj.x(p, lag));
            }
            CondExpOp::regress(&regressors, traj.paths, map, basis.ridge, step)
        }
    }
}

/// One-shot conditional expectation of per-path values (P x q row-major) at
/// `step` under the information structure. Returns the fitted values and the
/// coefficient table.
pub fn condexp(
    traj: &Trajectory,
    filtration: &FiltrationSpec,
    basis: &RegressionBasis,
    step: usize,
    values: &[f64],
    q: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let map = FeatureMap::new(traj.dims.n, basis.degree);
    let op = observation_op(traj, filtration, basis, &map, step)?;
    Ok(op.apply(values, q))
}

/// Reusable owned argument blocks for coefficient evaluation at one
/// (path, step) of a trajectory.
pub struct ArgsBuf {
    pub x: nalgebra::DVector<f64>,
    pub y: nalgebra::DVector<f64>,
    pub z: DMatrix<f64>,
    pub r: Vec<nalgebra::DVector<f64>>,
    pub v: nalgebra::DVector<f64>,
    t: f64,
}

impl ArgsBuf {
    pub fn new(dims: &Dimensions, marks: usize) -> Self {
        ArgsBuf {
            x: nalgebra::DVector::zeros(dims.n),
            y: nalgebra::DVector::zeros(dims.m),
            z: DMatrix::zeros(dims.m, dims.d),
            r: (0..marks).map(|_| nalgebra::DVector::zeros(dims.m)).collect(),
            v: nalgebra::DVector::zeros(dims.k),
            t: 0.0,
        }
    }

    /// Loads the state and control at (path, step), step < N.
    pub fn load(
        &mut self,
        traj: &Trajectory,
        control: &control::ControlProcess,
        path: usize,
        step: usize,
    ) {
        let (m, d) = (traj.dims.m, traj.dims.d);
        self.t = traj.grid.t(step);
        self.x.as_mut_slice().copy_from_slice(traj.x(path, step));
        self.y.as_mut_slice().copy_from_slice(traj.y(path, step));
        let zrow = traj.z(path, step);
        for a in 0..m {
            for c in 0..d {
                self.z[(a, c)] = zrow[a * d + c];
            }
        }
        let rrow = traj.r(path, step);
        for (j, rj) in self.r.iter_mut().enumerate() {
            rj.as_mut_slice().copy_from_slice(&rrow[j * m..(j + 1) * m]);
        }
        self.v.as_mut_slice().copy_from_slice(control.at(path, step));
    }

    pub fn args(&self) -> crate::model::CoeffArgs<'_> {
        crate::model::CoeffArgs {
            t: self.t,
            x: &self.x,
            y: &self.y,
            z: &self.z,
            r: &self.r,
            v: &self.v,
        }
    }
}

/// Checks the scenario batch against the problem shapes.
pub fn check_batch(spec: &ProblemSpec, batch: &ScenarioBatch) -> Result<()> {
    if batch.brownian_dim != spec.dims.d {
        return Err(Error::Shape(format!(
            "scenario has {} brownian channels, problem needs {}",
            batch.brownian_dim, spec.dims.d
        )));
    }
    if batch.mark_rates.len() != spec.marks.len() {
        return Err(Error::Shape(format!(
            "scenario has {} marks, problem needs {}",
            batch.mark_rates.len(),
            spec.marks.len()
        )));
    }
    for (j, (&br, &pr)) in batch.mark_rates.iter().zip(&spec.marks.weights).enumerate() {
        if (br - pr).abs() > 1e-12 * pr.abs().max(1.0) {
            return Err(Error::Shape(format!(
                "mark {} intensity {} disagrees with problem intensity {}",
                j, br, pr
            )));
        }
    }
    if (batch.grid.horizon - spec.horizon).abs() > 1e-12 * spec.horizon.max(1.0) {
        return Err(Error::Shape(format!(
            "scenario horizon {} disagrees with problem horizon {}",
            batch.grid.horizon, spec.horizon
        )));
    }
    Ok(())
}

/// Relative sup-over-grid L2 distance between two iterates of per-path
/// state pairs, the Picard residual.
pub(crate) fn picard_residual(
    new_x: &[f64],
    old_x: &[f64],
    new_y: &[f64],
    old_y: &[f64],
    paths: usize,
    steps: usize,
    n: usize,
    m: usize,
) -> f64 {
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..=steps {
        let mut diff = 0.0;
        let mut size = 0.0;
        for p in 0..paths {
            let bx = (p * (steps + 1) + i) * n;
            for c in 0..n {
                let d = new_x[bx + c] - old_x[bx + c];
                diff += d * d;
                size += new_x[bx + c] * new_x[bx + c];
            }
            let by = (p * (steps + 1) + i) * m;
            for c in 0..m {
                let d = new_y[by + c] - old_y[by + c];
                diff += d * d;
                size += new_y[by + c] * new_y[by + c];
            }
        }
        worst = worst.max((diff / paths as f64).sqrt());
        scale = scale.max((size / paths as f64).sqrt());
    }
    worst / (1.0 + scale)
}
