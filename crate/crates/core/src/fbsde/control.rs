//! Control and perturbation-direction processes on the time grid.
//!
//! A control assigns a value in R^k to every (path, step). Under the
//! trivial sigma-field the control cannot depend on the path, so a shared
//! per-step table is the natural storage; the general case stores one value
//! per path and step. Perturbation directions reuse the same storage and
//! add admissibility helpers: the largest radius rho such that u + s*theta
//! stays inside the control set for all |s| <= rho.

use crate::error::{Error, Result};
use crate::model::ControlSet;
use crate::rng::stream;
use crate::scenario::TimeGrid;

/// Piecewise-constant process on the grid steps 0..N-1 with values in R^k.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlProcess {
    /// One value per step, shared by all paths.
    Shared { steps: usize, dim: usize, values: Vec<f64> },
    /// One value per path and step, path-major.
    PerPath { paths: usize, steps: usize, dim: usize, values: Vec<f64> },
}

impl ControlProcess {
    pub fn constant(value: &[f64], steps: usize) -> Self {
        let dim = value.len();
        let mut values = Vec::with_capacity(steps * dim);
        for _ in 0..steps {
            values.extend_from_slice(value);
        }
        ControlProcess::Shared { steps, dim, values }
    }

    pub fn shared_zero(dim: usize, steps: usize) -> Self {
        ControlProcess::Shared { steps, dim, values: vec![0.0; steps * dim] }
    }

    pub fn per_path_zero(dim: usize, paths: usize, steps: usize) -> Self {
        ControlProcess::PerPath { paths, steps, dim, values: vec![0.0; paths * steps * dim] }
    }

    /// Builds a shared table from a per-step function.
    pub fn shared_from_fn(dim: usize, steps: usize, mut f: impl FnMut(usize, &mut [f64])) -> Self {
        let mut values = vec![0.0; steps * dim];
        for i in 0..steps {
            f(i, &mut values[i * dim..(i + 1) * dim]);
        }
        ControlProcess::Shared { steps, dim, values }
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlProcess::Shared { dim, .. } | ControlProcess::PerPath { dim, .. } => *dim,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            ControlProcess::Shared { steps, .. } | ControlProcess::PerPath { steps, .. } => *steps,
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, ControlProcess::Shared { .. })
    }

    /// Value at (path, step). Shared storage ignores the path.
    #[inline]
    pub fn at(&self, path: usize, step: usize) -> &[f64] {
        match self {
            ControlProcess::Shared { dim, values, .. } => {
                &values[step * dim..(step + 1) * dim]
            }
            ControlProcess::PerPath { steps, dim, values, .. } => {
                let base = (path * steps + step) * dim;
                &values[base..base + dim]
            }
        }
    }

    #[inline]
    pub fn at_mut(&mut self, path: usize, step: usize) -> &mut [f64] {
        match self {
            ControlProcess::Shared { dim, values, .. } => {
                &mut values[step * *dim..(step + 1) * *dim]
            }
            ControlProcess::PerPath { steps, dim, values, .. } => {
                let base = (path * *steps + step) * *dim;
                &mut values[base..base + *dim]
            }
        }
    }

    /// Expands shared storage to an explicit per-path table.
    pub fn to_per_path(&self, paths: usize) -> ControlProcess {
        match self {
            ControlProcess::PerPath { .. } => self.clone(),
            ControlProcess::Shared { steps, dim, values } => {
                let mut out = vec![0.0; paths * steps * dim];
                for p in 0..paths {
                    out[p * steps * dim..(p + 1) * steps * dim].copy_from_slice(values);
                }
                ControlProcess::PerPath { paths, steps: *steps, dim: *dim, values: out }
            }
        }
    }

    /// `self + scale * direction`, promoting storage as needed.
    pub fn axpy(&self, scale: f64, direction: &ControlProcess, paths: usize) -> Result<ControlProcess> {
        if self.dim() != direction.dim() || self.steps() != direction.steps() {
            return Err(Error::Shape(format!(
                "control ({}x{}) and direction ({}x{}) grids disagree",
                self.steps(),
                self.dim(),
                direction.steps(),
                direction.dim()
            )));
        }
        match (self, direction) {
            (
                ControlProcess::Shared { steps, dim, values },
                ControlProcess::Shared { values: dv, .. },
            ) => {
                let out = values.iter().zip(dv).map(|(u, t)| u + scale * t).collect();
                Ok(ControlProcess::Shared { steps: *steps, dim: *dim, values: out })
            }
            _ => {
                let mut out = self.to_per_path(paths);
                let steps = out.steps();
                for p in 0..paths {
                    for i in 0..steps {
                        let theta: Vec<f64> = direction.at(p, i).to_vec();
                        for (slot, t) in out.at_mut(p, i).iter_mut().zip(theta) {
                            *slot += scale * t;
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Projects every value onto the control set, in place.
    pub fn project_into(&mut self, set: &ControlSet) {
        let values = match self {
            ControlProcess::Shared { values, .. } | ControlProcess::PerPath { values, .. } => values,
        };
        let dim = set.dim();
        for chunk in values.chunks_mut(dim) {
            let projected = set.project(&nalgebra::DVector::from_column_slice(chunk));
            chunk.copy_from_slice(projected.as_slice());
        }
    }

    /// True when every value lies in the set up to `tol`.
    pub fn admissible(&self, set: &ControlSet, tol: f64) -> bool {
        let values = match self {
            ControlProcess::Shared { values, .. } | ControlProcess::PerPath { values, .. } => values,
        };
        values
            .chunks(set.dim())
            .all(|chunk| set.contains(&nalgebra::DVector::from_column_slice(chunk), tol))
    }

    pub fn sup_norm(&self) -> f64 {
        let values = match self {
            ControlProcess::Shared { values, .. } | ControlProcess::PerPath { values, .. } => values,
        };
        values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Perturbation direction theta; same storage as a control.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionProcess {
    pub process: ControlProcess,
}

impl DirectionProcess {
    /// Constant direction theta(t) = value.
    pub fn constant(value: &[f64], steps: usize) -> Self {
        DirectionProcess { process: ControlProcess::constant(value, steps) }
    }

    /// Needle direction: `amplitude` on coordinate `axis` for grid times in
    /// [t0, t1), zero elsewhere. Path-independent, hence adapted to every
    /// information structure.
    pub fn indicator(grid: &TimeGrid, dim: usize, axis: usize, t0: f64, t1: f64, amplitude: f64) -> Self {
        let process = ControlProcess::shared_from_fn(dim, grid.steps, |i, slot| {
            let t = grid.t(i);
            if t >= t0 && t < t1 {
                slot[axis] = amplitude;
            }
        });
        DirectionProcess { process }
    }

    /// Deterministic bounded direction with per-step pseudorandom values in
    /// [-bound, bound]. Path-independent.
    pub fn bounded_random(seed: u64, dim: usize, steps: usize, bound: f64) -> Self {
        let process = ControlProcess::shared_from_fn(dim, steps, |i, slot| {
            for (axis, value) in slot.iter_mut().enumerate() {
                *value = stream(seed, 0, i as u64, axis as u64).uniform_in(-bound, bound);
            }
        });
        DirectionProcess { process }
    }

    pub fn sup_norm(&self) -> f64 {
        self.process.sup_norm()
    }

    /// Largest rho >= 0 such that u + s*theta remains in the set for all
    /// |s| <= rho, uniformly over paths and steps. Returns 0 when some u
    /// sits on the boundary against theta.
    pub fn admissible_radius(&self, u: &ControlProcess, set: &ControlSet, paths: usize) -> f64 {
        let steps = u.steps();
        let probe_paths = if u.is_shared() && self.process.is_shared() { 1 } else { paths };
        let mut rho = f64::INFINITY;
        for p in 0..probe_paths {
            for i in 0..steps {
                let uu = u.at(p, i);
                let th = self.process.at(p, i);
                rho = rho.min(point_radius(uu, th, set));
                if rho == 0.0 {
                    return 0.0;
                }
            }
        }
        if rho.is_infinite() {
            // Direction vanishes everywhere; any radius is admissible, but a
            // finite, meaningful default keeps downstream arithmetic sane.
            1.0
        } else {
            rho
        }
    }
}

/// Radius of the symmetric feasible interval for one point and direction.
fn point_radius(u: &[f64], theta: &[f64], set: &ControlSet) -> f64 {
    let active = theta.iter().any(|t| t.abs() > 0.0);
    if !active {
        return f64::INFINITY;
    }
    match set {
        ControlSet::Box { lower, upper } => {
            let mut rho = f64::INFINITY;
            for a in 0..u.len() {
                let t = theta[a];
                if t.abs() == 0.0 {
                    continue;
                }
                // Both signs of s must stay inside, so take the tighter wall.
                let up = (upper[a] - u[a]).max(0.0);
                let down = (u[a] - lower[a]).max(0.0);
                rho = rho.min(up.min(down) / t.abs());
            }
            rho
        }
        ControlSet::Ball { center, radius } => {
            // |u - c + s*theta|^2 <= R^2 for |s| <= rho; worst sign makes the
            // cross term positive, so solve with |<u-c,theta>|.
            let mut w2 = 0.0;
            let mut cross = 0.0;
            let mut t2 = 0.0;
            for a in 0..u.len() {
                let w = u[a] - center[a];
                w2 += w * w;
                cross += w * theta[a];
                t2 += theta[a] * theta[a];
            }
            let slack = radius * radius - w2;
            if slack <= 0.0 {
                return 0.0;
            }
            let c = cross.abs();
            // Positive root of t2 s^2 + 2 c s - slack = 0.
            ((c * c + t2 * slack).sqrt() - c) / t2
        }
        ControlSet::Simplex { .. } => {
            // Staying on the simplex requires the direction to preserve the
            // coordinate sum; then each coordinate bound gives a wall.
            let sum: f64 = theta.iter().sum();
            if sum.abs() > 1e-12 {
                return 0.0;
            }
            let mut rho = f64::INFINITY;
            for a in 0..u.len() {
                let t = theta[a];
                if t.abs() == 0.0 {
                    continue;
                }
                rho = rho.min(u[a].max(0.0) / t.abs());
            }
            rho
        }
    }
}
