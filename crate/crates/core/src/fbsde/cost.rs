//! Expected cost of a control along a solved trajectory.
//!
//! J(v) = E[ int_0^T l(t, x, y, z, r, v) dt + phi(x_T) ] + h(y_0), with the
//! time integral taken by the left-endpoint rule on the grid and y_0 the
//! cross-path regression value at step 0. The h term is deterministic given
//! the solve, so the reported standard error covers only the sampled part.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CoeffArgs, CoeffId, ProblemSpec};

use super::control::ControlProcess;
use super::Trajectory;

/// Monte Carlo estimate of the cost functional.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    /// J = mean(per_path) + h_term.
    pub value: f64,
    /// Standard error of the sampled part, sd(per_path) / sqrt(P).
    pub se: f64,
    /// h(y_0), deterministic given the solve.
    pub h_term: f64,
    /// The y_0 argument of h.
    pub y0: Vec<f64>,
    /// Running plus terminal cost per path.
    pub per_path: Vec<f64>,
    /// E[ int |l| dt + |phi| ] + |h|: finite iff the cost is integrable at
    /// this control in the sampled sense.
    pub admissibility: f64,
}

pub fn estimate_cost(
    spec: &ProblemSpec,
    traj: &Trajectory,
    control: &ControlProcess,
) -> Result<CostEstimate> {
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let marks = traj.marks;
    let steps = traj.grid.steps;
    let dt = traj.grid.dt();
    let coeffs = spec.coefficients.as_ref();

    let rows: Vec<(f64, f64)> = (0..traj.paths)
        .into_par_iter()
        .map(|p| -> Result<(f64, f64)> {
            let mut running = 0.0;
            let mut absolute = 0.0;
            let mut x = DVector::zeros(n);
            let mut y = DVector::zeros(m);
            let mut z = DMatrix::zeros(m, d);
            let mut r: Vec<DVector<f64>> = (0..marks).map(|_| DVector::zeros(m)).collect();
            let mut v = DVector::zeros(dims.k);
            for i in 0..steps {
                x.as_mut_slice().copy_from_slice(traj.x(p, i));
                y.as_mut_slice().copy_from_slice(traj.y(p, i));
                let zrow = traj.z(p, i);
                for a in 0..m {
                    for c in 0..d {
                        z[(a, c)] = zrow[a * d + c];
                    }
                }
                let rrow = traj.r(p, i);
                for (j, rj) in r.iter_mut().enumerate() {
                    rj.as_mut_slice().copy_from_slice(&rrow[j * m..(j + 1) * m]);
                }
                v.as_mut_slice().copy_from_slice(control.at(p, i));
                let args = CoeffArgs { t: traj.grid.t(i), x: &x, y: &y, z: &z, r: &r, v: &v };
                let l = coeffs.value(CoeffId::RunningCost, &args)[0];
                if !l.is_finite() {
                    return Err(Error::NonFiniteCoefficient { name: "l".into() });
                }
                running += l * dt;
                absolute += l.abs() * dt;
            }
            x.as_mut_slice().copy_from_slice(traj.x(p, steps));
            let phi = coeffs.terminal_cost(&x);
            if !phi.is_finite() {
                return Err(Error::NonFiniteCoefficient { name: "phi".into() });
            }
            Ok((running + phi, absolute + phi.abs()))
        })
        .collect::<Result<Vec<_>>>()?;

    let paths = traj.paths as f64;
    let per_path: Vec<f64> = rows.iter().map(|(c, _)| *c).collect();
    let mean = per_path.iter().sum::<f64>() / paths;
    let var = if traj.paths > 1 {
        per_path.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (paths - 1.0)
    } else {
        0.0
    };
    let abs_mean = rows.iter().map(|(_, a)| *a).sum::<f64>() / paths;

    let y0 = traj.y0();
    let h_term = coeffs.initial_cost(&DVector::from_column_slice(&y0));
    if !h_term.is_finite() {
        return Err(Error::NonFiniteCoefficient { name: "h".into() });
    }

    Ok(CostEstimate {
        value: mean + h_term,
        se: (var / paths).sqrt(),
        h_term,
        y0,
        per_path,
        admissibility: abs_mean + h_term.abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::state::solve_fbsde;
    use crate::fbsde::SolverParams;
    use crate::model::AffineModel;
    use crate::model::{ControlSet, Dimensions, FiltrationSpec, MarkSpace, TerminalSpec};
    use crate::scenario::{RngSpec, ScenarioBatch, TimeGrid};
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

    #[test]
    fn deterministic_cost_pieces_add_up() {
        // l = 0.5 qv v^2 + c with constant control, phi = p_phi x at a
        // deterministic terminal state, h = p_h y0 with y0 = c_f (T - 0).
        let dims = Dimensions { n: 1, m: 1, d: 1, k: 1 };
        let mut model = AffineModel::zeros(dims, MarkSpace::none());
        model.cost.qv[0] = 4.0;
        model.cost.constant = 2.0;
        model.cost.p_phi[0] = 3.0;
        model.cost.p_h[0] = 0.5;
        model.driver.constant[0] = 0.7;
        let spec = build(model, 1.0, 1.5);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let batch = ScenarioBatch::generate(grid, 32, 1, &[], RngSpec { seed: 1 }).unwrap();
        let control = ControlProcess::constant(&[0.5], 16);
        let traj = solve_fbsde(&spec, &batch, &control, &SolverParams::default()).unwrap();
        let est = estimate_cost(&spec, &traj, &control).unwrap();
        // Running: (0.5*4*0.25 + 2) * T = 2.5. Terminal: 3 * x_T with
        // x_T = 1.5 (zero dynamics). h: 0.5 * y0 with y0 = 0.7.
        assert!((est.value - (2.5 + 4.5 + 0.35)).abs() < 1e-10, "J = {}", est.value);
        assert!(est.se < 1e-12, "deterministic cost has zero spread");
        assert!((est.h_term - 0.35).abs() < 1e-10);
        assert!((est.admissibility - (2.5 + 4.5 + 0.35)).abs() < 1e-10);
        assert_eq!(est.per_path.len(), 32);
    }

    #[test]
    fn standard_error_tracks_path_spread() {
        // phi = x_T with additive noise: per-path cost is Gaussian with
        // variance s^2 T; the SE estimate must be close to s sqrt(T/P).
        let dims = Dimensions { n: 1, m: 1, d: 1, k: 1 };
        let mut model = AffineModel::zeros(dims, MarkSpace::none());
        model.diffusion.constant[0] = 0.8;
        model.cost.p_phi[0] = 1.0;
        let spec = build(model, 1.0, 0.0);
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let paths = 4000;
        let batch = ScenarioBatch::generate(grid, paths, 1, &[], RngSpec { seed: 2 }).unwrap();
        let control = ControlProcess::constant(&[0.0], 8);
        let traj = solve_fbsde(&spec, &batch, &control, &SolverParams::default()).unwrap();
        let est = estimate_cost(&spec, &traj, &control).unwrap();
        let want = 0.8 / (paths as f64).sqrt();
        assert!((est.se - want).abs() < 0.15 * want, "se {} vs {}", est.se, want);
        assert!(est.value.abs() < 4.0 * est.se + 1e-9);
    }
}
