//! Verification core: three independent estimators of the cost's
//! directional derivative, the stationarity residual, an integration-by-
//! parts checker for Ito-Levy products, and moment diagnostics.
//!
//! For an admissible control u and a bounded adapted direction theta, the
//! Gateaux derivative dJ(u)[theta] is estimated three ways:
//!
//! 1. central finite differences of the cost along u + y theta with common
//!    random numbers,
//! 2. the first-variation expansion
//!    `E[ int Dl[Xi] dt + <grad phi(x_T), x1_T> ] + <grad h(y_0), y1_0>`
//!    driven by one linearized solve,
//! 3. the adjoint representation `E int <grad_v H, theta> dt`.
//!
//! Agreement of the three within Monte Carlo error is the working check of
//! the adjoint calculus. Stationarity of a candidate optimum is measured by
//! the conditional gradient `G_i = E[grad_v H | eps_i]`, whose cross-path
//! root-mean-square must vanish at an optimizer under the information
//! structure eps.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbsde::variational::{apply_linearization, XiSlices};
use crate::fbsde::{
    estimate_cost, observation_op, solve_fbsde, solve_variational, AdjointTrajectory, ArgsBuf,
    CondExpOp, ControlProcess, DirectionProcess, FeatureMap, RegressionBasis, SolverParams,
    SurrogateFn, Trajectory,
};
use crate::hamiltonian::grad_hamiltonian;
use crate::model::{CoeffId, MarkSpace, ProblemSpec, VarId};
use crate::scenario::ScenarioBatch;

/// Default relative step of the finite-difference estimator.
pub const FD_STEP: f64 = 1e-4;

/// Magnitude above which a moment diagnostic is flagged as unreliable.
pub const MOMENT_THRESHOLD: f64 = 1e12;

/// One directional-derivative estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateauxEstimate {
    pub value: f64,
    pub se: f64,
}

impl GateauxEstimate {
    /// Two estimates agree when they differ by at most three pooled
    /// standard errors plus an absolute floor.
    pub fn agrees(&self, other: &GateauxEstimate, abs_tol: f64) -> bool {
        let pooled = (self.se * self.se + other.se * other.se).sqrt();
        (self.value - other.value).abs() <= 3.0 * pooled + abs_tol
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let p = values.len() as f64;
    let mean = values.iter().sum::<f64>() / p;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (p - 1.0);
    (mean, (var / p).sqrt())
}

/// Central difference `[J(u + y theta) - J(u - y theta)] / (2y)` on one
/// scenario batch. The running and terminal parts are differenced per path
/// before averaging; the initial-cost part is deterministic and enters the
/// mean directly.
pub fn gateaux_fd(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    control: &ControlProcess,
    direction: &DirectionProcess,
    step: f64,
    params: &SolverParams,
) -> Result<GateauxEstimate> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let plus = control.axpy(step, &direction.process, batch.paths)?;
    let minus = control.axpy(-step, &direction.process, batch.paths)?;
    for shifted in [&plus, &minus] {
        if !shifted.admissible(&spec.control_set, 1e-9) {
            return Err(Error::Invalid(
                "perturbed control leaves the admissible set; shrink the step".into(),
            ));
        }
    }
    let traj_plus = solve_fbsde(spec, batch, &plus, params)?;
    let traj_minus = solve_fbsde(spec, batch, &minus, params)?;
    let cost_plus = estimate_cost(spec, &traj_plus, &plus)?;
    let cost_minus = estimate_cost(spec, &traj_minus, &minus)?;
    let quotients: Vec<f64> = cost_plus
        .per_path
        .iter()
        .zip(&cost_minus.per_path)
        .map(|(a, b)| (a - b) / (2.0 * step))
        .collect();
    let (mean, se) = mean_se(&quotients);
    let h_quotient = (cost_plus.h_term - cost_minus.h_term) / (2.0 * step);
    Ok(GateauxEstimate { value: mean + h_quotient, se })
}

/// First-variation estimator: one linearized solve, then the per-path
/// integral of the running-cost derivative along the variation plus the
/// terminal and initial cost gradients paired with the terminal and initial
/// variations.
pub fn gateaux_variational(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    traj: &Trajectory,
    control: &ControlProcess,
    direction: &DirectionProcess,
    params: &SolverParams,
) -> Result<GateauxEstimate> {
    let var = solve_variational(spec, batch, traj, control, direction, params)?;
    let dims = spec.dims;
    let marks = spec.marks.len();
    let steps = traj.grid.steps;
    let dt = traj.grid.dt();
    let per_path: Vec<f64> = (0..traj.paths)
        .into_par_iter()
        .map(|p| {
            let mut buf = ArgsBuf::new(&dims, marks);
            let mut acc = 0.0;
            for i in 0..steps {
                buf.load(traj, control, p, i);
                let xi = XiSlices {
                    x1: var.x1(p, i),
                    y1: var.y1(p, i),
                    z1: var.z1(p, i),
                    r1: var.r1(p, i),
                    theta: direction.process.at(p, i),
                };
                acc += dt * apply_linearization(spec, CoeffId::RunningCost, &buf.args(), &xi)[0];
            }
            let x_terminal = DVector::from_column_slice(traj.x(p, steps));
            let x1_terminal = DVector::from_column_slice(var.x1(p, steps));
            acc + spec.coefficients.terminal_cost_grad(&x_terminal).dot(&x1_terminal)
        })
        .collect();
    let (mean, se) = mean_se(&per_path);
    let y0 = DVector::from_column_slice(&traj.y0());
    let y1_0 = DVector::from_column_slice(&var.y1_0());
    let h_term = spec.coefficients.initial_cost_grad(&y0).dot(&y1_0);
    Ok(GateauxEstimate { value: mean + h_term, se })
}

/// Adjoint representation: quadrature of `<grad_v H, theta>` along each
/// path, then cross-path mean and standard error. Linear in the direction
/// for a fixed adjoint.
pub fn gateaux_hamiltonian(
    spec: &ProblemSpec,
    traj: &Trajectory,
    control: &ControlProcess,
    direction: &DirectionProcess,
    adjoint: &AdjointTrajectory,
) -> Result<GateauxEstimate> {
    if adjoint.paths != traj.paths || adjoint.grid != traj.grid {
        return Err(Error::Shape("adjoint and trajectory disagree".into()));
    }
    let dims = spec.dims;
    let marks = spec.marks.len();
    let steps = traj.grid.steps;
    let dt = traj.grid.dt();
    let per_path: Vec<f64> = (0..traj.paths)
        .into_par_iter()
        .map(|p| {
            let mut buf = ArgsBuf::new(&dims, marks);
            let mut acc = 0.0;
            for i in 0..steps {
                buf.load(traj, control, p, i);
                let mult = adjoint.multipliers(p, i);
                let gv = grad_hamiltonian(spec, VarId::V, &buf.args(), &mult);
                let theta = direction.process.at(p, i);
                for c in 0..dims.k {
                    acc += dt * gv[c] * theta[c];
                }
            }
            acc
        })
        .collect();
    let (mean, se) = mean_se(&per_path);
    Ok(GateauxEstimate { value: mean, se })
}

/// Fitted conditional gradient `G_i = E[grad_v H | eps_i]` on every path
/// and step, P x N x k row-major. This is the descent direction of the
/// optimizer and the integrand of the stationarity residual.
pub fn conditional_gradient(
    spec: &ProblemSpec,
    traj: &Trajectory,
    control: &ControlProcess,
    adjoint: &AdjointTrajectory,
    basis: &RegressionBasis,
) -> Result<Vec<f64>> {
    conditional_gradient_fit(spec, traj, control, adjoint, basis).map(|(out, _)| out)
}

/// As [`conditional_gradient`], additionally returning the per-step fitted
/// functions of the observed regressor. Evaluating a returned function at a
/// path's regressor features reproduces the fitted table entry bit for bit,
/// which is what lets the optimizer store its iterates as functions and
/// replay them on other batches.
pub fn conditional_gradient_fit(
    spec: &ProblemSpec,
    traj: &Trajectory,
    control: &ControlProcess,
    adjoint: &AdjointTrajectory,
    basis: &RegressionBasis,
) -> Result<(Vec<f64>, Vec<SurrogateFn>)> {
    let dims = spec.dims;
    let k = dims.k;
    let marks = spec.marks.len();
    let paths = traj.paths;
    let steps = traj.grid.steps;
    let map = FeatureMap::new(dims.n, basis.degree);
    let mut out = vec![0.0; paths * steps * k];
    let mut fits = Vec::with_capacity(steps);
    let mut values = vec![0.0; paths * k];
    for i in 0..steps {
        values.par_chunks_mut(k).enumerate().for_each(|(p, slot)| {
            let mut buf = ArgsBuf::new(&dims, marks);
            buf.load(traj, control, p, i);
            let mult = adjoint.multipliers(p, i);
            let gv = grad_hamiltonian(spec, VarId::V, &buf.args(), &mult);
            slot.copy_from_slice(gv.as_slice());
        });
        let op = observation_op(traj, &spec.filtration, basis, &map, i)?;
        let (fitted, coeffs) = op.apply(&values, k);
        fits.push(match op {
            CondExpOp::Mean { .. } => SurrogateFn::Const(coeffs.row(0).iter().copied().collect()),
            CondExpOp::Fit { .. } => SurrogateFn::Poly(coeffs),
        });
        for p in 0..paths {
            out[(p * steps + i) * k..(p * steps + i) * k + k]
                .copy_from_slice(&fitted[p * k..(p + 1) * k]);
        }
    }
    Ok((out, fits))
}

/// Stationarity of a candidate optimum: per-step cross-path RMS of the
/// fitted conditional gradient, and its maximum over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    pub per_step: Vec<f64>,
    pub norm: f64,
}

pub fn stationarity_residual(
    spec: &ProblemSpec,
    traj: &Trajectory,
    control: &ControlProcess,
    adjoint: &AdjointTrajectory,
    basis: &RegressionBasis,
) -> Result<StationarityReport> {
    let gradient = conditional_gradient(spec, traj, control, adjoint, basis)?;
    Ok(stationarity_from_gradient(&gradient, traj.paths, traj.grid.steps, spec.dims.k))
}

/// RMS reduction of an already-fitted conditional gradient table.
pub fn stationarity_from_gradient(
    gradient: &[f64],
    paths: usize,
    steps: usize,
    k: usize,
) -> StationarityReport {
    let mut per_step = vec![0.0; steps];
    for (i, slot) in per_step.iter_mut().enumerate() {
        let mut acc = 0.0;
        for p in 0..paths {
            let base = (p * steps + i) * k;
            for c in 0..k {
                acc += gradient[base + c] * gradient[base + c];
            }
        }
        *slot = (acc / paths as f64).sqrt();
    }
    let norm = per_step.iter().fold(0.0f64, |a, b| a.max(*b));
    StationarityReport { per_step, norm }
}

/// Constant-coefficient Ito-Levy process for the product-rule checker:
/// `dY = b dt + g dB + sum_j s_j (dN_j - pi_j dt)` from a deterministic
/// initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct IbpProcess {
    pub initial: DVector<f64>,
    pub drift: DVector<f64>,
    /// dim x d loading on the Brownian increments.
    pub diffusion: nalgebra::DMatrix<f64>,
    /// Per-mark loading on the compensated counts.
    pub jump: Vec<DVector<f64>>,
}

impl IbpProcess {
    pub fn dim(&self) -> usize {
        self.initial.len()
    }
}

/// Both sides of the product-rule identity and their difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbpReport {
    pub lhs: f64,
    pub rhs: f64,
    pub difference: f64,
    pub se: f64,
}

/// Discretized product rule for two Ito-Levy processes on a shared batch:
///
/// ```text
/// E<Y1_T, Y2_T> = <y1_0, y2_0> + E sum_i [ <Y1_i, dY2_i> + <dY1_i, Y2_i>
///               + <g1, g2>_F dt + sum_j pi_j <s1_j, s2_j> dt ]
/// ```
///
/// The bracket replaces the realized quadratic covariation by its
/// compensator, so the difference collects the martingale sampling error
/// plus an O(dt) discretization bias.
pub fn verify_ibp(
    first: &IbpProcess,
    second: &IbpProcess,
    marks: &MarkSpace,
    batch: &ScenarioBatch,
) -> Result<IbpReport> {
    let dim = first.dim();
    if second.dim() != dim {
        return Err(Error::Shape("product-rule processes must share a dimension".into()));
    }
    for proc in [first, second] {
        if proc.drift.len() != dim
            || proc.diffusion.shape() != (dim, batch.brownian_dim)
            || proc.jump.len() != marks.len()
            || proc.jump.iter().any(|s| s.len() != dim)
        {
            return Err(Error::Shape("product-rule process blocks have wrong shapes".into()));
        }
    }
    if marks.len() != batch.mark_rates.len() {
        return Err(Error::Shape("mark space disagrees with the scenario batch".into()));
    }
    let steps = batch.grid.steps;
    let dt = batch.grid.dt();
    let d = batch.brownian_dim;

    // Constant-coefficient bracket terms, shared by every step.
    let mut bracket = 0.0;
    for a in 0..dim {
        for c in 0..d {
            bracket += first.diffusion[(a, c)] * second.diffusion[(a, c)];
        }
    }
    for j in 0..marks.len() {
        bracket += marks.weights[j] * first.jump[j].dot(&second.jump[j]);
    }

    let stats: Vec<(f64, f64)> = (0..batch.paths)
        .into_par_iter()
        .map(|p| {
            let mut y1 = first.initial.clone();
            let mut y2 = second.initial.clone();
            let mut dy1 = DVector::zeros(dim);
            let mut dy2 = DVector::zeros(dim);
            let mut rhs = y1.dot(&y2);
            for i in 0..steps {
                let db = batch.db(p, i);
                for a in 0..dim {
                    let mut inc1 = first.drift[a] * dt;
                    let mut inc2 = second.drift[a] * dt;
                    for c in 0..d {
                        inc1 += first.diffusion[(a, c)] * db[c];
                        inc2 += second.diffusion[(a, c)] * db[c];
                    }
                    for j in 0..marks.len() {
                        let comp = batch.compensated(p, i, j);
                        inc1 += first.jump[j][a] * comp;
                        inc2 += second.jump[j][a] * comp;
                    }
                    dy1[a] = inc1;
                    dy2[a] = inc2;
                }
                rhs += y1.dot(&dy2) + dy1.dot(&y2) + bracket * dt;
                y1 += &dy1;
                y2 += &dy2;
            }
            (y1.dot(&y2), rhs)
        })
        .collect();
    let lhs_mean = stats.iter().map(|(l, _)| l).sum::<f64>() / batch.paths as f64;
    let rhs_mean = stats.iter().map(|(_, r)| r).sum::<f64>() / batch.paths as f64;
    let diffs: Vec<f64> = stats.iter().map(|(l, r)| l - r).collect();
    let (difference, se) = mean_se(&diffs);
    Ok(IbpReport { lhs: lhs_mean, rhs: rhs_mean, difference, se })
}

/// One committed product-rule fixture: a process pair, its mark space, and
/// the deterministic part of the discretization gap.
#[derive(Debug, Clone)]
pub struct IbpFixture {
    pub name: &'static str,
    pub first: IbpProcess,
    pub second: IbpProcess,
    pub marks: MarkSpace,
    /// `|<b1, b2>| T`: the residual drift-product bias of the compensated
    /// bracket, an exact `drift_bias * dt` for constant coefficients.
    pub drift_bias: f64,
}

/// The three committed product-rule fixtures: deterministic, Brownian and
/// compensated-jump pairs. All expect batches with one Brownian channel and
/// the fixture's own mark rates; the acceptance gate per fixture is
/// `|difference| <= 3 se + C dt` with C covering `drift_bias`.
pub fn ibp_fixture_suite() -> Vec<IbpFixture> {
    let dim = 2;
    let zero_g = nalgebra::DMatrix::zeros(dim, 1);
    vec![
        IbpFixture {
            name: "deterministic",
            first: IbpProcess {
                initial: DVector::from_column_slice(&[0.5, -0.25]),
                drift: DVector::from_column_slice(&[1.0, 0.5]),
                diffusion: zero_g.clone(),
                jump: vec![],
            },
            second: IbpProcess {
                initial: DVector::from_column_slice(&[1.0, 0.0]),
                drift: DVector::from_column_slice(&[0.25, 1.0]),
                diffusion: zero_g.clone(),
                jump: vec![],
            },
            marks: MarkSpace::none(),
            drift_bias: 0.75,
        },
        IbpFixture {
            name: "brownian",
            first: IbpProcess {
                initial: DVector::zeros(dim),
                drift: DVector::zeros(dim),
                diffusion: nalgebra::DMatrix::from_column_slice(dim, 1, &[1.0, 0.3]),
                jump: vec![],
            },
            second: IbpProcess {
                initial: DVector::from_column_slice(&[0.0, 0.5]),
                drift: DVector::zeros(dim),
                diffusion: nalgebra::DMatrix::from_column_slice(dim, 1, &[0.5, -0.2]),
                jump: vec![],
            },
            marks: MarkSpace::none(),
            drift_bias: 0.0,
        },
        IbpFixture {
            name: "jump",
            first: IbpProcess {
                initial: DVector::zeros(dim),
                drift: DVector::zeros(dim),
                diffusion: zero_g.clone(),
                jump: vec![DVector::from_column_slice(&[1.0, 0.4])],
            },
            second: IbpProcess {
                initial: DVector::from_column_slice(&[0.25, 0.0]),
                drift: DVector::zeros(dim),
                diffusion: zero_g,
                jump: vec![DVector::from_column_slice(&[0.6, -0.3])],
            },
            marks: MarkSpace::new(vec![1.0], vec![2.0]).expect("positive weight"),
            drift_bias: 0.0,
        },
    ]
}

/// One quadratic-moment estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEntry {
    pub label: &'static str,
    pub value: f64,
    pub flagged: bool,
}

/// Sampled magnitudes of the quadratic moments the optimality theorems
/// assume finite. Finite samples cannot verify integrability; entries above
/// the threshold are flagged as reliability warnings, nothing more.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub entries: Vec<MomentEntry>,
    pub threshold: f64,
}

impl MomentReport {
    pub fn any_flagged(&self) -> bool {
        self.entries.iter().any(|e| e.flagged)
    }
}

const MOMENT_LABELS: [&str; 9] = [
    "dx_qq",
    "dx_beta",
    "dy_gradzH",
    "dy_gradrH",
    "p_gg",
    "p_sigma",
    "k_zz",
    "k_rr",
    "gradvH_sq",
];

/// Monte Carlo estimates of the nine quadratic-moment integrands paired
/// with the adjoint of the base pair. The comparison pair supplies the
/// second trajectory of the mixed entries; with `None` the base pair is
/// compared against itself and the difference entries vanish.
pub fn moment_diagnostics(
    spec: &ProblemSpec,
    traj: &Trajectory,
    control: &ControlProcess,
    adjoint: &AdjointTrajectory,
    other: Option<(&Trajectory, &ControlProcess)>,
    threshold: f64,
) -> Result<MomentReport> {
    let (vtraj, vcontrol) = other.unwrap_or((traj, control));
    if vtraj.paths != traj.paths || vtraj.grid != traj.grid || vtraj.dims != traj.dims {
        return Err(Error::Shape("comparison trajectory disagrees with the base".into()));
    }
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let marks = spec.marks.len();
    let steps = traj.grid.steps;
    let dt = traj.grid.dt();

    let sums = (0..traj.paths)
        .into_par_iter()
        .map(|p| {
            let mut buf = ArgsBuf::new(&dims, marks);
            let mut vbuf = ArgsBuf::new(&dims, marks);
            let mut acc = [0.0f64; 9];
            for i in 0..steps {
                buf.load(traj, control, p, i);
                vbuf.load(vtraj, vcontrol, p, i);
                let args = buf.args();
                let mult = adjoint.multipliers(p, i);
                let gz = grad_hamiltonian(spec, VarId::Z, &args, &mult);
                let gv = grad_hamiltonian(spec, VarId::V, &args, &mult);
                let gval = spec.coefficients.value(CoeffId::Diffusion, &vbuf.args());

                let dx: Vec<f64> = (0..n).map(|a| vtraj.x(p, i)[a] - traj.x(p, i)[a]).collect();
                let dy: Vec<f64> = (0..m).map(|a| vtraj.y(p, i)[a] - traj.y(p, i)[a]).collect();

                for c in 0..d {
                    let mut qdx = 0.0;
                    let mut gp = 0.0;
                    let mut zk = 0.0;
                    let mut gzdy = 0.0;
                    for a in 0..n {
                        qdx += mult.q[(a, c)] * dx[a];
                        gp += gval[a * d + c] * mult.p[a];
                    }
                    for a in 0..m {
                        zk += vtraj.z(p, i)[a * d + c] * mult.k[a];
                        gzdy += gz[a * d + c] * dy[a];
                    }
                    acc[0] += dt * qdx * qdx;
                    acc[2] += dt * gzdy * gzdy;
                    acc[4] += dt * gp * gp;
                    acc[6] += dt * zk * zk;
                }
                for j in 0..marks {
                    let weight = spec.marks.weights[j];
                    let gr = grad_hamiltonian(spec, VarId::R(j), &args, &mult);
                    let sigma = spec.coefficients.value(CoeffId::Jump(j), &vbuf.args());
                    let beta_dx: f64 = (0..n).map(|a| mult.beta[j][a] * dx[a]).sum();
                    let gr_dy: f64 = (0..m).map(|a| gr[a] * dy[a]).sum();
                    let sigma_p: f64 = (0..n).map(|a| sigma[a] * mult.p[a]).sum();
                    let r_k: f64 =
                        (0..m).map(|a| vtraj.r(p, i)[j * m + a] * mult.k[a]).sum();
                    acc[1] += dt * weight * beta_dx * beta_dx;
                    acc[3] += dt * weight * gr_dy * gr_dy;
                    acc[5] += dt * weight * sigma_p * sigma_p;
                    acc[7] += dt * weight * r_k * r_k;
                }
                acc[8] += dt * gv.iter().map(|w| w * w).sum::<f64>();
            }
            acc
        })
        .reduce(
            || [0.0f64; 9],
            |mut a, b| {
                for (slot, w) in a.iter_mut().zip(b) {
                    *slot += w;
                }
                a
            },
        );

    let entries = MOMENT_LABELS
        .iter()
        .zip(sums)
        .map(|(label, total)| {
            let value = total / traj.paths as f64;
            MomentEntry { label, value, flagged: !value.is_finite() || value.abs() > threshold }
        })
        .collect();
    Ok(MomentReport { entries, threshold })
}
