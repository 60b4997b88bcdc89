//! Projected conditional-gradient descent over admissible controls.
//!
//! One iteration evaluates the candidate control (state solve, adjoint
//! solve, cost estimate), fits the conditional gradient
//! `G_i = E[grad_v H | eps_i]` under the problem's information structure,
//! and moves
//!
//! ```text
//! u_next[p][i] = Pi_U( u[p][i] - gamma * G[p][i] ),
//! ```
//!
//! the Euclidean projection keeping every iterate admissible exactly. The
//! stopping certificate is the stationarity residual (the cross-path RMS of
//! G, maximized over the grid): a vanishing conditional gradient is the
//! first-order necessary condition, and the report attaches the convexity
//! probe and the pointwise minimization check whose joint success upgrades
//! the certificate to sufficiency on the sampled problem.
//!
//! The batch is held fixed across iterations, so the sampled cost is a
//! deterministic function of the control and descent is meaningful; the
//! halving rule shrinks the step when a move overshoots. Because each update
//! subtracts a fitted function of the observed regressor, the whole iterate
//! is a composition of such functions: the run records them as a
//! [`ControlPolicy`] that can be replayed bit for bit on the training batch
//! (measurability of the iterates is checkable, not assumed) and evaluated
//! on a fresh batch to report an out-of-sample cost next to the in-sample
//! one.

use nalgebra::DMatrix;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fbsde::{
    estimate_cost, solve_adjoint, solve_fbsde, AdjointTrajectory, ControlProcess, CostEstimate,
    FeatureMap, SolverParams, SurrogateFn, Trajectory,
};
use crate::hamiltonian::{
    convexity_probe, max_condition_check, ConvexityReport, MaxConditionReport, Multipliers,
};
use crate::maxprinciple::{conditional_gradient_fit, stationarity_from_gradient};
use crate::model::{FiltrationSpec, ProblemSpec};
use crate::scenario::{RngSpec, ScenarioBatch};

/// Default descent step.
pub const DEFAULT_STEP: f64 = 0.1;
/// Default stationarity tolerance.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Default iteration budget.
pub const DEFAULT_MAX_ITERATIONS: usize = 200;

/// Relative cost increase below which the halving rule does not fire. The
/// fitted gradient and the sampled cost disagree at roundoff-plus-regression
/// scale near a stationary point, which wobbles the cost by around 1e-7
/// relative; a genuine overshoot moves it by orders of magnitude more.
const HALVING_SLACK: f64 = 1e-6;

/// Argument pairs sampled by the convexity probe of the final report.
pub const CONVEXITY_SAMPLES: usize = 64;
/// Half-width of the box the probe samples arguments from.
pub const CONVEXITY_RADIUS: f64 = 2.0;
/// Candidate-grid resolution of the pointwise minimization check.
pub const CANDIDATES_PER_AXIS: usize = 9;

/// Step-size schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    Fixed,
    /// Halve the step whenever the sampled cost rose since the previous
    /// iterate.
    HalvingOnIncrease,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub step_rule: StepRule,
    pub max_iterations: usize,
    /// Stationarity residual below which the run stops as converged.
    pub tolerance: f64,
    pub solver: SolverParams,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: DEFAULT_STEP,
            step_rule: StepRule::HalvingOnIncrease,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
            solver: SolverParams::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Invalid(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Invalid(format!(
                "stationarity tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Invalid("iteration budget must be positive".into()));
        }
        self.solver.validate()
    }
}

/// What one evaluation of an iterate measured. The step size is the one the
/// move leaving this iterate will use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub cost_se: f64,
    pub residual: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    /// Stationarity residual at or below tolerance.
    Converged,
    /// Iteration budget exhausted with the residual still above tolerance.
    MaxIterations,
    /// An inner solve diverged or the cost left the finite range.
    Diverged,
}

impl TerminationReason {
    pub fn label(self) -> &'static str {
        match self {
            TerminationReason::Converged => "converged",
            TerminationReason::MaxIterations => "max_iters",
            TerminationReason::Diverged => "diverged",
        }
    }
}

/// One recorded descent move: the step size and the fitted conditional
/// gradient as a function of the regressor, one function per grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStage {
    pub step_size: f64,
    pub fits: Vec<SurrogateFn>,
}

/// The optimizer's final control as an explicit function of the observed
/// regressor: a deterministic per-step initialization followed by the
/// recorded projected-gradient moves. Replaying the stages on the training
/// batch reproduces the final control table bit for bit; replaying them on
/// a fresh batch evaluates the learned feedback out of sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPolicy {
    pub steps: usize,
    pub dim: usize,
    /// Feature degree of the stored fits.
    pub degree: usize,
    /// steps x dim row-major initialization, equal across paths.
    pub base: Vec<f64>,
    pub stages: Vec<GradientStage>,
}

/// Sufficiency diagnostics evaluated at the final iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficiencyReport {
    pub convexity: ConvexityReport,
    pub max_condition: MaxConditionReport,
}

impl SufficiencyReport {
    pub fn pass(&self) -> bool {
        self.convexity.pass && self.max_condition.pass
    }
}

/// Everything a descent run produced. `final_control` is the last iterate
/// that was successfully evaluated; its measurements sit in the last record.
#[derive(Debug, Clone)]
pub struct OptimizerReport {
    pub records: Vec<IterationRecord>,
    pub final_control: ControlProcess,
    pub termination: TerminationReason,
    /// Function form of the final control; absent when the initial control
    /// was not deterministic per step.
    pub policy: Option<ControlPolicy>,
    /// Cost of the final control on a batch drawn from seed + 1; absent when
    /// no policy was recorded or the run diverged.
    pub fresh_cost: Option<CostEstimate>,
    /// Absent only when not even the first iterate could be evaluated.
    pub sufficiency: Option<SufficiencyReport>,
}

impl OptimizerReport {
    pub fn final_record(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

/// One full evaluation of a candidate control on the fixed batch.
struct Evaluation {
    traj: Trajectory,
    adjoint: AdjointTrajectory,
    gradient: Vec<f64>,
    fits: Vec<SurrogateFn>,
    cost: CostEstimate,
    residual: f64,
}

fn evaluate(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    control: &ControlProcess,
    params: &SolverParams,
) -> Result<Evaluation> {
    let traj = solve_fbsde(spec, batch, control, params)?;
    let cost = estimate_cost(spec, &traj, control)?;
    let adjoint = solve_adjoint(spec, batch, &traj, control, params)?;
    let (gradient, fits) = conditional_gradient_fit(spec, &traj, control, &adjoint, &params.basis)?;
    let residual =
        stationarity_from_gradient(&gradient, traj.paths, traj.grid.steps, spec.dims.k).norm;
    Ok(Evaluation { traj, adjoint, gradient, fits, cost, residual })
}

/// Failures of an inner solve that mean "this control is numerically bad",
/// as opposed to caller errors.
pub fn is_divergence(err: &Error) -> bool {
    matches!(
        err,
        Error::PicardDiverged { .. }
            | Error::NonFiniteState { .. }
            | Error::NonFiniteCoefficient { .. }
            | Error::SingularRegression { .. }
    )
}

/// The projected update applied to every path and step. A shared control
/// stays shared under the trivial filtration, which keeps path-constance of
/// the iterates structural rather than statistical.
fn projected_step(
    spec: &ProblemSpec,
    control: &ControlProcess,
    gradient: &[f64],
    paths: usize,
    gamma: f64,
) -> ControlProcess {
    let k = spec.dims.k;
    let steps = control.steps();
    let shared = control.is_shared() && spec.filtration == FiltrationSpec::Trivial;
    let mut next = if shared { control.clone() } else { control.to_per_path(paths) };
    let rows = if shared { 1 } else { paths };
    for p in 0..rows {
        for i in 0..steps {
            let mut v = DVector::from_column_slice(next.at(p, i));
            let base = (p * steps + i) * k;
            for c in 0..k {
                v[c] -= gamma * gradient[base + c];
            }
            let projected = spec.control_set.project(&v);
            next.at_mut(p, i).copy_from_slice(projected.as_slice());
        }
    }
    next
}

/// One descent move from an admissible control: measures the control and
/// returns the projected update together with the measurement record.
pub fn step(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    control: &ControlProcess,
    config: &OptimizerConfig,
) -> Result<(ControlProcess, IterationRecord)> {
    config.validate()?;
    if !control.admissible(&spec.control_set, 1e-9) {
        return Err(Error::Invalid("control to step from is not admissible".into()));
    }
    let eval = evaluate(spec, batch, control, &config.solver)?;
    let next = projected_step(spec, control, &eval.gradient, batch.paths, config.step_size);
    let record = IterationRecord {
        iteration: 0,
        cost: eval.cost.value,
        cost_se: eval.cost.se,
        residual: eval.residual,
        step_size: config.step_size,
    };
    Ok((next, record))
}

/// Per-step values of a control that is equal across paths, or None.
fn deterministic_base(control: &ControlProcess, paths: usize) -> Option<Vec<f64>> {
    let k = control.dim();
    let steps = control.steps();
    let mut base = Vec::with_capacity(steps * k);
    for i in 0..steps {
        base.extend_from_slice(control.at(0, i));
    }
    if !control.is_shared() {
        for p in 1..paths {
            for i in 0..steps {
                if control.at(p, i) != &base[i * k..(i + 1) * k] {
                    return None;
                }
            }
        }
    }
    Some(base)
}

/// Evaluates stored per-step gradient fits on a trajectory's regressors,
/// with the same feature arithmetic the fit itself used, P x N x k.
fn evaluate_stage(
    spec: &ProblemSpec,
    traj: &Trajectory,
    fits: &[SurrogateFn],
    map: &FeatureMap,
) -> Result<Vec<f64>> {
    let k = spec.dims.k;
    let steps = traj.grid.steps;
    let paths = traj.paths;
    if fits.len() != steps {
        return Err(Error::Shape(format!(
            "policy stage has {} fits for {steps} grid steps",
            fits.len()
        )));
    }
    let mut out = vec![0.0; paths * steps * k];
    let mut features = vec![0.0; map.len()];
    for i in 0..steps {
        let lag = spec.filtration.lag_index(&traj.grid, i);
        for p in 0..paths {
            let slot = &mut out[(p * steps + i) * k..(p * steps + i) * k + k];
            match &fits[i] {
                SurrogateFn::Const(_) => fits[i].eval(&[], slot),
                SurrogateFn::Poly(_) => {
                    let lag = lag.ok_or_else(|| {
                        Error::Invalid(
                            "policy stores a regressor fit but the filtration is trivial".into(),
                        )
                    })?;
                    map.eval(traj.x(p, lag), &mut features);
                    fits[i].eval(&features, slot);
                }
            }
        }
    }
    Ok(out)
}

/// Rebuilds the control a policy defines on a batch: the deterministic
/// initialization followed by the recorded moves, re-solving the state after
/// every move so each stage reads the regressors its fit expects. On the
/// training batch this reproduces the optimizer's final control bit for
/// bit; on any other batch it evaluates the learned feedback out of sample.
pub fn replay(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    policy: &ControlPolicy,
    params: &SolverParams,
) -> Result<(ControlProcess, Trajectory)> {
    let k = spec.dims.k;
    if policy.dim != k || policy.steps != batch.grid.steps {
        return Err(Error::Shape(format!(
            "policy of shape {}x{} does not match problem ({} steps, control dim {k})",
            policy.steps, policy.dim, batch.grid.steps
        )));
    }
    let map = FeatureMap::new(spec.dims.n, policy.degree);
    let mut control =
        ControlProcess::shared_from_fn(k, policy.steps, |i, out| {
            out.copy_from_slice(&policy.base[i * k..(i + 1) * k])
        });
    let mut traj = solve_fbsde(spec, batch, &control, params)?;
    for stage in &policy.stages {
        let gradient = evaluate_stage(spec, &traj, &stage.fits, &map)?;
        control = projected_step(spec, &control, &gradient, batch.paths, stage.step_size);
        traj = solve_fbsde(spec, batch, &control, params)?;
    }
    Ok((control, traj))
}

/// Multipliers averaged over paths and steps, the operating point for the
/// convexity probe of the final report.
pub fn average_multipliers(adjoint: &AdjointTrajectory) -> Multipliers {
    let steps = adjoint.grid.steps;
    let paths = adjoint.paths;
    let m = adjoint.dims.m;
    let n = adjoint.dims.n;
    let d = adjoint.dims.d;
    let marks = adjoint.marks;
    let mut k_sum = vec![0.0; m];
    let mut p_sum = vec![0.0; n];
    let mut q_sum = vec![0.0; n * d];
    let mut b_sum = vec![0.0; marks * n];
    for p in 0..paths {
        for i in 0..steps {
            for (slot, v) in k_sum.iter_mut().zip(adjoint.k(p, i)) {
                *slot += v;
            }
            for (slot, v) in p_sum.iter_mut().zip(adjoint.p(p, i)) {
                *slot += v;
            }
            for (slot, v) in q_sum.iter_mut().zip(adjoint.q(p, i)) {
                *slot += v;
            }
            for (slot, v) in b_sum.iter_mut().zip(adjoint.beta(p, i)) {
                *slot += v;
            }
        }
    }
    let scale = 1.0 / (paths * steps) as f64;
    Multipliers {
        k: DVector::from_iterator(m, k_sum.iter().map(|v| v * scale)),
        p: DVector::from_iterator(n, p_sum.iter().map(|v| v * scale)),
        q: DMatrix::from_row_slice(n, d, &q_sum).scale(scale),
        beta: (0..marks)
            .map(|j| {
                DVector::from_iterator(n, b_sum[j * n..(j + 1) * n].iter().map(|v| v * scale))
            })
            .collect(),
    }
}

/// Full descent run. Inner-solve divergence is a termination reason, not an
/// error; errors signal unusable inputs.
pub fn optimize(
    spec: &ProblemSpec,
    batch: &ScenarioBatch,
    initial: &ControlProcess,
    config: &OptimizerConfig,
) -> Result<OptimizerReport> {
    config.validate()?;
    if !initial.admissible(&spec.control_set, 1e-9) {
        return Err(Error::Invalid("initial control is not admissible".into()));
    }

    let mut policy = deterministic_base(initial, batch.paths).map(|base| ControlPolicy {
        steps: initial.steps(),
        dim: initial.dim(),
        degree: config.solver.basis.degree,
        base,
        stages: Vec::new(),
    });

    let mut control = initial.clone();
    let mut evaluated = initial.clone();
    let mut gamma = config.step_size;
    let mut prev_cost: Option<f64> = None;
    let mut records = Vec::new();
    let mut last_eval: Option<Evaluation> = None;
    let mut termination = TerminationReason::MaxIterations;

    for iteration in 0..config.max_iterations {
        let eval = match evaluate(spec, batch, &control, &config.solver) {
            Ok(eval) => eval,
            Err(err) if is_divergence(&err) => {
                termination = TerminationReason::Diverged;
                break;
            }
            Err(err) => return Err(err),
        };
        if !eval.cost.value.is_finite() {
            termination = TerminationReason::Diverged;
            break;
        }
        evaluated = control.clone();
        if config.step_rule == StepRule::HalvingOnIncrease {
            if let Some(prev) = prev_cost {
                if eval.cost.value > prev + HALVING_SLACK * prev.abs().max(1.0) {
                    gamma *= 0.5;
                }
            }
        }
        records.push(IterationRecord {
            iteration,
            cost: eval.cost.value,
            cost_se: eval.cost.se,
            residual: eval.residual,
            step_size: gamma,
        });
        prev_cost = Some(eval.cost.value);
        let converged = eval.residual <= config.tolerance;
        let budget_left = iteration + 1 < config.max_iterations;
        if !converged && budget_left {
            control = projected_step(spec, &control, &eval.gradient, batch.paths, gamma);
            if let Some(policy) = &mut policy {
                policy
                    .stages
                    .push(GradientStage { step_size: gamma, fits: eval.fits.clone() });
            }
        }
        last_eval = Some(eval);
        if converged {
            termination = TerminationReason::Converged;
            break;
        }
    }

    let sufficiency = match &last_eval {
        Some(eval) => {
            let mult = average_multipliers(&eval.adjoint);
            let convexity = convexity_probe(
                spec,
                &mult,
                0.5 * spec.horizon,
                CONVEXITY_SAMPLES,
                CONVEXITY_RADIUS,
                batch.seed ^ 0x636f6e76,
            );
            let max_condition = max_condition_check(
                spec,
                &eval.traj,
                &evaluated,
                &eval.adjoint,
                CANDIDATES_PER_AXIS,
                &config.solver.basis,
            )?;
            Some(SufficiencyReport { convexity, max_condition })
        }
        None => None,
    };

    let fresh_cost = match (&policy, termination) {
        (Some(policy), TerminationReason::Converged | TerminationReason::MaxIterations) => {
            let fresh = ScenarioBatch::generate(
                batch.grid,
                batch.paths,
                batch.brownian_dim,
                &batch.mark_rates,
                RngSpec { seed: batch.seed.wrapping_add(1) },
            )?;
            match replay(spec, &fresh, policy, &config.solver) {
                Ok((fresh_control, fresh_traj)) => {
                    Some(estimate_cost(spec, &fresh_traj, &fresh_control)?)
                }
                Err(err) if is_divergence(&err) => None,
                Err(err) => return Err(err),
            }
        }
        _ => None,
    };

    Ok(OptimizerReport {
        records,
        final_control: evaluated,
        termination,
        policy,
        fresh_cost,
        sufficiency,
    })
}
