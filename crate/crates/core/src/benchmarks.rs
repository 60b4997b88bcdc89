//! Builtin benchmark fixtures and the oracle values they are judged against.
//!
//! The centerpiece is a scalar linear-quadratic family with multiplicative
//! jumps. With dynamics
//!
//! ```text
//! dx = (A x + B v) dt + (C x + D v) dB + (E x + F v) dN~,
//! ```
//!
//! one mark of intensity pi, running cost (Q x^2 + R v^2)/2 and terminal
//! cost S x_T^2/2, the value function is V(t, x) = P(t) x^2 / 2 where P
//! solves the backward Riccati equation
//!
//! ```text
//! -P' = (2A + C^2 + pi E^2) P + Q - (B P + C D P + pi E F P)^2
//!        / (R + D^2 P + pi F^2 P),        P(T) = S,
//! ```
//!
//! and the optimal feedback is v*(t, x) = -gain(P(t)) x with
//! gain(P) = (B P + C D P + pi E F P) / (R + D^2 P + pi F^2 P). The ODE is
//! integrated with the classic fourth-order Runge-Kutta scheme on a dense
//! uniform grid; the resulting table is the oracle the optimizer output is
//! measured against, and its t = 0 value is frozen below.
//!
//! Alongside the LQ family the module names a small set of fixtures used by
//! the bench command and the acceptance suite: the LQ problem under full and
//! delayed information, a pure-forward reduction, a diffusion-only model
//! paired with an inert-mark twin for a code-path equivalence check, a
//! nonlinear fully coupled test model, and a deliberately divergent problem.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fbsde::ControlProcess;
use crate::model::{
    AffineModel, ControlSet, Dimensions, DriverTerminal, FiltrationSpec, MarkSpace, ProblemSpec,
    TerminalSpec,
};
use crate::scenario::ScenarioBatch;

/// Resolution of the committed Riccati oracle table.
pub const LQ_ORACLE_STEPS: usize = 4096;

/// P(0) of the canonical benchmark, frozen from the dense RK4 run; the
/// optimal cost from initial state a is P(0) a^2 / 2.
pub const LQ_ORACLE_P0: f64 = 1.2233615966503588;

/// Scalar LQ-with-jumps problem data. One Brownian channel, one mark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqBenchmark {
    pub initial: f64,
    pub horizon: f64,
    /// Drift loadings: b = drift_x * x + drift_v * v.
    pub drift_x: f64,
    pub drift_v: f64,
    /// Diffusion loadings: g = diffusion_x * x + diffusion_v * v.
    pub diffusion_x: f64,
    pub diffusion_v: f64,
    /// Jump loadings: sigma = jump_x * x + jump_v * v (mark atom 1).
    pub jump_x: f64,
    pub jump_v: f64,
    /// Mark intensity pi.
    pub weight: f64,
    /// Cost weights: l = (state_weight x^2 + control_weight v^2)/2,
    /// phi = terminal_weight x^2 / 2.
    pub state_weight: f64,
    pub control_weight: f64,
    pub terminal_weight: f64,
}

impl LqBenchmark {
    /// The committed benchmark parameter set behind [`LQ_ORACLE_P0`].
    pub fn canonical() -> Self {
        LqBenchmark {
            initial: 1.0,
            horizon: 1.0,
            drift_x: 0.3,
            drift_v: 1.0,
            diffusion_x: 0.2,
            diffusion_v: 0.0,
            jump_x: 0.2,
            jump_v: 0.0,
            weight: 1.0,
            state_weight: 1.0,
            control_weight: 1.0,
            terminal_weight: 0.5,
        }
    }

    /// Feedback gain at Riccati value p: the optimal control is -gain * x.
    pub fn gain(&self, p: f64) -> f64 {
        self.cross(p) / self.curvature(p)
    }

    /// Coefficient of x v in the pointwise Hamiltonian of the HJB equation.
    fn cross(&self, p: f64) -> f64 {
        self.drift_v * p
            + self.diffusion_x * self.diffusion_v * p
            + self.weight * self.jump_x * self.jump_v * p
    }

    /// Coefficient of v^2 (times 1/2); positive whenever p >= 0.
    fn curvature(&self, p: f64) -> f64 {
        self.control_weight
            + self.diffusion_v * self.diffusion_v * p
            + self.weight * self.jump_v * self.jump_v * p
    }

    /// Right-hand side of dP/dt = rhs(P).
    fn rhs(&self, p: f64) -> f64 {
        let linear = 2.0 * self.drift_x
            + self.diffusion_x * self.diffusion_x
            + self.weight * self.jump_x * self.jump_x;
        let cross = self.cross(p);
        -(linear * p + self.state_weight - cross * cross / self.curvature(p))
    }

    /// Integrates the Riccati equation backward from t = horizon with classic
    /// RK4 on a uniform grid of `steps` intervals.
    pub fn solve_riccati(&self, steps: usize) -> RiccatiTable {
        assert!(steps > 0, "riccati table needs at least one interval");
        let h = self.horizon / steps as f64;
        let mut values = vec![0.0; steps + 1];
        values[steps] = self.terminal_weight;
        for i in (0..steps).rev() {
            let p = values[i + 1];
            // Backward step of size -h.
            let k1 = self.rhs(p);
            let k2 = self.rhs(p - 0.5 * h * k1);
            let k3 = self.rhs(p - 0.5 * h * k2);
            let k4 = self.rhs(p - h * k3);
            values[i] = p - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        RiccatiTable { horizon: self.horizon, values }
    }

    /// Optimal feedback value v*(t, x) read off a solved table.
    pub fn feedback(&self, table: &RiccatiTable, t: f64, x: f64) -> f64 {
        -self.gain(table.at(t)) * x
    }

    /// Optimal cost from the benchmark's initial state.
    pub fn optimal_cost(&self, table: &RiccatiTable) -> f64 {
        0.5 * table.initial() * self.initial * self.initial
    }

    /// Closed-loop feedback control on a scenario batch: the state advances
    /// by the same Euler update the forward solver applies, with the control
    /// read from the feedback law at every step, so re-solving under the
    /// returned table reproduces the generating trajectory.
    pub fn feedback_control(
        &self,
        table: &RiccatiTable,
        batch: &ScenarioBatch,
    ) -> ControlProcess {
        let steps = batch.grid.steps;
        let dt = batch.grid.dt();
        let mut control = ControlProcess::per_path_zero(1, batch.paths, steps);
        for p in 0..batch.paths {
            let mut x = self.initial;
            for i in 0..steps {
                let v = self.feedback(table, batch.grid.t(i), x);
                control.at_mut(p, i)[0] = v;
                let b = self.drift_x * x + self.drift_v * v;
                let g = self.diffusion_x * x + self.diffusion_v * v;
                let s = self.jump_x * x + self.jump_v * v;
                // Same association as the solver's Euler step, so the
                // re-solved state matches bit for bit.
                let mut acc = b * dt;
                acc += g * batch.db(p, i)[0];
                let mut next = x + acc;
                next += s * batch.compensated(p, i, 0);
                x = next;
            }
        }
        control
    }

    /// The benchmark as a problem specification. The driver and terminal
    /// condition are zero, so the backward components vanish identically and
    /// the cost reduces to the forward LQ functional.
    pub fn spec(&self, filtration: FiltrationSpec) -> ProblemSpec {
        let dims = Dimensions { n: 1, m: 1, d: 1, k: 1 };
        let marks = MarkSpace::new(vec![1.0], vec![self.weight]).expect("positive weight");
        let mut model = AffineModel::zeros(dims, marks.clone());
        model.drift.x_mat[(0, 0)] = self.drift_x;
        model.drift.v_mat[(0, 0)] = self.drift_v;
        model.diffusion.x_mat[(0, 0)] = self.diffusion_x;
        model.diffusion.v_mat[(0, 0)] = self.diffusion_v;
        model.jump.x_mat[(0, 0)] = self.jump_x;
        model.jump.v_mat[(0, 0)] = self.jump_v;
        model.cost.qx[0] = self.state_weight;
        model.cost.qv[0] = self.control_weight;
        model.cost.q_phi[0] = self.terminal_weight;
        ProblemSpec {
            dims,
            horizon: self.horizon,
            initial: DVector::from_element(1, self.initial),
            marks: marks.clone(),
            // Wide enough that the optimal feedback never touches the faces.
            control_set: ControlSet::Box { lower: vec![-6.0], upper: vec![6.0] },
            filtration,
            terminal: TerminalSpec::zero(&dims, &marks),
            coefficients: Arc::new(model),
        }
    }
}

/// Dense Riccati solution on a uniform grid over [0, horizon].
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiTable {
    pub horizon: f64,
    /// values[i] = P(i * horizon / (values.len() - 1)).
    pub values: Vec<f64>,
}

impl RiccatiTable {
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    /// P(0); the optimal cost from state a is P(0) a^2 / 2.
    pub fn initial(&self) -> f64 {
        self.values[0]
    }

    /// Linear interpolation, clamped to [0, horizon]. Exact at the knots, so
    /// lookups from a coarser grid whose step divides the table step incur no
    /// interpolation error.
    pub fn at(&self, t: f64) -> f64 {
        let steps = self.steps() as f64;
        let s = (t / self.horizon * steps).clamp(0.0, steps);
        let i = (s.floor() as usize).min(self.steps() - 1);
        let w = s - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }
}

/// Named builtin fixtures runnable end-to-end by the bench command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    /// Canonical LQ problem under full information; judged against the
    /// Riccati oracle.
    LqFull,
    /// Same LQ data observed with a quarter-horizon delay; its optimal cost
    /// must dominate the full-information one.
    LqDelayed,
    /// Zero driver and terminal condition: the backward components must
    /// vanish to solver accuracy.
    PureForward,
    /// Diffusion-only model; compared bit-for-bit against an inert-mark twin.
    NoJump,
    /// Fully coupled nonlinear test model used by the estimator-agreement
    /// checks.
    NonlinearCoupled,
    /// Coupling far beyond the contraction regime; the solver must refuse.
    Diverging,
}

impl Benchmark {
    pub const ALL: [Benchmark; 6] = [
        Benchmark::LqFull,
        Benchmark::LqDelayed,
        Benchmark::PureForward,
        Benchmark::NoJump,
        Benchmark::NonlinearCoupled,
        Benchmark::Diverging,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::LqFull => "lq-full",
            Benchmark::LqDelayed => "lq-delayed",
            Benchmark::PureForward => "pure-forward",
            Benchmark::NoJump => "no-jump",
            Benchmark::NonlinearCoupled => "nonlinear-coupled",
            Benchmark::Diverging => "diverging",
        }
    }

    pub fn from_name(name: &str) -> Result<Benchmark> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Benchmark::ALL.iter().map(|b| b.name()).collect();
                Error::Invalid(format!(
                    "unknown benchmark {name:?}; expected one of {}",
                    known.join(", ")
                ))
            })
    }
}

/// A fixture bundles the problem with the numerics it is meant to run at.
#[derive(Clone)]
pub struct Fixture {
    pub benchmark: Benchmark,
    pub spec: ProblemSpec,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Step size for the optimizer-driven fixtures.
    pub step_size: f64,
    pub max_iterations: usize,
    /// Stationarity residual the optimizer-driven fixtures stop at. The LQ
    /// runs stop at 1e-3 because the grid optimum carries an O(dt) residual
    /// floor against the continuous feedback law.
    pub tolerance: f64,
}

/// Builds a named fixture with its committed numerics.
pub fn fixture(benchmark: Benchmark) -> Fixture {
    let lq = LqBenchmark::canonical();
    let (spec, steps, paths, seed, step_size, max_iterations, tolerance) = match benchmark {
        Benchmark::LqFull => {
            (lq.spec(FiltrationSpec::Full), 128, 16384, 2024, 0.5, 200, 1e-3)
        }
        Benchmark::LqDelayed => (
            lq.spec(FiltrationSpec::Delayed { delay: 0.25 * lq.horizon }),
            128,
            16384,
            2024,
            0.5,
            200,
            1e-3,
        ),
        Benchmark::PureForward => (lq.spec(FiltrationSpec::Full), 64, 4096, 77, 0.5, 50, 1e-4),
        Benchmark::NoJump => (no_jump_pair().0, 64, 4096, 99, 0.1, 50, 1e-4),
        Benchmark::NonlinearCoupled => {
            (nonlinear_coupled_spec(), 64, 16384, 4242, 0.1, 50, 1e-4)
        }
        Benchmark::Diverging => (diverging_spec(), 40, 256, 7, 0.1, 10, 1e-4),
    };
    Fixture { benchmark, spec, steps, paths, seed, step_size, max_iterations, tolerance }
}

/// Shared diffusion data of the no-jump pair.
fn diffusion_only_model(marks: MarkSpace) -> AffineModel {
    let dims = Dimensions { n: 1, m: 1, d: 1, k: 1 };
    let mut model = AffineModel::zeros(dims, marks);
    model.drift.x_mat[(0, 0)] = -0.3;
    model.drift.y_mat[(0, 0)] = 0.2;
    model.drift.v_mat[(0, 0)] = 1.0;
    model.diffusion.constant[0] = 0.4;
    model.diffusion.x_mat[(0, 0)] = 0.1;
    model.driver.x_mat[(0, 0)] = 0.25;
    model.driver.y_mat[(0, 0)] = -0.2;
    model.driver.z_mat[(0, 0)] = 0.1;
    model.driver.v_mat[(0, 0)] = 0.5;
    model.cost.qx[0] = 1.0;
    model.cost.qv[0] = 1.0;
    model.cost.qz[0] = 0.2;
    model.cost.q_phi[0] = 1.0;
    model.cost.q_h[0] = 0.4;
    model.nonlin_scale = 0.3;
    model
}

/// The no-jump fixture and its inert-mark twin. The twin carries one mark of
/// weight 1 whose jump loading, r couplings and terminal count loading are
/// all zero, so the jump machinery runs (Poisson draws, compensators, r
/// regressions) without feeding back into x, y or z. Brownian and Poisson
/// draws live on disjoint rng channels, which makes the x, y, z tables and
/// the cost of the two runs bit-identical; the comparison is the code-path
/// equivalence check behind the mark-free reduction.
pub fn no_jump_pair() -> (ProblemSpec, ProblemSpec) {
    let dims = Dimensions { n: 1, m: 1, d: 1, k: 1 };
    let build = |marks: MarkSpace| {
        let model = diffusion_only_model(marks.clone());
        ProblemSpec {
            dims,
            horizon: 1.0,
            initial: DVector::from_element(1, 0.5),
            marks: marks.clone(),
            control_set: ControlSet::Box { lower: vec![-5.0], upper: vec![5.0] },
            filtration: FiltrationSpec::Full,
            terminal: TerminalSpec::Driver(DriverTerminal {
                constant: DVector::from_element(1, 0.1),
                brownian: DMatrix::from_element(1, 1, 0.2),
                counts: DMatrix::zeros(1, marks.len()),
                squash: 1.0,
            }),
            coefficients: Arc::new(model),
        }
    };
    let plain = build(MarkSpace::none());
    let inert = build(MarkSpace::new(vec![1.0], vec![1.0]).expect("positive weight"));
    (plain, inert)
}

/// Fully coupled scalar model: every coefficient depends on every argument,
/// the dynamics carry the bounded smooth nonlinearity at scale 0.5, and the
/// terminal condition is a squashed functional of the driving noise.
pub fn nonlinear_coupled_spec() -> ProblemSpec {
    let dims = Dimensions { n: 1, m: 1, d: 1, k: 1 };
    let marks = MarkSpace::new(vec![0.5], vec![1.0]).expect("positive weight");
    let mut model = AffineModel::zeros(dims, marks.clone());
    model.drift.x_mat[(0, 0)] = -0.3;
    model.drift.y_mat[(0, 0)] = 0.2;
    model.drift.v_mat[(0, 0)] = 1.0;
    model.diffusion.constant[0] = 0.4;
    model.diffusion.x_mat[(0, 0)] = 0.1;
    model.jump.constant[0] = 0.2;
    model.jump.x_mat[(0, 0)] = 0.1;
    model.driver.x_mat[(0, 0)] = 0.25;
    model.driver.y_mat[(0, 0)] = -0.2;
    model.driver.z_mat[(0, 0)] = 0.1;
    model.driver.r_mat[0][(0, 0)] = 0.15;
    model.driver.v_mat[(0, 0)] = 0.5;
    model.cost.qx[0] = 1.0;
    model.cost.qv[0] = 1.0;
    model.cost.qz[0] = 0.2;
    model.cost.qr[0] = 0.2;
    model.cost.q_phi[0] = 1.0;
    model.cost.q_h[0] = 0.4;
    model.nonlin_scale = 0.5;
    ProblemSpec {
        dims,
        horizon: 1.0,
        initial: DVector::from_element(1, 0.5),
        marks: marks.clone(),
        control_set: ControlSet::Box { lower: vec![-5.0], upper: vec![5.0] },
        filtration: FiltrationSpec::Full,
        terminal: TerminalSpec::Driver(DriverTerminal {
            constant: DVector::from_element(1, 0.1),
            brownian: DMatrix::from_element(1, 1, 0.2),
            counts: DMatrix::from_element(1, 1, 0.15),
            squash: 1.0,
        }),
        coefficients: Arc::new(model),
    }
}

/// Coupling gain far beyond the Picard contraction threshold over a long
/// horizon; the solver is expected to report divergence, not an answer.
fn diverging_spec() -> ProblemSpec {
    let dims = Dimensions { n: 1, m: 1, d: 1, k: 1 };
    let marks = MarkSpace::none();
    let mut model = AffineModel::zeros(dims, marks.clone());
    model.drift.y_mat[(0, 0)] = 10.0;
    model.diffusion.constant[0] = 0.2;
    model.driver.x_mat[(0, 0)] = 10.0;
    model.cost.qx[0] = 1.0;
    model.cost.qv[0] = 1.0;
    ProblemSpec {
        dims,
        horizon: 5.0,
        initial: DVector::from_element(1, 1.0),
        marks: marks.clone(),
        control_set: ControlSet::Box { lower: vec![-5.0], upper: vec![5.0] },
        filtration: FiltrationSpec::Full,
        terminal: TerminalSpec::zero(&dims, &marks),
        coefficients: Arc::new(model),
    }
}
