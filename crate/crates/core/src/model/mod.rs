//! Problem description: dimensions, mark space, control set, observation
//! filtration, terminal condition, and the coefficient functions of the
//! controlled forward-backward system
//!
//! ```text
//!   dx =  b(t, x, y, z, r, v) dt + g(t, x, y, z, r, v) dB
//!         + integral of sigma(t, x, y, z, r(e), v, e) over the compensated
//!           jump measure,                              x(0) = a,
//!   dy = -f(t, x, y, z, r, v) dt + z dB
//!         + integral of r(e) over the compensated jump measure, y(T) = xi,
//! ```
//!
//! with cost `J(v) = E[ integral of l dt + phi(x_T) + h(y_0) ]`. The mark
//! space is a finite set of atoms `e_j` with intensities `pi_j`, so jump
//! integrals are finite sums weighted by `pi_j` and the compensated measure
//! has increments `dN_j - pi_j dt`.

mod affine;
mod check;
mod coeffs;

pub use affine::{AffineMap, AffineModel, QuadraticCost};
pub use check::{
    check_derivatives, DerivativeCheck, DerivativeReport, DEFAULT_DERIV_TOL, DEFAULT_FD_STEP,
    DERIV_ABS_FLOOR,
};
pub use coeffs::{CoeffArgs, CoeffId, CoefficientSet, VarId};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scenario::TimeGrid;

/// State-space sizes: forward n, backward m, Brownian d, control k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dimensions {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub k: usize,
}

/// Finite mark space of the jump measure: atoms e_j with intensity weights
/// pi_j > 0. The total rate lambda = sum pi_j is finite by construction.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarkSpace {
    pub atoms: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MarkSpace {
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let space = MarkSpace { atoms, weights };
        if space.atoms.len() != space.weights.len() {
            return Err(Error::Invalid("mark atoms and weights differ in length".into()));
        }
        if let Some(j) = space.weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Invalid(format!(
                "mark {j} has non-positive weight {}",
                space.weights[j]
            )));
        }
        Ok(space)
    }

    /// Empty mark space: a pure diffusion model.
    pub fn none() -> Self {
        MarkSpace { atoms: Vec::new(), weights: Vec::new() }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Total jump intensity lambda.
    pub fn lambda(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Admissible control region U.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSet {
    /// Coordinate box [lower_i, upper_i].
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Euclidean ball around a center.
    Ball { center: Vec<f64>, radius: f64 },
    /// Probability simplex { v >= 0, sum v = 1 }.
    Simplex { dim: usize },
}

impl ControlSet {
    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::Ball { center, .. } => center.len(),
            ControlSet::Simplex { dim } => *dim,
        }
    }

    /// Euclidean projection onto the set. Idempotent and non-expansive.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            ControlSet::Box { lower, upper } => DVector::from_fn(v.len(), |i, _| {
                v[i].clamp(lower[i], upper[i])
            }),
            ControlSet::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                let offset = v - &c;
                let norm = offset.norm();
                if norm <= *radius {
                    v.clone()
                } else {
                    c + offset * (*radius / norm)
                }
            }
            ControlSet::Simplex { .. } => project_simplex(v),
        }
    }

    /// Membership test with an absolute slack.
    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        match self {
            ControlSet::Box { lower, upper } => (0..v.len())
                .all(|i| v[i] >= lower[i] - tol && v[i] <= upper[i] + tol),
            ControlSet::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                (v - c).norm() <= radius + tol
            }
            ControlSet::Simplex { .. } => {
                v.iter().all(|&w| w >= -tol) && (v.sum() - 1.0).abs() <= tol
            }
        }
    }

    /// Axis-aligned box enclosing the set; used to lay out candidate grids.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            ControlSet::Box { lower, upper } => (lower.clone(), upper.clone()),
            ControlSet::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            ControlSet::Simplex { dim } => (vec![0.0; *dim], vec![1.0; *dim]),
        }
    }
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("non-finite control entry"));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    DVector::from_fn(v.len(), |i, _| (v[i] - tau).max(0.0))
}

/// What the controller observes.
///
/// `Delayed { delay: 0 }` coincides with `Full`; a delay at or beyond the
/// horizon makes every conditional expectation unconditional, which is
/// exactly `Trivial`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FiltrationSpec {
    Full,
    Delayed { delay: f64 },
    Trivial,
}

impl FiltrationSpec {
    /// Grid index whose state the controller may condition on at step i.
    /// `None` means only the trivial sigma-field is available. Index 0 also
    /// degenerates to the trivial case because x_0 is deterministic.
    pub fn lag_index(&self, grid: &TimeGrid, i: usize) -> Option<usize> {
        match self {
            FiltrationSpec::Full => Some(i),
            FiltrationSpec::Trivial => None,
            FiltrationSpec::Delayed { delay } => {
                let lagged = (grid.t(i) - delay).max(0.0);
                // Round down to the grid; the epsilon absorbs fp noise when
                // the delay is an exact multiple of dt.
                let idx = (lagged / grid.dt() + 1e-9).floor() as usize;
                Some(idx.min(i))
            }
        }
    }
}

/// Terminal condition xi of the backward component.
#[derive(Debug, Clone)]
pub enum TerminalSpec {
    /// xi determined by the driving noise alone (control-independent):
    /// componentwise `squash(c + Cb * B_T + Cn * (N_T - pi T))`.
    Driver(DriverTerminal),
    /// xi = squash(C * x_T + c): couples the terminal value to the controlled
    /// state. Outside the scope of the optimality certificates; must be
    /// switched on explicitly.
    State(StateTerminal),
}

#[derive(Debug, Clone)]
pub struct DriverTerminal {
    pub constant: DVector<f64>,
    /// m x d loading on the terminal Brownian value.
    pub brownian: DMatrix<f64>,
    /// m x M loading on the compensated terminal counts.
    pub counts: DMatrix<f64>,
    /// 0 disables; s > 0 applies s*tanh(w/s) componentwise, keeping xi bounded.
    pub squash: f64,
}

#[derive(Debug, Clone)]
pub struct StateTerminal {
    /// m x n loading on x_T.
    pub linear: DMatrix<f64>,
    pub constant: DVector<f64>,
    pub squash: f64,
    /// The caller must acknowledge that this leaves the certified setting.
    pub acknowledged: bool,
}

fn squash(w: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        scale * (w / scale).tanh()
    } else {
        w
    }
}

impl TerminalSpec {
    /// xi ≡ 0: the canonical pure-forward setup.
    pub fn zero(dims: &Dimensions, marks: &MarkSpace) -> Self {
        TerminalSpec::Driver(DriverTerminal {
            constant: DVector::zeros(dims.m),
            brownian: DMatrix::zeros(dims.m, dims.d),
            counts: DMatrix::zeros(dims.m, marks.len()),
            squash: 0.0,
        })
    }

    /// Evaluates xi on one path given the terminal noise summaries and x_T.
    pub fn evaluate(
        &self,
        horizon: f64,
        marks: &MarkSpace,
        brownian_total: &[f64],
        counts_total: &[u64],
        x_terminal: &DVector<f64>,
    ) -> DVector<f64> {
        match self {
            TerminalSpec::Driver(d) => {
                let mut w = d.constant.clone();
                for row in 0..w.len() {
                    for (c, &b) in brownian_total.iter().enumerate() {
                        w[row] += d.brownian[(row, c)] * b;
                    }
                    for (j, &count) in counts_total.iter().enumerate() {
                        let compensated = count as f64 - marks.weights[j] * horizon;
                        w[row] += d.counts[(row, j)] * compensated;
                    }
                }
                w.map(|e| squash(e, d.squash))
            }
            TerminalSpec::State(s) => {
                let w = &s.linear * x_terminal + &s.constant;
                w.map(|e| squash(e, s.squash))
            }
        }
    }
}

/// One validation finding, keyed by where in the specification it sits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

/// Complete problem description. Coefficients are shared behind an `Arc` so
/// a spec can be cloned cheaply into solver workers.
#[derive(Clone)]
pub struct ProblemSpec {
    pub dims: Dimensions,
    pub horizon: f64,
    pub initial: DVector<f64>,
    pub marks: MarkSpace,
    pub control_set: ControlSet,
    pub filtration: FiltrationSpec,
    pub terminal: TerminalSpec,
    pub coefficients: Arc<dyn CoefficientSet>,
}

impl ProblemSpec {
    /// Output length of a coefficient, flattened row-major.
    pub fn coeff_rows(&self, id: CoeffId) -> usize {
        let Dimensions { n, m, d, .. } = self.dims;
        match id {
            CoeffId::Drift => n,
            CoeffId::Diffusion => n * d,
            CoeffId::Jump(_) => n,
            CoeffId::Driver => m,
            CoeffId::RunningCost => 1,
        }
    }

    /// Length of one argument block, flattened row-major.
    pub fn var_cols(&self, var: VarId) -> usize {
        let Dimensions { n, m, d, k } = self.dims;
        match var {
            VarId::X => n,
            VarId::Y => m,
            VarId::Z => m * d,
            VarId::R(_) => m,
            VarId::V => k,
        }
    }

    /// All coefficients of this problem, jumps expanded per mark.
    pub fn all_coeffs(&self) -> Vec<CoeffId> {
        let mut ids = vec![CoeffId::Drift, CoeffId::Diffusion];
        for j in 0..self.marks.len() {
            ids.push(CoeffId::Jump(j));
        }
        ids.push(CoeffId::Driver);
        ids.push(CoeffId::RunningCost);
        ids
    }

    /// All argument blocks, r expanded per mark.
    pub fn all_vars(&self) -> Vec<VarId> {
        let mut vars = vec![VarId::X, VarId::Y, VarId::Z];
        for j in 0..self.marks.len() {
            vars.push(VarId::R(j));
        }
        vars.push(VarId::V);
        vars
    }

    /// Structural and numerical sanity of the description. Returns every
    /// finding instead of stopping at the first.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut flag = |location: &str, message: String| {
            out.push(Violation { location: location.into(), message });
        };

        let Dimensions { n, m, d, k } = self.dims;
        let mut dims_ok = true;
        for (name, value) in [("n", n), ("m", m), ("d", d), ("k", k)] {
            if value == 0 {
                flag("dims", format!("dimension {name} must be at least 1"));
                dims_ok = false;
            }
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            flag("horizon", format!("must be positive and finite, got {}", self.horizon));
        }
        if self.initial.len() != n {
            flag("initial", format!("length {} does not match n = {n}", self.initial.len()));
        }
        if self.initial.iter().any(|a| !a.is_finite()) {
            flag("initial", "contains non-finite entries".into());
        }

        if self.marks.atoms.len() != self.marks.weights.len() {
            flag("marks", "atoms and weights differ in length".into());
        }
        for (j, &w) in self.marks.weights.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                flag("marks", format!("weight {j} must be positive and finite, got {w}"));
            }
        }
        for (j, &a) in self.marks.atoms.iter().enumerate() {
            if !a.is_finite() {
                flag("marks", format!("atom {j} is non-finite"));
            }
        }

        match &self.control_set {
            ControlSet::Box { lower, upper } => {
                if lower.len() != k || upper.len() != k {
                    flag("control_set", format!("box bounds must have length k = {k}"));
                } else {
                    for i in 0..k {
                        if !(lower[i] <= upper[i]) {
                            flag(
                                "control_set",
                                format!("box is empty on axis {i}: [{}, {}]", lower[i], upper[i]),
                            );
                        }
                    }
                }
            }
            ControlSet::Ball { center, radius } => {
                if center.len() != k {
                    flag("control_set", format!("ball center must have length k = {k}"));
                }
                if !(*radius > 0.0) || !radius.is_finite() {
                    flag("control_set", format!("ball radius must be positive, got {radius}"));
                }
            }
            ControlSet::Simplex { dim } => {
                if *dim != k {
                    flag("control_set", format!("simplex dim {dim} does not match k = {k}"));
                }
            }
        }

        if let FiltrationSpec::Delayed { delay } = self.filtration {
            if !(delay >= 0.0) || !delay.is_finite() {
                flag("filtration", format!("delay must be non-negative, got {delay}"));
            }
        }

        match &self.terminal {
            TerminalSpec::Driver(t) => {
                if t.constant.len() != m {
                    flag("terminal", format!("constant must have length m = {m}"));
                }
                if t.brownian.shape() != (m, d) {
                    flag("terminal", format!("brownian loading must be {m}x{d}"));
                }
                if t.counts.shape() != (m, self.marks.len()) {
                    flag("terminal", format!("count loading must be {m}x{}", self.marks.len()));
                }
                if !(t.squash >= 0.0) {
                    flag("terminal", "squash scale must be non-negative".into());
                }
            }
            TerminalSpec::State(t) => {
                if !t.acknowledged {
                    flag(
                        "terminal",
                        "state-dependent terminal condition requires explicit acknowledgement"
                            .into(),
                    );
                }
                if t.linear.shape() != (m, n) {
                    flag("terminal", format!("state loading must be {m}x{n}"));
                }
                if t.constant.len() != m {
                    flag("terminal", format!("constant must have length m = {m}"));
                }
            }
        }

        // Probe the coefficient functions at the origin and at a fixed
        // pseudorandom point; report wrong shapes or non-finite output.
        if dims_ok {
            for args in [self.probe_args(0.0), self.probe_args(1.0)] {
                for id in self.all_coeffs() {
                    let value = self.coefficients.value(id, &args.borrow());
                    if value.len() != self.coeff_rows(id) {
                        flag(
                            "coefficients",
                            format!(
                                "{id:?} returned length {}, expected {}",
                                value.len(),
                                self.coeff_rows(id)
                            ),
                        );
                    } else if value.iter().any(|e| !e.is_finite()) {
                        flag("coefficients", format!("{id:?} non-finite at probe point"));
                    }
                    for var in self.all_vars() {
                        let jac = self.coefficients.jacobian(id, var, &args.borrow());
                        let expect = (self.coeff_rows(id), self.var_cols(var));
                        if jac.shape() != expect {
                            flag(
                                "coefficients",
                                format!(
                                    "{id:?} jacobian wrt {var:?} is {:?}, expected {expect:?}",
                                    jac.shape()
                                ),
                            );
                        } else if jac.iter().any(|e| !e.is_finite()) {
                            flag(
                                "coefficients",
                                format!("{id:?} jacobian wrt {var:?} non-finite at probe point"),
                            );
                        }
                    }
                }
                let x = &args.x;
                let y = &args.y;
                for (name, ok) in [
                    ("phi", self.coefficients.terminal_cost(x).is_finite()),
                    ("phi gradient", {
                        let g = self.coefficients.terminal_cost_grad(x);
                        g.len() == n && g.iter().all(|e| e.is_finite())
                    }),
                    ("h", self.coefficients.initial_cost(y).is_finite()),
                    ("h gradient", {
                        let g = self.coefficients.initial_cost_grad(y);
                        g.len() == m && g.iter().all(|e| e.is_finite())
                    }),
                ] {
                    if !ok {
                        flag("coefficients", format!("{name} wrong shape or non-finite"));
                    }
                }
            }
        }

        out
    }

    /// Deterministic probe point used by validation; `spread` 0 gives the
    /// origin, 1 a fixed pseudorandom point in [-1, 1] per component.
    fn probe_args(&self, spread: f64) -> OwnedArgs {
        let Dimensions { n, m, d, k } = self.dims;
        let mm = self.marks.len();
        let mut rng = crate::rng::stream(0x5045_4cee, 0, 0, 0);
        let mut draw = |len: usize| {
            DVector::from_fn(len, |_, _| spread * rng.uniform_in(-1.0, 1.0))
        };
        OwnedArgs {
            t: 0.5 * spread * self.horizon,
            x: draw(n),
            y: draw(m),
            z: {
                let flat = draw(m * d);
                DMatrix::from_fn(m, d, |row, col| flat[row * d + col])
            },
            r: (0..mm).map(|_| draw(m)).collect(),
            v: draw(k),
        }
    }
}

/// Owned argument bundle; borrows into a [`CoeffArgs`].
pub struct OwnedArgs {
    pub t: f64,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DMatrix<f64>,
    pub r: Vec<DVector<f64>>,
    pub v: DVector<f64>,
}

impl OwnedArgs {
    pub fn zeros(dims: &Dimensions, mark_count: usize) -> Self {
        OwnedArgs {
            t: 0.0,
            x: DVector::zeros(dims.n),
            y: DVector::zeros(dims.m),
            z: DMatrix::zeros(dims.m, dims.d),
            r: (0..mark_count).map(|_| DVector::zeros(dims.m)).collect(),
            v: DVector::zeros(dims.k),
        }
    }

    pub fn borrow(&self) -> CoeffArgs<'_> {
        CoeffArgs {
            t: self.t,
            x: &self.x,
            y: &self.y,
            z: &self.z,
            r: &self.r,
            v: &self.v,
        }
    }
}

/// Flattens a matrix row-major; the crate-wide layout for z and g blocks.
pub fn flatten_row_major(mat: &DMatrix<f64>) -> DVector<f64> {
    let (rows, cols) = mat.shape();
    DVector::from_fn(rows * cols, |i, _| mat[(i / cols, i % cols)])
}

/// Inverse of [`flatten_row_major`].
pub fn unflatten_row_major(flat: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |row, col| flat[row * cols + col])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mark_space_validation() {
        assert!(MarkSpace::new(vec![1.0, -0.5], vec![0.4, 0.6]).is_ok());
        assert!(MarkSpace::new(vec![1.0], vec![0.0]).is_err());
        assert!(MarkSpace::new(vec![1.0], vec![-1.0]).is_err());
        assert!(MarkSpace::new(vec![1.0, 2.0], vec![1.0]).is_err());
        let space = MarkSpace::new(vec![1.0, 2.0], vec![0.25, 0.5]).unwrap();
        assert_eq!(space.lambda(), 0.75);
        assert!(MarkSpace::none().is_empty());
    }

    #[test]
    fn box_projection_clamps_componentwise() {
        let set = ControlSet::Box { lower: vec![-1.0, 0.0], upper: vec![1.0, 2.0] };
        let v = DVector::from_column_slice(&[3.0, -0.5]);
        let w = set.project(&v);
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
        assert!(set.contains(&w, 0.0));
        // Interior points are untouched.
        let inside = DVector::from_column_slice(&[0.3, 1.9]);
        assert_eq!(set.project(&inside), inside);
    }

    #[test]
    fn ball_projection_scales_back_to_the_sphere() {
        let set = ControlSet::Ball { center: vec![1.0, 0.0], radius: 2.0 };
        let v = DVector::from_column_slice(&[5.0, 0.0]);
        let w = set.project(&v);
        assert!((w[0] - 3.0).abs() < 1e-15);
        assert!(w[1].abs() < 1e-15);
        let inside = DVector::from_column_slice(&[0.5, 0.5]);
        assert_eq!(set.project(&inside), inside);
    }

    #[test]
    fn simplex_projection_matches_hand_computed_case() {
        let set = ControlSet::Simplex { dim: 2 };
        let w = set.project(&DVector::from_column_slice(&[0.6, 0.6]));
        assert!((w[0] - 0.5).abs() < 1e-15);
        assert!((w[1] - 0.5).abs() < 1e-15);
        // A vertex-dominant point projects onto the vertex.
        let w = set.project(&DVector::from_column_slice(&[2.0, -1.0]));
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert_eq!(w[1], 0.0);
        assert!(set.contains(&w, 1e-12));
    }

    #[test]
    fn lag_index_per_filtration() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        assert_eq!(FiltrationSpec::Full.lag_index(&grid, 5), Some(5));
        assert_eq!(FiltrationSpec::Trivial.lag_index(&grid, 5), None);
        let delayed = FiltrationSpec::Delayed { delay: 0.25 };
        // t_5 = 0.625, lagged 0.375 -> index 3.
        assert_eq!(delayed.lag_index(&grid, 5), Some(3));
        assert_eq!(delayed.lag_index(&grid, 1), Some(0));
        // Delay at the horizon pins everything to the deterministic start.
        let frozen = FiltrationSpec::Delayed { delay: 1.0 };
        assert_eq!(frozen.lag_index(&grid, 8), Some(0));
        // Zero delay matches full information.
        let zero = FiltrationSpec::Delayed { delay: 0.0 };
        assert_eq!(zero.lag_index(&grid, 5), Some(5));
    }

    #[test]
    fn terminal_driver_evaluation() {
        let dims = Dimensions { n: 1, m: 2, d: 1, k: 1 };
        let marks = MarkSpace::new(vec![1.0], vec![0.5]).unwrap();
        let spec = TerminalSpec::Driver(DriverTerminal {
            constant: DVector::from_column_slice(&[0.1, 0.0]),
            brownian: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            counts: DMatrix::from_row_slice(2, 1, &[0.0, 2.0]),
            squash: 0.0,
        });
        let xi = spec.evaluate(2.0, &marks, &[0.7], &[3], &DVector::zeros(dims.n));
        // Row 0: 0.1 + 0.7. Row 1: 2 * (3 - 0.5 * 2).
        assert!((xi[0] - 0.8).abs() < 1e-15);
        assert!((xi[1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn squash_keeps_terminal_bounded() {
        let w = squash(50.0, 2.0);
        assert!(w <= 2.0 && w > 1.99);
        assert_eq!(squash(0.3, 0.0), 0.3);
    }

    #[test]
    fn flatten_roundtrip() {
        let mat = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let flat = flatten_row_major(&mat);
        assert_eq!(flat.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unflatten_row_major(flat.as_slice(), 2, 3), mat);
    }
}
