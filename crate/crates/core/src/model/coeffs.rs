//! The coefficient-set interface every model implements.

use nalgebra::{DMatrix, DVector};

/// Argument bundle of one coefficient evaluation. `z` is the m x d backward
/// diffusion loading; `r` holds the per-mark backward jump loadings r(e_j),
/// each of length m.
pub struct CoeffArgs<'a> {
    pub t: f64,
    pub x: &'a DVector<f64>,
    pub y: &'a DVector<f64>,
    pub z: &'a DMatrix<f64>,
    pub r: &'a [DVector<f64>],
    pub v: &'a DVector<f64>,
}

/// Which coefficient of the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffId {
    /// Forward drift b, length n.
    Drift,
    /// Forward diffusion g, n x d flattened row-major.
    Diffusion,
    /// Forward jump loading sigma(.., e_j), length n, one per mark.
    Jump(usize),
    /// Backward driver f, length m.
    Driver,
    /// Running cost l, length 1.
    RunningCost,
}

impl CoeffId {
    pub fn label(&self) -> String {
        match self {
            CoeffId::Drift => "b".into(),
            CoeffId::Diffusion => "g".into(),
            CoeffId::Jump(j) => format!("sigma[{j}]"),
            CoeffId::Driver => "f".into(),
            CoeffId::RunningCost => "l".into(),
        }
    }
}

/// Which argument block a derivative is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarId {
    X,
    Y,
    /// Flattened row-major, length m*d.
    Z,
    /// The j-th mark's jump loading, length m.
    R(usize),
    V,
}

impl VarId {
    pub fn label(&self) -> String {
        match self {
            VarId::X => "x".into(),
            VarId::Y => "y".into(),
            VarId::Z => "z".into(),
            VarId::R(j) => format!("r[{j}]"),
            VarId::V => "v".into(),
        }
    }
}

/// Coefficient functions of the controlled system together with their first
/// derivatives and the three cost integrands.
///
/// Derivative convention for the jump argument: `jacobian(id, VarId::R(j), ..)`
/// returns the kernel `K_j` of the pi-weighted pairing, meaning the Gateaux
/// derivative of the coefficient in a direction `(dr_1, .., dr_M)` equals
/// `sum_j pi_j * K_j * dr_j`. A plain partial derivative with respect to the
/// entries of r_j therefore corresponds to `pi_j * K_j`.
pub trait CoefficientSet: Send + Sync {
    /// Coefficient value, flattened row-major for matrix-valued outputs.
    fn value(&self, id: CoeffId, args: &CoeffArgs) -> DVector<f64>;

    /// Jacobian of `value(id, ..)` with respect to one argument block;
    /// rows follow the coefficient layout, columns the block layout.
    fn jacobian(&self, id: CoeffId, var: VarId, args: &CoeffArgs) -> DMatrix<f64>;

    /// Terminal cost phi(x).
    fn terminal_cost(&self, x: &DVector<f64>) -> f64;

    fn terminal_cost_grad(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Initial cost h(y_0).
    fn initial_cost(&self, y: &DVector<f64>) -> f64;

    fn initial_cost_grad(&self, y: &DVector<f64>) -> DVector<f64>;
}
