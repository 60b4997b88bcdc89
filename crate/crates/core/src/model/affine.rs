//! Builtin coefficient family: affine dynamics with an optional bounded
//! smooth nonlinearity, and diagonal-quadratic costs.
//!
//! Each dynamics coefficient is `wrap(A(t,x,y,z,r,v))` componentwise, where
//! `A` is affine and `wrap(w) = w + scale * w / (1 + w^2)`. With scale 0 the
//! family is exactly affine; the added term is globally bounded by scale/2
//! and has bounded derivatives, so Lipschitz constants stay controlled.
//! The jump loading for mark j is the shared core scaled by the atom value:
//! `sigma(.., e_j) = e_j * wrap(A_sigma(..))`.

use nalgebra::{DMatrix, DVector};

use super::coeffs::{CoeffArgs, CoeffId, CoefficientSet, VarId};
use super::{Dimensions, MarkSpace};
use crate::error::{Error, Result};

/// Affine map of the full argument bundle.
///
/// `value = constant + x_mat*x + y_mat*y + z_mat*vec(z) + sum_j pi_j * r_mat[j]*r_j
///          + v_mat*v`.
///
/// The r coupling is written through the pi-weighted pairing, so `r_mat[j]`
/// is literally the derivative kernel reported by
/// [`CoefficientSet::jacobian`] for `VarId::R(j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub constant: DVector<f64>,
    pub x_mat: DMatrix<f64>,
    pub y_mat: DMatrix<f64>,
    pub z_mat: DMatrix<f64>,
    pub r_mat: Vec<DMatrix<f64>>,
    pub v_mat: DMatrix<f64>,
}

impl AffineMap {
    pub fn zeros(rows: usize, dims: &Dimensions, mark_count: usize) -> Self {
        AffineMap {
            constant: DVector::zeros(rows),
            x_mat: DMatrix::zeros(rows, dims.n),
            y_mat: DMatrix::zeros(rows, dims.m),
            z_mat: DMatrix::zeros(rows, dims.m * dims.d),
            r_mat: (0..mark_count).map(|_| DMatrix::zeros(rows, dims.m)).collect(),
            v_mat: DMatrix::zeros(rows, dims.k),
        }
    }

    pub fn rows(&self) -> usize {
        self.constant.len()
    }

    fn check(&self, name: &str, rows: usize, dims: &Dimensions, mark_count: usize) -> Result<()> {
        let expect = [
            ("constant", self.constant.len() == rows),
            ("x", self.x_mat.shape() == (rows, dims.n)),
            ("y", self.y_mat.shape() == (rows, dims.m)),
            ("z", self.z_mat.shape() == (rows, dims.m * dims.d)),
            ("r", self.r_mat.len() == mark_count
                && self.r_mat.iter().all(|r| r.shape() == (rows, dims.m))),
            ("v", self.v_mat.shape() == (rows, dims.k)),
        ];
        for (block, ok) in expect {
            if !ok {
                return Err(Error::Shape(format!("{name}: {block} block has wrong shape")));
            }
        }
        Ok(())
    }

    fn eval(&self, args: &CoeffArgs, weights: &[f64]) -> DVector<f64> {
        let mut out = self.constant.clone();
        out.gemv(1.0, &self.x_mat, args.x, 1.0);
        out.gemv(1.0, &self.y_mat, args.y, 1.0);
        // vec(z) row-major.
        let (zr, zc) = args.z.shape();
        for row in 0..self.rows() {
            let mut acc = 0.0;
            for a in 0..zr {
                for b in 0..zc {
                    acc += self.z_mat[(row, a * zc + b)] * args.z[(a, b)];
                }
            }
            out[row] += acc;
        }
        for (j, rj) in args.r.iter().enumerate() {
            out.gemv(weights[j], &self.r_mat[j], rj, 1.0);
        }
        out.gemv(1.0, &self.v_mat, args.v, 1.0);
        out
    }

    fn block(&self, var: VarId) -> &DMatrix<f64> {
        match var {
            VarId::X => &self.x_mat,
            VarId::Y => &self.y_mat,
            VarId::Z => &self.z_mat,
            VarId::R(j) => &self.r_mat[j],
            VarId::V => &self.v_mat,
        }
    }
}

/// Diagonal-quadratic running, terminal and initial costs:
///
/// `l = 0.5*(x'diag(qx)x + y'diag(qy)y + vec(z)'diag(qz)vec(z)
///          + sum_j pi_j r_j'diag(qr)r_j + v'diag(qv)v) + lx.x + ly.y + lv.v + c`
/// `phi = 0.5 x'diag(q_phi)x + p_phi.x + c_phi`
/// `h   = 0.5 y'diag(q_h)y + p_h.y + c_h`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub qx: DVector<f64>,
    pub qy: DVector<f64>,
    pub qz: DVector<f64>,
    pub qr: DVector<f64>,
    pub qv: DVector<f64>,
    pub lx: DVector<f64>,
    pub ly: DVector<f64>,
    pub lv: DVector<f64>,
    pub constant: f64,
    pub q_phi: DVector<f64>,
    pub p_phi: DVector<f64>,
    pub c_phi: f64,
    pub q_h: DVector<f64>,
    pub p_h: DVector<f64>,
    pub c_h: f64,
}

impl QuadraticCost {
    pub fn zeros(dims: &Dimensions) -> Self {
        QuadraticCost {
            qx: DVector::zeros(dims.n),
            qy: DVector::zeros(dims.m),
            qz: DVector::zeros(dims.m * dims.d),
            qr: DVector::zeros(dims.m),
            qv: DVector::zeros(dims.k),
            lx: DVector::zeros(dims.n),
            ly: DVector::zeros(dims.m),
            lv: DVector::zeros(dims.k),
            constant: 0.0,
            q_phi: DVector::zeros(dims.n),
            p_phi: DVector::zeros(dims.n),
            c_phi: 0.0,
            q_h: DVector::zeros(dims.m),
            p_h: DVector::zeros(dims.m),
            c_h: 0.0,
        }
    }

    fn check(&self, dims: &Dimensions) -> Result<()> {
        let expect = [
            ("qx", self.qx.len() == dims.n),
            ("qy", self.qy.len() == dims.m),
            ("qz", self.qz.len() == dims.m * dims.d),
            ("qr", self.qr.len() == dims.m),
            ("qv", self.qv.len() == dims.k),
            ("lx", self.lx.len() == dims.n),
            ("ly", self.ly.len() == dims.m),
            ("lv", self.lv.len() == dims.k),
            ("q_phi", self.q_phi.len() == dims.n),
            ("p_phi", self.p_phi.len() == dims.n),
            ("q_h", self.q_h.len() == dims.m),
            ("p_h", self.p_h.len() == dims.m),
        ];
        for (block, ok) in expect {
            if !ok {
                return Err(Error::Shape(format!("cost: {block} has wrong length")));
            }
        }
        Ok(())
    }
}

/// The bounded smooth perturbation s(w) = w / (1 + w^2).
#[inline]
fn bump(w: f64) -> f64 {
    w / (1.0 + w * w)
}

#[inline]
fn bump_prime(w: f64) -> f64 {
    let denom = 1.0 + w * w;
    (1.0 - w * w) / (denom * denom)
}

/// Parametric model: affine dynamics wrapped with the bounded nonlinearity,
/// diagonal-quadratic costs. Carries its own copy of the mark space because
/// the r pairing and jump scaling need the weights and atoms.
#[derive(Debug, Clone)]
pub struct AffineModel {
    pub dims: Dimensions,
    pub marks: MarkSpace,
    pub drift: AffineMap,
    pub diffusion: AffineMap,
    pub jump: AffineMap,
    pub driver: AffineMap,
    pub nonlin_scale: f64,
    pub cost: QuadraticCost,
}

impl AffineModel {
    /// All-zero model of the given shape; populate fields from here.
    pub fn zeros(dims: Dimensions, marks: MarkSpace) -> Self {
        let mm = marks.len();
        AffineModel {
            drift: AffineMap::zeros(dims.n, &dims, mm),
            diffusion: AffineMap::zeros(dims.n * dims.d, &dims, mm),
            jump: AffineMap::zeros(dims.n, &dims, mm),
            driver: AffineMap::zeros(dims.m, &dims, mm),
            nonlin_scale: 0.0,
            cost: QuadraticCost::zeros(&dims),
            dims,
            marks,
        }
    }

    /// Shape consistency of every block.
    pub fn check_shapes(&self) -> Result<()> {
        let mm = self.marks.len();
        self.drift.check("drift", self.dims.n, &self.dims, mm)?;
        self.diffusion.check("diffusion", self.dims.n * self.dims.d, &self.dims, mm)?;
        self.jump.check("jump", self.dims.n, &self.dims, mm)?;
        self.driver.check("driver", self.dims.m, &self.dims, mm)?;
        self.cost.check(&self.dims)?;
        if !self.nonlin_scale.is_finite() {
            return Err(Error::Invalid("nonlinearity scale must be finite".into()));
        }
        Ok(())
    }

    fn map_of(&self, id: CoeffId) -> &AffineMap {
        match id {
            CoeffId::Drift => &self.drift,
            CoeffId::Diffusion => &self.diffusion,
            CoeffId::Jump(_) => &self.jump,
            CoeffId::Driver => &self.driver,
            CoeffId::RunningCost => unreachable!("cost handled separately"),
        }
    }

    /// wrap(w) componentwise, and the atom scale for jump coefficients.
    fn wrap_scale(&self, id: CoeffId) -> f64 {
        match id {
            CoeffId::Jump(j) => self.marks.atoms[j],
            _ => 1.0,
        }
    }

    fn running_cost(&self, args: &CoeffArgs) -> f64 {
        let c = &self.cost;
        let mut acc = c.constant;
        for i in 0..args.x.len() {
            acc += 0.5 * c.qx[i] * args.x[i] * args.x[i] + c.lx[i] * args.x[i];
        }
        for i in 0..args.y.len() {
            acc += 0.5 * c.qy[i] * args.y[i] * args.y[i] + c.ly[i] * args.y[i];
        }
        let (zr, zc) = args.z.shape();
        for a in 0..zr {
            for b in 0..zc {
                let w = args.z[(a, b)];
                acc += 0.5 * c.qz[a * zc + b] * w * w;
            }
        }
        for (j, rj) in args.r.iter().enumerate() {
            let pi = self.marks.weights[j];
            for i in 0..rj.len() {
                acc += 0.5 * pi * c.qr[i] * rj[i] * rj[i];
            }
        }
        for i in 0..args.v.len() {
            acc += 0.5 * c.qv[i] * args.v[i] * args.v[i] + c.lv[i] * args.v[i];
        }
        acc
    }

    fn running_cost_grad(&self, var: VarId, args: &CoeffArgs) -> DMatrix<f64> {
        let c = &self.cost;
        match var {
            VarId::X => DMatrix::from_fn(1, args.x.len(), |_, i| c.qx[i] * args.x[i] + c.lx[i]),
            VarId::Y => DMatrix::from_fn(1, args.y.len(), |_, i| c.qy[i] * args.y[i] + c.ly[i]),
            VarId::Z => {
                let (zr, zc) = args.z.shape();
                DMatrix::from_fn(1, zr * zc, |_, i| c.qz[i] * args.z[(i / zc, i % zc)])
            }
            // Kernel of the pi-weighted pairing: the weight stays outside.
            VarId::R(j) => DMatrix::from_fn(1, args.r[j].len(), |_, i| c.qr[i] * args.r[j][i]),
            VarId::V => DMatrix::from_fn(1, args.v.len(), |_, i| c.qv[i] * args.v[i] + c.lv[i]),
        }
    }
}

impl CoefficientSet for AffineModel {
    fn value(&self, id: CoeffId, args: &CoeffArgs) -> DVector<f64> {
        if id == CoeffId::RunningCost {
            return DVector::from_element(1, self.running_cost(args));
        }
        let core = self.map_of(id).eval(args, &self.marks.weights);
        let scale = self.wrap_scale(id);
        if self.nonlin_scale == 0.0 {
            core * scale
        } else {
            core.map(|w| scale * (w + self.nonlin_scale * bump(w)))
        }
    }

    fn jacobian(&self, id: CoeffId, var: VarId, args: &CoeffArgs) -> DMatrix<f64> {
        if id == CoeffId::RunningCost {
            return self.running_cost_grad(var, args);
        }
        let map = self.map_of(id);
        let block = map.block(var);
        let scale = self.wrap_scale(id);
        if self.nonlin_scale == 0.0 {
            return block * scale;
        }
        // Chain rule through wrap: rows scale by (1 + s * bump'(w_row)).
        let core = map.eval(args, &self.marks.weights);
        let mut jac = block.clone();
        for row in 0..jac.nrows() {
            let factor = scale * (1.0 + self.nonlin_scale * bump_prime(core[row]));
            for col in 0..jac.ncols() {
                jac[(row, col)] *= factor;
            }
        }
        jac
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        let c = &self.cost;
        let mut acc = c.c_phi;
        for i in 0..x.len() {
            acc += 0.5 * c.q_phi[i] * x[i] * x[i] + c.p_phi[i] * x[i];
        }
        acc
    }

    fn terminal_cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let c = &self.cost;
        DVector::from_fn(x.len(), |i, _| c.q_phi[i] * x[i] + c.p_phi[i])
    }

    fn initial_cost(&self, y: &DVector<f64>) -> f64 {
        let c = &self.cost;
        let mut acc = c.c_h;
        for i in 0..y.len() {
            acc += 0.5 * c.q_h[i] * y[i] * y[i] + c.p_h[i] * y[i];
        }
        acc
    }

    fn initial_cost_grad(&self, y: &DVector<f64>) -> DVector<f64> {
        let c = &self.cost;
        DVector::from_fn(y.len(), |i, _| c.q_h[i] * y[i] + c.p_h[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OwnedArgs;

    fn scalar_dims() -> Dimensions {
        Dimensions { n: 1, m: 1, d: 1, k: 1 }
    }

    fn sample_model() -> AffineModel {
        let dims = scalar_dims();
        let marks = MarkSpace::new(vec![2.0], vec![0.5]).unwrap();
        let mut model = AffineModel::zeros(dims, marks);
        model.drift.constant[0] = 0.1;
        model.drift.x_mat[(0, 0)] = 0.2;
        model.drift.y_mat[(0, 0)] = 0.3;
        model.drift.z_mat[(0, 0)] = 0.4;
        model.drift.r_mat[0][(0, 0)] = 0.5;
        model.drift.v_mat[(0, 0)] = 0.6;
        model.jump.constant[0] = 1.0;
        model.jump.x_mat[(0, 0)] = 0.25;
        model.cost.qx[0] = 2.0;
        model.cost.qv[0] = 4.0;
        model.cost.lv[0] = -1.2;
        model.cost.qr[0] = 1.0;
        model.cost.q_phi[0] = 3.0;
        model.cost.p_h[0] = 0.7;
        model
    }

    fn sample_args(dims: &Dimensions) -> OwnedArgs {
        let mut args = OwnedArgs::zeros(dims, 1);
        args.t = 0.3;
        args.x[0] = 1.0;
        args.y[0] = -2.0;
        args.z[(0, 0)] = 0.5;
        args.r[0][0] = 2.0;
        args.v[0] = 3.0;
        args
    }

    #[test]
    fn affine_evaluation_includes_pi_weighted_r_term() {
        let model = sample_model();
        let args = sample_args(&model.dims);
        let b = model.value(CoeffId::Drift, &args.borrow());
        // 0.1 + 0.2*1 - 0.3*2 + 0.4*0.5 + 0.5*0.5*2 + 0.6*3 = 2.2
        assert!((b[0] - 2.2).abs() < 1e-14, "b = {}", b[0]);
    }

    #[test]
    fn jump_value_scales_with_atom() {
        let model = sample_model();
        let args = sample_args(&model.dims);
        let sigma = model.value(CoeffId::Jump(0), &args.borrow());
        // atom 2 * (1 + 0.25 * x)
        assert!((sigma[0] - 2.0 * 1.25).abs() < 1e-14);
        let jac = model.jacobian(CoeffId::Jump(0), VarId::X, &args.borrow());
        assert!((jac[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn running_cost_and_gradients() {
        let model = sample_model();
        let args = sample_args(&model.dims);
        let l = model.value(CoeffId::RunningCost, &args.borrow())[0];
        // 0.5*2*1 + 0.5*0.5*1*4 (pi-weighted r quad) + 0.5*4*9 - 1.2*3 = 16.4
        assert!((l - 16.4).abs() < 1e-12, "l = {l}");
        let dv = model.jacobian(CoeffId::RunningCost, VarId::V, &args.borrow());
        assert!((dv[(0, 0)] - (4.0 * 3.0 - 1.2)).abs() < 1e-14);
        // r kernel: qr * r_j without the pi factor.
        let dr = model.jacobian(CoeffId::RunningCost, VarId::R(0), &args.borrow());
        assert!((dr[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn terminal_and_initial_costs() {
        let model = sample_model();
        let x = DVector::from_column_slice(&[2.0]);
        assert!((model.terminal_cost(&x) - 6.0).abs() < 1e-14);
        assert!((model.terminal_cost_grad(&x)[0] - 6.0).abs() < 1e-14);
        let y = DVector::from_column_slice(&[1.5]);
        assert!((model.initial_cost(&y) - 1.05).abs() < 1e-14);
        assert!((model.initial_cost_grad(&y)[0] - 0.7).abs() < 1e-14);
    }

    #[test]
    fn nonlinearity_is_bounded_and_vanishes_at_scale_zero() {
        let mut model = sample_model();
        let args = sample_args(&model.dims);
        let plain = model.value(CoeffId::Drift, &args.borrow())[0];
        model.nonlin_scale = 0.5;
        let wrapped = model.value(CoeffId::Drift, &args.borrow())[0];
        assert!((wrapped - plain).abs() <= 0.25 + 1e-15);
        assert!((wrapped - (plain + 0.5 * bump(plain))).abs() < 1e-14);
    }

    #[test]
    fn shape_check_catches_mismatched_blocks() {
        let mut model = sample_model();
        assert!(model.check_shapes().is_ok());
        model.drift.x_mat = DMatrix::zeros(2, 2);
        assert!(model.check_shapes().is_err());
    }
}
