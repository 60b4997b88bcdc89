//! The Hamiltonian of the control system and its gradients.
//!
//! With multipliers (k, p, q, beta) attached to the backward and forward
//! equations,
//!
//! ```text
//! H(t, x, y, z, r, v; k, p, q, beta) =
//!     <k, -f> + <p, b> + <q, g> + l + sum_j pi_j <beta_j, sigma(.., e_j)>
//! ```
//!
//! where q pairs entrywise with the n x d diffusion and the jump pairing is
//! weighted by the mark intensities pi_j.
//!
//! Every first-order quantity of the theory is a gradient of H:
//! the adjoint drivers use -grad_y, -grad_z, -grad_r (for k) and grad_x
//! (for p), stationarity and the descent direction use grad_v. All
//! gradients share one assembly
//!
//! ```text
//! grad_w H = -J_f(w)' k + J_b(w)' p + J_g(w)' vec(q) + grad_w l
//!            + sum_j pi_j J_sigma_j(w)' beta_j
//! ```
//!
//! with J the reported coefficient derivatives. For w = r_j those are the
//! kernels of the pi-weighted pairing, so `grad_r(j)` is itself the kernel
//! appearing pointwise in the adjoint jump integrand; the plain partial
//! derivative with respect to the entries of r_j is pi_j times it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbsde::{
    observation_op, AdjointTrajectory, ArgsBuf, ControlProcess, FeatureMap, RegressionBasis,
    Trajectory,
};
use crate::model::{CoeffArgs, CoeffId, ControlSet, OwnedArgs, ProblemSpec, VarId};
use crate::rng::{stream, StreamRng};

/// Multipliers at one evaluation point: k (length m) rides the backward
/// equation, p (length n), q (n x d) and beta_j (length n, one per mark)
/// ride the forward equation.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub k: DVector<f64>,
    pub p: DVector<f64>,
    pub q: DMatrix<f64>,
    pub beta: Vec<DVector<f64>>,
}

impl Multipliers {
    pub fn zeros(spec: &ProblemSpec) -> Self {
        let dims = spec.dims;
        Multipliers {
            k: DVector::zeros(dims.m),
            p: DVector::zeros(dims.n),
            q: DMatrix::zeros(dims.n, dims.d),
            beta: (0..spec.marks.len()).map(|_| DVector::zeros(dims.n)).collect(),
        }
    }
}

/// All first-order data of H at one point. `z` is flattened row-major to
/// match the coefficient layout; `r[j]` is the pairing kernel per mark.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianGradients {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub r: Vec<DVector<f64>>,
    pub v: DVector<f64>,
}

/// H at one evaluation point.
pub fn eval_hamiltonian(spec: &ProblemSpec, args: &CoeffArgs, mult: &Multipliers) -> f64 {
    let coeffs = spec.coefficients.as_ref();
    let f = coeffs.value(CoeffId::Driver, args);
    let b = coeffs.value(CoeffId::Drift, args);
    let g = coeffs.value(CoeffId::Diffusion, args);
    let l = coeffs.value(CoeffId::RunningCost, args)[0];

    let mut acc = l;
    acc -= mult.k.dot(&f);
    acc += mult.p.dot(&b);
    let d = spec.dims.d;
    for row in 0..spec.dims.n {
        for col in 0..d {
            acc += mult.q[(row, col)] * g[row * d + col];
        }
    }
    for (j, beta) in mult.beta.iter().enumerate() {
        let sigma = coeffs.value(CoeffId::Jump(j), args);
        acc += spec.marks.weights[j] * beta.dot(&sigma);
    }
    acc
}

/// Gradient of H with respect to one argument block, flattened to the block
/// layout. For `VarId::R(j)` this is the pairing kernel.
pub fn grad_hamiltonian(
    spec: &ProblemSpec,
    var: VarId,
    args: &CoeffArgs,
    mult: &Multipliers,
) -> DVector<f64> {
    let coeffs = spec.coefficients.as_ref();
    let cols = spec.var_cols(var);
    let mut out = DVector::zeros(cols);

    // -J_f' k
    let jf = coeffs.jacobian(CoeffId::Driver, var, args);
    out.gemv_tr(-1.0, &jf, &mult.k, 1.0);
    // J_b' p
    let jb = coeffs.jacobian(CoeffId::Drift, var, args);
    out.gemv_tr(1.0, &jb, &mult.p, 1.0);
    // J_g' vec(q), q row-major to match the flattened diffusion rows.
    let jg = coeffs.jacobian(CoeffId::Diffusion, var, args);
    let d = spec.dims.d;
    let qvec = DVector::from_fn(spec.dims.n * d, |i, _| mult.q[(i / d, i % d)]);
    out.gemv_tr(1.0, &jg, &qvec, 1.0);
    // grad l (a 1 x cols row).
    let jl = coeffs.jacobian(CoeffId::RunningCost, var, args);
    for c in 0..cols {
        out[c] += jl[(0, c)];
    }
    // sum_j pi_j J_sigma_j' beta_j
    for (j, beta) in mult.beta.iter().enumerate() {
        let js = coeffs.jacobian(CoeffId::Jump(j), var, args);
        out.gemv_tr(spec.marks.weights[j], &js, beta, 1.0);
    }
    out
}

/// All gradients at once.
pub fn gradients(spec: &ProblemSpec, args: &CoeffArgs, mult: &Multipliers) -> HamiltonianGradients {
    HamiltonianGradients {
        x: grad_hamiltonian(spec, VarId::X, args, mult),
        y: grad_hamiltonian(spec, VarId::Y, args, mult),
        z: grad_hamiltonian(spec, VarId::Z, args, mult),
        r: (0..spec.marks.len())
            .map(|j| grad_hamiltonian(spec, VarId::R(j), args, mult))
            .collect(),
        v: grad_hamiltonian(spec, VarId::V, args, mult),
    }
}

/// Violations above this slack fail the sampled convexity test.
pub const CONVEXITY_TOL: f64 = 1e-8;

/// Outcome of the sampled convexity test on H, phi and h.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityReport {
    pub pass: bool,
    /// Largest signed violation over all pairs and all three functions;
    /// positive means the gradient inequality failed somewhere.
    pub worst: f64,
    pub hamiltonian_worst: f64,
    pub terminal_worst: f64,
    pub initial_worst: f64,
}

fn fill_args(args: &mut OwnedArgs, rng: &mut StreamRng, radius: f64) {
    for w in args.x.iter_mut() {
        *w = rng.uniform_in(-radius, radius);
    }
    for w in args.y.iter_mut() {
        *w = rng.uniform_in(-radius, radius);
    }
    for w in args.z.iter_mut() {
        *w = rng.uniform_in(-radius, radius);
    }
    for rj in args.r.iter_mut() {
        for w in rj.iter_mut() {
            *w = rng.uniform_in(-radius, radius);
        }
    }
    for w in args.v.iter_mut() {
        *w = rng.uniform_in(-radius, radius);
    }
}

/// Directional pairing `<grad H(w1), w2 - w1>` over the stacked variable,
/// with the pi-weighted inner product on the r blocks.
fn stacked_pairing(
    spec: &ProblemSpec,
    grads: &HamiltonianGradients,
    from: &OwnedArgs,
    to: &OwnedArgs,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..from.x.len() {
        acc += grads.x[i] * (to.x[i] - from.x[i]);
    }
    for i in 0..from.y.len() {
        acc += grads.y[i] * (to.y[i] - from.y[i]);
    }
    let (zr, zc) = from.z.shape();
    for a in 0..zr {
        for b in 0..zc {
            acc += grads.z[a * zc + b] * (to.z[(a, b)] - from.z[(a, b)]);
        }
    }
    for (j, kernel) in grads.r.iter().enumerate() {
        let weight = spec.marks.weights[j];
        for i in 0..kernel.len() {
            acc += weight * kernel[i] * (to.r[j][i] - from.r[j][i]);
        }
    }
    for i in 0..from.v.len() {
        acc += grads.v[i] * (to.v[i] - from.v[i]);
    }
    acc
}

/// Samples the gradient inequality `F(w2) - F(w1) >= <grad F(w1), w2 - w1>`
/// for F = H(t, .) at fixed multipliers, for the terminal cost phi and for
/// the initial cost h, on random pairs drawn uniformly from the centered
/// box of half-width `radius`. A positive violation certifies non-convexity
/// up to roundoff; passing is sampled evidence, not a proof.
pub fn convexity_probe(
    spec: &ProblemSpec,
    mult: &Multipliers,
    t: f64,
    samples: usize,
    radius: f64,
    seed: u64,
) -> ConvexityReport {
    let marks = spec.marks.len();
    let mut w1 = OwnedArgs::zeros(&spec.dims, marks);
    let mut w2 = OwnedArgs::zeros(&spec.dims, marks);
    w1.t = t;
    w2.t = t;
    let coeffs = spec.coefficients.as_ref();
    let mut worst_h = f64::NEG_INFINITY;
    let mut worst_phi = f64::NEG_INFINITY;
    let mut worst_init = f64::NEG_INFINITY;
    for s in 0..samples {
        fill_args(&mut w1, &mut stream(seed, s as u64, 0, 0), radius);
        fill_args(&mut w2, &mut stream(seed, s as u64, 1, 0), radius);
        let h1 = eval_hamiltonian(spec, &w1.borrow(), mult);
        let h2 = eval_hamiltonian(spec, &w2.borrow(), mult);
        let grads = gradients(spec, &w1.borrow(), mult);
        worst_h = worst_h.max(stacked_pairing(spec, &grads, &w1, &w2) - (h2 - h1));

        let gap_phi = coeffs.terminal_cost_grad(&w1.x).dot(&(&w2.x - &w1.x))
            - (coeffs.terminal_cost(&w2.x) - coeffs.terminal_cost(&w1.x));
        worst_phi = worst_phi.max(gap_phi);
        let gap_h = coeffs.initial_cost_grad(&w1.y).dot(&(&w2.y - &w1.y))
            - (coeffs.initial_cost(&w2.y) - coeffs.initial_cost(&w1.y));
        worst_init = worst_init.max(gap_h);
    }
    let worst = worst_h.max(worst_phi).max(worst_init);
    ConvexityReport {
        pass: worst <= CONVEXITY_TOL,
        worst,
        hamiltonian_worst: worst_h,
        terminal_worst: worst_phi,
        initial_worst: worst_init,
    }
}

/// Margins of one grid step of the conditional minimization check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxConditionStep {
    pub step: usize,
    /// Smallest fitted margin `E[H(v) - H(u) | eps]` over all candidates
    /// and paths; negative means some candidate looked better than u.
    pub worst_margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxConditionReport {
    pub steps: Vec<MaxConditionStep>,
    pub pass: bool,
    /// Smallest margin over all steps.
    pub worst: f64,
}

/// Per-axis grid over the bounding box of U, cartesian product, projected
/// into U. Coarse by design: a falsifier, not an optimizer.
fn candidate_grid(set: &ControlSet, per_axis: usize) -> Result<Vec<DVector<f64>>> {
    if per_axis == 0 {
        return Err(Error::Invalid("candidate grid needs at least one point per axis".into()));
    }
    let (lo, hi) = set.bounding_box();
    let k = lo.len();
    let total = per_axis.checked_pow(k as u32).filter(|&t| t <= 20_000).ok_or_else(|| {
        Error::Invalid("candidate grid too large; reduce points per axis".into())
    })?;
    let mut out = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rest = flat;
        let mut point = DVector::zeros(k);
        for a in 0..k {
            let digit = rest % per_axis;
            rest /= per_axis;
            point[a] = if per_axis == 1 {
                0.5 * (lo[a] + hi[a])
            } else {
                lo[a] + (hi[a] - lo[a]) * digit as f64 / (per_axis - 1) as f64
            };
        }
        out.push(set.project(&point));
    }
    Ok(out)
}

/// Checks the conditional minimization of H over U at the candidate control:
/// at every step, the fitted `E[H(v) | eps_i]` over a coarse candidate grid
/// must not undercut `E[H(u) | eps_i]` by more than three pooled standard
/// errors plus a small slack. Failing a step falsifies optimality of u.
///
/// The differences are fitted at twice the solver degree: a control assembled
/// from degree-g fits enters H quadratically, so the difference is a degree-2g
/// function of the regressor whenever the coefficients are affine, and fitting
/// at the solver degree would report spurious negative margins from misfit.
pub fn max_condition_check(
    spec: &ProblemSpec,
    traj: &Trajectory,
    control: &ControlProcess,
    adjoint: &AdjointTrajectory,
    candidates_per_axis: usize,
    basis: &RegressionBasis,
) -> Result<MaxConditionReport> {
    let candidates = candidate_grid(&spec.control_set, candidates_per_axis)?;
    let dims = spec.dims;
    let marks = spec.marks.len();
    let paths = traj.paths;
    let steps = traj.grid.steps;
    let widened = RegressionBasis { degree: 2 * basis.degree, ..basis.clone() };
    let map = FeatureMap::new(dims.n, widened.degree);

    let mut report = Vec::with_capacity(steps);
    let mut diff = vec![0.0; paths];
    for i in 0..steps {
        // H at the candidate control u and at every grid candidate, per path.
        let rows: Vec<(f64, Vec<f64>)> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let mut buf = ArgsBuf::new(&dims, marks);
                buf.load(traj, control, p, i);
                let mult = adjoint.multipliers(p, i);
                let at_u = eval_hamiltonian(spec, &buf.args(), &mult);
                let at_candidates = candidates
                    .iter()
                    .map(|cand| {
                        buf.v.copy_from(cand);
                        eval_hamiltonian(spec, &buf.args(), &mult)
                    })
                    .collect();
                (at_u, at_candidates)
            })
            .collect();
        let op = observation_op(traj, &spec.filtration, &widened, &map, i)?;

        let mut worst_margin = f64::INFINITY;
        let mut pass = true;
        for (ci, _) in candidates.iter().enumerate() {
            for (p, row) in rows.iter().enumerate() {
                diff[p] = row.1[ci] - row.0;
            }
            let (fitted, _) = op.apply(&diff, 1);
            let margin = fitted.iter().fold(f64::INFINITY, |a, b| a.min(*b));
            let mean = diff.iter().sum::<f64>() / paths as f64;
            let var = diff.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>()
                / (paths as f64 - 1.0).max(1.0);
            let se = (var / paths as f64).sqrt();
            if margin < -(3.0 * se + 1e-6) {
                pass = false;
            }
            worst_margin = worst_margin.min(margin);
        }
        report.push(MaxConditionStep { step: i, worst_margin, pass });
    }
    let pass = report.iter().all(|s| s.pass);
    let worst = report.iter().fold(f64::INFINITY, |a, s| a.min(s.worst_margin));
    Ok(MaxConditionReport { steps: report, pass, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        AffineModel, CoefficientSet, ControlSet, Dimensions, FiltrationSpec, MarkSpace,
        OwnedArgs, TerminalSpec,
    };
    use std::sync::Arc;

    /// Constant coefficients with the worked-example values.
    struct PlantedCoeffs;

    impl CoefficientSet for PlantedCoeffs {
        fn value(&self, id: CoeffId, _args: &CoeffArgs) -> DVector<f64> {
            let w = match id {
                CoeffId::Driver => 5.0,
                CoeffId::Drift => 2.0,
                CoeffId::Diffusion => 1.0,
                CoeffId::RunningCost => 1.0,
                CoeffId::Jump(_) => 2.0,
            };
            DVector::from_element(1, w)
        }
        fn jacobian(&self, _id: CoeffId, _var: VarId, _args: &CoeffArgs) -> DMatrix<f64> {
            DMatrix::zeros(1, 1)
        }
        fn terminal_cost(&self, _x: &DVector<f64>) -> f64 {
            0.0
        }
        fn terminal_cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(x.len())
        }
        fn initial_cost(&self, _y: &DVector<f64>) -> f64 {
            0.0
        }
        fn initial_cost_grad(&self, y: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(y.len())
        }
    }

    fn scalar_dims() -> Dimensions {
        Dimensions { n: 1, m: 1, d: 1, k: 1 }
    }

    fn spec_with(coeffs: Arc<dyn CoefficientSet>, marks: MarkSpace) -> ProblemSpec {
        let dims = scalar_dims();
        ProblemSpec {
            dims,
            horizon: 1.0,
            initial: DVector::zeros(1),
            marks: marks.clone(),
            control_set: ControlSet::Box { lower: vec![-5.0], upper: vec![5.0] },
            filtration: FiltrationSpec::Full,
            terminal: TerminalSpec::zero(&dims, &marks),
            coefficients: coeffs,
        }
    }

    #[test]
    fn worked_example_evaluates_to_thirteen() {
        // k(-f) + p b + q g + l + pi beta sigma
        //  = 3(-5) + 4*2 + 7*1 + 1 + 2*3*2 = -15 + 8 + 7 + 1 + 12 = 13.
        let marks = MarkSpace::new(vec![1.0], vec![2.0]).unwrap();
        let spec = spec_with(Arc::new(PlantedCoeffs), marks);
        let args = OwnedArgs::zeros(&spec.dims, 1);
        let mult = Multipliers {
            k: DVector::from_element(1, 3.0),
            p: DVector::from_element(1, 4.0),
            q: DMatrix::from_element(1, 1, 7.0),
            beta: vec![DVector::from_element(1, 3.0)],
        };
        let h = eval_hamiltonian(&spec, &args.borrow(), &mult);
        assert!((h - 13.0).abs() < 1e-14, "H = {h}");
    }

    #[test]
    fn hamiltonian_is_linear_in_the_multipliers() {
        let marks = MarkSpace::new(vec![1.0], vec![2.0]).unwrap();
        let spec = spec_with(Arc::new(PlantedCoeffs), marks);
        let args = OwnedArgs::zeros(&spec.dims, 1);
        let a = Multipliers {
            k: DVector::from_element(1, 1.0),
            p: DVector::from_element(1, -2.0),
            q: DMatrix::from_element(1, 1, 0.5),
            beta: vec![DVector::from_element(1, 1.5)],
        };
        let b = Multipliers {
            k: DVector::from_element(1, -0.25),
            p: DVector::from_element(1, 4.0),
            q: DMatrix::from_element(1, 1, 2.0),
            beta: vec![DVector::from_element(1, -1.0)],
        };
        let zero = Multipliers::zeros(&spec);
        let combo = Multipliers {
            k: &a.k * 2.0 + &b.k,
            p: &a.p * 2.0 + &b.p,
            q: &a.q * 2.0 + &b.q,
            beta: vec![&a.beta[0] * 2.0 + &b.beta[0]],
        };
        let ha = eval_hamiltonian(&spec, &args.borrow(), &a);
        let hb = eval_hamiltonian(&spec, &args.borrow(), &b);
        let h0 = eval_hamiltonian(&spec, &args.borrow(), &zero);
        let hc = eval_hamiltonian(&spec, &args.borrow(), &combo);
        // H is affine in the multipliers with intercept l = H(0).
        assert!((hc - (2.0 * ha + hb - 2.0 * h0)).abs() < 1e-12);
    }

    /// Finite-difference check of every gradient block on the nonlinear
    /// builtin family at generic evaluation points.
    #[test]
    fn gradients_match_finite_differences() {
        let dims = Dimensions { n: 2, m: 1, d: 2, k: 2 };
        let marks = MarkSpace::new(vec![0.8, -0.4], vec![0.6, 1.1]).unwrap();
        let mut model = AffineModel::zeros(dims, marks.clone());
        // Populate every block with distinct, moderately sized entries.
        let mut c = 0.13;
        let mut next = || {
            c = (c * 1.37 + 0.11) % 0.9;
            c - 0.45
        };
        for map in [&mut model.drift, &mut model.diffusion, &mut model.jump, &mut model.driver]
        {
            for i in 0..map.constant.len() {
                map.constant[i] = next();
            }
            for mat in [&mut map.x_mat, &mut map.y_mat, &mut map.z_mat, &mut map.v_mat] {
                for w in mat.iter_mut() {
                    *w = next();
                }
            }
            for rj in &mut map.r_mat {
                for w in rj.iter_mut() {
                    *w = next();
                }
            }
        }
        for vecs in [
            &mut model.cost.qx,
            &mut model.cost.qy,
            &mut model.cost.qz,
            &mut model.cost.qr,
            &mut model.cost.qv,
            &mut model.cost.lx,
            &mut model.cost.ly,
            &mut model.cost.lv,
        ] {
            for w in vecs.iter_mut() {
                *w = next().abs() + 0.1;
            }
        }
        model.nonlin_scale = 0.5;

        let spec = ProblemSpec {
            dims,
            horizon: 1.0,
            initial: DVector::zeros(2),
            marks: marks.clone(),
            control_set: ControlSet::Box { lower: vec![-5.0; 2], upper: vec![5.0; 2] },
            filtration: FiltrationSpec::Full,
            terminal: TerminalSpec::zero(&dims, &marks),
            coefficients: Arc::new(model),
        };

        let mut args = OwnedArgs::zeros(&dims, marks.len());
        args.t = 0.4;
        args.x[0] = 0.7;
        args.x[1] = -0.3;
        args.y[0] = 0.5;
        args.z[(0, 0)] = 0.2;
        args.z[(0, 1)] = -0.6;
        args.r[0][0] = 0.9;
        args.r[1][0] = -0.2;
        args.v[0] = 0.4;
        args.v[1] = -0.8;
        let mult = Multipliers {
            k: DVector::from_element(1, 0.7),
            p: DVector::from_column_slice(&[1.3, -0.5]),
            q: DMatrix::from_row_slice(2, 2, &[0.2, -0.4, 0.6, 0.1]),
            beta: vec![
                DVector::from_column_slice(&[0.3, -0.7]),
                DVector::from_column_slice(&[-0.2, 0.5]),
            ],
        };
        let grads = gradients(&spec, &args.borrow(), &mult);

        let eps = 1e-6;
        // The reported r gradient is the kernel; the plain partial carries
        // the pi weight, so `pairing` is 1 except for r blocks.
        for i in 0..2 {
            let base = args.x[i];
            let fd = central_fd(&spec, &mut args, &mult, &move |a, w| a.x[i] = w, base, eps);
            assert_close(fd, grads.x[i], "x");
        }
        {
            let base = args.y[0];
            let fd = central_fd(&spec, &mut args, &mult, &|a, w| a.y[0] = w, base, eps);
            assert_close(fd, grads.y[0], "y");
        }
        for col in 0..2 {
            let base = args.z[(0, col)];
            let fd =
                central_fd(&spec, &mut args, &mult, &move |a, w| a.z[(0, col)] = w, base, eps);
            assert_close(fd, grads.z[col], "z");
        }
        for j in 0..2 {
            let base = args.r[j][0];
            let fd =
                central_fd(&spec, &mut args, &mult, &move |a, w| a.r[j][0] = w, base, eps);
            assert_close(fd, marks.weights[j] * grads.r[j][0], "r");
        }
        for i in 0..2 {
            let base = args.v[i];
            let fd = central_fd(&spec, &mut args, &mult, &move |a, w| a.v[i] = w, base, eps);
            assert_close(fd, grads.v[i], "v");
        }
    }

    fn central_fd(
        spec: &ProblemSpec,
        args: &mut OwnedArgs,
        mult: &Multipliers,
        set: &dyn Fn(&mut OwnedArgs, f64),
        base: f64,
        eps: f64,
    ) -> f64 {
        set(args, base + eps);
        let up = eval_hamiltonian(spec, &args.borrow(), mult);
        set(args, base - eps);
        let dn = eval_hamiltonian(spec, &args.borrow(), mult);
        set(args, base);
        (up - dn) / (2.0 * eps)
    }

    fn assert_close(fd: f64, want: f64, label: &str) {
        assert!(
            (fd - want).abs() < 1e-7 * (1.0 + want.abs()),
            "{label}: fd {fd} vs analytic {want}"
        );
    }

    #[test]
    fn convexity_probe_separates_convex_from_concave_costs() {
        // Affine dynamics with PSD quadratic costs: H is convex in the
        // stacked variable for any multipliers.
        let marks = MarkSpace::new(vec![1.0], vec![0.7]).unwrap();
        let mut model = AffineModel::zeros(scalar_dims(), marks.clone());
        model.drift.x_mat[(0, 0)] = -0.5;
        model.drift.v_mat[(0, 0)] = 1.0;
        model.driver.y_mat[(0, 0)] = 0.3;
        model.cost.qx[0] = 1.0;
        model.cost.qy[0] = 0.5;
        model.cost.qz[0] = 0.2;
        model.cost.qr[0] = 0.2;
        model.cost.qv[0] = 1.0;
        model.cost.q_phi[0] = 1.0;
        model.cost.q_h[0] = 0.5;
        let spec = spec_with(Arc::new(model.clone()), marks.clone());
        let mult = Multipliers {
            k: DVector::from_element(1, 0.8),
            p: DVector::from_element(1, -1.2),
            q: DMatrix::from_element(1, 1, 0.4),
            beta: vec![DVector::from_element(1, 0.6)],
        };
        let report = convexity_probe(&spec, &mult, 0.3, 200, 2.0, 77);
        assert!(report.pass, "convex case failed: worst {}", report.worst);

        // Flipping the control cost concave must be caught with a positive
        // violation (v2 - v1)^2 at some sampled pair.
        let mut concave = model;
        concave.cost.qv[0] = -2.0;
        let spec = spec_with(Arc::new(concave), marks);
        let report = convexity_probe(&spec, &mult, 0.3, 200, 2.0, 77);
        assert!(!report.pass);
        assert!(report.hamiltonian_worst > 1e-3, "worst {}", report.hamiltonian_worst);
        assert!(report.terminal_worst <= CONVEXITY_TOL);
    }

    #[test]
    fn concave_initial_cost_fails_the_probe_alone() {
        let marks = MarkSpace::none();
        let mut model = AffineModel::zeros(scalar_dims(), marks.clone());
        model.cost.q_h[0] = -1.0;
        let spec = spec_with(Arc::new(model), marks);
        let report = convexity_probe(&spec, &Multipliers::zeros(&spec), 0.0, 100, 1.0, 3);
        assert!(!report.pass);
        assert!(report.initial_worst > 1e-3);
        assert!(report.hamiltonian_worst <= CONVEXITY_TOL);
    }

    #[test]
    fn max_condition_accepts_the_minimizer_and_rejects_off_optimum() {
        use crate::fbsde::{solve_adjoint, solve_fbsde, SolverParams};
        use crate::scenario::{RngSpec, ScenarioBatch, TimeGrid};

        // l = (v - 0.3)^2 with control-free dynamics; U = [-1, 1] sampled
        // at 11 points puts candidates at 0.2 and 0.4 near the minimizer.
        let marks = MarkSpace::none();
        let mut model = AffineModel::zeros(scalar_dims(), marks.clone());
        model.cost.qv[0] = 2.0;
        model.cost.lv[0] = -0.6;
        model.cost.constant = 0.09;
        let mut spec = spec_with(Arc::new(model), marks);
        spec.control_set = ControlSet::Box { lower: vec![-1.0], upper: vec![1.0] };

        let grid = TimeGrid::new(1.0, 8).unwrap();
        let batch = ScenarioBatch::generate(grid, 64, 1, &[], RngSpec { seed: 50 }).unwrap();
        let params = SolverParams::default();

        let optimal = ControlProcess::constant(&[0.3], 8);
        let traj = solve_fbsde(&spec, &batch, &optimal, &params).unwrap();
        let adjoint = solve_adjoint(&spec, &batch, &traj, &optimal, &params).unwrap();
        let report =
            max_condition_check(&spec, &traj, &optimal, &adjoint, 11, &params.basis).unwrap();
        assert!(report.pass, "worst margin {}", report.worst);
        assert!(report.worst >= -1e-9);

        let off = ControlProcess::constant(&[0.0], 8);
        let traj = solve_fbsde(&spec, &batch, &off, &params).unwrap();
        let adjoint = solve_adjoint(&spec, &batch, &traj, &off, &params).unwrap();
        let report = max_condition_check(&spec, &traj, &off, &adjoint, 11, &params.basis).unwrap();
        assert!(!report.pass);
        // Closest candidates to the true minimizer: (0.2 - 0.3)^2 - 0.09.
        assert!((report.worst + 0.08).abs() < 1e-10, "worst margin {}", report.worst);
    }
}
