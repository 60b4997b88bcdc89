//! Least-squares Monte Carlo conditional expectations.
//!
//! A conditional expectation given the observable state at a grid step is
//! approximated by ridge regression of the per-path targets onto monomials
//! of the regressor (all monomials of total degree at most D, intercept
//! included). The intercept is left out of the ridge penalty, so constant
//! targets are reproduced exactly and the fitted values always average to
//! the raw sample mean.
//!
//! Under the trivial sigma-field, and at step 0 where the regressor is the
//! deterministic initial state, the operator degenerates to the cross-path
//! mean, which is the exact conditional expectation there.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Monomial basis configuration with the ridge weight of the penalized
/// (non-intercept) coefficients.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { degree: 2, ridge: 1e-8 }
    }
}

/// Exponent table of all monomials in `vars` variables with total degree at
/// most `degree`, graded order (constant first).
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub vars: usize,
    pub degree: usize,
    exponents: Vec<Vec<u32>>,
}

impl FeatureMap {
    pub fn new(vars: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        let mut current = vec![0u32; vars];
        for total in 0..=degree as u32 {
            enumerate_exponents(vars, total, 0, &mut current, &mut exponents);
        }
        FeatureMap { vars, degree, exponents }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    /// Fills `out` (length `len()`) with the monomial values at `x`.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.vars);
        debug_assert_eq!(out.len(), self.len());
        for (slot, exps) in out.iter_mut().zip(&self.exponents) {
            let mut acc = 1.0;
            for (i, &e) in exps.iter().enumerate() {
                for _ in 0..e {
                    acc *= x[i];
                }
            }
            *slot = acc;
        }
    }
}

fn enumerate_exponents(
    vars: usize,
    remaining: u32,
    at: usize,
    current: &mut Vec<u32>,
    out: &mut Vec<Vec<u32>>,
) {
    if at == vars {
        if remaining == 0 {
            out.push(current.clone());
        }
        return;
    }
    if at == vars - 1 {
        current[at] = remaining;
        out.push(current.clone());
        current[at] = 0;
        return;
    }
    for e in 0..=remaining {
        current[at] = e;
        enumerate_exponents(vars, remaining - e, at + 1, current, out);
        current[at] = 0;
    }
}

/// Conditional-expectation operator for one grid step, prepared once and
/// applied to any number of target blocks.
pub enum CondExpOp {
    /// Cross-path mean (trivial information).
    Mean { paths: usize },
    /// Ridge regression onto the prepared feature matrix.
    Fit {
        /// P x B feature matrix; row p is the basis evaluated at path p's
        /// regressor.
        phi: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
}

impl CondExpOp {
    pub fn mean(paths: usize) -> Self {
        CondExpOp::Mean { paths }
    }

    /// Prepares the regression onto the basis of the given regressors.
    /// `regressors` is P x vars row-major. `step` only labels errors.
    pub fn regress(
        regressors: &[f64],
        paths: usize,
        map: &FeatureMap,
        ridge: f64,
        step: usize,
    ) -> Result<Self> {
        let b = map.len();
        let mut phi = DMatrix::zeros(paths, b);
        let mut row = vec![0.0; b];
        for p in 0..paths {
            map.eval(&regressors[p * map.vars..(p + 1) * map.vars], &mut row);
            for (a, &value) in row.iter().enumerate() {
                phi[(p, a)] = value;
            }
        }
        // Gram matrix, accumulated in path order for determinism.
        let mut gram = DMatrix::zeros(b, b);
        for p in 0..paths {
            for a in 0..b {
                let fa = phi[(p, a)];
                for c in a..b {
                    gram[(a, c)] += fa * phi[(p, c)];
                }
            }
        }
        for a in 0..b {
            for c in 0..a {
                gram[(a, c)] = gram[(c, a)];
            }
        }
        // Ridge on everything but the intercept.
        for a in 1..b {
            gram[(a, a)] += ridge;
        }
        let chol = Cholesky::new(gram).ok_or(Error::SingularRegression { step })?;
        Ok(CondExpOp::Fit { phi, chol })
    }

    pub fn paths(&self) -> usize {
        match self {
            CondExpOp::Mean { paths } => *paths,
            CondExpOp::Fit { phi, .. } => phi.nrows(),
        }
    }

    /// Projects `q` target components per path (`targets` is P x q
    /// row-major). Returns the fitted values in the same layout and the
    /// coefficient table (B x q; B = 1 holding the means for the
    /// degenerate operator).
    pub fn apply(&self, targets: &[f64], q: usize) -> (Vec<f64>, DMatrix<f64>) {
        let paths = self.paths();
        debug_assert_eq!(targets.len(), paths * q);
        match self {
            CondExpOp::Mean { .. } => {
                let mut means = DMatrix::zeros(1, q);
                for p in 0..paths {
                    for c in 0..q {
                        means[(0, c)] += targets[p * q + c];
                    }
                }
                means /= paths as f64;
                let mut fitted = vec![0.0; paths * q];
                for p in 0..paths {
                    for c in 0..q {
                        fitted[p * q + c] = means[(0, c)];
                    }
                }
                (fitted, means)
            }
            CondExpOp::Fit { phi, chol } => {
                let b = phi.ncols();
                let mut rhs = DMatrix::zeros(b, q);
                for p in 0..paths {
                    for c in 0..q {
                        let t = targets[p * q + c];
                        for a in 0..b {
                            rhs[(a, c)] += phi[(p, a)] * t;
                        }
                    }
                }
                let coeffs = chol.solve(&rhs);
                let mut fitted = vec![0.0; paths * q];
                for p in 0..paths {
                    for c in 0..q {
                        let mut acc = 0.0;
                        for a in 0..b {
                            acc += phi[(p, a)] * coeffs[(a, c)];
                        }
                        fitted[p * q + c] = acc;
                    }
                }
                (fitted, coeffs)
            }
        }
    }
}

/// A fitted conditional-expectation function of the regressor, stored as
/// coefficients so it can be re-evaluated at new states.
#[derive(Debug, Clone, PartialEq)]
pub enum SurrogateFn {
    /// Constant in the regressor (degenerate operator).
    Const(Vec<f64>),
    /// Polynomial: B x q coefficient table over a [`FeatureMap`].
    Poly(DMatrix<f64>),
}

impl SurrogateFn {
    pub fn zero(q: usize) -> Self {
        SurrogateFn::Const(vec![0.0; q])
    }

    pub fn components(&self) -> usize {
        match self {
            SurrogateFn::Const(c) => c.len(),
            SurrogateFn::Poly(a) => a.ncols(),
        }
    }

    /// Evaluates at a precomputed feature row; writes the q components.
    pub fn eval(&self, features: &[f64], out: &mut [f64]) {
        match self {
            SurrogateFn::Const(c) => out.copy_from_slice(c),
            SurrogateFn::Poly(a) => {
                for (c, slot) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for row in 0..a.nrows() {
                        acc += features[row] * a[(row, c)];
                    }
                    *slot = acc;
                }
            }
        }
    }

    /// Convex blend used by Picard damping: `damping * fresh + (1 - damping) * self`.
    pub fn blend(&self, fresh: &SurrogateFn, damping: f64) -> SurrogateFn {
        match (self, fresh) {
            (SurrogateFn::Const(old), SurrogateFn::Const(new)) => SurrogateFn::Const(
                old.iter().zip(new).map(|(o, n)| damping * n + (1.0 - damping) * o).collect(),
            ),
            (SurrogateFn::Poly(old), SurrogateFn::Poly(new)) => {
                SurrogateFn::Poly(new * damping + old * (1.0 - damping))
            }
            // Kind can only change when the previous sweep had no fit yet.
            (_, fresh) => fresh.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn feature_counts_match_binomial() {
        // C(vars + degree, degree) monomials.
        assert_eq!(FeatureMap::new(1, 2).len(), 3);
        assert_eq!(FeatureMap::new(2, 2).len(), 6);
        assert_eq!(FeatureMap::new(3, 3).len(), 20);
        let map = FeatureMap::new(1, 0);
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn scalar_degree_two_features() {
        let map = FeatureMap::new(1, 2);
        let mut out = vec![0.0; 3];
        map.eval(&[3.0], &mut out);
        assert_eq!(out, vec![1.0, 3.0, 9.0]);
    }

    #[test]
    fn mean_operator_is_exact() {
        let op = CondExpOp::mean(4);
        let targets = [1.0, 2.0, 3.0, 6.0];
        let (fitted, coeffs) = op.apply(&targets, 1);
        assert_eq!(fitted, vec![3.0; 4]);
        assert_eq!(coeffs[(0, 0)], 3.0);
    }

    #[test]
    fn constant_targets_fit_exactly_despite_ridge() {
        let paths = 64;
        let mut rng = stream(5, 0, 0, 0);
        let xs: Vec<f64> = (0..paths).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let map = FeatureMap::new(1, 2);
        let op = CondExpOp::regress(&xs, paths, &map, 1e-8, 0).unwrap();
        let targets = vec![2.5; paths];
        let (fitted, _) = op.apply(&targets, 1);
        for f in fitted {
            // Unpenalized intercept: the unique minimizer is (2.5, 0, 0).
            assert!((f - 2.5).abs() < 1e-12, "fitted {f}");
        }
    }

    #[test]
    fn representable_targets_are_recovered() {
        let paths = 256;
        let mut rng = stream(6, 0, 0, 0);
        let xs: Vec<f64> = (0..paths).map(|_| rng.uniform_in(-1.0, 3.0)).collect();
        let map = FeatureMap::new(1, 2);
        let op = CondExpOp::regress(&xs, paths, &map, 1e-8, 0).unwrap();
        // Two target components at once: affine and quadratic in x.
        let mut targets = vec![0.0; paths * 2];
        for (p, &x) in xs.iter().enumerate() {
            targets[p * 2] = 0.7 - 1.3 * x;
            targets[p * 2 + 1] = 0.5 * x * x + x;
        }
        let (fitted, coeffs) = op.apply(&targets, 2);
        assert_eq!(coeffs.shape(), (3, 2));
        for p in 0..paths {
            assert!((fitted[p * 2] - targets[p * 2]).abs() < 1e-9);
            assert!((fitted[p * 2 + 1] - targets[p * 2 + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn fitted_values_average_to_the_sample_mean() {
        // First-order condition of the unpenalized intercept.
        let paths = 500;
        let mut rng = stream(7, 0, 0, 0);
        let xs: Vec<f64> = (0..paths).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let targets: Vec<f64> = xs.iter().map(|x| x.sin() + rng.normal()).collect();
        let map = FeatureMap::new(1, 2);
        let op = CondExpOp::regress(&xs, paths, &map, 1e-8, 0).unwrap();
        let (fitted, _) = op.apply(&targets, 1);
        let raw: f64 = targets.iter().sum::<f64>() / paths as f64;
        let fit: f64 = fitted.iter().sum::<f64>() / paths as f64;
        assert!((raw - fit).abs() < 1e-11, "tower property violated: {raw} vs {fit}");
    }

    #[test]
    fn degenerate_regressor_falls_back_to_the_mean_fit() {
        // All regressors equal: the design is rank one, but the unpenalized
        // intercept plus ridge still pins the fit to the sample mean.
        let paths = 32;
        let xs = vec![1.5; paths];
        let map = FeatureMap::new(1, 2);
        let op = CondExpOp::regress(&xs, paths, &map, 1e-8, 3).unwrap();
        let targets: Vec<f64> = (0..paths).map(|p| p as f64).collect();
        let mean = targets.iter().sum::<f64>() / paths as f64;
        let (fitted, _) = op.apply(&targets, 1);
        for f in fitted {
            assert!((f - mean).abs() < 1e-9, "fitted {f} vs mean {mean}");
        }
    }

    #[test]
    fn surrogate_eval_matches_fitted_values() {
        let paths = 128;
        let mut rng = stream(8, 0, 0, 0);
        let xs: Vec<f64> = (0..paths).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let map = FeatureMap::new(1, 2);
        let op = CondExpOp::regress(&xs, paths, &map, 1e-8, 0).unwrap();
        let targets: Vec<f64> = xs.iter().map(|x| x * x - 0.3).collect();
        let (fitted, coeffs) = op.apply(&targets, 1);
        let surrogate = SurrogateFn::Poly(coeffs);
        let mut features = vec![0.0; map.len()];
        let mut out = [0.0];
        for (p, &x) in xs.iter().enumerate() {
            map.eval(&[x], &mut features);
            surrogate.eval(&features, &mut out);
            assert_eq!(out[0], fitted[p], "surrogate disagrees with fit at path {p}");
        }
    }

    #[test]
    fn blend_interpolates_tables() {
        let old = SurrogateFn::Const(vec![1.0, 3.0]);
        let new = SurrogateFn::Const(vec![2.0, 5.0]);
        match old.blend(&new, 0.5) {
            SurrogateFn::Const(c) => assert_eq!(c, vec![1.5, 4.0]),
            _ => panic!("kind changed"),
        }
    }
}
