//! Finite-difference validation of the supplied coefficient derivatives.

use nalgebra::DVector;

use super::coeffs::VarId;
use super::{OwnedArgs, ProblemSpec};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Central-difference step. Error is O(step^2) for smooth coefficients
/// while the roundoff term stays near ulp/step ~ 1e-11.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative tolerance on each Jacobian entry.
pub const DEFAULT_DERIV_TOL: f64 = 1e-4;

/// Entries whose analytic and differenced values both sit below this are
/// compared absolutely; keeps exact zeros from failing on FD roundoff.
pub const DERIV_ABS_FLOOR: f64 = 1e-8;

/// Outcome for one (coefficient, argument block) pair.
#[derive(Debug, Clone)]
pub struct DerivativeCheck {
    pub coeff: String,
    pub var: String,
    /// Worst normalized discrepancy over all probes and entries; the pair
    /// passes iff this is at most the relative tolerance.
    pub worst: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub checks: Vec<DerivativeCheck>,
    pub worst: f64,
    pub pass: bool,
    pub step: f64,
    pub tol_rel: f64,
}

/// Compares every supplied Jacobian (and the phi/h gradients) against
/// central finite differences at `probes` random points.
///
/// An entry with analytic value a and differenced value fd fails when
/// `|fd - a| > max(tol_rel * max(|fd|, |a|), DERIV_ABS_FLOOR)`. The
/// normalized discrepancy reported is `|fd - a| / max(|fd|, |a|, floor)`
/// with `floor = DERIV_ABS_FLOOR / tol_rel`, so "pass" is exactly
/// "normalized discrepancy <= tol_rel".
pub fn check_derivatives(
    spec: &ProblemSpec,
    step: f64,
    tol_rel: f64,
    probes: usize,
    seed: u64,
) -> Result<DerivativeReport> {
    assert!(step > 0.0 && tol_rel > 0.0);
    let floor = DERIV_ABS_FLOOR / tol_rel;
    let coeffs = spec.all_coeffs();
    let vars = spec.all_vars();

    // worst[ci][vi] over probes; phi and h tracked separately.
    let mut worst = vec![vec![0.0f64; vars.len()]; coeffs.len()];
    let mut worst_phi = 0.0f64;
    let mut worst_h = 0.0f64;

    for probe in 0..probes {
        let mut args = random_args(spec, seed, probe as u64);
        for (ci, &id) in coeffs.iter().enumerate() {
            let base = spec.coefficients.value(id, &args.borrow());
            if base.iter().any(|e| !e.is_finite()) {
                return Err(Error::NonFiniteCoefficient { name: id.label() });
            }
            for (vi, &var) in vars.iter().enumerate() {
                let analytic = spec.coefficients.jacobian(id, var, &args.borrow());
                // For r blocks the kernel convention means the plain partial
                // derivative is pi_j times the reported kernel.
                let pairing = match var {
                    VarId::R(j) => spec.marks.weights[j],
                    _ => 1.0,
                };
                let cols = spec.var_cols(var);
                for col in 0..cols {
                    perturb(&mut args, var, col, step);
                    let plus = spec.coefficients.value(id, &args.borrow());
                    perturb(&mut args, var, col, -2.0 * step);
                    let minus = spec.coefficients.value(id, &args.borrow());
                    perturb(&mut args, var, col, step);
                    for row in 0..base.len() {
                        let fd = (plus[row] - minus[row]) / (2.0 * step);
                        let an = pairing * analytic[(row, col)];
                        let q = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
                        if q > worst[ci][vi] {
                            worst[ci][vi] = q;
                        }
                    }
                }
            }
        }

        // phi and h gradients with the same rule.
        let grad_phi = spec.coefficients.terminal_cost_grad(&args.x);
        for i in 0..args.x.len() {
            args.x[i] += step;
            let plus = spec.coefficients.terminal_cost(&args.x);
            args.x[i] -= 2.0 * step;
            let minus = spec.coefficients.terminal_cost(&args.x);
            args.x[i] += step;
            let fd = (plus - minus) / (2.0 * step);
            let q = (fd - grad_phi[i]).abs() / fd.abs().max(grad_phi[i].abs()).max(floor);
            worst_phi = worst_phi.max(q);
        }
        let grad_h = spec.coefficients.initial_cost_grad(&args.y);
        for i in 0..args.y.len() {
            args.y[i] += step;
            let plus = spec.coefficients.initial_cost(&args.y);
            args.y[i] -= 2.0 * step;
            let minus = spec.coefficients.initial_cost(&args.y);
            args.y[i] += step;
            let fd = (plus - minus) / (2.0 * step);
            let q = (fd - grad_h[i]).abs() / fd.abs().max(grad_h[i].abs()).max(floor);
            worst_h = worst_h.max(q);
        }
    }

    let mut checks = Vec::new();
    for (ci, &id) in coeffs.iter().enumerate() {
        for (vi, &var) in vars.iter().enumerate() {
            checks.push(DerivativeCheck {
                coeff: id.label(),
                var: var.label(),
                worst: worst[ci][vi],
                pass: worst[ci][vi] <= tol_rel,
            });
        }
    }
    checks.push(DerivativeCheck {
        coeff: "phi".into(),
        var: "x".into(),
        worst: worst_phi,
        pass: worst_phi <= tol_rel,
    });
    checks.push(DerivativeCheck {
        coeff: "h".into(),
        var: "y".into(),
        worst: worst_h,
        pass: worst_h <= tol_rel,
    });

    let worst_all = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    Ok(DerivativeReport {
        pass: checks.iter().all(|c| c.pass),
        worst: worst_all,
        checks,
        step,
        tol_rel,
    })
}

/// Probe point with components uniform in [-1, 1], t uniform in [0, T].
fn random_args(spec: &ProblemSpec, seed: u64, probe: u64) -> OwnedArgs {
    let mut args = OwnedArgs::zeros(&spec.dims, spec.marks.len());
    let mut rng = stream(seed, probe, 0, 0);
    args.t = rng.uniform() * spec.horizon;
    let fill = |v: &mut DVector<f64>, rng: &mut crate::rng::StreamRng| {
        for e in v.iter_mut() {
            *e = rng.uniform_in(-1.0, 1.0);
        }
    };
    fill(&mut args.x, &mut rng);
    fill(&mut args.y, &mut rng);
    for e in args.z.iter_mut() {
        *e = rng.uniform_in(-1.0, 1.0);
    }
    for rj in &mut args.r {
        fill(rj, &mut rng);
    }
    fill(&mut args.v, &mut rng);
    args
}

fn perturb(args: &mut OwnedArgs, var: VarId, idx: usize, delta: f64) {
    match var {
        VarId::X => args.x[idx] += delta,
        VarId::Y => args.y[idx] += delta,
        VarId::Z => {
            let cols = args.z.ncols();
            args.z[(idx / cols, idx % cols)] += delta;
        }
        VarId::R(j) => args.r[j][idx] += delta,
        VarId::V => args.v[idx] += delta,
    }
}
