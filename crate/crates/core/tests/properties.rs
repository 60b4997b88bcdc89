//! Randomized structural properties of the building blocks: admissible-set
//! projections, polynomial regression recovery, scenario serialization and
//! linearity of the Hamiltonian in its multipliers.

use fbsde_control::benchmarks::nonlinear_coupled_spec;
use fbsde_control::fbsde::{CondExpOp, FeatureMap};
use fbsde_control::hamiltonian::{eval_hamiltonian, Multipliers};
use fbsde_control::model::{ControlSet, OwnedArgs};
use fbsde_control::scenario::{RngSpec, ScenarioBatch, TimeGrid};
use nalgebra::DVector;
use proptest::prelude::*;

proptest! {
    #[test]
    fn projection_is_idempotent_feasible_and_non_expansive(
        dim in 1usize..4,
        raw in proptest::collection::vec(-10.0f64..10.0, 8),
        half in 0.1f64..5.0,
        radius in 0.1f64..4.0,
    ) {
        let u = DVector::from_fn(dim, |i, _| raw[i]);
        let w = DVector::from_fn(dim, |i, _| raw[i + 4]);
        let sets = [
            ControlSet::Box { lower: vec![-half; dim], upper: vec![half; dim] },
            ControlSet::Ball { center: vec![0.25; dim], radius },
            ControlSet::Simplex { dim },
        ];
        for set in &sets {
            let pu = set.project(&u);
            let pw = set.project(&w);
            prop_assert!(set.contains(&pu, 1e-9), "projection lands outside {set:?}");
            prop_assert!((set.project(&pu) - &pu).norm() <= 1e-12, "not idempotent on {set:?}");
            prop_assert!(
                (&pu - &pw).norm() <= (&u - &w).norm() + 1e-12,
                "expansive on {set:?}"
            );
        }
    }

    #[test]
    fn scenario_dump_load_round_trips_bit_identically(
        steps in 1usize..6,
        paths in 1usize..9,
        d in 1usize..3,
        seed in any::<u64>(),
        rate in 0.2f64..2.0,
        with_mark in any::<bool>(),
    ) {
        let grid = TimeGrid::new(0.75, steps).unwrap();
        let rates: Vec<f64> = if with_mark { vec![rate] } else { vec![] };
        let batch = ScenarioBatch::generate(grid, paths, d, &rates, RngSpec { seed }).unwrap();
        let mut bytes = Vec::new();
        batch.dump(&mut bytes).unwrap();
        let loaded = ScenarioBatch::load(bytes.as_slice(), grid, &rates).unwrap();
        let mut again = Vec::new();
        loaded.dump(&mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn regression_reproduces_polynomials_of_the_regressor(
        c0 in -2.0f64..2.0,
        c1 in -2.0f64..2.0,
        c2 in -2.0f64..2.0,
        xs in proptest::collection::vec(-3.0f64..3.0, 32),
    ) {
        let paths = xs.len();
        let map = FeatureMap::new(1, 2);
        let op = CondExpOp::regress(&xs, paths, &map, 1e-9, 0).unwrap();
        let targets: Vec<f64> = xs.iter().map(|x| c0 + c1 * x + c2 * x * x).collect();
        let (fitted, _) = op.apply(&targets, 1);
        for (fit, target) in fitted.iter().zip(&targets) {
            prop_assert!(
                (fit - target).abs() <= 1e-5 * (1.0 + target.abs()),
                "degree-2 target not reproduced: {fit} vs {target}"
            );
        }
    }

    #[test]
    fn hamiltonian_is_affine_in_the_multipliers(
        scale in -3.0f64..3.0,
        fill in proptest::collection::vec(-2.0f64..2.0, 13),
    ) {
        let spec = nonlinear_coupled_spec();
        let marks = spec.marks.len();
        let mut args = OwnedArgs::zeros(&spec.dims, marks);
        args.t = 0.3;
        args.x[0] = fill[0];
        args.y[0] = fill[1];
        args.z[(0, 0)] = fill[2];
        args.r[0][0] = fill[3];
        args.v[0] = fill[4];

        let zero = Multipliers::zeros(&spec);
        let mut m1 = Multipliers::zeros(&spec);
        m1.k[0] = fill[5];
        m1.p[0] = fill[6];
        m1.q[(0, 0)] = fill[7];
        m1.beta[0][0] = fill[8];
        let mut m2 = Multipliers::zeros(&spec);
        m2.k[0] = fill[9];
        m2.p[0] = fill[10];
        m2.q[(0, 0)] = fill[11];
        m2.beta[0][0] = fill[12];
        let mut combo = Multipliers::zeros(&spec);
        combo.k = &m1.k * scale + &m2.k;
        combo.p = &m1.p * scale + &m2.p;
        combo.q = &m1.q * scale + &m2.q;
        combo.beta[0] = &m1.beta[0] * scale + &m2.beta[0];

        let h0 = eval_hamiltonian(&spec, &args.borrow(), &zero);
        let h1 = eval_hamiltonian(&spec, &args.borrow(), &m1);
        let h2 = eval_hamiltonian(&spec, &args.borrow(), &m2);
        let hc = eval_hamiltonian(&spec, &args.borrow(), &combo);
        let expected = h0 + scale * (h1 - h0) + (h2 - h0);
        prop_assert!(
            (hc - expected).abs() <= 1e-9 * (1.0 + expected.abs()),
            "affinity violated: {hc} vs {expected}"
        );
    }
}
