use std::f64::consts::PI;

use approx::assert_relative_eq;
use kfp_core::model::{
    drift_fields, eval_potential, lipschitz_constant, to_general_form, AxisBox, ModelSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn models() -> Vec<ModelSpec> {
    vec![
        ModelSpec::kfp(2.0, 2.0, 1).unwrap(),
        ModelSpec::kfp(1.0, 4.0, 1).unwrap(),
        ModelSpec::kfp(3.5, 2.5, 1).unwrap(),
        ModelSpec::fhn(1.0, 1.0, 1.0).unwrap(),
        ModelSpec::fhn(0.7, 1.6, 2.2).unwrap(),
    ]
}

#[test]
fn div_v_drift_matches_centered_differences_at_second_order() {
    for spec in models() {
        let g = to_general_form(&spec).unwrap();
        let mut errs = Vec::new();
        for h in [1e-2, 5e-3, 2.5e-3] {
            let mut worst = 0.0f64;
            for &(x, v) in &[(0.3, -1.2), (-1.5, 0.8), (2.0, 2.5)] {
                let fd = (g.drift_v(&[x], &[v + h])[0] - g.drift_v(&[x], &[v - h])[0]) / (2.0 * h);
                worst = worst.max((fd - g.div_v_drift(&[x], &[v])).abs());
            }
            errs.push(worst);
        }
        // the cubic FHN drift makes the FD error exactly quadratic; KFP is smooth
        for k in 0..2 {
            if errs[k] > 1e-11 {
                let order = (errs[k] / errs[k + 1]).log2();
                assert!(order > 1.8, "{} order {order} ({errs:?})", spec.label());
            }
        }
    }
}

#[test]
fn sine_lipschitz_against_brute_force_pairs() {
    let dom = AxisBox::new(vec![-PI], vec![PI]).unwrap();
    let est = lipschitz_constant(&|x: &[f64]| vec![x[0].sin()], None, &dom, 4000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut brute = 0.0f64;
    for _ in 0..200_000 {
        let a: f64 = rng.gen_range(-PI..PI);
        let b: f64 = a + rng.gen_range(-1e-3..1e-3);
        if (a - b).abs() > 0.0 {
            brute = brute.max((a.sin() - b.sin()).abs() / (a - b).abs());
        }
    }
    assert!((est.value - 1.0).abs() < 1e-3, "{est:?}");
    assert!((brute - 1.0).abs() < 1e-3);
}

#[test]
fn potential_and_drift_examples() {
    let p = eval_potential(&ModelSpec::kfp(2.0, 2.0, 1).unwrap(), &[0.0], &[3.0]).unwrap();
    assert_relative_eq!(p.v_pot, 0.5);
    assert_relative_eq!(p.w_v, 5.0);
    assert_relative_eq!(p.grad_w_v[0], 3.0);
    let p = eval_potential(&ModelSpec::kfp(1.0, 2.0, 2).unwrap(), &[3.0, 4.0], &[0.0, 0.0]).unwrap();
    assert_relative_eq!(p.v_pot, 26f64.sqrt(), max_relative = 1e-15);

    let (a, b) = drift_fields(&ModelSpec::fhn(1.0, 1.0, 2.0).unwrap(), &[1.0], &[1.0]).unwrap();
    assert_relative_eq!(a[0], 0.0);
    assert_relative_eq!(b[0], 1.0);
}

proptest! {
    #[test]
    fn kfp_general_form_has_no_x_force(gamma in 1.0f64..4.0, beta in 2.0f64..4.0, x in -6.0f64..6.0) {
        let g = to_general_form(&ModelSpec::kfp(gamma, beta, 1).unwrap()).unwrap();
        prop_assert_eq!(g.phi(&[x])[0], 0.0);
    }

    #[test]
    fn potential_gradient_reproduces_drift(
        which in 0usize..5, x in -5.0f64..5.0, v in -5.0f64..5.0,
    ) {
        let g = to_general_form(&models()[which]).unwrap();
        let h = 1e-5 * (1.0 + v.abs());
        let dw = (g.potential_v(&[x], &[v + h]) - g.potential_v(&[x], &[v - h])) / (2.0 * h);
        let b = g.drift_v(&[x], &[v])[0];
        prop_assert!((dw - b).abs() <= 1e-6 * (1.0 + b.abs()), "{} vs {}", dw, b);
    }

    #[test]
    fn fhn_x_drift_is_minus_v_plus_phi(
        a in 0.2f64..3.0, b in 0.2f64..3.0, c in 0.2f64..3.0, x in -5.0f64..5.0, v in -5.0f64..5.0,
    ) {
        let g = to_general_form(&ModelSpec::fhn(a, b, c).unwrap()).unwrap();
        prop_assert_eq!(g.drift_x(&[x], &[v])[0], g.phi(&[x])[0] - v);
        prop_assert!((g.phi(&[x])[0] - a * x).abs() <= 1e-14 * (1.0 + (a * x).abs()));
        prop_assert!((g.diffusion() - 1.0 / (b * b)).abs() <= 1e-15 / (b * b));
        prop_assert!(g.lipschitz() >= 1.0);
    }
}
