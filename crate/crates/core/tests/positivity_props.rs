use std::sync::Arc;

use approx::assert_relative_eq;
use kfp_core::model::{to_general_form, CustomCoefficients, GeneralKfp, ModelSpec};
use kfp_core::positivity::{
    eval_d, eval_subsolution, form_matrix, pointwise_lower_bound, spreading_check, subsolution_params,
    tau_ceiling, verify_barrier, VectorField,
};
use kfp_core::solver::{build_grid, discretize, evolve, uniform_ladder, weighted_norm, EvolveOptions, GridField};
use kfp_core::weights::WeightSpec;
use kfp_core::KfpError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn langevin() -> GeneralKfp {
    let c = CustomCoefficients::scalar("langevin", 1.0, |_| 0.0, |_| 0.0, |_, v| v, |_, _| 1.0, |_, v| v * v / 2.0);
    to_general_form(&ModelSpec::custom(c).unwrap()).unwrap()
}

fn min_eig(m: [[f64; 2]; 2]) -> f64 {
    let (p, q, s) = (m[0][0], m[0][1], m[1][1]);
    0.5 * (p + s - ((p - s).powi(2) + 4.0 * q * q).sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn barrier_constants_satisfy_their_constraints(
        m in 0.5f64..6.0, v in 0.0f64..20.0, r in 0.3f64..2.0, frac in 0.05f64..0.99, alpha in 1.05f64..3.0, d in 1usize..3,
    ) {
        let tau = frac * tau_ceiling(m, v, r);
        let p = subsolution_params(m, v, r, tau, alpha, d).unwrap();
        let mm = m.max(1.0);
        prop_assert_eq!(p.b, 2.0 * p.a);
        prop_assert!(p.c >= 12.0 * p.b);
        prop_assert!(p.c >= 80.0 * (mm + 1.0).powi(2) * p.b * (1.0 - 1e-15));
        prop_assert!(p.a * p.c > p.b * p.b);
        prop_assert!(min_eig(form_matrix(p.a, p.b, p.c, p.mu)) >= p.c / 20.0);
        // μ is the first power of two that works
        if p.mu > 1.0 {
            prop_assert!(min_eig(form_matrix(p.a, p.b, p.c, p.mu / 2.0)) < p.c / 20.0);
        }
        prop_assert!(p.lambda_spread > alpha);
        prop_assert!(p.ln_k_spread < 0.0 && p.ln_k_spread.is_finite());
        prop_assert!(p.ln_eps_over_delta < 0.0);
    }
}

#[test]
fn barrier_vanishes_as_time_goes_to_zero() {
    let p = subsolution_params(1.0, 0.0, 1.0, 0.01, 2.0, 1).unwrap();
    let delta = 0.3;
    let at0 = eval_subsolution(&p, delta, 0.0, &[0.2], &[0.1]).unwrap();
    assert!(at0.limit);
    assert_relative_eq!(at0.ln_eps, delta.ln() + p.ln_eps_over_delta, max_relative = 1e-15);
    assert_eq!(at0.value, -at0.ln_eps.exp());

    let mut last = f64::INFINITY;
    for k in 1..12 {
        let t = p.tau * 0.5f64.powi(k);
        let s = eval_subsolution(&p, delta, t, &[0.2], &[0.1]).unwrap();
        assert!(!s.limit);
        assert!(s.ln_barrier < last);
        last = s.ln_barrier;
    }
    assert!(last < -1e9);

    // Q vanishes at the centre of the characteristic
    let c = eval_subsolution(&p, delta, p.tau / 3.0, &[0.0], &[0.0]).unwrap();
    assert_relative_eq!(c.ln_barrier, delta.ln(), max_relative = 1e-15);
    assert!(eval_subsolution(&p, delta, p.tau, &[0.0], &[0.0]).is_err());
    assert!(eval_subsolution(&p, -1.0, p.tau / 2.0, &[0.0], &[0.0]).is_err());
}

#[test]
fn random_barriers_are_subsolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..4 {
        let amp: f64 = rng.gen_range(0.2..2.0);
        let theta: f64 = rng.gen_range(-3.0..3.0);
        let (x0, v0): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let m = amp;
        let v = (m.max(1.0) + 1.0).powi(2) * (amp * theta.sin().abs() + x0.abs() + v0.abs());
        let r = rng.gen_range(0.5..1.5);
        let tau = 0.5 * tau_ceiling(m, v, r);
        let phi: VectorField = Arc::new(move |x: &[f64]| vec![amp * (x[0] + theta).sin()]);
        let p = subsolution_params(m, v, r, tau, 2.0, 1).unwrap().with_flow(&[x0], &[v0], phi).unwrap();
        let rep = verify_barrier(&p, 1024, 1e-8).unwrap();
        assert!(rep.lphi_ok && rep.boundary_ok, "{rep:?}");
    }
}

#[test]
fn centre_far_from_origin_needs_a_larger_bound() {
    let p = subsolution_params(1.0, 1.0, 1.0, 0.01, 2.0, 1).unwrap();
    let zero: VectorField = Arc::new(|x: &[f64]| vec![0.0; x.len()]);
    assert!(matches!(p.with_flow(&[3.0], &[0.0], zero), Err(KfpError::Precondition(_))));
}

#[test]
fn langevin_zero_order_coefficient() {
    // D = −v²/4 − ½ + ½v² + 1 for B = v, Φ = 0
    let g = langevin();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (x, v): (f64, f64) = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
        let d = eval_d(&g, None, 0.0, &[x], &[v]).unwrap();
        assert_relative_eq!(d, v * v / 4.0 + 0.5, max_relative = 1e-14);
        let custom = |_: f64, _: &[f64], _: &[f64]| 0.0;
        let d0 = eval_d(&g, Some(&custom), 0.0, &[x], &[v]).unwrap();
        assert_relative_eq!(d0, v * v / 4.0 - 0.5, epsilon = 1e-14);
    }
}

fn gaussian_snapshots(times: &[f64]) -> Vec<GridField> {
    let grid = build_grid(3.0, 3.0, 48, 48).unwrap();
    times
        .iter()
        .map(|&t| {
            let mut f = GridField::from_fn(grid, |x, v| (-(x * x + v * v)).exp()).unwrap();
            f.t = t;
            f
        })
        .collect()
}

#[test]
fn spreading_edge_cases() {
    let snaps = gaussian_snapshots(&[0.0, 0.01, 0.02, 0.03]);
    let over = spreading_check(&snaps, 0.0, 0.0, 0.5, 0.04, 2.0, 2.0).unwrap();
    assert!(!over.hypothesis_met && !over.ok);
    assert!(over.message.contains("hypothesis"));

    let delta = 0.5;
    let same = spreading_check(&snaps, 0.0, 0.0, 0.5, 0.04, 1.0, delta).unwrap();
    assert!(same.hypothesis_met && same.ok);
    assert!(same.k_emp >= 1.0);
    assert!(same.inner_min >= delta);

    assert!(spreading_check(&snaps, 0.0, 0.0, 0.5, 0.04, 0.5, delta).is_err());
    assert!(spreading_check(&Vec::<GridField>::new(), 0.0, 0.0, 0.5, 0.04, 2.0, delta).is_err());
}

#[test]
fn pointwise_lower_bound_cases() {
    let g = to_general_form(&ModelSpec::kfp(2.0, 2.0, 1).unwrap()).unwrap();
    let grid = build_grid(4.0, 4.0, 48, 48).unwrap();
    let op = discretize(&g, &grid, None).unwrap();
    let w = WeightSpec::gaussian(0.05).unwrap();
    let big_r = 1.0;
    let raw = GridField::from_fn(grid, |x, v| if x * x + v * v <= big_r * big_r { 1.0 } else { 0.0 }).unwrap();
    let scale = 1.0 / weighted_norm(&raw, &w, 1.0).unwrap();
    let f0 = GridField::new(grid, raw.values.iter().map(|a| a * scale).collect(), 0.0).unwrap();
    let opts = EvolveOptions { ladder: uniform_ladder(0.0, 1.0, 8), ..Default::default() };
    let mut snaps = vec![f0.clone()];
    let mut cur = f0;
    for k in 1..=4 {
        let (next, _) = evolve(&cur, &op, 0.25 * k as f64, &mut [], &opts).unwrap();
        snaps.push(next.clone());
        cur = next;
    }
    let res = pointwise_lower_bound(&snaps, big_r, 0.5, &w).unwrap();
    assert!(res.gamma_emp > 0.0);
    assert_eq!(res.series.len(), 4);
    assert!(res.series.iter().all(|&(_, g)| g >= res.gamma_emp));

    let ring = GridField::from_fn(grid, |x, v| if x * x + v * v > 4.0 { 1e-3 } else { 0.0 }).unwrap();
    let outside = vec![ring.clone(), ring];
    assert!(matches!(pointwise_lower_bound(&outside, big_r, 0.5, &w), Err(KfpError::Contract(_))));
}
