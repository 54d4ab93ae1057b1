use kfp_core::checkpoint::{read_field, write_field};
use kfp_core::model::{to_general_form, CustomCoefficients, GeneralKfp, ModelSpec};
use kfp_core::solver::{
    build_grid, decay_fit, discretize, evolve, steady_state, steady_state_from, uniform_ladder,
    weighted_norm, DiscreteOperator, DtMode, EvolveOptions, GridField, Observer, Sink,
    SteadyStateOptions,
};
use kfp_core::weights::WeightSpec;
use kfp_core::KfpError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(which: usize) -> GeneralKfp {
    match which {
        0 => to_general_form(&ModelSpec::kfp(2.0, 2.0, 1).unwrap()).unwrap(),
        1 => to_general_form(&ModelSpec::kfp(1.0, 4.0, 1).unwrap()).unwrap(),
        _ => to_general_form(&ModelSpec::fhn(1.0, 1.0, 1.0).unwrap()).unwrap(),
    }
}

fn ou_in_v() -> GeneralKfp {
    let c = CustomCoefficients::scalar("ou", 1.0, |_| 0.0, |_| 0.0, |_, v| v, |_, _| 1.0, |_, v| v * v / 2.0);
    to_general_form(&ModelSpec::custom(c).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn runs_conserve_mass_and_stay_nonnegative(which in 0usize..3, seed in any::<u64>(), t_end in 0.05f64..0.6) {
        let grid = build_grid(4.0, 4.0, 24, 24).unwrap();
        let op = discretize(&model(which), &grid, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..grid.len())
            .map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.0..5.0) } else { 0.0 })
            .collect();
        let f0 = GridField::new(grid, vals, 0.0).unwrap();
        prop_assume!(f0.mass() > 0.0);
        let opts = EvolveOptions { ladder: uniform_ladder(0.0, t_end, 6), ..Default::default() };
        let (f, log) = evolve(&f0, &op, t_end, &mut [Observer::Mass], &opts).unwrap();
        for (_, m) in log.series("mass") {
            prop_assert!((m - f0.mass()).abs() <= 1e-10 * f0.mass());
        }
        prop_assert!(f.min() >= 0.0);
    }

    #[test]
    fn split_and_direct_runs_agree_bitwise(which in 0usize..3, k1 in 1usize..40, k2 in 1usize..40) {
        let grid = build_grid(4.0, 4.0, 20, 20).unwrap();
        let op = discretize(&model(which), &grid, None).unwrap();
        let dt = 2f64.powi(-12);
        let f0 = GridField::from_fn(grid, |x, v| (-(x * x + (v - 0.5).powi(2))).exp()).unwrap();
        let opts = EvolveOptions { dt: DtMode::Fixed(dt), ..Default::default() };
        let (t1, t2) = (k1 as f64 * dt, (k1 + k2) as f64 * dt);
        let (mid, _) = evolve(&f0, &op, t1, &mut [], &opts).unwrap();
        let (split, _) = evolve(&mid, &op, t2, &mut [], &opts).unwrap();
        let (direct, _) = evolve(&f0, &op, t2, &mut [], &opts).unwrap();
        prop_assert_eq!(split.t.to_bits(), direct.t.to_bits());
        for (a, b) in split.values.iter().zip(&direct.values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), nx in 8usize..20, nv in 8usize..20, t in 0.0f64..100.0) {
        let grid = build_grid(1.0 + t / 50.0, 2.5, nx, nv).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..grid.len()).map(|_| rng.gen::<f64>() * 10f64.powi(rng.gen_range(-300..300))).collect();
        let f = GridField::new(grid, vals, t).unwrap();
        let mut buf = Vec::new();
        write_field(&f, &mut buf).unwrap();
        let g = read_field(buf.as_slice()).unwrap();
        prop_assert_eq!(g.grid, f.grid);
        prop_assert_eq!(g.t.to_bits(), f.t.to_bits());
        for (a, b) in f.values.iter().zip(&g.values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

/// `e^{−v²/2}` is annihilated by `∂_v(v f) + ∂²_v f`; away from the two
/// x-edge columns the discrete residual measures the v-operator alone.
#[test]
fn v_operator_residual_converges_at_first_order() {
    let g = ou_in_v();
    let mut errs = Vec::new();
    for n in [32usize, 64, 128] {
        let grid = build_grid(2.0, 6.0, 8, n).unwrap();
        let op = discretize(&g, &grid, None).unwrap();
        let f = GridField::from_fn(grid, |_, v| (-v * v / 2.0).exp()).unwrap();
        let mut out = vec![0.0; grid.len()];
        op.apply(&f.values, &mut out);
        let interior = (grid.nv..(grid.nx - 1) * grid.nv).map(|k| out[k].abs());
        errs.push(interior.sum::<f64>() * grid.hv / (grid.nx - 2) as f64);
    }
    // upwinding leaves an O(h) residual; the observed order climbs towards one
    let orders: Vec<f64> = errs.windows(2).map(|p| (p[0] / p[1]).log2()).collect();
    assert!(orders.iter().all(|&q| q > 0.9), "{errs:?}");
    assert!(orders[1] >= orders[0], "{orders:?}");
}

#[test]
fn sink_norm_decays_monotonically_after_transient() {
    let g = model(0);
    let w = WeightSpec::kfp(0.05, 0.1, 2.0).unwrap();
    let grid = build_grid(6.0, 6.0, 64, 64).unwrap();
    let op = discretize(&g, &grid, Some(Sink { m: 5.0, r: 2.0 })).unwrap();
    let f0 = GridField::from_fn(grid, |x, v| (-((x - 2.0).powi(2) + v * v)).exp()).unwrap().normalized().unwrap();
    let mut obs = [Observer::weighted_norm(&grid, &w, 1.0, "l1m"), Observer::Mass];
    let opts = EvolveOptions { ladder: uniform_ladder(0.0, 6.0, 48), ..Default::default() };
    let (_, log) = evolve(&f0, &op, 6.0, &mut obs, &opts).unwrap();
    let s = log.series("l1m");
    for pair in s.windows(2).filter(|p| p[0].0 >= 1.0) {
        assert!(pair[1].1 < pair[0].1, "{pair:?}");
    }
    let masses = log.series("mass");
    assert!(masses.windows(2).all(|p| p[1].1 < p[0].1));
}

#[test]
fn noisy_exponential_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let log: Vec<_> = (0..40)
        .map(|k| {
            let t = k as f64 * 0.25;
            (t, (-t).exp() * (1.0 + 0.01 * rng.gen_range(-1.0..1.0)))
        })
        .collect();
    let fit = decay_fit(&log).unwrap();
    assert!((0.9..=1.1).contains(&fit.lambda), "{fit:?}");
    assert!(fit.r2 > 0.98);
}

#[test]
fn steady_states() {
    let grid = build_grid(3.0, 3.0, 16, 16).unwrap();
    let zero = DiscreteOperator::zero(&grid);
    let g0 = steady_state(&zero, &grid, 1e-9).unwrap();
    let start = GridField::from_fn(grid, |x, v| (-(x * x + v * v) / 2.0).exp()).unwrap().normalized().unwrap();
    let gap = g0.values.iter().zip(&start.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap <= 1e-15, "{gap}");

    let grid = build_grid(5.0, 5.0, 48, 48).unwrap();
    let op = discretize(&model(2), &grid, None).unwrap();
    let g = steady_state(&op, &grid, 1e-8).unwrap();
    assert!(g.values.iter().all(|&a| a > 0.0));
    assert!((g.mass() - 1.0).abs() < 1e-12);

    let tight = SteadyStateOptions { max_steps: 10, ..Default::default() };
    match steady_state_from(&op, &grid, 1e-12, None, &tight) {
        Err(KfpError::BudgetExceeded { residual, .. }) => assert!(residual.is_finite()),
        other => panic!("{other:?}"),
    }
    let sink = discretize(&model(2), &grid, Some(Sink { m: 1.0, r: 1.0 })).unwrap();
    assert!(steady_state(&sink, &grid, 1e-8).is_err());
}

#[test]
fn mass_observer_is_constant() {
    let grid = build_grid(6.0, 6.0, 48, 48).unwrap();
    let op = discretize(&model(1), &grid, None).unwrap();
    let f0 = GridField::from_fn(grid, |x, v| (-((x + 1.0).powi(2) + v * v)).exp()).unwrap();
    let opts = EvolveOptions { ladder: uniform_ladder(0.0, 2.0, 20), ..Default::default() };
    let (_, log) = evolve(&f0, &op, 2.0, &mut [Observer::Mass], &opts).unwrap();
    let m0 = f0.mass();
    assert_eq!(log.entries.len(), 20);
    assert!(log.series("mass").iter().all(|(_, m)| (m - m0).abs() <= 1e-12 * m0));
    let w = WeightSpec::gaussian(0.1).unwrap();
    assert!(weighted_norm(&f0, &w, 1.0).unwrap() >= f0.l1());
}
