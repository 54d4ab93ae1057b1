//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line.
//!
//! Criteria listed in `KNOWN_RED` are reported but do not fail the run; each
//! has a written analysis in the project decision log.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use kfp_core::diagnostics::{
    growth_check, identity_b1_b2, identity_l32, nash_check, nash_envelope, regularization_probe,
};
use kfp_core::harris::{harris_rate, HarrisInputs};
use kfp_core::model::{to_general_form, CustomCoefficients, GeneralKfp, ModelSpec};
use kfp_core::positivity::{
    spreading_check, subsolution_params, tau_ceiling, verify_subsolution, VectorField,
};
use kfp_core::solver::{
    build_grid, decay_fit, discretize, evolve, steady_state, uniform_ladder, DiscreteOperator,
    EvolveOptions, Grid, GridField, Observer, ObservationLog, Scheme, Sink,
};
use kfp_core::weights::{verify_conditions, ComparisonH, ConditionOptions, SamplingBox, WeightSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_RED: &[usize] = &[8];

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

/// Conservation bookkeeping shared by every no-sink run.
#[derive(Default)]
struct RunLedger {
    runs: usize,
    worst_mass_drift: f64,
    min_value: f64,
    /// `(label, growth rate, L¹(m) series)` for the growth-bound check.
    growth: Vec<(String, f64, Vec<(f64, f64)>)>,
}

impl RunLedger {
    fn record(&mut self, f0: &GridField, log: &ObservationLog, last: &GridField) {
        let m0 = f0.mass();
        for (_, m) in log.series("mass") {
            self.worst_mass_drift = self.worst_mass_drift.max((m - m0).abs() / m0);
        }
        for (_, m) in log.series("min") {
            self.min_value = self.min_value.min(m);
        }
        self.min_value = self.min_value.min(last.min());
        self.runs += 1;
    }
}

/// Runs without sink, observing mass and the smallest cell on the ladder.
fn tracked_run<'a>(
    ledger: &mut RunLedger,
    f0: &GridField,
    op: &DiscreteOperator,
    t_end: f64,
    ladder: Vec<f64>,
    extra: Vec<Observer<'a>>,
) -> (GridField, ObservationLog) {
    let mut obs = vec![Observer::Mass, Observer::custom("min", |f: &GridField| f.min())];
    obs.extend(extra);
    let opts = EvolveOptions {
        ladder,
        ..Default::default()
    };
    let (f, log) = evolve(f0, op, t_end, &mut obs, &opts).expect("evolve");
    ledger.record(f0, &log, &f);
    (f, log)
}

fn bump(grid: Grid, x0: f64, v0: f64, width: f64) -> GridField {
    GridField::from_fn(grid, |x, v| (-((x - x0).powi(2) + (v - v0).powi(2)) / width).exp())
        .unwrap()
        .normalized()
        .unwrap()
}

fn l1_distance(a: &GridField, b: &GridField) -> f64 {
    a.values.iter().zip(&b.values).map(|(p, q)| (p - q).abs()).sum::<f64>() * a.grid.cell_volume()
}

fn kfp(gamma: f64, beta: f64) -> GeneralKfp {
    to_general_form(&ModelSpec::kfp(gamma, beta, 1).unwrap()).unwrap()
}

fn fhn() -> GeneralKfp {
    to_general_form(&ModelSpec::fhn(1.0, 1.0, 1.0).unwrap()).unwrap()
}

fn growth_rate(g: &GeneralKfp, w: &WeightSpec, h: &ComparisonH) -> f64 {
    let b = SamplingBox::new(6.0, 6.0, 121, 121, 1).unwrap();
    verify_conditions(g, w, h, &b, 1, &[2.0], &ConditionOptions::default())
        .unwrap()
        .growth_rate
}

fn steady_state_oracle() -> Outcome {
    let g = kfp(2.0, 2.0);
    let mut errs = Vec::new();
    for n in [128usize, 256] {
        let grid = build_grid(6.0, 6.0, n, n).unwrap();
        let op = discretize(&g, &grid, None).unwrap().with_scheme(Scheme::Minmod);
        let s = steady_state(&op, &grid, 1e-9).unwrap();
        let exact = GridField::from_fn(grid, |x, v| (-(1.0 + v * v) / 2.0 - (1.0 + x * x) / 2.0).exp())
            .unwrap()
            .normalized()
            .unwrap();
        errs.push(l1_distance(&s, &exact));
    }
    let ratio = errs[1] / errs[0];
    Outcome {
        id: 1,
        name: "steady-state oracle",
        pass: errs[0] <= 0.02 && ratio <= 0.6,
        detail: format!("L1 err 128²={:.3e} 256²={:.3e} ratio={ratio:.3}", errs[0], errs[1]),
    }
}

fn exponential_convergence(ledger: &mut RunLedger) -> Outcome {
    let cases = [
        ("kfp(beta=4,gamma=1)", kfp(1.0, 4.0), WeightSpec::kfp(0.05, 0.1, 1.0).unwrap(), ComparisonH::Kfp { beta: 4.0, gamma: 1.0 }),
        ("fhn(1,1,1)", fhn(), WeightSpec::gaussian(0.1).unwrap(), ComparisonH::Fhn),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (label, g, w, h) in cases {
        let grid = build_grid(6.0, 6.0, 96, 96).unwrap();
        let op = discretize(&g, &grid, None).unwrap();
        let gs = steady_state(&op, &grid, 1e-12).unwrap();
        let f0 = bump(grid, 1.5, 1.0, 0.5);
        let extra = vec![Observer::distance(&gs, &w, "dist"), Observer::weighted_norm(&grid, &w, 1.0, "l1m")];
        let (_, log) = tracked_run(ledger, &f0, &op, 20.0, uniform_ladder(0.0, 20.0, 80), extra);
        let fit = decay_fit(&log.series("dist")).unwrap();
        pass &= fit.r2 >= 0.99 && fit.lambda > 0.0;
        detail.push(format!("{label}: lambda={:.4} R2={:.5}", fit.lambda, fit.r2));
        ledger.growth.push((label.to_string(), growth_rate(&g, &w, &h), log.series("l1m")));
    }

    // Truncation effect: same spacing on a larger box.
    let g = fhn();
    let w = WeightSpec::gaussian(0.1).unwrap();
    let mut lambdas = Vec::new();
    for (l, n) in [(6.0, 96usize), (7.5, 120)] {
        let grid = build_grid(l, l, n, n).unwrap();
        let op = discretize(&g, &grid, None).unwrap();
        let gs = steady_state(&op, &grid, 1e-12).unwrap();
        let f0 = bump(grid, 1.5, 1.0, 0.5);
        let (_, log) = tracked_run(ledger, &f0, &op, 20.0, uniform_ladder(0.0, 20.0, 80), vec![Observer::distance(&gs, &w, "dist")]);
        lambdas.push(decay_fit(&log.series("dist")).unwrap().lambda);
    }
    detail.push(format!("fhn two-box lambda [-6,6]={:.4} [-7.5,7.5]={:.4}", lambdas[0], lambdas[1]));
    Outcome {
        id: 2,
        name: "exponential L1(m) convergence",
        pass,
        detail: detail.join("; "),
    }
}

fn conservation(ledger: &RunLedger) -> Outcome {
    Outcome {
        id: 3,
        name: "mass conservation and positivity",
        pass: ledger.runs > 0 && ledger.worst_mass_drift <= 1e-10 && ledger.min_value >= 0.0,
        detail: format!(
            "{} runs, worst relative mass drift={:.2e}, min cell={:.3e}",
            ledger.runs, ledger.worst_mass_drift, ledger.min_value
        ),
    }
}

fn condition_certification() -> Outcome {
    let b = SamplingBox::new(6.0, 6.0, 241, 241, 1).unwrap();
    let cases = [
        ("fhn r=0.1", fhn(), WeightSpec::gaussian(0.1).unwrap(), ComparisonH::Fhn),
        ("kfp lambda=0.05 eps=0.1", kfp(2.0, 2.0), WeightSpec::kfp(0.05, 0.1, 2.0).unwrap(), ComparisonH::Kfp { beta: 2.0, gamma: 2.0 }),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (label, g, w, h) in cases {
        let rep = verify_conditions(&g, &w, &h, &b, 2, &[2.0, f64::INFINITY], &ConditionOptions::default()).unwrap();
        let phi_inf = rep.phi_p.iter().find(|p| p.p == "inf");
        let ok = rep.success
            && rep.c1.alpha > 0.0
            && rep.c2.c2 > 0.0
            && rep.c4.c4.is_finite()
            && phi_inf.is_some_and(|p| p.a > 0.0 && p.m.is_finite());
        pass &= ok;
        detail.push(format!(
            "{label}: R0={} alpha={:.4} C2={:.3e} C4={:.3} phi_inf a={:.3}",
            rep.c1.search_radius,
            rep.c1.alpha,
            rep.c2.c2,
            rep.c4.c4,
            phi_inf.map_or(f64::NAN, |p| p.a)
        ));
    }
    Outcome {
        id: 4,
        name: "condition certification",
        pass,
        detail: detail.join("; "),
    }
}

fn harris_chain() -> Outcome {
    let inp = HarrisInputs {
        alpha: 1.0,
        b: 1.0,
        t: 1.0,
        mu_mass: 0.5,
        m_of_r: 8.0,
    };
    let got = harris_rate(&inp).unwrap();
    // Oracle in terms of e = e^{−1}: β = 1/(8(1−e)), γ₄ = (β(1+e)/2 + 1)/(β + 1).
    let e = (-1.0f64).exp();
    let beta = 1.0 / (8.0 * (1.0 - e));
    let gamma4 = (beta * (1.0 + e) / 2.0 + 1.0) / (beta + 1.0);
    let gamma5 = gamma4.max(0.875);
    let lambda = -gamma5.ln();
    let worked = (got.gamma5 - gamma5).abs() <= 1e-9 && (got.lambda - lambda).abs() <= 1e-9;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = 0;
    for _ in 0..10_000 {
        let alpha: f64 = rng.gen_range(0.05..5.0);
        let b: f64 = rng.gen_range(0.05..5.0);
        let floor = (8.0 * b / alpha).max(1.0);
        let inp = HarrisInputs {
            alpha,
            b,
            t: rng.gen_range(0.05..5.0),
            mu_mass: rng.gen_range(1e-3..1.999),
            m_of_r: floor * rng.gen_range(1.0..100.0),
        };
        match harris_rate(&inp) {
            Ok(r) if r.gamma5 > 0.0 && r.gamma5 < 1.0 => {}
            _ => bad += 1,
        }
    }
    Outcome {
        id: 5,
        name: "Harris chain arithmetic",
        pass: worked && bad == 0,
        detail: format!(
            "gamma5={:.15} (oracle {gamma5:.15}) lambda={:.15} (oracle {lambda:.15}); {bad}/10000 random inputs out of (0,1)",
            got.gamma5, got.lambda
        ),
    }
}

fn subsolution_sign() -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;

    let p = subsolution_params(1.0, 0.0, 1.0, 0.01, 2.0, 1).unwrap();
    let rep = verify_subsolution(&p, &fhn(), 1 << 16).unwrap();
    pass &= rep.lphi_ok && rep.boundary_ok && rep.k_spread_ok;
    detail.push(format!(
        "worked set: max rel violation={:.2e} boundary={} lnK={:.4e}",
        rep.max_relative_violation, rep.boundary_ok, rep.ln_k_spread
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = f64::NEG_INFINITY;
    let mut failures = 0;
    for _ in 0..20 {
        let m = rng.gen_range(1.0..3.0);
        let r = rng.gen_range(0.5..2.0);
        let alpha = rng.gen_range(1.0f64..3.0).max(1.0 + 1e-6);
        let theta = rng.gen_range(-PI..PI);
        let (x0, v0): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let coeffs = CustomCoefficients::scalar(
            "sine",
            1.0,
            move |x| m * (x + theta).sin(),
            move |x| m * (x + theta).cos(),
            |_, v| v,
            |_, _| 1.0,
            |_, v| v * v / 2.0,
        );
        let g = GeneralKfp::with_exact_lipschitz(Arc::new(coeffs), m).unwrap();
        let v_bound = (m + 1.0).powi(2) * (m * theta.sin().abs() + x0.abs() + v0.abs());
        let tau = 0.5 * tau_ceiling(m, v_bound, r);
        let phi_s: VectorField = Arc::new(move |x: &[f64]| vec![-m * (x[0] + theta).sin()]);
        let p = subsolution_params(m, v_bound, r, tau, alpha, 1)
            .unwrap()
            .with_flow(&[x0], &[v0], phi_s)
            .unwrap();
        let rep = verify_subsolution(&p, &g, 4096).unwrap();
        worst = worst.max(rep.max_relative_violation);
        if !(rep.lphi_ok && rep.boundary_ok && rep.k_spread_ok) {
            failures += 1;
        }
    }
    pass &= failures == 0;
    detail.push(format!("sweep: {failures}/20 draws failed, worst rel violation={worst:.2e}"));
    Outcome {
        id: 6,
        name: "subsolution sign",
        pass,
        detail: detail.join("; "),
    }
}

fn integral_identities() -> Outcome {
    let g = kfp(2.0, 2.0);
    let w = WeightSpec::kfp(0.05, 0.1, 2.0).unwrap();
    let mut rows: Vec<(String, Vec<f64>)> = vec![
        ("b1".into(), vec![]),
        ("b2 p=1".into(), vec![]),
        ("b2 p=2".into(), vec![]),
        ("b2 p=3".into(), vec![]),
    ];
    for n in [64usize, 128, 256] {
        let grid = build_grid(8.0, 8.0, n, n).unwrap();
        let op = discretize(&g, &grid, None).unwrap();
        let f = GridField::from_fn(grid, |x, v| (-(x * x + v * v) / 2.0).exp()).unwrap();
        for (k, p) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            let r = identity_b1_b2(&g, &w, &op, &f, &f, p).unwrap();
            if k == 0 {
                rows[0].1.push(r.b1.relative);
            }
            rows[k + 1].1.push(r.b2.relative);
        }
    }
    let mut pass = true;
    let mut detail = Vec::new();
    for (label, e) in &rows {
        let order = (e[1] / e[2]).log2();
        let coarse = (e[0] / e[1]).log2();
        pass &= order >= 2.0 && e[2] <= 1e-3;
        detail.push(format!("{label}: {:.2e}/{:.2e}/{:.2e} order {coarse:.3},{order:.3}", e[0], e[1], e[2]));
    }
    let l32: Vec<f64> = [64usize, 128, 256]
        .iter()
        .map(|&n| {
            let grid = build_grid(8.0, 8.0, n, n).unwrap();
            let f = GridField::from_fn(grid, |x, v| (-(x * x + v * v) / 2.0).exp()).unwrap();
            identity_l32(&f, &WeightSpec::gaussian(0.5).unwrap()).unwrap().relative
        })
        .collect();
    detail.push(format!("weighted gradient identity: {:.2e}/{:.2e}/{:.2e}", l32[0], l32[1], l32[2]));
    Outcome {
        id: 7,
        name: "integral identities",
        pass,
        detail: detail.join("; "),
    }
}

fn regularization() -> Outcome {
    let g = kfp(2.0, 2.0);
    let w = WeightSpec::kfp(0.05, 0.1, 2.0).unwrap();
    let grid = build_grid(6.0, 6.0, 128, 128).unwrap();
    let op = discretize(&g, &grid, None).unwrap();
    let ladder: Vec<f64> = (0..12).map(|k| 0.01 * 50f64.powf(k as f64 / 11.0)).collect();
    let probe = regularization_probe(&g, &w, &op, &ladder).unwrap();
    Outcome {
        id: 8,
        name: "regularization probe",
        pass: probe.bounded,
        detail: format!(
            "exponent={} tail slope={:.3} max={:.3e}",
            probe.exponent, probe.tail_slope, probe.max_value
        ),
    }
}

fn nash() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = build_grid(6.0, 6.0, 64, 64).unwrap();
    let mut worst = [0.0f64; 2];
    for _ in 0..100 {
        let bumps: Vec<[f64; 5]> = (0..rng.gen_range(1..6))
            .map(|_| {
                [
                    rng.gen_range(0.1..1.0),
                    rng.gen_range(-2.5..2.5),
                    rng.gen_range(-2.5..2.5),
                    rng.gen_range(0.3..1.2),
                    rng.gen_range(0.3..1.2),
                ]
            })
            .collect();
        let f = GridField::from_fn(grid, |x, v| {
            bumps
                .iter()
                .map(|b| b[0] * (-((x - b[1]) / b[3]).powi(2) / 2.0 - ((v - b[2]) / b[4]).powi(2) / 2.0).exp())
                .sum()
        })
        .unwrap();
        for (k, n) in [1usize, 2].into_iter().enumerate() {
            worst[k] = worst[k].max(nash_check(&f, n).unwrap().ratio / nash_envelope(n));
        }
    }
    let grid = build_grid(6.0, 6.0, 128, 128).unwrap();
    let gauss = GridField::from_fn(grid, |x, v| (-(x * x + v * v) / 2.0).exp()).unwrap();
    let ratio = nash_check(&gauss, 2).unwrap().ratio;
    let target = 1.0 / (2.0 * PI.sqrt());
    let rel = (ratio - target).abs() / target;
    Outcome {
        id: 9,
        name: "Nash envelope",
        pass: worst[0] <= 1.0 && worst[1] <= 1.0 && rel <= 0.01,
        detail: format!(
            "worst ratio/envelope n=1 {:.4} n=2 {:.4}; gaussian {ratio:.6} vs {target:.6} (rel {rel:.2e})",
            worst[0], worst[1]
        ),
    }
}

fn spreading(ledger: &mut RunLedger) -> Outcome {
    let g = fhn();
    let w = WeightSpec::gaussian(0.1).unwrap();
    let grid = build_grid(6.0, 6.0, 128, 128).unwrap();
    let op = discretize(&g, &grid, None).unwrap();
    let f0 = bump(grid, 0.0, 0.0, 0.5);
    let tau = 0.04;
    let mut traj = vec![f0.clone()];
    let mut series = vec![(0.0, kfp_core::solver::weighted_norm(&f0, &w, 1.0).unwrap())];
    for t in uniform_ladder(0.0, tau, 16) {
        let cur = traj.last().unwrap().clone();
        let (f, log) = tracked_run(ledger, &cur, &op, t, vec![t], vec![Observer::weighted_norm(&grid, &w, 1.0, "l1m")]);
        series.extend(log.series("l1m"));
        traj.push(f);
    }
    let res = spreading_check(&traj, 0.0, 0.0, 0.5, tau, 2.0, 0.05).unwrap();
    ledger
        .growth
        .push(("fhn bump".into(), growth_rate(&g, &w, &ComparisonH::Fhn), series));

    let mut growth_ok = true;
    let mut growth_detail = Vec::new();
    for (label, lambda, s) in &ledger.growth {
        let rep = growth_check(s, *lambda, 1e-9).unwrap();
        growth_ok &= rep.ok;
        growth_detail.push(format!("{label}: rate={lambda:.3} pairs={} worst excess={:.2e}", rep.pairs, rep.worst_excess));
    }
    Outcome {
        id: 10,
        name: "spreading and growth bound",
        pass: res.hypothesis_met && res.ok && growth_ok,
        detail: format!(
            "K_emp={:.4} (inner min {:.4}); {}",
            res.k_emp,
            res.inner_min,
            growth_detail.join("; ")
        ),
    }
}

fn sink_decay() -> Outcome {
    let g = kfp(2.0, 2.0);
    let w = WeightSpec::kfp(0.05, 0.1, 2.0).unwrap();
    let grid = build_grid(6.0, 6.0, 96, 96).unwrap();
    let op = discretize(&g, &grid, Some(Sink { m: 5.0, r: 2.0 })).unwrap();
    let f0 = bump(grid, 1.5, 1.0, 0.5);
    let mut obs = [Observer::weighted_norm(&grid, &w, 1.0, "l1m")];
    let opts = EvolveOptions {
        ladder: uniform_ladder(0.0, 8.0, 32),
        ..Default::default()
    };
    let (_, log) = evolve(&f0, &op, 8.0, &mut obs, &opts).unwrap();
    let fit = decay_fit(&log.series("l1m")).unwrap();
    Outcome {
        id: 11,
        name: "sink decay",
        pass: fit.lambda > 0.0 && fit.r2 >= 0.98,
        detail: format!("lambda={:.4} R2={:.5}", fit.lambda, fit.r2),
    }
}

fn main() {
    let mut ledger = RunLedger {
        min_value: f64::INFINITY,
        ..Default::default()
    };
    let mut outcomes = Vec::new();
    let timed = |o: &mut Vec<Outcome>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let mut out = f();
        out.detail.push_str(&format!(" [{:.1}s]", t.elapsed().as_secs_f64()));
        o.push(out);
    };
    timed(&mut outcomes, &mut steady_state_oracle);
    timed(&mut outcomes, &mut || exponential_convergence(&mut ledger));
    timed(&mut outcomes, &mut condition_certification);
    timed(&mut outcomes, &mut harris_chain);
    timed(&mut outcomes, &mut subsolution_sign);
    timed(&mut outcomes, &mut integral_identities);
    timed(&mut outcomes, &mut regularization);
    timed(&mut outcomes, &mut nash);
    timed(&mut outcomes, &mut || spreading(&mut ledger));
    timed(&mut outcomes, &mut sink_decay);
    outcomes.push(conservation(&ledger));
    outcomes.sort_by_key(|o| o.id);

    let mut unexpected = 0;
    for o in &outcomes {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && KNOWN_RED.contains(&o.id) { " (known)" } else { "" };
        println!("criterion {:>2} {tag}{note} {}: {}", o.id, o.name, o.detail);
        if !o.pass && !KNOWN_RED.contains(&o.id) {
            unexpected += 1;
        }
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    if unexpected > 0 {
        std::process::exit(1);
    }
}
