//! One runner per experiment; each returns its report section and artifacts.

use std::sync::Arc;

use kfp_core::diagnostics::regularization_probe;
use kfp_core::harris::{harris_rate, HarrisInputs};
use kfp_core::positivity::{
    spreading_constant, subsolution_params, verify_barrier, verify_subsolution, VectorField,
};
use kfp_core::solver::{
    decay_fit, discretize, evolve, steady_state_from, uniform_ladder, DiscreteOperator, DtMode,
    EvolveOptions, Grid, GridField, Observation, Observer, SteadyStateOptions,
};
use kfp_core::weights::{verify_conditions, ConditionOptions, SamplingBox};
use kfp_core::{KfpError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{
    Config, Experiment, InitialSection, DEFAULT_SAMPLES, DEFAULT_TOLERANCE,
};

#[derive(Debug, Default)]
pub struct Outcome {
    pub section: Value,
    pub observations: Vec<Observation>,
    pub plots: Vec<(String, Vec<(f64, f64)>)>,
    pub checkpoints: Vec<(String, GridField)>,
    /// A certificate or check that ran to completion but did not hold.
    pub failed: bool,
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("module reports serialize")
}

pub fn run(exp: Experiment, cfg: &Config) -> Result<Outcome> {
    match exp {
        Experiment::Simulate => simulate(cfg),
        Experiment::Verify => verify(cfg),
        Experiment::HarrisRate => harris(cfg),
        Experiment::Subsolution => subsolution(cfg),
        Experiment::Regularize => regularize(cfg),
        Experiment::SteadyState => steady(cfg),
        Experiment::Report => Err(KfpError::Contract("`report` bundles other experiments".into())),
    }
}

fn grid(cfg: &Config) -> Result<Grid> {
    cfg.grid().expect("validated")
}

fn operator(cfg: &Config, grid: &Grid, with_sink: bool) -> Result<DiscreteOperator> {
    let g = cfg.general_form()?;
    let sink = if with_sink { cfg.sink() } else { None };
    Ok(discretize(&g, grid, sink)?.with_scheme(cfg.scheme()))
}

fn dt_mode(cfg: &Config) -> DtMode {
    match cfg.run.dt_safety {
        Some(safety) => DtMode::Auto { safety },
        None => DtMode::default(),
    }
}

fn initial(cfg: &Config, grid: &Grid) -> Result<GridField> {
    match cfg.run.initial.unwrap_or_default() {
        InitialSection::Bump { x0, v0, width } => {
            GridField::from_fn(*grid, |x, v| (-((x - x0).powi(2) + (v - v0).powi(2)) / width).exp())?.normalized()
        }
        InitialSection::Random { count } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
            let bumps: Vec<[f64; 4]> = (0..count)
                .map(|_| {
                    [
                        rng.gen_range(-0.5..0.5) * grid.lx,
                        rng.gen_range(-0.5..0.5) * grid.lv,
                        rng.gen_range(0.2..1.0),
                        rng.gen_range(0.5..1.5),
                    ]
                })
                .collect();
            GridField::from_fn(*grid, |x, v| {
                bumps
                    .iter()
                    .map(|[x0, v0, w, a]| a * (-((x - x0).powi(2) + (v - v0).powi(2)) / w).exp())
                    .sum()
            })?
            .normalized()
        }
    }
}

fn steady_field(cfg: &Config, grid: &Grid) -> Result<GridField> {
    let op = operator(cfg, grid, false)?;
    let tol = cfg.run.tolerance.unwrap_or(DEFAULT_TOLERANCE);
    let opts = SteadyStateOptions {
        dt_safety: cfg.run.dt_safety.unwrap_or(SteadyStateOptions::default().dt_safety),
        ..Default::default()
    };
    steady_state_from(&op, grid, tol, None, &opts)
}

fn simulate(cfg: &Config) -> Result<Outcome> {
    let grid = grid(cfg)?;
    let op = operator(cfg, &grid, true)?;
    let weight = cfg.weight.as_ref().map(|_| cfg.weight_spec()).transpose()?;
    let f0 = initial(cfg, &grid)?;
    let t_end = match &cfg.run.ladder {
        Some(l) if cfg.run.t_end.is_none() => l.iter().copied().fold(0.0, f64::max),
        _ => cfg.run.t_end.unwrap_or(crate::config::DEFAULT_T_END),
    };
    let steady = if cfg.run.distance {
        Some(steady_field(cfg, &grid)?)
    } else {
        None
    };

    let mut obs = vec![Observer::Mass];
    if let Some(w) = &weight {
        obs.push(Observer::weighted_norm(&grid, w, 1.0, "l1m"));
        if let Some(g) = &steady {
            obs.push(Observer::distance(g, w, "distance"));
        }
    }
    let opts = EvolveOptions {
        dt: dt_mode(cfg),
        ladder: cfg.ladder(),
        ..Default::default()
    };
    let (f, log) = evolve(&f0, &op, t_end, &mut obs, &opts)?;

    let tracked = if steady.is_some() && weight.is_some() {
        Some("distance")
    } else if weight.is_some() {
        Some("l1m")
    } else {
        None
    };
    let mut plots = Vec::new();
    let mut fit = Value::Null;
    if let Some(name) = tracked {
        let s = log.series(name);
        if s.len() >= 8 {
            fit = decay_fit(&s).map(|d| to_json(&d)).unwrap_or(Value::Null);
        }
        if !s.is_empty() {
            plots.push((name.to_string(), s));
        }
    }
    let mut checkpoints = Vec::new();
    if cfg.run.checkpoint {
        checkpoints.push(("initial".to_string(), f0.clone()));
        checkpoints.push(("final".to_string(), f.clone()));
        if let Some(g) = &steady {
            checkpoints.push(("steady".to_string(), g.clone()));
        }
    }
    let (m0, m1) = (f0.mass(), f.mass());
    Ok(Outcome {
        section: json!({
            "model": cfg.model_spec()?.label(),
            "weight": weight.as_ref().map(|w| w.label()),
            "grid": to_json(&grid),
            "scheme": format!("{:?}", op.scheme),
            "cfl": to_json(&op.cfl_bound()),
            "t_end": f.t,
            "initial_mass": m0,
            "final_mass": m1,
            "mass_drift": (m1 - m0).abs(),
            "min_cell": f.min(),
            "observations": log.entries.len(),
            "decay_fit": fit,
            "decay_observable": tracked,
        }),
        observations: log.entries,
        plots,
        checkpoints,
        failed: false,
    })
}

fn verify(cfg: &Config) -> Result<Outcome> {
    let g = cfg.general_form()?;
    let w = cfg.weight_spec()?;
    let gs = cfg.grid.expect("validated");
    let bx = SamplingBox::new(gs.lx, gs.lv, gs.nx, gs.nv, 1)?;
    let v = cfg.verify.clone().unwrap_or_default();
    let p_list = v.p_list().map_err(KfpError::Validation)?;
    let opts = ConditionOptions {
        search_radius: v.search_radius,
        radius_step: v.radius_step,
    };
    let rep = verify_conditions(&g, &w, &cfg.comparison(), &bx, v.n_max.unwrap_or(2), &p_list, &opts)?;
    Ok(Outcome {
        failed: !rep.success,
        section: json!({
            "model": cfg.model_spec()?.label(),
            "weight": w.label(),
            "conditions": to_json(&rep),
        }),
        ..Default::default()
    })
}

fn harris(cfg: &Config) -> Result<Outcome> {
    let h = cfg.harris.clone().expect("validated");
    let inputs = HarrisInputs {
        alpha: h.alpha.expect("validated"),
        b: h.b.expect("validated"),
        t: h.t.expect("validated"),
        mu_mass: h.mu_mass.expect("validated"),
        m_of_r: h.m_of_r.expect("validated"),
    };
    let rate = harris_rate(&inputs)?;
    Ok(Outcome {
        section: json!({ "inputs": to_json(&inputs), "rate": to_json(&rate) }),
        ..Default::default()
    })
}

fn subsolution(cfg: &Config) -> Result<Outcome> {
    let s = cfg.subsolution.clone().expect("validated");
    let samples = s.samples.unwrap_or(DEFAULT_SAMPLES);
    let p = subsolution_params(
        s.m.expect("validated"),
        s.v.expect("validated"),
        s.r.expect("validated"),
        s.tau.expect("validated"),
        s.alpha.expect("validated"),
        1,
    )?;
    let (rep, spread) = match &cfg.model {
        Some(_) => {
            let g = cfg.general_form()?;
            (verify_subsolution(&p, &g, samples)?, Some(spreading_constant(&p, &g, samples)?))
        }
        None => {
            let zero: VectorField = Arc::new(|x: &[f64]| vec![0.0; x.len()]);
            let p = p.clone().with_flow(&p.x0, &p.v0, zero)?;
            (verify_barrier(&p, samples, 1e-8)?, None)
        }
    };
    let ok = rep.lphi_ok && rep.boundary_ok && rep.k_spread_ok;
    Ok(Outcome {
        failed: !ok,
        section: json!({
            "params": to_json(&p),
            "report": to_json(&rep),
            "spreading_constant": spread.map(|c| to_json(&c)),
        }),
        ..Default::default()
    })
}

fn regularize(cfg: &Config) -> Result<Outcome> {
    let grid = grid(cfg)?;
    let g = cfg.general_form()?;
    let w = cfg.weight_spec()?;
    let op = operator(cfg, &grid, false)?;
    let ladder = cfg.run.ladder.clone().unwrap_or_else(|| uniform_ladder(0.0, 0.5, 50));
    let probe = regularization_probe(&g, &w, &op, &ladder)?;
    let observations = probe
        .sequence
        .iter()
        .map(|&(t, value)| Observation {
            t,
            observable: "compensated_l2m".into(),
            value,
        })
        .collect();
    Ok(Outcome {
        plots: vec![("compensated_l2m".into(), probe.sequence.clone())],
        section: json!({ "probe": to_json(&probe) }),
        observations,
        ..Default::default()
    })
}

fn steady(cfg: &Config) -> Result<Outcome> {
    let grid = grid(cfg)?;
    let g = steady_field(cfg, &grid)?;
    let max = g.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let checkpoints = if cfg.run.checkpoint {
        vec![("steady".to_string(), g.clone())]
    } else {
        Vec::new()
    };
    Ok(Outcome {
        section: json!({
            "model": cfg.model_spec()?.label(),
            "grid": to_json(&grid),
            "tolerance": cfg.run.tolerance.unwrap_or(DEFAULT_TOLERANCE),
            "mass": g.mass(),
            "min_cell": g.min(),
            "max_cell": max,
        }),
        checkpoints,
        ..Default::default()
    })
}
