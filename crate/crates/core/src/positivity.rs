//! Spreading of positivity: characteristic flow, barrier subsolution,
//! transformed zero-order coefficient, and empirical lower-bound checks.
//!
//! The barrier lives in the spreading form
//!
//! ```text
//! ∂t f − Δ_v f = −(v + Φ_s(x))·∇_x f + A·∇_v f + C f,
//! ```
//!
//! which a canonical model with `K = 1` reaches through `Φ_s = −Φ`, `A = B`,
//! `C = div Φ + div_v B`.
//!
//! The constants of the construction are astronomically small (`K` is of
//! order `e^{−10^{14}}` for moderate inputs), so they are reported through
//! their logarithms.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{ensure_finite, KfpError, Result};
use crate::model::GeneralKfp;
use crate::sampling::Halton;
use crate::solver::GridField;
use crate::weights::WeightSpec;

pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Time window `[0, min(ln 2 / M, 1))` on which the flow bound holds.
pub fn flow_window(m: f64) -> f64 {
    (std::f64::consts::LN_2 / m.max(1.0)).min(1.0)
}

/// Solves `dX/dt = v₀ + Φ(X)`, `X(0) = x₀`, with adaptive Dormand–Prince
/// (relative tolerance `1e−10`) and asserts
/// `|X_t − x₀| ≤ t (M+1)² (|v₀| + |x₀| + |Φ(0)|)`.
pub fn flow_x(phi: &dyn Fn(&[f64]) -> Vec<f64>, m: f64, x0: &[f64], v0: &[f64], t: f64) -> Result<Vec<f64>> {
    ensure_finite("x0", x0)?;
    ensure_finite("v0", v0)?;
    if x0.len() != v0.len() {
        return Err(KfpError::Contract("x0 and v0 differ in dimension".into()));
    }
    let m = m.max(1.0);
    if !(t >= 0.0 && t < flow_window(m)) {
        return Err(KfpError::Contract(format!(
            "flow time {t} outside [0, {})",
            flow_window(m)
        )));
    }
    if t == 0.0 {
        return Ok(x0.to_vec());
    }
    let rhs = |x: &[f64]| -> Vec<f64> { phi(x).iter().zip(v0).map(|(p, v)| p + v).collect() };
    let x = dopri5(&rhs, x0, t, 1e-10, 1e-13)?;
    let phi0 = norm(&phi(&vec![0.0; x0.len()]));
    let bound = t * (m + 1.0).powi(2) * (norm(v0) + norm(x0) + phi0);
    let dist = norm(&x.iter().zip(x0).map(|(a, b)| a - b).collect::<Vec<_>>());
    if dist > bound * (1.0 + 1e-9) + 1e-14 {
        return Err(KfpError::Internal(format!(
            "flow displacement {dist:e} exceeds the Grönwall bound {bound:e} (is M = {m} a Lipschitz bound?)"
        )));
    }
    Ok(x)
}

/// Adaptive Dormand–Prince 5(4) from 0 to `t_end`.
fn dopri5(f: &dyn Fn(&[f64]) -> Vec<f64>, y0: &[f64], t_end: f64, rtol: f64, atol: f64) -> Result<Vec<f64>> {
    const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let _ = C;
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = 0.0;
    let mut h = (t_end / 16.0).max(1e-12);
    let mut steps = 0usize;
    while t < t_end {
        if t + h > t_end {
            h = t_end - t;
        }
        let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
        for s in 0..7 {
            let mut ys = y.clone();
            for (r, kr) in k.iter().enumerate() {
                for i in 0..n {
                    ys[i] += h * A[s][r] * kr[i];
                }
            }
            k.push(f(&ys));
        }
        let mut y5 = y.clone();
        let mut err = 0.0f64;
        for i in 0..n {
            let mut d5 = 0.0;
            let mut d4 = 0.0;
            for s in 0..7 {
                d5 += B5[s] * k[s][i];
                d4 += B4[s] * k[s][i];
            }
            y5[i] += h * d5;
            let sc = atol + rtol * y[i].abs().max(y5[i].abs());
            err = err.max((h * (d5 - d4)).abs() / sc);
        }
        if err <= 1.0 {
            t += h;
            y = y5;
        }
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= fac;
        steps += 1;
        if steps > 100_000 || !h.is_finite() || h <= 0.0 {
            return Err(KfpError::Internal("flow integrator failed to converge".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(KfpError::Internal("flow integrator produced a non-finite state".into()));
        }
    }
    Ok(y)
}

/// Barrier parameters with the flow field `Φ_s` driving the characteristic.
#[derive(Clone, Serialize)]
pub struct SubsolutionParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub mu: f64,
    /// Outer radius multiplier `λ`.
    pub lambda_spread: f64,
    /// `ε/δ`; underflows to 0 for realistic inputs, see `ln_eps_over_delta`.
    pub eps_over_delta: f64,
    pub ln_eps_over_delta: f64,
    /// Interior lower bound `K`; see `ln_k_spread`.
    pub k_spread: f64,
    pub ln_k_spread: f64,
    pub x0: Vec<f64>,
    pub v0: Vec<f64>,
    pub r: f64,
    pub tau: f64,
    pub alpha_spread: f64,
    pub m: f64,
    pub v_bound: f64,
    pub dim: usize,
    #[serde(skip)]
    pub phi: VectorField,
}

impl fmt::Debug for SubsolutionParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubsolutionParams")
            .field("a", &self.a)
            .field("b", &self.b)
            .field("c", &self.c)
            .field("mu", &self.mu)
            .field("lambda_spread", &self.lambda_spread)
            .field("ln_eps_over_delta", &self.ln_eps_over_delta)
            .field("ln_k_spread", &self.ln_k_spread)
            .field("r", &self.r)
            .field("tau", &self.tau)
            .field("alpha_spread", &self.alpha_spread)
            .field("m", &self.m)
            .finish()
    }
}

/// `min(1, r³/(2V), ln 2/M, 1/(20M))`.
pub fn tau_ceiling(m: f64, v: f64, r: f64) -> f64 {
    let m = m.max(1.0);
    let rv = if v > 0.0 { r.powi(3) / (2.0 * v) } else { f64::INFINITY };
    1f64.min(rv).min(std::f64::consts::LN_2 / m).min(1.0 / (20.0 * m))
}

/// Smallest eigenvalue of the symmetric 2×2 matrix `[[p, q], [q, s]]`.
fn min_eig(p: f64, q: f64, s: f64) -> f64 {
    let tr = p + s;
    let disc = ((p - s) * (p - s) + 4.0 * q * q).sqrt();
    0.5 * (tr - disc)
}

/// Matrix of the quadratic form `𝓑` in `((v−v₀)/t, (x−X_t)/t²)`.
pub fn form_matrix(a: f64, b: f64, c: f64, mu: f64) -> [[f64; 2]; 2] {
    let off = -mu * a * b + b + c / 2.0;
    [[mu * a * a - a / 2.0 - b, off], [off, mu * b * b - 1.5 * c]]
}

/// Barrier constants centred at the origin with `Φ_s ≡ 0`; use
/// [`with_flow`](SubsolutionParams::with_flow) to attach a field and centre.
///
/// `a = 1`, `b = 2a`, `c = b·max{12, 80(M+1)², 80d(τ/r²)³, 40dτ/r²}`, `μ` the
/// first power of two with `λ_min(P) ≥ c/20`, `λ` from
/// `352 α⁶ c max(r²/τ, r⁶/τ³) = a λ² min(r²/τ, r⁶/τ³)`, and
/// `ln K = −E + ln(1 − e^{−E})`, `ln(ε/δ) = −2E` with `E = 22 α⁶ a μ c max(…)`.
pub fn subsolution_params(m: f64, v: f64, r: f64, tau: f64, alpha_spread: f64, d: usize) -> Result<SubsolutionParams> {
    if d == 0 {
        return Err(KfpError::Contract("dimension must be positive".into()));
    }
    for (name, val) in [("M", m), ("r", r), ("tau", tau), ("alpha", alpha_spread)] {
        if !(val.is_finite() && val > 0.0) {
            return Err(KfpError::Contract(format!("{name} = {val} must be positive")));
        }
    }
    if !(v.is_finite() && v >= 0.0) {
        return Err(KfpError::Contract(format!("V = {v} must be nonnegative")));
    }
    if !(alpha_spread > 1.0) {
        return Err(KfpError::Precondition(format!("α = {alpha_spread} must exceed 1")));
    }
    let m = m.max(1.0);
    let ceiling = tau_ceiling(m, v, r);
    if !(tau < ceiling) {
        return Err(KfpError::Precondition(format!(
            "τ = {tau} must lie below min(1, r³/2V, ln2/M, 1/20M) = {ceiling}"
        )));
    }
    let df = d as f64;
    let a = 1.0;
    let b = 2.0 * a;
    let s = tau / (r * r);
    let c = b * 12f64.max(80.0 * (m + 1.0).powi(2)).max(80.0 * df * s.powi(3)).max(40.0 * df * s);

    let mut mu = 1.0;
    loop {
        let p = form_matrix(a, b, c, mu);
        if min_eig(p[0][0], p[0][1], p[1][1]) >= c / 20.0 {
            break;
        }
        mu *= 2.0;
        if mu > 2f64.powi(30) {
            return Err(KfpError::Internal(format!(
                "no μ ≤ 2³⁰ makes the barrier form positive (c = {c})"
            )));
        }
    }

    let q1 = r * r / tau;
    let q3 = r.powi(6) / tau.powi(3);
    let (qmax, qmin) = (q1.max(q3), q1.min(q3));
    let a6 = alpha_spread.powi(6);
    let lambda_spread = (352.0 * a6 * c * qmax / (a * qmin)).sqrt();
    let e = 22.0 * a6 * a * mu * c * qmax;
    let ln_eps_over_delta = -mu * a * lambda_spread * lambda_spread / 8.0 * qmin;
    let ln_k_spread = -e + (-(-e).exp()).ln_1p();
    Ok(SubsolutionParams {
        a,
        b,
        c,
        mu,
        lambda_spread,
        eps_over_delta: ln_eps_over_delta.exp(),
        ln_eps_over_delta,
        k_spread: ln_k_spread.exp(),
        ln_k_spread,
        x0: vec![0.0; d],
        v0: vec![0.0; d],
        r,
        tau,
        alpha_spread,
        m,
        v_bound: v,
        dim: d,
        phi: Arc::new(move |x: &[f64]| vec![0.0; x.len()]),
    })
}

impl SubsolutionParams {
    /// Attaches `Φ_s` and the centre; fails if `V` no longer dominates
    /// `(M+1)²(|Φ_s(0)| + |x₀| + |v₀|)`.
    pub fn with_flow(mut self, x0: &[f64], v0: &[f64], phi: VectorField) -> Result<Self> {
        if x0.len() != self.dim || v0.len() != self.dim {
            return Err(KfpError::Contract("centre dimension mismatch".into()));
        }
        let phi0 = norm(&phi(&vec![0.0; self.dim]));
        let need = (self.m + 1.0).powi(2) * (phi0 + norm(x0) + norm(v0));
        if need > self.v_bound * (1.0 + 1e-12) {
            return Err(KfpError::Precondition(format!(
                "V = {} is below (M+1)²(|Φ(0)|+|x₀|+|v₀|) = {need}",
                self.v_bound
            )));
        }
        self.x0 = x0.to_vec();
        self.v0 = v0.to_vec();
        self.phi = phi;
        Ok(self)
    }

    pub fn flow(&self, t: f64) -> Result<Vec<f64>> {
        flow_x(self.phi.as_ref(), self.m, &self.x0, &self.v0, t)
    }

    /// `Q(t, x, v)` given `X_t`.
    pub fn q(&self, t: f64, xt: &[f64], x: &[f64], v: &[f64]) -> f64 {
        let xi: Vec<f64> = v.iter().zip(&self.v0).map(|(a, b)| a - b).collect();
        let eta: Vec<f64> = x.iter().zip(xt).map(|(a, b)| a - b).collect();
        self.a * dot(&xi, &xi) / (2.0 * t) - self.b * dot(&xi, &eta) / (t * t)
            + self.c * dot(&eta, &eta) / (2.0 * t * t * t)
    }

    /// Anisotropic ball `|v − v₀| ≤ ρ`, `|x − x₀| ≤ ρ³`.
    pub fn in_ball(&self, rho: f64, x: &[f64], v: &[f64]) -> bool {
        let dv = norm(&v.iter().zip(&self.v0).map(|(a, b)| a - b).collect::<Vec<_>>());
        let dx = norm(&x.iter().zip(&self.x0).map(|(a, b)| a - b).collect::<Vec<_>>());
        dv <= rho && dx <= rho.powi(3)
    }

    /// `E = 22 α⁶ a μ c max(r²/τ, r⁶/τ³)`.
    fn e_exponent(&self) -> f64 {
        -self.ln_eps_over_delta / 2.0
    }
}

/// Barrier value with its logarithmic parts, which stay meaningful when the
/// value itself under- or overflows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubsolutionValue {
    pub value: f64,
    /// `ln δ − μQ`.
    pub ln_barrier: f64,
    /// `ln ε`.
    pub ln_eps: f64,
    /// Set at `t = 0`, where the value is the continuous extension `−ε`.
    pub limit: bool,
}

/// `φ = δ e^{−μQ} − ε` for `t ∈ (0, τ)`; `t = 0` gives `−ε` with the limit flag.
pub fn eval_subsolution(p: &SubsolutionParams, delta: f64, t: f64, x: &[f64], v: &[f64]) -> Result<SubsolutionValue> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(KfpError::Contract(format!("δ = {delta} must be positive")));
    }
    if x.len() != p.dim || v.len() != p.dim {
        return Err(KfpError::Contract("point dimension mismatch".into()));
    }
    ensure_finite("x", x)?;
    ensure_finite("v", v)?;
    let ln_eps = delta.ln() + p.ln_eps_over_delta;
    if t == 0.0 {
        return Ok(SubsolutionValue {
            value: -ln_eps.exp(),
            ln_barrier: f64::NEG_INFINITY,
            ln_eps,
            limit: true,
        });
    }
    if !(t > 0.0 && t < p.tau) {
        return Err(KfpError::Contract(format!("t = {t} outside (0, τ = {})", p.tau)));
    }
    let xt = p.flow(t)?;
    let ln_barrier = delta.ln() - p.mu * p.q(t, &xt, x, v);
    Ok(SubsolutionValue {
        value: ln_barrier.exp() - ln_eps.exp(),
        ln_barrier,
        ln_eps,
        limit: false,
    })
}

/// `𝒜(Q)` as a list of its additive terms, so that a sign check can be made
/// relative to their magnitude.
fn a_terms(p: &SubsolutionParams, t: f64, xt: &[f64], x: &[f64], v: &[f64]) -> [f64; 8] {
    let (a, b, c, mu) = (p.a, p.b, p.c, p.mu);
    let d = p.dim as f64;
    let xi: Vec<f64> = v.iter().zip(&p.v0).map(|(s, q)| s - q).collect();
    let eta: Vec<f64> = x.iter().zip(xt).map(|(s, q)| s - q).collect();
    let xdot: Vec<f64> = (p.phi)(xt).iter().zip(&p.v0).map(|(s, q)| s + q).collect();
    let drift: Vec<f64> = (p.phi)(x).iter().zip(v).map(|(s, q)| s + q).collect();
    let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
    let grad_x: Vec<f64> = xi.iter().zip(&eta).map(|(s, q)| -b * s / t2 + c * q / t3).collect();
    let grad_v: Vec<f64> = xi.iter().zip(&eta).map(|(s, q)| a * s / t - b * q / t2).collect();
    [
        -a * dot(&xi, &xi) / (2.0 * t2),
        2.0 * b * dot(&xi, &eta) / t3,
        -1.5 * c * dot(&eta, &eta) / t4,
        b * dot(&xi, &xdot) / t2,
        -c * dot(&eta, &xdot) / t3,
        dot(&drift, &grad_x),
        -a * d / t,
        mu * dot(&grad_v, &grad_v),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsolutionWitness {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsolutionReport {
    /// Largest sampled `Lφ` with `δ = 1` (underflows towards `−0`).
    pub max_lphi: f64,
    /// Largest `−𝒜(Q) / Σ|terms|`; `Lφ ≤ 0` holds where this is `≤ 0`.
    pub max_relative_violation: f64,
    pub tolerance: f64,
    pub lphi_ok: bool,
    pub initial_ok: bool,
    pub inner_boundary_ok: bool,
    pub outer_boundary_ok: bool,
    pub boundary_ok: bool,
    /// Smallest sampled `ln(φ/δ)` on `[τ/2, τ) × (B̄_{αr} \ B̄_r)`.
    pub interior_min_ln: f64,
    pub ln_k_spread: f64,
    pub k_spread_ok: bool,
    pub samples: usize,
    pub witness: Option<SubsolutionWitness>,
}

struct AnnulusSampler {
    halton: Halton,
    dim: usize,
}

impl AnnulusSampler {
    fn new(dim: usize, offset: u64) -> Self {
        Self {
            halton: Halton::new(3 + 2 * dim + 2, offset),
            dim,
        }
    }

    /// Point with `|v − v₀| ≤ rv`, `|x − x₀| ≤ rx`, radii either uniform or
    /// log-spaced down to `floor`.
    fn point(&mut self, p: &SubsolutionParams, rv: f64, rx: f64, floor_v: f64, floor_x: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let u = self.halton.next_point();
        let d = self.dim;
        let radius = |w: f64, mode: f64, hi: f64, lo: f64| {
            if mode < 0.5 || lo >= hi {
                w * hi
            } else {
                (lo.ln() + w * (hi.ln() - lo.ln())).exp()
            }
        };
        let dir = |s: &[f64]| {
            let mut e: Vec<f64> = s.iter().map(|a| 2.0 * a - 1.0).collect();
            let n = norm(&e);
            if n < 1e-12 {
                e = vec![0.0; s.len()];
                e[0] = 1.0;
            } else {
                e.iter_mut().for_each(|a| *a /= n);
            }
            e
        };
        let rho_v = radius(u[1], u[2 + 2 * d], rv, floor_v);
        let rho_x = radius(u[2], u[3 + 2 * d], rx, floor_x);
        let ev = dir(&u[3..3 + d]);
        let ex = dir(&u[3 + d..3 + 2 * d]);
        let v = p.v0.iter().zip(&ev).map(|(c, e)| c + rho_v * e).collect();
        let x = p.x0.iter().zip(&ex).map(|(c, e)| c + rho_x * e).collect();
        (u[0], x, v)
    }
}

/// Samples the sign of `Lφ` on `(0, τ) × (B̄_{λr} \ B̄_r)`, the three
/// boundary conditions, and the interior bound `φ ≥ Kδ` on
/// `[τ/2, τ) × (B̄_{αr} \ B̄_r)`, for the barrier driven by `g` (`Φ_s = −Φ`).
pub fn verify_subsolution(p: &SubsolutionParams, g: &GeneralKfp, samples: usize) -> Result<SubsolutionReport> {
    if g.dim() != p.dim {
        return Err(KfpError::Contract("model and barrier dimensions differ".into()));
    }
    if g.lipschitz() > p.m * (1.0 + 1e-12) {
        return Err(KfpError::Precondition(format!(
            "barrier M = {} is below the model's Lipschitz constant {}",
            p.m,
            g.lipschitz()
        )));
    }
    let coeffs = g.coefficients().clone();
    let phi: VectorField = Arc::new(move |x: &[f64]| coeffs.phi(x).iter().map(|a| -a).collect());
    let p = p.clone().with_flow(&p.x0, &p.v0, phi)?;
    verify_barrier(&p, samples, 1e-8)
}

/// As [`verify_subsolution`] for the flow already attached to `p`.
pub fn verify_barrier(p: &SubsolutionParams, samples: usize, tolerance: f64) -> Result<SubsolutionReport> {
    if samples == 0 {
        return Err(KfpError::Contract("need at least one sample".into()));
    }
    let r = p.r;
    let (rv_out, rx_out) = (p.lambda_spread * r, (p.lambda_spread * r).powi(3));
    let e = p.e_exponent();

    let mut max_rel = f64::NEG_INFINITY;
    let mut max_lphi = f64::NEG_INFINITY;
    let mut witness = None;
    let mut sampler = AnnulusSampler::new(p.dim, 0);
    let mut taken = 0;
    let mut attempts = 0;
    while taken < samples {
        attempts += 1;
        if attempts > 50 * samples {
            return Err(KfpError::Internal("annulus rejection sampling stalled".into()));
        }
        let (u, x, v) = sampler.point(p, rv_out, rx_out, 1e-3 * r, 1e-3 * r.powi(3));
        if p.in_ball(r, &x, &v) {
            continue;
        }
        let t = (u * p.tau).max(1e-6 * p.tau);
        let xt = p.flow(t)?;
        let terms = a_terms(p, t, &xt, &x, &v);
        let total: f64 = terms.iter().sum();
        let scale: f64 = terms.iter().map(|a| a.abs()).sum();
        let rel = if scale > 0.0 { -total / scale } else { 0.0 };
        let q = p.q(t, &xt, &x, &v);
        let lphi = -p.mu * (-p.mu * q).exp() * total;
        max_lphi = max_lphi.max(lphi);
        if rel > max_rel {
            max_rel = rel;
            witness = Some(SubsolutionWitness {
                t,
                x: x.clone(),
                v: v.clone(),
                value: rel,
            });
        }
        taken += 1;
    }

    // boundary samples
    let n_b = (samples / 8).max(64);
    let mut initial_ok = true;
    let mut inner_ok = true;
    let mut outer_ok = true;
    let mut bs = AnnulusSampler::new(p.dim, 1 << 40);
    for k in 0..n_b {
        let (u, x, v) = bs.point(p, rv_out, rx_out, 1e-3 * r, 1e-3 * r.powi(3));
        // t → 0⁺ off the inner ball: the barrier must sit below ε
        if !p.in_ball(r, &x, &v) {
            let t0 = 1e-9 * p.tau;
            let xt = p.flow(t0)?;
            if -p.mu * p.q(t0, &xt, &x, &v) > p.ln_eps_over_delta {
                initial_ok = false;
            }
        }
        let t = (u * p.tau).max(1e-6 * p.tau);
        let xt = p.flow(t)?;
        // project onto ∂B̄_r and ∂B̄_{λr}
        for (rho, outer) in [(r, false), (p.lambda_spread * r, true)] {
            let (xb, vb) = project_to_boundary(p, rho, &x, &v, k);
            let q = p.q(t, &xt, &xb, &vb);
            if outer {
                if -p.mu * q > p.ln_eps_over_delta {
                    outer_ok = false;
                }
            } else if q < 0.0 {
                inner_ok = false;
            }
        }
    }

    // interior lower bound on [τ/2, τ) × (B̄_{αr} \ B̄_r)
    let mut interior_min = f64::INFINITY;
    let mut is = AnnulusSampler::new(p.dim, 1 << 41);
    let (rv_in, rx_in) = (p.alpha_spread * r, (p.alpha_spread * r).powi(3));
    let mut got = 0;
    let mut tries = 0;
    while got < n_b && tries < 100 * n_b {
        tries += 1;
        let (u, x, v) = is.point(p, rv_in, rx_in, 1e-3 * r, 1e-3 * r.powi(3));
        if p.in_ball(r, &x, &v) {
            continue;
        }
        let t = p.tau * (0.5 + 0.5 * u);
        let xt = p.flow(t)?;
        let mq = p.mu * p.q(t, &xt, &x, &v);
        // ln(e^{−μQ} − e^{−2E})
        let ln_phi = if mq < 2.0 * e {
            -mq + (-(-(2.0 * e - mq)).exp()).ln_1p()
        } else {
            f64::NEG_INFINITY
        };
        interior_min = interior_min.min(ln_phi);
        got += 1;
    }

    let lphi_ok = max_rel <= tolerance;
    let boundary_ok = initial_ok && inner_ok && outer_ok;
    let k_spread_ok = p.ln_k_spread.is_finite() && interior_min >= p.ln_k_spread * (1.0 + 1e-12);
    Ok(SubsolutionReport {
        max_lphi,
        max_relative_violation: max_rel,
        tolerance,
        lphi_ok,
        initial_ok,
        inner_boundary_ok: inner_ok,
        outer_boundary_ok: outer_ok,
        boundary_ok,
        interior_min_ln: interior_min,
        ln_k_spread: p.ln_k_spread,
        k_spread_ok,
        samples,
        witness,
    })
}

/// Moves a point onto `∂B̄_ρ`: alternately pins the velocity radius to `ρ`
/// (x inside) or the position radius to `ρ³` (v inside).
fn project_to_boundary(p: &SubsolutionParams, rho: f64, x: &[f64], v: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let dv: Vec<f64> = v.iter().zip(&p.v0).map(|(a, b)| a - b).collect();
    let dx: Vec<f64> = x.iter().zip(&p.x0).map(|(a, b)| a - b).collect();
    let (nv, nx) = (norm(&dv), norm(&dx));
    let unit = |d: &[f64], n: f64| -> Vec<f64> {
        if n > 0.0 {
            d.iter().map(|a| a / n).collect()
        } else {
            let mut e = vec![0.0; d.len()];
            e[0] = 1.0;
            e
        }
    };
    let (uv, ux) = (unit(&dv, nv), unit(&dx, nx));
    let (vr, xr) = if k % 2 == 0 {
        (rho, nx.min(rho.powi(3)))
    } else {
        (nv.min(rho), rho.powi(3))
    };
    let vb = p.v0.iter().zip(&uv).map(|(c, e)| c + vr * e).collect();
    let xb = p.x0.iter().zip(&ux).map(|(c, e)| c + xr * e).collect();
    (xb, vb)
}

/// Zero-order coefficient of the `h = f e^{W/2}` equation,
/// `D = −¼|A|² − ½ div_v A + ½ (v + Φ_s)·A + C`, with `A = B`, `Φ_s = −Φ`, and
/// `C` supplied or defaulting to `div Φ + div_v B`.
pub fn eval_d(
    g: &GeneralKfp,
    c_coeff: Option<&dyn Fn(f64, &[f64], &[f64]) -> f64>,
    t: f64,
    x: &[f64],
    v: &[f64],
) -> Result<f64> {
    if x.len() != g.dim() || v.len() != g.dim() {
        return Err(KfpError::Contract("point dimension mismatch".into()));
    }
    ensure_finite("x", x)?;
    ensure_finite("v", v)?;
    let a = g.drift_v(x, v);
    let div_a = g.div_v_drift(x, v);
    let phi = g.phi(x);
    let drift: Vec<f64> = v.iter().zip(&phi).map(|(s, q)| s - q).collect();
    let c = match c_coeff {
        Some(f) => f(t, x, v),
        None => g.div_phi(x) + div_a,
    };
    Ok(-0.25 * dot(&a, &a) - 0.5 * div_a + 0.5 * dot(&drift, &a) + c)
}

/// Attenuated spreading constant `ln(K e^{−τD̄} / Ē²)` with `D̄ = sup|D|` and
/// `ln Ē = sup|W|` sampled on `B̄_{λr}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpreadingConstant {
    pub d_bar: f64,
    pub ln_e_bar: f64,
    pub ln_k_total: f64,
}

pub fn spreading_constant(p: &SubsolutionParams, g: &GeneralKfp, samples: usize) -> Result<SpreadingConstant> {
    let r = p.r;
    let (rv, rx) = (p.lambda_spread * r, (p.lambda_spread * r).powi(3));
    let mut s = AnnulusSampler::new(p.dim, 1 << 42);
    let mut d_bar = 0.0f64;
    let mut w_bar = 0.0f64;
    for _ in 0..samples.max(1) {
        let (_, x, v) = s.point(p, rv, rx, 1e-3 * r, 1e-3 * r.powi(3));
        d_bar = d_bar.max(eval_d(g, None, 0.0, &x, &v)?.abs());
        w_bar = w_bar.max(g.potential_v(&x, &v).abs());
    }
    Ok(SpreadingConstant {
        d_bar,
        ln_e_bar: w_bar,
        ln_k_total: p.ln_k_spread - p.tau * d_bar - 2.0 * w_bar,
    })
}

/// Snapshot access used by the empirical checks.
pub trait Trajectory {
    fn snapshots(&self) -> &[GridField];
}

impl Trajectory for Vec<GridField> {
    fn snapshots(&self) -> &[GridField] {
        self
    }
}

impl Trajectory for [GridField] {
    fn snapshots(&self) -> &[GridField] {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridWitness {
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpreadingResult {
    pub hypothesis_met: bool,
    pub ok: bool,
    /// `min f/δ` over `[t₀+τ/2, t₀+τ) × B̄_{αr}`.
    pub k_emp: f64,
    /// `min f` over `[t₀, t₀+τ) × B̄_r`.
    pub inner_min: f64,
    pub witness: Option<GridWitness>,
    pub message: String,
}

fn in_aniso(x0: f64, v0: f64, rho: f64, x: f64, v: f64) -> bool {
    (v - v0).abs() <= rho && (x - x0).abs() <= rho.powi(3)
}

/// Checks `f ≥ δ` on `[t₀, t₀+τ) × B̄_r` and reports `K_emp` on the enlarged
/// ball, `t₀` being the first snapshot time. Cells count when their centre
/// lies in the ball.
#[allow(clippy::too_many_arguments)]
pub fn spreading_check(
    traj: &(impl Trajectory + ?Sized),
    x0: f64,
    v0: f64,
    r: f64,
    tau: f64,
    alpha: f64,
    delta: f64,
) -> Result<SpreadingResult> {
    let snaps = traj.snapshots();
    if snaps.is_empty() {
        return Err(KfpError::Contract("empty trajectory".into()));
    }
    if !(r > 0.0 && tau > 0.0 && alpha >= 1.0 && delta > 0.0) {
        return Err(KfpError::Contract("need r, τ, δ > 0 and α ≥ 1".into()));
    }
    let t0 = snaps[0].t;
    let mut inner_min = f64::INFINITY;
    let mut inner_cells = 0usize;
    let mut k_emp = f64::INFINITY;
    let mut witness = None;
    let mut outer_seen = false;
    for f in snaps.iter().filter(|f| f.t < t0 + tau) {
        let g = &f.grid;
        let late = f.t >= t0 + tau / 2.0;
        for i in 0..g.nx {
            let x = g.x(i);
            for j in 0..g.nv {
                let v = g.v(j);
                let val = f.values[g.index(i, j)];
                if in_aniso(x0, v0, r, x, v) {
                    inner_min = inner_min.min(val);
                    inner_cells += 1;
                }
                if late && in_aniso(x0, v0, alpha * r, x, v) {
                    outer_seen = true;
                    if val / delta < k_emp {
                        k_emp = val / delta;
                        witness = Some(GridWitness {
                            t: f.t,
                            x,
                            v,
                            value: val / delta,
                        });
                    }
                }
            }
        }
    }
    if inner_cells == 0 || inner_min < delta {
        return Ok(SpreadingResult {
            hypothesis_met: false,
            ok: false,
            k_emp: f64::NAN,
            inner_min,
            witness: None,
            message: if inner_cells == 0 {
                "no cell centre lies in the inner ball".into()
            } else {
                format!("hypothesis not met: min f = {inner_min:e} < δ = {delta:e} on the inner ball")
            },
        });
    }
    if !outer_seen {
        return Ok(SpreadingResult {
            hypothesis_met: true,
            ok: false,
            k_emp: f64::NAN,
            inner_min,
            witness: None,
            message: "no snapshot in [τ/2, τ)".into(),
        });
    }
    Ok(SpreadingResult {
        hypothesis_met: true,
        ok: k_emp > 0.0,
        k_emp,
        inner_min,
        witness,
        message: String::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBoundResult {
    pub gamma_emp: f64,
    pub witness: GridWitness,
    /// `(t, γ(t))` per snapshot.
    pub series: Vec<(f64, f64)>,
}

/// `γ(t) = max_{B_ρ} f_t / ∫_{B_R} f₀` per snapshot; returns the minimum.
/// The first snapshot is taken as `f₀`.
pub fn pointwise_lower_bound(
    traj: &(impl Trajectory + ?Sized),
    big_r: f64,
    rho: f64,
    w: &WeightSpec,
) -> Result<LowerBoundResult> {
    let snaps = traj.snapshots();
    let f0 = snaps.first().ok_or_else(|| KfpError::Contract("empty trajectory".into()))?;
    if f0.values.iter().any(|&a| a < 0.0) {
        return Err(KfpError::Contract("initial datum must be nonnegative".into()));
    }
    let norm = crate::solver::weighted_norm(f0, w, 1.0)?;
    if norm > 1.0 + 1e-9 {
        return Err(KfpError::Contract(format!("‖f₀‖_L¹(m) = {norm} exceeds 1")));
    }
    let g = &f0.grid;
    let mut inner = 0.0;
    for i in 0..g.nx {
        for j in 0..g.nv {
            let (x, v) = (g.x(i), g.v(j));
            if x * x + v * v <= big_r * big_r {
                inner += f0.values[g.index(i, j)];
            }
        }
    }
    inner *= g.cell_volume();
    if !(inner > 0.0) {
        return Err(KfpError::Contract(format!("f₀ has no mass in B_R (R = {big_r})")));
    }
    let mut best: Option<(f64, GridWitness)> = None;
    let mut series = Vec::new();
    for f in snaps.iter().skip(1) {
        let g = &f.grid;
        let mut top = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..g.nx {
            for j in 0..g.nv {
                let (x, v) = (g.x(i), g.v(j));
                if x * x + v * v <= rho * rho {
                    let val = f.values[g.index(i, j)];
                    if val > top.0 {
                        top = (val, x, v);
                    }
                }
            }
        }
        if top.0 == f64::NEG_INFINITY {
            return Err(KfpError::Contract(format!("no cell centre inside B_ρ (ρ = {rho})")));
        }
        let gamma = top.0 / inner;
        series.push((f.t, gamma));
        if best.as_ref().map_or(true, |b| gamma < b.0) {
            best = Some((
                gamma,
                GridWitness {
                    t: f.t,
                    x: top.1,
                    v: top.2,
                    value: gamma,
                },
            ));
        }
    }
    let (gamma_emp, witness) =
        best.ok_or_else(|| KfpError::Contract("trajectory needs at least one snapshot after f₀".into()))?;
    Ok(LowerBoundResult {
        gamma_emp,
        witness,
        series,
    })
}
