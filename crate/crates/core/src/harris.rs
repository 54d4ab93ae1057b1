//! Harris/Doeblin constant chain and the decay-envelope calculus that turns
//! an `L¹(m)` rate into an `L^p(m)` rate.

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{KfpError, Result};

/// One-period `L¹` contraction factor `1 − ⟨μ⟩/2`.
pub fn doeblin_contraction(mu_mass: f64) -> Result<f64> {
    if !(mu_mass > 0.0 && mu_mass < 2.0) {
        return Err(KfpError::Contract(format!(
            "minorizing mass {mu_mass} must lie in (0, 2)"
        )));
    }
    Ok(1.0 - mu_mass / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarrisInputs {
    /// Lyapunov rate in `L*m ≤ −αm + b`.
    pub alpha: f64,
    /// Lyapunov offset.
    pub b: f64,
    /// Harris period.
    pub t: f64,
    /// Mass of the minorizing measure.
    pub mu_mass: f64,
    /// `min_{|z| ≥ R} m(z)`.
    pub m_of_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarrisRate {
    pub gamma: f64,
    pub k: f64,
    pub a: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub gamma5: f64,
    pub beta: f64,
    /// Asymptotic rate per unit time, `−ln γ₅ / T`.
    pub lambda: f64,
    /// Prefactor `((1+β)/β) max(1, b/α) / γ₅`.
    pub c: f64,
}

/// Runs the constant chain
///
/// ```text
/// γ  = e^{−αT},        K  = (1−γ) b/α,      A = m(R)/4,
/// γ₁ = 1 − ⟨μ⟩/2,      γ₂ = max((γ₁+1)/2, γ),
/// β  = (γ₂ − γ₁)/K,    γ₃ = (γ+1)/2,        γ₄ = (γ₃ + 1/β)/(1 + 1/β),
/// γ₅ = max(γ₂, γ₄),    λ  = −ln γ₅ / T.
/// ```
pub fn harris_rate(inp: &HarrisInputs) -> Result<HarrisRate> {
    let HarrisInputs {
        alpha,
        b,
        t,
        mu_mass,
        m_of_r,
    } = *inp;
    for (name, v) in [("alpha", alpha), ("b", b), ("T", t)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(KfpError::Contract(format!("{name} = {v} must be positive")));
        }
    }
    let gamma1 = doeblin_contraction(mu_mass)?;
    if !(m_of_r.is_finite() && m_of_r >= 1.0) {
        return Err(KfpError::Contract(format!("m(R) = {m_of_r} must be ≥ 1")));
    }
    if m_of_r < 8.0 * b / alpha {
        return Err(KfpError::Precondition(format!(
            "m(R) = {m_of_r} is below 8b/α = {}",
            8.0 * b / alpha
        )));
    }
    let gamma = (-alpha * t).exp();
    let k = -(-alpha * t).exp_m1() * b / alpha;
    let a = m_of_r / 4.0;
    if k / a > (1.0 - gamma) / 2.0 * (1.0 + 1e-12) {
        return Err(KfpError::Internal(format!(
            "K/A = {} exceeds (1−γ)/2 = {}",
            k / a,
            (1.0 - gamma) / 2.0
        )));
    }
    let gamma2 = ((gamma1 + 1.0) / 2.0).max(gamma);
    let beta = (gamma2 - gamma1) / k;
    let gamma3 = (gamma + 1.0) / 2.0;
    let gamma4 = (gamma3 + 1.0 / beta) / (1.0 + 1.0 / beta);
    let gamma5 = gamma2.max(gamma4);
    if !(gamma5 > 0.0 && gamma5 < 1.0) || !(beta > 0.0) {
        return Err(KfpError::Internal(format!(
            "γ₅ = {gamma5}, β = {beta} left their admissible ranges"
        )));
    }
    let lambda = -gamma5.ln() / t;
    let c = (1.0 + beta) / beta * (b / alpha).max(1.0) / gamma5;
    Ok(HarrisRate {
        gamma,
        k,
        a,
        gamma1,
        gamma2,
        gamma3,
        gamma4,
        gamma5,
        beta,
        lambda,
        c,
    })
}

/// Decay envelope `C t^power e^{−a t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Envelope {
    pub c: f64,
    pub power: f64,
    pub a: f64,
}

impl Envelope {
    pub fn new(c: f64, power: f64, a: f64) -> Self {
        Self { c, power, a }
    }

    /// `C e^{−at}`.
    pub fn flat(c: f64, a: f64) -> Self {
        Self::new(c, 0.0, a)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.c * t.powf(self.power) * (-self.a * t).exp()
    }
}

/// Euler Beta function through log-Gamma.
pub fn beta_fn(x: f64, y: f64) -> f64 {
    (ln_gamma(x) + ln_gamma(y) - ln_gamma(x + y)).exp()
}

/// `(e1 * e2)(t) = ∫₀ᵗ e1(t−s) e2(s) ds`, exact for power-exponential
/// envelopes with equal rates: `C₁C₂ B(p+1, q+1) t^{p+q+1} e^{−at}`.
pub fn envelope_convolve(e1: &Envelope, e2: &Envelope) -> Result<Envelope> {
    let scale = e1.a.abs().max(e2.a.abs()).max(1.0);
    if (e1.a - e2.a).abs() > 1e-12 * scale {
        return Err(KfpError::Contract(format!(
            "envelope rates differ: {} vs {}",
            e1.a, e2.a
        )));
    }
    if !(e1.power > -1.0 && e2.power > -1.0) {
        return Err(KfpError::Contract(format!(
            "powers {} and {} must exceed −1 for the convolution to converge",
            e1.power, e2.power
        )));
    }
    Ok(Envelope {
        c: e1.c * e2.c * beta_fn(e1.power + 1.0, e2.power + 1.0),
        power: e1.power + e2.power + 1.0,
        a: e1.a,
    })
}

/// `sup_{t>0} t^k e^{−s t} = (k/s)^k e^{−k}` (and 1 for `k = 0`).
pub fn sup_power_exp(k: f64, s: f64) -> f64 {
    if k == 0.0 {
        1.0
    } else {
        (k / s).powf(k) * (-k).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpComposition {
    /// `C e^{−a* t}`.
    pub envelope: Envelope,
    pub n: usize,
    /// Envelopes of the leading, intermediate and remainder terms before
    /// the sup over `t` is taken.
    pub terms: Vec<Envelope>,
}

/// Composes the three Duhamel terms of
///
/// ```text
/// S_L = S_B + Σ_{j=1}^{n−1} (S_B A)^{*j} * S_B + (S_B A)^{*n} * S_L
/// ```
///
/// into one envelope `C e^{−a* t}`. Both `S_B` and `S_B A` are taken with the
/// flat envelope `l1` on `L¹(m)` and `L^p(m)`, `S_B A` with the singular
/// envelope `l1.c · t^{−α} e^{−at}` from `L¹(m)` to `L^p(m)`, and `S_L` with
/// `l1` on `L¹(m)`:
///
/// * leading term: `l1`;
/// * intermediate: `Σ_{j=1}^{n−1} C^{j+1} t^j / j!`;
/// * remainder: `(n−1)`-fold product bounded by splitting the convolution at
///   `t/2` so the singular factor always sees a time `≥ t/2`, giving
///   `2 C^{n−1} 2^{α−k} t^{k−α} / k!` with `k = n−2`, then convolved with the
///   last `S_B A` factor and with `S_L`.
///
/// Each term contributes `sup_t coeff · t^k e^{−(a−a*)t}` to `C`.
pub fn lp_rate_compose(
    l1: &Envelope,
    reg_alpha: f64,
    a_target: f64,
    n_override: Option<usize>,
) -> Result<LpComposition> {
    if l1.power != 0.0 {
        return Err(KfpError::Contract("the L¹(m) envelope must be flat (power 0)".into()));
    }
    if !(l1.c.is_finite() && l1.c > 0.0 && l1.a.is_finite()) {
        return Err(KfpError::Contract("invalid L¹(m) envelope".into()));
    }
    if !(reg_alpha.is_finite() && reg_alpha >= 0.0) {
        return Err(KfpError::Contract(format!("regularization exponent {reg_alpha} is invalid")));
    }
    if !(a_target.is_finite() && a_target < l1.a) {
        return Err(KfpError::Contract(format!(
            "target rate {a_target} must lie strictly below the L¹ rate {}",
            l1.a
        )));
    }
    let n = n_override.unwrap_or((reg_alpha + 2.0).ceil() as usize + 1);
    if !(n as f64 > reg_alpha + 2.0) {
        return Err(KfpError::Contract(format!(
            "n = {n} must exceed α + 2 = {}",
            reg_alpha + 2.0
        )));
    }
    let (c0, a) = (l1.c, l1.a);
    let slack = a - a_target;

    let mut terms = vec![*l1];
    // j-fold products of flat envelopes by repeated convolution
    let mut chain = *l1;
    for _ in 1..n {
        chain = envelope_convolve(&chain, l1)?;
        terms.push(chain);
    }

    let k = (n - 2) as f64;
    let kf = ln_gamma(k + 1.0).exp();
    let head = Envelope::new(
        2.0 * c0.powi(n as i32 - 1) * 2f64.powf(reg_alpha - k) / kf,
        k - reg_alpha,
        a,
    );
    let tail = envelope_convolve(&envelope_convolve(&head, l1)?, l1)?;
    terms.push(tail);

    let c: f64 = terms
        .iter()
        .map(|e| e.c * sup_power_exp(e.power, slack))
        .sum();
    Ok(LpComposition {
        envelope: Envelope::flat(c, a_target),
        n,
        terms,
    })
}

/// `(5d + 2)/4`.
pub fn regularization_exponent(d: usize) -> f64 {
    (5.0 * d as f64 + 2.0) / 4.0
}
