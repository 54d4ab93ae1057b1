//! Model equations as evaluatable coefficient fields.
//!
//! Every model is adapted to the canonical drift-diffusion form
//!
//! ```text
//! ∂t f = div_x((−v + Φ(x)) f) + div_v(B(x, v) f) + K Δ_v f,     ∇_v W = B,
//! ```
//!
//! with all derivatives supplied in closed form. Finite differences only appear
//! as cross-checks (custom-model validation and tests).

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{ensure_finite, KfpError, Result};
use crate::sampling::Halton;

/// Coefficients of a kinetic equation in canonical form.
///
/// Points are slices of length [`dim`](Self::dim). Jacobians are row-major
/// `d × d` with entry `(i, j) = ∂_j F_i`.
pub trait KineticCoefficients: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Diffusion constant `K`.
    fn diffusion(&self) -> f64;

    fn phi(&self, x: &[f64]) -> Vec<f64>;

    fn phi_jacobian(&self, x: &[f64]) -> Vec<f64>;

    /// Velocity drift `B(x, v)`.
    fn drift_v(&self, x: &[f64], v: &[f64]) -> Vec<f64>;

    /// `∂B_i/∂v_j`.
    fn drift_v_jacobian(&self, x: &[f64], v: &[f64]) -> Vec<f64>;

    /// Velocity potential `W(x, v)` with `∇_v W = B`.
    fn potential_v(&self, x: &[f64], v: &[f64]) -> f64;

    /// Norms of the k-th derivative tensors, `(|D^k_x Φ|, |D^k_{x,v} B|)` for
    /// `k = 1..=order`. `None` when the model does not provide them.
    fn derivative_norms(&self, _x: &[f64], _v: &[f64], _order: usize) -> Option<Vec<(f64, f64)>> {
        None
    }

    fn div_phi(&self, x: &[f64]) -> f64 {
        trace(&self.phi_jacobian(x), self.dim())
    }

    /// Remarks carried into certification reports.
    fn notes(&self) -> Vec<String> {
        Vec::new()
    }

    fn div_v_drift(&self, x: &[f64], v: &[f64]) -> f64 {
        trace(&self.drift_v_jacobian(x, v), self.dim())
    }
}

fn trace(m: &[f64], d: usize) -> f64 {
    (0..d).map(|i| m[i * d + i]).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Derivatives of `(1 + x²)^q` in one dimension, of any order.
///
/// The k-th derivative is a sum of terms `c · x^n · (1 + x²)^(q − j)`; each
/// differentiation maps one term to at most two.
pub fn bracket_power_derivative(q: f64, order: usize, x: f64) -> f64 {
    let mut terms: Vec<(f64, i32, f64)> = vec![(1.0, 0, q)];
    for _ in 0..order {
        let mut next = Vec::with_capacity(terms.len() * 2);
        for &(c, n, e) in &terms {
            if n > 0 {
                next.push((c * n as f64, n - 1, e));
            }
            if e != 0.0 {
                next.push((2.0 * c * e, n + 1, e - 1.0));
            }
        }
        terms = next;
    }
    let s2 = 1.0 + x * x;
    terms
        .iter()
        .map(|&(c, n, e)| c * x.powi(n) * s2.powf(e))
        .sum()
}

/// `⟨y⟩^p / p` with `⟨y⟩² = 1 + |y|²`, together with gradient, Hessian and
/// Laplacian, in any dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BracketPotential {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Row-major `d × d`.
    pub hessian: Vec<f64>,
    pub laplacian: f64,
}

pub fn bracket_potential(p: f64, y: &[f64]) -> BracketPotential {
    let d = y.len();
    let s2 = 1.0 + norm_sq(y);
    let q = p / 2.0;
    // (1/p) s2^q, gradient s2^(q-1) y
    let value = s2.powf(q) / p;
    let g1 = s2.powf(q - 1.0);
    let g2 = (p - 2.0) * s2.powf(q - 2.0);
    let gradient: Vec<f64> = y.iter().map(|yi| g1 * yi).collect();
    let mut hessian = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            hessian[i * d + j] = g2 * y[i] * y[j] + if i == j { g1 } else { 0.0 };
        }
    }
    let laplacian = d as f64 * g1 + g2 * norm_sq(y);
    BracketPotential {
        value,
        gradient,
        hessian,
        laplacian,
    }
}

/// k-th derivative of `⟨y⟩^p / p` in one dimension.
pub fn bracket_potential_derivative(p: f64, order: usize, y: f64) -> f64 {
    bracket_power_derivative(p / 2.0, order, y) / p
}

/// Confinement `V(x) = ⟨x⟩^γ/γ` and friction potential `W(v) = ⟨v⟩^β/β`.
///
/// Canonical form: `Φ ≡ 0`, `B = ∇W(v) + ∇V(x)`, `K = 1`,
/// `W(x, v) = W(v) + v·∇V(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralForceCoefficients {
    pub gamma: f64,
    pub beta: f64,
    pub dim: usize,
}

impl KineticCoefficients for GeneralForceCoefficients {
    fn dim(&self) -> usize {
        self.dim
    }

    fn diffusion(&self) -> f64 {
        1.0
    }

    fn phi(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    fn phi_jacobian(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim * self.dim]
    }

    fn drift_v(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let gv = bracket_potential(self.gamma, x).gradient;
        let gw = bracket_potential(self.beta, v).gradient;
        gv.iter().zip(&gw).map(|(a, b)| a + b).collect()
    }

    fn drift_v_jacobian(&self, _x: &[f64], v: &[f64]) -> Vec<f64> {
        bracket_potential(self.beta, v).hessian
    }

    fn potential_v(&self, x: &[f64], v: &[f64]) -> f64 {
        let gv = bracket_potential(self.gamma, x).gradient;
        bracket_potential(self.beta, v).value + dot(v, &gv)
    }

    fn derivative_norms(&self, x: &[f64], v: &[f64], order: usize) -> Option<Vec<(f64, f64)>> {
        if self.dim != 1 {
            return None;
        }
        // B = V'(x) + W'(v): no mixed derivatives
        Some(
            (1..=order)
                .map(|k| {
                    let dx = bracket_potential_derivative(self.gamma, k + 1, x[0]);
                    let dv = bracket_potential_derivative(self.beta, k + 1, v[0]);
                    (0.0, dx.hypot(dv))
                })
                .collect(),
        )
    }
}

/// FitzHugh–Nagumo coefficients after the rescaling `w = b v`:
/// `Φ(x) = a x`, `B = v(v − b)(v − bc)/b³ + x`, `K = 1/b²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FhnCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl FhnCoefficients {
    fn cubic(&self, v: f64) -> f64 {
        let (b, c) = (self.b, self.c);
        v * (v - b) * (v - b * c) / b.powi(3)
    }

    fn cubic_d1(&self, v: f64) -> f64 {
        let (b, c) = (self.b, self.c);
        (3.0 * v * v - 2.0 * b * (1.0 + c) * v + b * b * c) / b.powi(3)
    }

    fn cubic_d2(&self, v: f64) -> f64 {
        let (b, c) = (self.b, self.c);
        (6.0 * v - 2.0 * b * (1.0 + c)) / b.powi(3)
    }
}

impl KineticCoefficients for FhnCoefficients {
    fn dim(&self) -> usize {
        1
    }

    fn diffusion(&self) -> f64 {
        1.0 / (self.b * self.b)
    }

    fn phi(&self, x: &[f64]) -> Vec<f64> {
        vec![self.a * x[0]]
    }

    fn phi_jacobian(&self, _x: &[f64]) -> Vec<f64> {
        vec![self.a]
    }

    fn drift_v(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        vec![self.cubic(v[0]) + x[0]]
    }

    fn drift_v_jacobian(&self, _x: &[f64], v: &[f64]) -> Vec<f64> {
        vec![self.cubic_d1(v[0])]
    }

    fn potential_v(&self, x: &[f64], v: &[f64]) -> f64 {
        let (b, c, v) = (self.b, self.c, v[0]);
        (v.powi(4) / 4.0 - b * (1.0 + c) * v.powi(3) / 3.0 + b * b * c * v * v / 2.0) / b.powi(3)
            + x[0] * v
    }

    fn notes(&self) -> Vec<String> {
        vec!["div_v B = (3v² − 2b(1+c)v + b²c)/b³: the linear term carries a minus sign, \
              as the derivative of v(v − b)(v − bc)"
            .into()]
    }

    fn derivative_norms(&self, _x: &[f64], v: &[f64], order: usize) -> Option<Vec<(f64, f64)>> {
        let v = v[0];
        Some(
            (1..=order)
                .map(|k| match k {
                    1 => (self.a, 1.0f64.hypot(self.cubic_d1(v))),
                    2 => (0.0, self.cubic_d2(v).abs()),
                    3 => (0.0, 6.0 / self.b.powi(3)),
                    _ => (0.0, 0.0),
                })
                .collect(),
        )
    }
}

type VecField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type VecField2 = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
type ScalarField2 = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type NormField = Arc<dyn Fn(&[f64], &[f64], usize) -> Vec<(f64, f64)> + Send + Sync>;

/// User-supplied coefficients given as closures with analytic derivatives.
#[derive(Clone)]
pub struct CustomCoefficients {
    dim: usize,
    diffusion: f64,
    phi: VecField,
    phi_jacobian: VecField,
    drift_v: VecField2,
    drift_v_jacobian: VecField2,
    potential_v: ScalarField2,
    derivative_norms: Option<NormField>,
    label: String,
}

impl fmt::Debug for CustomCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomCoefficients")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("diffusion", &self.diffusion)
            .finish()
    }
}

impl CustomCoefficients {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        label: impl Into<String>,
        dim: usize,
        diffusion: f64,
        phi: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        phi_jacobian: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        drift_v: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        drift_v_jacobian: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        potential_v: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            diffusion,
            phi: Arc::new(phi),
            phi_jacobian: Arc::new(phi_jacobian),
            drift_v: Arc::new(drift_v),
            drift_v_jacobian: Arc::new(drift_v_jacobian),
            potential_v: Arc::new(potential_v),
            derivative_norms: None,
            label: label.into(),
        }
    }

    /// One-dimensional convenience constructor from scalar closures
    /// `Φ, Φ', B, ∂_v B, W`.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(
        label: impl Into<String>,
        diffusion: f64,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dphi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        drift: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        ddrift_dv: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        potential: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            label,
            1,
            diffusion,
            move |x| vec![phi(x[0])],
            move |x| vec![dphi(x[0])],
            move |x, v| vec![drift(x[0], v[0])],
            move |x, v| vec![ddrift_dv(x[0], v[0])],
            move |x, v| potential(x[0], v[0]),
        )
    }

    pub fn with_derivative_norms(
        mut self,
        norms: impl Fn(&[f64], &[f64], usize) -> Vec<(f64, f64)> + Send + Sync + 'static,
    ) -> Self {
        self.derivative_norms = Some(Arc::new(norms));
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl KineticCoefficients for CustomCoefficients {
    fn dim(&self) -> usize {
        self.dim
    }

    fn diffusion(&self) -> f64 {
        self.diffusion
    }

    fn phi(&self, x: &[f64]) -> Vec<f64> {
        (self.phi)(x)
    }

    fn phi_jacobian(&self, x: &[f64]) -> Vec<f64> {
        (self.phi_jacobian)(x)
    }

    fn drift_v(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        (self.drift_v)(x, v)
    }

    fn drift_v_jacobian(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        (self.drift_v_jacobian)(x, v)
    }

    fn potential_v(&self, x: &[f64], v: &[f64]) -> f64 {
        (self.potential_v)(x, v)
    }

    fn derivative_norms(&self, x: &[f64], v: &[f64], order: usize) -> Option<Vec<(f64, f64)>> {
        self.derivative_norms.as_ref().map(|f| f(x, v, order))
    }
}

/// Which equation is being solved.
#[derive(Debug, Clone)]
pub enum ModelKind {
    /// Confinement `⟨x⟩^γ/γ` and friction `⟨v⟩^β/β`.
    KfpGeneralForce { gamma: f64, beta: f64 },
    /// Kinetic FitzHugh–Nagumo, `A = ax − bv`, `B = v(v−1)(v−c) + x`.
    FitzhughNagumo { a: f64, b: f64, c: f64 },
    Custom(Arc<CustomCoefficients>),
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    kind: ModelKind,
    dim: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(KfpError::Validation("dimension must be positive".into()));
        }
        match &kind {
            ModelKind::KfpGeneralForce { gamma, beta } => {
                if !(gamma.is_finite() && *gamma >= 1.0) {
                    return Err(KfpError::Validation(format!("γ = {gamma} must satisfy γ ≥ 1")));
                }
                if !(beta.is_finite() && *beta >= 2.0) {
                    return Err(KfpError::Validation(format!("β = {beta} must satisfy β ≥ 2")));
                }
            }
            ModelKind::FitzhughNagumo { a, b, c } => {
                for (name, val) in [("a", a), ("b", b), ("c", c)] {
                    if !(val.is_finite() && *val > 0.0) {
                        return Err(KfpError::Validation(format!(
                            "FitzHugh–Nagumo parameter {name} = {val} must be positive"
                        )));
                    }
                }
                if dim != 1 {
                    return Err(KfpError::Validation(
                        "the FitzHugh–Nagumo model is one-dimensional".into(),
                    ));
                }
            }
            ModelKind::Custom(coeffs) => {
                if coeffs.dim() != dim {
                    return Err(KfpError::Validation(format!(
                        "custom coefficients have dimension {}, spec declares {dim}",
                        coeffs.dim()
                    )));
                }
                validate_coefficients(coeffs.as_ref(), &AxisBox::cube(dim, 3.0)?, 64)?;
            }
        }
        Ok(Self { kind, dim })
    }

    pub fn kfp(gamma: f64, beta: f64, dim: usize) -> Result<Self> {
        Self::new(ModelKind::KfpGeneralForce { gamma, beta }, dim)
    }

    pub fn fhn(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::new(ModelKind::FitzhughNagumo { a, b, c }, 1)
    }

    pub fn custom(coeffs: CustomCoefficients) -> Result<Self> {
        let dim = coeffs.dim();
        Self::new(ModelKind::Custom(Arc::new(coeffs)), dim)
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> String {
        match &self.kind {
            ModelKind::KfpGeneralForce { gamma, beta } => format!("kfp(gamma={gamma}, beta={beta})"),
            ModelKind::FitzhughNagumo { a, b, c } => format!("fhn(a={a}, b={b}, c={c})"),
            ModelKind::Custom(c) => format!("custom({})", c.label()),
        }
    }

    fn check_point(&self, x: &[f64], v: &[f64]) -> Result<()> {
        if x.len() != self.dim || v.len() != self.dim {
            return Err(KfpError::Contract(format!(
                "point dimension ({}, {}) does not match model dimension {}",
                x.len(),
                v.len(),
                self.dim
            )));
        }
        ensure_finite("x", x)?;
        ensure_finite("v", v)
    }
}

/// Values and analytic derivatives of `V(x) = ⟨x⟩^γ/γ` and `W(v) = ⟨v⟩^β/β`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialEval {
    pub v_pot: f64,
    pub grad_v_pot: Vec<f64>,
    pub hess_v_pot: Vec<f64>,
    pub w_v: f64,
    pub grad_w_v: Vec<f64>,
    pub lap_w_v: f64,
}

pub fn eval_potential(spec: &ModelSpec, x: &[f64], v: &[f64]) -> Result<PotentialEval> {
    spec.check_point(x, v)?;
    let ModelKind::KfpGeneralForce { gamma, beta } = spec.kind else {
        return Err(KfpError::Contract(
            "eval_potential requires a general-force KFP model".into(),
        ));
    };
    let vx = bracket_potential(gamma, x);
    let wv = bracket_potential(beta, v);
    Ok(PotentialEval {
        v_pot: vx.value,
        grad_v_pot: vx.gradient,
        hess_v_pot: vx.hessian,
        w_v: wv.value,
        grad_w_v: wv.gradient,
        lap_w_v: wv.laplacian,
    })
}

/// Drift coefficients `(A, B)` of the named equation in its original
/// variables: `∂t f = div_x(A f) + div_v(B f) + diffusion`.
pub fn drift_fields(spec: &ModelSpec, x: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.check_point(x, v)?;
    Ok(match &spec.kind {
        ModelKind::KfpGeneralForce { gamma, beta } => {
            let gv = bracket_potential(*gamma, x).gradient;
            let gw = bracket_potential(*beta, v).gradient;
            let a = v.iter().map(|vi| -vi).collect();
            let b = gv.iter().zip(&gw).map(|(p, q)| p + q).collect();
            (a, b)
        }
        ModelKind::FitzhughNagumo { a, b, c } => {
            let (x, v) = (x[0], v[0]);
            (vec![a * x - b * v], vec![v * (v - 1.0) * (v - c) + x])
        }
        ModelKind::Custom(coeffs) => {
            let phi = coeffs.phi(x);
            let a = phi.iter().zip(v).map(|(p, vi)| p - vi).collect();
            (a, coeffs.drift_v(x, v))
        }
    })
}

/// Axis-aligned box in `ℝ^d`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(KfpError::Contract("box corners must have equal positive length".into()));
        }
        ensure_finite("box", &lo)?;
        ensure_finite("box", &hi)?;
        if lo.iter().zip(&hi).any(|(l, h)| h <= l) {
            return Err(KfpError::Contract("degenerate box (zero volume)".into()));
        }
        Ok(Self { lo, hi })
    }

    /// `[−half, half]^d`.
    pub fn cube(dim: usize, half: f64) -> Result<Self> {
        Self::new(vec![-half; dim], vec![half; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn map_unit(&self, u: &[f64]) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(u)
            .map(|((l, h), t)| l + (h - l) * t)
            .collect()
    }
}

/// Sampled Lipschitz estimate, always a lower estimate of the true constant
/// except for affine maps, where the Jacobian route makes it exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    /// `max(1, raw)`.
    pub value: f64,
    pub raw: f64,
    pub lower_estimate: bool,
}

/// Sampled Lipschitz constant of `phi` over `domain`, clamped below by 1.
///
/// Takes the larger of the maximal pairwise difference quotient over
/// `samples` quasi-random points (plus the box corners) and, when supplied,
/// the largest Jacobian operator norm at those points.
pub fn lipschitz_constant(
    phi: &dyn Fn(&[f64]) -> Vec<f64>,
    jacobian: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
    domain: &AxisBox,
    samples: usize,
) -> Result<LipschitzEstimate> {
    if samples < 2 {
        return Err(KfpError::Contract("lipschitz_constant needs at least 2 samples".into()));
    }
    let d = domain.dim();
    if domain.lo.iter().zip(&domain.hi).any(|(l, h)| h <= l) {
        return Err(KfpError::Contract("degenerate domain (zero volume)".into()));
    }
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(samples + 2);
    points.push(domain.lo.clone());
    points.push(domain.hi.clone());
    let mut halton = Halton::new(d, 0);
    while points.len() < samples + 2 {
        points.push(domain.map_unit(&halton.next_point()));
    }
    let values: Vec<Vec<f64>> = points.iter().map(|p| phi(p)).collect();
    let mut best: f64 = 0.0;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let dx: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dx == 0.0 {
                continue;
            }
            let df: f64 = values[i]
                .iter()
                .zip(&values[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.max(df / dx);
        }
    }
    if let Some(jac) = jacobian {
        for p in &points {
            let m = DMatrix::from_row_slice(d, d, &jac(p));
            let sigma = m.singular_values().max();
            best = best.max(sigma);
        }
    }
    Ok(LipschitzEstimate {
        value: best.max(1.0),
        raw: best,
        lower_estimate: true,
    })
}

/// Checks `K > 0` and `∇_v W = B` by centered finite differences at sampled
/// points (relative tolerance `1e−6`).
pub fn validate_coefficients(
    coeffs: &dyn KineticCoefficients,
    domain: &AxisBox,
    samples: usize,
) -> Result<()> {
    let d = coeffs.dim();
    let k = coeffs.diffusion();
    if !(k.is_finite() && k > 0.0) {
        return Err(KfpError::Validation(format!("diffusion K = {k} must be positive")));
    }
    let mut halton = Halton::new((2 * d).min(16), 7);
    for _ in 0..samples {
        let u = halton.next_point();
        let x = domain.map_unit(&u[..d]);
        let v = domain.map_unit(&u[d..2 * d]);
        let b = coeffs.drift_v(&x, &v);
        let grad = fd_gradient_v(coeffs, &x, &v);
        for i in 0..d {
            let tol = 1e-6 * (1.0 + b[i].abs());
            if (grad[i] - b[i]).abs() > tol {
                return Err(KfpError::Validation(format!(
                    "∇_v W ≠ B at x = {x:?}, v = {v:?}: component {i} has {} vs {}",
                    grad[i], b[i]
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn fd_gradient_v(coeffs: &dyn KineticCoefficients, x: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d)
        .map(|i| {
            let h = 1e-5 * (1.0 + v[i].abs());
            let mut vp = v.to_vec();
            let mut vm = v.to_vec();
            vp[i] += h;
            vm[i] -= h;
            (coeffs.potential_v(x, &vp) - coeffs.potential_v(x, &vm)) / (2.0 * h)
        })
        .collect()
}

/// Canonical form `∂t f = div_x((−v+Φ)f) + div_v(Bf) + KΔ_v f` with the
/// Lipschitz constant `M ≥ 1` of `Φ`.
#[derive(Debug, Clone)]
pub struct GeneralKfp {
    coeffs: Arc<dyn KineticCoefficients>,
    lipschitz: LipschitzEstimate,
}

impl GeneralKfp {
    /// Validates the coefficients on `domain` and estimates `M` there.
    pub fn from_coefficients(coeffs: Arc<dyn KineticCoefficients>, domain: &AxisBox) -> Result<Self> {
        if domain.dim() != coeffs.dim() {
            return Err(KfpError::Contract("domain dimension does not match coefficients".into()));
        }
        validate_coefficients(coeffs.as_ref(), domain, 64)?;
        let c = coeffs.clone();
        let c2 = coeffs.clone();
        let phi = move |x: &[f64]| c.phi(x);
        let jac = move |x: &[f64]| c2.phi_jacobian(x);
        let lipschitz = lipschitz_constant(&phi, Some(&jac), domain, 256)?;
        Ok(Self { coeffs, lipschitz })
    }

    /// For coefficients whose Lipschitz constant is known in closed form.
    pub fn with_exact_lipschitz(coeffs: Arc<dyn KineticCoefficients>, m: f64) -> Result<Self> {
        let k = coeffs.diffusion();
        if !(k.is_finite() && k > 0.0) {
            return Err(KfpError::Validation(format!("diffusion K = {k} must be positive")));
        }
        if !(m.is_finite() && m >= 0.0) {
            return Err(KfpError::Validation(format!("Lipschitz constant {m} is invalid")));
        }
        Ok(Self {
            coeffs,
            lipschitz: LipschitzEstimate {
                value: m.max(1.0),
                raw: m,
                lower_estimate: false,
            },
        })
    }

    pub fn coefficients(&self) -> &Arc<dyn KineticCoefficients> {
        &self.coeffs
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    pub fn diffusion(&self) -> f64 {
        self.coeffs.diffusion()
    }

    /// `M`, clamped to `≥ 1`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz.value
    }

    pub fn lipschitz_estimate(&self) -> LipschitzEstimate {
        self.lipschitz
    }

    pub fn phi(&self, x: &[f64]) -> Vec<f64> {
        self.coeffs.phi(x)
    }

    pub fn div_phi(&self, x: &[f64]) -> f64 {
        self.coeffs.div_phi(x)
    }

    pub fn drift_v(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        self.coeffs.drift_v(x, v)
    }

    pub fn div_v_drift(&self, x: &[f64], v: &[f64]) -> f64 {
        self.coeffs.div_v_drift(x, v)
    }

    pub fn potential_v(&self, x: &[f64], v: &[f64]) -> f64 {
        self.coeffs.potential_v(x, v)
    }

    /// x-drift `A(x, v) = −v + Φ(x)`.
    pub fn drift_x(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        self.phi(x).iter().zip(v).map(|(p, vi)| p - vi).collect()
    }

    pub fn derivative_norms(&self, x: &[f64], v: &[f64], order: usize) -> Option<Vec<(f64, f64)>> {
        self.coeffs.derivative_norms(x, v, order)
    }

    // one-dimensional shortcuts used by the grid code
    pub(crate) fn phi1(&self, x: f64) -> f64 {
        self.coeffs.phi(&[x])[0]
    }

    pub(crate) fn drift_v1(&self, x: f64, v: f64) -> f64 {
        self.coeffs.drift_v(&[x], &[v])[0]
    }
}

/// Adapts a model to the canonical form.
///
/// The FitzHugh–Nagumo model is returned in the rescaled velocity `w = b v`
/// (so that `K = 1/b²`); general-force KFP keeps its variables with
/// `W(x, v) = W(v) + v·∇V(x)`.
pub fn to_general_form(spec: &ModelSpec) -> Result<GeneralKfp> {
    match spec.kind() {
        ModelKind::KfpGeneralForce { gamma, beta } => GeneralKfp::with_exact_lipschitz(
            Arc::new(GeneralForceCoefficients {
                gamma: *gamma,
                beta: *beta,
                dim: spec.dim(),
            }),
            0.0,
        ),
        ModelKind::FitzhughNagumo { a, b, c } => GeneralKfp::with_exact_lipschitz(
            Arc::new(FhnCoefficients {
                a: *a,
                b: *b,
                c: *c,
            }),
            *a,
        ),
        ModelKind::Custom(coeffs) => {
            let c: Arc<dyn KineticCoefficients> = coeffs.clone();
            GeneralKfp::from_coefficients(c, &AxisBox::cube(spec.dim(), 6.0)?)
        }
    }
}
