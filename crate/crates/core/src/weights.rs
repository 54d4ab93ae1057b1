//! Lyapunov weights `m`, comparison functions `H`, the zero-order functionals
//! `φ₂(m)`, `φ_p(m)` and grid certification of the weight conditions.
//!
//! All weights are handled in log form; `m` itself is only exponentiated when
//! a caller asks for it and may overflow (flagged) while the ratios stay valid.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{ensure_finite, KfpError, Result};
use crate::model::{bracket_potential, GeneralKfp};

/// `log m` and the ratios `∇m/m`, `Δ_v m/m`, `Δ_{x,v} m/m` at one point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightEval {
    pub log_m: f64,
    /// `e^{log m}`; `+∞` when it overflows (see [`overflow`](Self::overflow)).
    pub m: f64,
    pub overflow: bool,
    pub grad_x: Vec<f64>,
    pub grad_v: Vec<f64>,
    pub lap_v: f64,
    pub lap_xv: f64,
}

impl WeightEval {
    fn from_parts(log_m: f64, grad_x: Vec<f64>, grad_v: Vec<f64>, lap_v: f64, lap_xv: f64) -> Self {
        let m = log_m.exp();
        Self {
            log_m,
            m,
            overflow: !m.is_finite(),
            grad_x,
            grad_v,
            lap_v,
            lap_xv,
        }
    }
}

/// User weight given by its log and ratio evaluators.
pub trait WeightFunction: Send + Sync + fmt::Debug {
    fn eval(&self, x: &[f64], v: &[f64]) -> WeightEval;
}

#[derive(Debug, Clone)]
pub enum WeightSpec {
    /// `m = exp((r/2)(|x|² + |v|²))`.
    GaussianQuadratic { r: f64 },
    /// `m = exp(λ H₁)`, `H₁ = |v|²/2 + ⟨x⟩^γ/γ + ε v·∇⟨x⟩`.
    KfpWeight { lambda: f64, eps: f64, gamma: f64 },
    /// `m ≡ 1`.
    Unit,
    Custom(Arc<dyn WeightFunction>),
}

impl WeightSpec {
    pub fn gaussian(r: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(KfpError::Validation(format!("weight rate r = {r} must be positive")));
        }
        Ok(Self::GaussianQuadratic { r })
    }

    /// Requires `ε² < 2/γ`, which keeps `H₁ > 0` and hence `m ≥ 1`.
    pub fn kfp(lambda: f64, eps: f64, gamma: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(KfpError::Validation(format!("λ = {lambda} must be positive")));
        }
        if !(gamma.is_finite() && gamma >= 1.0) {
            return Err(KfpError::Validation(format!("γ = {gamma} must satisfy γ ≥ 1")));
        }
        if !(eps.is_finite() && eps > 0.0 && eps * eps < 2.0 / gamma) {
            return Err(KfpError::Validation(format!(
                "ε = {eps} must lie in (0, √(2/γ)) so that m ≥ 1"
            )));
        }
        Ok(Self::KfpWeight { lambda, eps, gamma })
    }

    pub fn label(&self) -> String {
        match self {
            Self::GaussianQuadratic { r } => format!("gaussian(r={r})"),
            Self::KfpWeight { lambda, eps, gamma } => {
                format!("kfp(lambda={lambda}, eps={eps}, gamma={gamma})")
            }
            Self::Unit => "unit".into(),
            Self::Custom(c) => format!("custom({c:?})"),
        }
    }
}

fn check_point(x: &[f64], v: &[f64]) -> Result<()> {
    if x.len() != v.len() || x.is_empty() {
        return Err(KfpError::Contract(format!(
            "x and v must have equal positive dimension, got {} and {}",
            x.len(),
            v.len()
        )));
    }
    ensure_finite("x", x)?;
    ensure_finite("v", v)
}

pub fn eval_weight(w: &WeightSpec, x: &[f64], v: &[f64]) -> Result<WeightEval> {
    check_point(x, v)?;
    Ok(eval_weight_unchecked(w, x, v))
}

pub(crate) fn eval_weight_unchecked(w: &WeightSpec, x: &[f64], v: &[f64]) -> WeightEval {
    let d = x.len() as f64;
    match w {
        WeightSpec::GaussianQuadratic { r } => {
            let r = *r;
            let x2: f64 = x.iter().map(|a| a * a).sum();
            let v2: f64 = v.iter().map(|a| a * a).sum();
            WeightEval::from_parts(
                0.5 * r * (x2 + v2),
                x.iter().map(|a| r * a).collect(),
                v.iter().map(|a| r * a).collect(),
                r * d + r * r * v2,
                2.0 * r * d + r * r * (x2 + v2),
            )
        }
        WeightSpec::KfpWeight { lambda, eps, gamma } => {
            let k = kfp_h1(*eps, *gamma, x, v);
            let l = *lambda;
            let gv2: f64 = k.grad_v.iter().map(|a| a * a).sum();
            let gx2: f64 = k.grad_x.iter().map(|a| a * a).sum();
            WeightEval::from_parts(
                l * k.value,
                k.grad_x.iter().map(|a| l * a).collect(),
                k.grad_v.iter().map(|a| l * a).collect(),
                l * d + l * l * gv2,
                l * (k.lap_x + d) + l * l * (gx2 + gv2),
            )
        }
        WeightSpec::Unit => WeightEval::from_parts(
            0.0,
            vec![0.0; x.len()],
            vec![0.0; v.len()],
            0.0,
            0.0,
        ),
        WeightSpec::Custom(c) => c.eval(x, v),
    }
}

/// `log m` only, for grid fills.
pub fn log_weight(w: &WeightSpec, x: &[f64], v: &[f64]) -> f64 {
    match w {
        WeightSpec::GaussianQuadratic { r } => {
            let s: f64 = x.iter().chain(v).map(|a| a * a).sum();
            0.5 * r * s
        }
        WeightSpec::KfpWeight { lambda, eps, gamma } => lambda * kfp_h1_value(*eps, *gamma, x, v),
        WeightSpec::Unit => 0.0,
        WeightSpec::Custom(c) => c.eval(x, v).log_m,
    }
}

struct H1 {
    value: f64,
    grad_x: Vec<f64>,
    grad_v: Vec<f64>,
    lap_x: f64,
}

fn kfp_h1_value(eps: f64, gamma: f64, x: &[f64], v: &[f64]) -> f64 {
    let s = (1.0 + x.iter().map(|a| a * a).sum::<f64>()).sqrt();
    let v2: f64 = v.iter().map(|a| a * a).sum();
    let vx: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
    0.5 * v2 + s.powf(gamma) / gamma + eps * vx / s
}

fn kfp_h1(eps: f64, gamma: f64, x: &[f64], v: &[f64]) -> H1 {
    let d = x.len() as f64;
    let pot = bracket_potential(gamma, x);
    let s = (1.0 + x.iter().map(|a| a * a).sum::<f64>()).sqrt();
    let s3 = s * s * s;
    let vx: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
    let v2: f64 = v.iter().map(|a| a * a).sum();
    // ∇²⟨x⟩ v = v/s − x (x·v)/s³
    let grad_x = pot
        .gradient
        .iter()
        .zip(x.iter().zip(v))
        .map(|(gv, (xi, vi))| gv + eps * (vi / s - xi * vx / s3))
        .collect();
    let grad_v = v.iter().zip(x).map(|(vi, xi)| vi + eps * xi / s).collect();
    // ∇(Δ⟨x⟩) = −x ((d−1)/s³ + 3/s⁵)
    let lap_x = pot.laplacian - eps * vx * ((d - 1.0) / s3 + 3.0 / (s3 * s * s));
    H1 {
        value: 0.5 * v2 + pot.value + eps * vx / s,
        grad_x,
        grad_v,
        lap_x,
    }
}

/// Comparison function `H ≥ 1`.
#[derive(Clone)]
pub enum ComparisonH {
    /// `|v|⁴ + |x|² + 1`.
    Fhn,
    /// `⟨v⟩^β + ⟨x⟩^{γ−1} + 1`.
    Kfp { beta: f64, gamma: f64 },
    Custom(Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>),
}

impl fmt::Debug for ComparisonH {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fhn => write!(f, "Fhn"),
            Self::Kfp { beta, gamma } => write!(f, "Kfp {{ beta: {beta}, gamma: {gamma} }}"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl ComparisonH {
    pub fn eval(&self, x: &[f64], v: &[f64]) -> f64 {
        let x2: f64 = x.iter().map(|a| a * a).sum();
        let v2: f64 = v.iter().map(|a| a * a).sum();
        match self {
            Self::Fhn => v2 * v2 + x2 + 1.0,
            Self::Kfp { beta, gamma } => {
                (1.0 + v2).powf(beta / 2.0) + (1.0 + x2).powf((gamma - 1.0) / 2.0) + 1.0
            }
            Self::Custom(h) => h(x, v),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn check_model_point(g: &GeneralKfp, x: &[f64], v: &[f64]) -> Result<()> {
    check_point(x, v)?;
    if x.len() != g.dim() {
        return Err(KfpError::Contract(format!(
            "point dimension {} does not match model dimension {}",
            x.len(),
            g.dim()
        )));
    }
    Ok(())
}

/// Pointwise pieces shared by `L*m/m`, `φ₂` and `φ_p`.
struct Pieces {
    transport: f64,
    div_phi: f64,
    grad_v2: f64,
    lap_v: f64,
    drift: f64,
    div_b: f64,
    k: f64,
}

fn pieces(g: &GeneralKfp, w: &WeightSpec, x: &[f64], v: &[f64]) -> Pieces {
    let e = eval_weight_unchecked(w, x, v);
    let phi = g.phi(x);
    let vm: Vec<f64> = v.iter().zip(&phi).map(|(a, b)| a - b).collect();
    let b = g.drift_v(x, v);
    Pieces {
        transport: dot(&vm, &e.grad_x),
        div_phi: g.div_phi(x),
        grad_v2: dot(&e.grad_v, &e.grad_v),
        lap_v: e.lap_v,
        drift: dot(&b, &e.grad_v),
        div_b: g.div_v_drift(x, v),
        k: g.diffusion(),
    }
}

/// `L*m/m = (v − Φ)·∇_x m/m − B·∇_v m/m + K Δ_v m/m`.
pub fn lyapunov_ratio(g: &GeneralKfp, w: &WeightSpec, x: &[f64], v: &[f64]) -> Result<f64> {
    check_model_point(g, x, v)?;
    let p = pieces(g, w, x, v);
    Ok(p.transport - p.drift + p.k * p.lap_v)
}

/// `φ₂(m)`.
pub fn phi2(g: &GeneralKfp, w: &WeightSpec, x: &[f64], v: &[f64]) -> Result<f64> {
    check_model_point(g, x, v)?;
    let p = pieces(g, w, x, v);
    Ok(p.transport + 0.5 * p.div_phi + p.k * p.grad_v2 + p.k * p.lap_v - p.drift + 0.5 * p.div_b)
}

/// `φ_p(m)` for `p ∈ [1, ∞]`; pass `f64::INFINITY` for `p = ∞`.
pub fn phi_p(g: &GeneralKfp, w: &WeightSpec, p: f64, x: &[f64], v: &[f64]) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(KfpError::Contract(format!("φ_p needs p ≥ 1, got {p}")));
    }
    check_model_point(g, x, v)?;
    let q = pieces(g, w, x, v);
    let s = 1.0 - 1.0 / p;
    Ok(q.transport + s * q.div_phi + 2.0 * q.k * s * q.grad_v2 + q.k * (2.0 / p - 1.0) * q.lap_v
        - q.drift
        + s * q.div_b)
}

/// Tensor grid of sample nodes on `[−Lx, Lx]^d × [−Lv, Lv]^d`, endpoints
/// included.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingBox {
    pub lx: f64,
    pub lv: f64,
    pub nx: usize,
    pub nv: usize,
    pub dim: usize,
}

impl SamplingBox {
    pub fn new(lx: f64, lv: f64, nx: usize, nv: usize, dim: usize) -> Result<Self> {
        if !(lx.is_finite() && lv.is_finite() && lx > 0.0 && lv > 0.0) {
            return Err(KfpError::Contract("sampling box extents must be positive".into()));
        }
        if nx < 2 || nv < 2 || dim == 0 {
            return Err(KfpError::Contract("sampling box needs ≥ 2 nodes per axis".into()));
        }
        let total = (nx as f64).powi(dim as i32) * (nv as f64).powi(dim as i32);
        if total > 5.0e7 {
            return Err(KfpError::Contract(format!("sampling box has {total:e} nodes")));
        }
        Ok(Self { lx, lv, nx, nv, dim })
    }

    pub fn hx(&self) -> f64 {
        2.0 * self.lx / (self.nx - 1) as f64
    }

    pub fn hv(&self) -> f64 {
        2.0 * self.lv / (self.nv - 1) as f64
    }

    /// Calls `f(x, v)` for every node.
    pub fn for_each(&self, mut f: impl FnMut(&[f64], &[f64])) {
        let d = self.dim;
        let mut idx = vec![0usize; 2 * d];
        let mut x = vec![0.0; d];
        let mut v = vec![0.0; d];
        let (hx, hv) = (self.hx(), self.hv());
        loop {
            for i in 0..d {
                x[i] = -self.lx + hx * idx[i] as f64;
                v[i] = -self.lv + hv * idx[d + i] as f64;
            }
            f(&x, &v);
            let mut k = 0;
            loop {
                if k == 2 * d {
                    return;
                }
                let n = if k < d { self.nx } else { self.nv };
                idx[k] += 1;
                if idx[k] < n {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }
}

/// Grid point realising an extremum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub value: f64,
}

impl Witness {
    fn at(x: &[f64], v: &[f64], value: f64) -> Self {
        Self {
            x: x.to_vec(),
            v: v.to_vec(),
            value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionOptions {
    /// Radius of the ball outside which the rates `α`, `C₂` are read off.
    /// `None` picks the smallest ladder radius outside which both
    /// `L*m/m` and `φ₂` are negative at every node.
    pub search_radius: Option<f64>,
    /// Spacing of the radius ladder for `φ_p`; defaults to the finer node spacing.
    pub radius_step: Option<f64>,
}

impl Default for ConditionOptions {
    fn default() -> Self {
        Self {
            search_radius: None,
            radius_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct C1Report {
    pub alpha: f64,
    pub b: f64,
    pub search_radius: f64,
    /// Maximiser of `L*m/m` outside the search ball.
    pub witness_alpha: Option<Witness>,
    /// Maximiser of `m (L*m/m + α)`.
    pub witness_b: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct C2Report {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub witness_c1: Option<Witness>,
    pub witness_c2: Option<Witness>,
    pub witness_c3: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct C3Entry {
    pub n: usize,
    pub eps: f64,
    pub c: f64,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct C4Report {
    pub c4: f64,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiPReport {
    /// `"inf"` for `p = ∞`.
    pub p: String,
    pub a: f64,
    pub m: f64,
    pub r: f64,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionFailure {
    pub condition: String,
    pub message: String,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub success: bool,
    pub c1: C1Report,
    pub c2: C2Report,
    pub c3: Vec<C3Entry>,
    pub c4: C4Report,
    pub phi_p: Vec<PhiPReport>,
    /// `max(0, sup L*m/m)`: growth rate of `‖f‖_{L¹(m)}` without sink.
    pub growth_rate: f64,
    pub failures: Vec<ConditionFailure>,
    pub notes: Vec<String>,
}

/// ε ladder used for the derivative-growth condition.
pub const C3_EPS_LADDER: [f64; 3] = [1.0, 0.1, 0.01];

struct Node {
    x: Vec<f64>,
    v: Vec<f64>,
    radius: f64,
    log_m: f64,
    lstar: f64,
    phi2: f64,
    h: f64,
    lap_xv: f64,
}

fn sup_by<'a>(
    nodes: impl Iterator<Item = &'a Node>,
    f: impl Fn(&Node) -> f64,
) -> Option<Witness> {
    let mut best: Option<Witness> = None;
    for n in nodes {
        let val = f(n);
        if best.as_ref().map_or(true, |b| val > b.value) {
            best = Some(Witness::at(&n.x, &n.v, val));
        }
    }
    best
}

/// Smallest ladder radius `R` with `vals < 0` at every node outside `B_R`,
/// with the sup outside and its node index.
fn smallest_negative_radius(nodes: &[Node], vals: &[f64], ladder: &[f64]) -> Option<(f64, f64, usize)> {
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| nodes[b].radius.total_cmp(&nodes[a].radius));
    // suffix maxima over decreasing radius
    let mut found = None;
    let mut k = 0usize;
    let mut run_max = f64::NEG_INFINITY;
    let mut run_arg = 0usize;
    for &r in ladder.iter().rev() {
        while k < order.len() && nodes[order[k]].radius > r {
            if vals[order[k]] > run_max {
                run_max = vals[order[k]];
                run_arg = order[k];
            }
            k += 1;
        }
        if run_max < 0.0 {
            found = Some((r, run_max, run_arg));
        } else {
            break;
        }
    }
    found
}

fn p_label(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p}")
    }
}

/// Certifies the Lyapunov, `φ₂`-growth, derivative-growth and Laplacian
/// conditions of the weight on the nodes of `grid`.
///
/// Constants are grid extrema with witnesses:
///
/// * `α = −sup_{|z|>R₀} L*m/m`, `b = max(0, sup m (L*m/m + α))`;
/// * `C₁ = sup(−φ₂/H)`, `C₂ = ½ inf_{|z|>R₀}(−φ₂/H)`, `C₃ = max(0, sup(φ₂ + C₂H))`;
/// * `C_{n,ε} = max(0, sup(Σ_{k≤n}|D^kΦ| + |D^kB| − εH))` for ε in [`C3_EPS_LADDER`];
/// * `C₄ = max(0, −inf Δ_{x,v}m/m)`;
/// * for each `p`, the smallest ladder radius `R` with `φ_p < 0` outside `B_R`,
///   `a = −sup_{|z|>R} φ_p`, `M = max(0, sup_{|z|≤R}(φ_p + a))`.
///
/// A condition that cannot be certified is reported in `failures`; only
/// malformed input is an error.
pub fn verify_conditions(
    g: &GeneralKfp,
    w: &WeightSpec,
    h: &ComparisonH,
    grid: &SamplingBox,
    n_max: usize,
    p_list: &[f64],
    opts: &ConditionOptions,
) -> Result<ConditionReport> {
    if grid.dim != g.dim() {
        return Err(KfpError::Contract("sampling box dimension does not match model".into()));
    }
    if let Some(r) = opts.search_radius {
        if !(r.is_finite() && r >= 0.0) {
            return Err(KfpError::Contract("search radius must be nonnegative".into()));
        }
    }
    if let Some(st) = opts.radius_step {
        if !(st.is_finite() && st > 0.0) {
            return Err(KfpError::Contract("radius step must be positive".into()));
        }
    }
    if let Some(&p) = p_list.iter().find(|p| p.is_nan() || **p < 1.0) {
        return Err(KfpError::Contract(format!("φ_p needs p ≥ 1, got {p}")));
    }
    let mut nodes = Vec::with_capacity(grid.nx.pow(grid.dim as u32) * grid.nv.pow(grid.dim as u32));
    let mut c3_sup = vec![vec![(f64::NEG_INFINITY, None::<Witness>); C3_EPS_LADDER.len()]; n_max];
    let mut c3_available = true;
    grid.for_each(|x, v| {
        let p = pieces(g, w, x, v);
        let e = eval_weight_unchecked(w, x, v);
        let hv = h.eval(x, v);
        if n_max > 0 && c3_available {
            match g.derivative_norms(x, v, n_max) {
                Some(norms) => {
                    let mut acc = 0.0;
                    for (n, (dphi, db)) in norms.iter().enumerate() {
                        acc += dphi + db;
                        for (k, eps) in C3_EPS_LADDER.iter().enumerate() {
                            let val = acc - eps * hv;
                            if val > c3_sup[n][k].0 {
                                c3_sup[n][k] = (val, Some(Witness::at(x, v, val)));
                            }
                        }
                    }
                }
                None => c3_available = false,
            }
        }
        nodes.push(Node {
            x: x.to_vec(),
            v: v.to_vec(),
            radius: (x.iter().chain(v).map(|a| a * a).sum::<f64>()).sqrt(),
            log_m: e.log_m,
            lstar: p.transport - p.drift + p.k * p.lap_v,
            phi2: p.transport + 0.5 * p.div_phi + p.k * p.grad_v2 + p.k * p.lap_v - p.drift
                + 0.5 * p.div_b,
            h: hv,
            lap_xv: e.lap_xv,
        });
    });

    let mut failures = Vec::new();
    let mut notes = g.coefficients().notes();
    let max_radius = nodes.iter().map(|n| n.radius).fold(0.0, f64::max);
    let step = opts.radius_step.unwrap_or_else(|| grid.hx().min(grid.hv()));
    let ladder: Vec<f64> = (0..)
        .map(|k| k as f64 * step)
        .take_while(|r| *r < max_radius)
        .collect();
    let r0 = match opts.search_radius {
        Some(r) => r,
        None => {
            let vals: Vec<f64> = nodes.iter().map(|n| n.lstar.max(n.phi2)).collect();
            let r = smallest_negative_radius(&nodes, &vals, &ladder).map(|(r, _, _)| r);
            match r {
                Some(r) => {
                    notes.push(format!("search radius {r} chosen from the ladder"));
                    r
                }
                None => {
                    let r = ladder.last().copied().unwrap_or(0.0);
                    notes.push(format!(
                        "no ladder radius makes L*m/m and φ₂ negative outside it; using {r}"
                    ));
                    r
                }
            }
        }
    };

    if let Some(bad) = nodes.iter().find(|n| {
        !(n.lstar.is_finite() && n.phi2.is_finite() && n.lap_xv.is_finite() && n.log_m.is_finite())
    }) {
        failures.push(ConditionFailure {
            condition: "weight".into(),
            message: "non-finite weight ratio on the sampling box".into(),
            witness: Some(Witness::at(&bad.x, &bad.v, f64::NAN)),
        });
    }
    if let Some(bad) = nodes.iter().find(|n| n.log_m < 0.0) {
        failures.push(ConditionFailure {
            condition: "weight".into(),
            message: "m < 1 on the sampling box".into(),
            witness: Some(Witness::at(&bad.x, &bad.v, bad.log_m.exp())),
        });
    }
    if let Some(bad) = nodes.iter().find(|n| n.h < 1.0) {
        failures.push(ConditionFailure {
            condition: "H".into(),
            message: "comparison function below 1".into(),
            witness: Some(Witness::at(&bad.x, &bad.v, bad.h)),
        });
    }

    // (C1)
    let outside = || nodes.iter().filter(|n| n.radius > r0);
    let witness_alpha = sup_by(outside(), |n| n.lstar);
    let c1 = match &witness_alpha {
        None => {
            failures.push(ConditionFailure {
                condition: "C1".into(),
                message: format!("no sample lies outside the search ball of radius {r0}"),
                witness: None,
            });
            C1Report {
                alpha: f64::NAN,
                b: f64::NAN,
                search_radius: r0,
                witness_alpha: None,
                witness_b: None,
            }
        }
        Some(wa) => {
            let alpha = -wa.value;
            // outside the ball the bracket is ≤ 0, so the sup is attained inside
            let witness_b = sup_by(nodes.iter().filter(|n| n.radius <= r0), |n| {
                let t = n.lstar + alpha;
                if t <= 0.0 {
                    t
                } else {
                    (n.log_m + t.ln()).exp()
                }
            });
            let b = witness_b.as_ref().map_or(0.0, |w| w.value.max(0.0));
            if !(alpha > 0.0) {
                failures.push(ConditionFailure {
                    condition: "C1".into(),
                    message: format!(
                        "L*m/m = {} ≥ 0 outside radius {r0}: no positive Lyapunov rate",
                        wa.value
                    ),
                    witness: Some(wa.clone()),
                });
            } else if !b.is_finite() {
                failures.push(ConditionFailure {
                    condition: "C1".into(),
                    message: "Lyapunov offset b overflows".into(),
                    witness: witness_b.clone(),
                });
            }
            C1Report {
                alpha,
                b,
                search_radius: r0,
                witness_alpha: Some(wa.clone()),
                witness_b,
            }
        }
    };

    // (C2)
    let witness_c1 = sup_by(nodes.iter(), |n| -n.phi2 / n.h);
    let inf_out = sup_by(outside(), |n| n.phi2 / n.h);
    let c2 = match inf_out {
        Some(wc2) if wc2.value < 0.0 => {
            let c2v = -0.5 * wc2.value;
            let witness_c3 = sup_by(nodes.iter(), |n| n.phi2 + c2v * n.h);
            let c3v = witness_c3.as_ref().map_or(0.0, |w| w.value.max(0.0));
            C2Report {
                c1: witness_c1.as_ref().map_or(f64::NAN, |w| w.value),
                c2: c2v,
                c3: c3v,
                witness_c1,
                witness_c2: Some(Witness::at(&wc2.x, &wc2.v, -wc2.value)),
                witness_c3,
            }
        }
        other => {
            failures.push(ConditionFailure {
                condition: "C2".into(),
                message: format!("φ₂ ≥ 0 somewhere outside radius {r0}: no positive C₂"),
                witness: other.clone(),
            });
            C2Report {
                c1: witness_c1.as_ref().map_or(f64::NAN, |w| w.value),
                c2: f64::NAN,
                c3: f64::NAN,
                witness_c1,
                witness_c2: other,
                witness_c3: None,
            }
        }
    };

    // (C3)
    let mut c3 = Vec::new();
    if n_max > 0 {
        if c3_available {
            for (n, row) in c3_sup.into_iter().enumerate() {
                for (k, (val, wit)) in row.into_iter().enumerate() {
                    c3.push(C3Entry {
                        n: n + 1,
                        eps: C3_EPS_LADDER[k],
                        c: val.max(0.0),
                        witness: wit,
                    });
                }
            }
        } else {
            notes.push("derivative norms not provided by the model; C3 skipped".into());
        }
    }

    // (C4)
    let wc4 = sup_by(nodes.iter(), |n| -n.lap_xv);
    let c4 = C4Report {
        c4: wc4.as_ref().map_or(0.0, |w| w.value.max(0.0)),
        witness: wc4,
    };

    // φ_p radius ladder
    let mut phi_reports = Vec::new();
    for &p in p_list {
        let s = 1.0 - 1.0 / p;
        let vals: Vec<f64> = nodes
            .iter()
            .map(|n| {
                let q = pieces(g, w, &n.x, &n.v);
                q.transport + s * q.div_phi + 2.0 * q.k * s * q.grad_v2
                    + q.k * (2.0 / p - 1.0) * q.lap_v
                    - q.drift
                    + s * q.div_b
            })
            .collect();
        let found = smallest_negative_radius(&nodes, &vals, &ladder);
        match found {
            Some((r, sup_out, _)) => {
                let a = -sup_out;
                let mut wm: Option<Witness> = None;
                for (n, val) in nodes.iter().zip(&vals) {
                    if n.radius <= r && wm.as_ref().map_or(true, |w| val + a > w.value) {
                        wm = Some(Witness::at(&n.x, &n.v, val + a));
                    }
                }
                phi_reports.push(PhiPReport {
                    p: p_label(p),
                    a,
                    m: wm.as_ref().map_or(0.0, |w| w.value.max(0.0)),
                    r,
                    witness: wm,
                });
            }
            None => {
                let wit = nodes
                    .iter()
                    .zip(&vals)
                    .max_by(|a, b| a.0.radius.total_cmp(&b.0.radius).then(a.1.total_cmp(b.1)))
                    .map(|(n, v)| Witness::at(&n.x, &n.v, *v));
                failures.push(ConditionFailure {
                    condition: format!("phi_p(p={})", p_label(p)),
                    message: "φ_p is nonnegative at the outermost samples; no radius R works".into(),
                    witness: wit.clone(),
                });
                phi_reports.push(PhiPReport {
                    p: p_label(p),
                    a: f64::NAN,
                    m: f64::NAN,
                    r: f64::NAN,
                    witness: wit,
                });
            }
        }
    }

    let growth_rate = nodes.iter().map(|n| n.lstar).fold(0.0, f64::max);
    if !c4.c4.is_finite() {
        failures.push(ConditionFailure {
            condition: "C4".into(),
            message: "Δ_{x,v}m/m unbounded below on the sampling box".into(),
            witness: c4.witness.clone(),
        });
    }
    let success = failures.is_empty() && c1.alpha > 0.0 && c2.c2 > 0.0;
    Ok(ConditionReport {
        success,
        c1,
        c2,
        c3,
        c4,
        phi_p: phi_reports,
        growth_rate,
        failures,
        notes,
    })
}
