//! Regularization diagnostics: the time-weighted functionals `F`, `F*`, the
//! weighted gradient identity, Nash ratios, the short-time decay probe,
//! weighted Sobolev norms and the zero-order integral identities, all as
//! quadratures on a [`Grid`].
//!
//! Gradients are centered differences with one-sided closure on the first and
//! last cell.

use serde::Serialize;

use crate::error::{KfpError, Result};
use crate::model::GeneralKfp;
use crate::solver::{evolve, DiscreteOperator, EvolveOptions, Grid, GridField, Observer};
use crate::weights::{eval_weight_unchecked, phi2, phi_p, WeightSpec};

/// Coefficients of `F(t, f) = A‖f‖² + a t‖∇_v f‖² + 2c t²(∇_v f, ∇_x f) + b t³‖∇_x f‖²`
/// (all in `L²(m)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HypoCoeffs {
    pub big_a: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub eta: f64,
}

impl HypoCoeffs {
    /// Requires `c ≤ √(ab)`, `c > 6b` and `A ≥ 100·max(a, b, c)`.
    pub fn new(big_a: f64, a: f64, b: f64, c: f64, eta: f64) -> Result<Self> {
        for (name, v) in [("A", big_a), ("a", a), ("b", b), ("c", c), ("η", eta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(KfpError::Validation(format!("{name} = {v} must be positive")));
            }
        }
        if c > (a * b).sqrt() {
            return Err(KfpError::Validation(format!("c = {c} exceeds √(ab) = {}", (a * b).sqrt())));
        }
        if c <= 6.0 * b {
            return Err(KfpError::Validation(format!("c = {c} must exceed 6b = {}", 6.0 * b)));
        }
        let floor = 100.0 * a.max(b).max(c);
        if big_a < floor {
            return Err(KfpError::Validation(format!("A = {big_a} is below 100·max(a, b, c) = {floor}")));
        }
        Ok(Self { big_a, a, b, c, eta })
    }
}

/// Centered-difference `∂_x f` and `∂_v f` at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dx: Vec<f64>,
    pub dv: Vec<f64>,
}

fn diff_x(g: &Grid, f: &[f64]) -> Vec<f64> {
    let (nx, nv) = (g.nx, g.nv);
    let mut out = vec![0.0; f.len()];
    for i in 0..nx {
        let (lo, hi, h) = if i == 0 {
            (0, 1, g.hx)
        } else if i == nx - 1 {
            (nx - 2, nx - 1, g.hx)
        } else {
            (i - 1, i + 1, 2.0 * g.hx)
        };
        for j in 0..nv {
            out[i * nv + j] = (f[hi * nv + j] - f[lo * nv + j]) / h;
        }
    }
    out
}

fn diff_v(g: &Grid, f: &[f64]) -> Vec<f64> {
    let (nx, nv) = (g.nx, g.nv);
    let mut out = vec![0.0; f.len()];
    for i in 0..nx {
        let row = &f[i * nv..(i + 1) * nv];
        for j in 0..nv {
            let (lo, hi, h) = if j == 0 {
                (0, 1, g.hv)
            } else if j == nv - 1 {
                (nv - 2, nv - 1, g.hv)
            } else {
                (j - 1, j + 1, 2.0 * g.hv)
            };
            out[i * nv + j] = (row[hi] - row[lo]) / h;
        }
    }
    out
}

/// Fourth-order centered `∂_v f`, falling back to [`diff_v`] within two
/// cells of the edge.
fn diff_v4(g: &Grid, f: &[f64]) -> Vec<f64> {
    let nv = g.nv;
    let mut out = diff_v(g, f);
    for i in 0..g.nx {
        let row = &f[i * nv..(i + 1) * nv];
        for j in 2..nv - 2 {
            out[i * nv + j] = (row[j - 2] - 8.0 * row[j - 1] + 8.0 * row[j + 1] - row[j + 2]) / (12.0 * g.hv);
        }
    }
    out
}

/// Fourth-order centered `∂_x f`, second order within two cells of the edge.
fn diff_x4(g: &Grid, f: &[f64]) -> Vec<f64> {
    let (nx, nv) = (g.nx, g.nv);
    let mut out = diff_x(g, f);
    for i in 2..nx - 2 {
        for j in 0..nv {
            let at = |k: usize| f[k * nv + j];
            out[i * nv + j] = (at(i - 2) - 8.0 * at(i - 1) + 8.0 * at(i + 1) - at(i + 2)) / (12.0 * g.hx);
        }
    }
    out
}

/// Fourth-order centered `∂²_v f`; the edge cells see zero outside the box.
fn diff_vv4(g: &Grid, f: &[f64]) -> Vec<f64> {
    let nv = g.nv;
    let h2 = g.hv * g.hv;
    let mut out = vec![0.0; f.len()];
    for i in 0..g.nx {
        let row = &f[i * nv..(i + 1) * nv];
        let at = |j: isize| if j < 0 || j >= nv as isize { 0.0 } else { row[j as usize] };
        for j in 0..nv {
            let jj = j as isize;
            out[i * nv + j] = if j >= 2 && j + 2 < nv {
                (-at(jj - 2) + 16.0 * at(jj - 1) - 30.0 * at(jj) + 16.0 * at(jj + 1) - at(jj + 2)) / (12.0 * h2)
            } else {
                (at(jj - 1) - 2.0 * at(jj) + at(jj + 1)) / h2
            };
        }
    }
    out
}

/// `L f` from fourth-order centered differences of the fluxes, minus the
/// operator's sink if it has one.
fn apply_l4(g: &GeneralKfp, op: &DiscreteOperator, f: &[f64]) -> Vec<f64> {
    let grid = &op.grid;
    let mut ax = vec![0.0; f.len()];
    let mut bv = vec![0.0; f.len()];
    for i in 0..grid.nx {
        let x = [grid.x(i)];
        let phi = g.phi(&x)[0];
        for j in 0..grid.nv {
            let c = grid.index(i, j);
            let v = [grid.v(j)];
            ax[c] = (phi - v[0]) * f[c];
            bv[c] = g.drift_v(&x, &v)[0] * f[c];
        }
    }
    let (dx, dv, dvv) = (diff_x4(grid, &ax), diff_v4(grid, &bv), diff_vv4(grid, f));
    let mut out: Vec<f64> = (0..f.len()).map(|c| dx[c] + dv[c] + op.k * dvv[c]).collect();
    if let Some(s) = &op.sink {
        out.iter_mut().zip(s.iter().zip(f)).for_each(|(o, (si, fi))| *o -= si * fi);
    }
    out
}

pub fn centered_gradients(f: &GridField) -> Gradients {
    Gradients {
        dx: diff_x(&f.grid, &f.values),
        dv: diff_v(&f.grid, &f.values),
    }
}

/// `m^k` on the grid; a range error if it overflows where `mask` is nonzero.
fn weight_power(g: &Grid, w: &WeightSpec, k: f64, mask: &[f64]) -> Result<Vec<f64>> {
    let log_m = g.log_weight(w);
    let out: Vec<f64> = log_m.iter().map(|l| (k * l).exp()).collect();
    if let Some(pos) = out.iter().zip(mask).position(|(m, f)| *f != 0.0 && !m.is_finite()) {
        return Err(KfpError::Range(format!("weight overflows at cell {pos}")));
    }
    Ok(out)
}

fn integral(g: &Grid, it: impl Iterator<Item = f64>) -> f64 {
    it.sum::<f64>() * g.cell_volume()
}

/// `F(t, f)`, or `F*(t, f)` with time powers `(2, 4, 6)` when `star` is set.
pub fn functional_f(f: &GridField, grads: &Gradients, t: f64, co: &HypoCoeffs, w: &WeightSpec, star: bool) -> Result<f64> {
    if !(t >= 0.0 && t <= co.eta) {
        return Err(KfpError::Contract(format!("t = {t} outside [0, η = {}]", co.eta)));
    }
    if grads.dx.len() != f.values.len() || grads.dv.len() != f.values.len() {
        return Err(KfpError::Contract("gradient fields do not match the grid".into()));
    }
    let g = &f.grid;
    let m2 = weight_power(g, w, 2.0, &f.values)?;
    let l2 = integral(g, f.values.iter().zip(&m2).map(|(a, m)| a * a * m));
    let vv = integral(g, grads.dv.iter().zip(&m2).map(|(a, m)| a * a * m));
    let xx = integral(g, grads.dx.iter().zip(&m2).map(|(a, m)| a * a * m));
    let xv = integral(g, grads.dv.iter().zip(&grads.dx).zip(&m2).map(|((a, b), m)| a * b * m));
    let (p1, p2, p3) = if star { (2, 4, 6) } else { (1, 2, 3) };
    Ok(co.big_a * l2 + co.a * t.powi(p1) * vv + 2.0 * co.c * t.powi(p2) * xv + co.b * t.powi(p3) * xx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    /// Smallest `C` with `ΔF/Δt ≤ C‖f‖²_{L²(m)}` at every pair.
    pub c_fit: f64,
    /// Smallest sampled `(C_fit‖f‖² − ΔF/Δt) / (‖∇_v f‖² + t²‖∇_x f‖²)`.
    pub dissipation: f64,
    pub samples: usize,
    pub ok: bool,
    /// Times `(s, t)` where the bound (given or fitted) fails.
    pub violations: Vec<(f64, f64)>,
    pub values: Vec<(f64, f64)>,
}

/// Difference quotients of `F` (or `F*`) along snapshots, fitted against
/// `C‖f_t‖²_{L²(m)}`. With `c_bound` the check is against that constant.
pub fn monotonicity_check(
    traj: &[GridField],
    co: &HypoCoeffs,
    w: &WeightSpec,
    star: bool,
    c_bound: Option<f64>,
) -> Result<MonotonicityReport> {
    if traj.len() < 32 {
        return Err(KfpError::Contract(format!(
            "need at least 32 snapshots, got {}",
            traj.len()
        )));
    }
    struct Sample {
        t: f64,
        f: f64,
        l2: f64,
        diss: f64,
    }
    let mut s = Vec::with_capacity(traj.len());
    for f in traj {
        let gr = centered_gradients(f);
        let m2 = weight_power(&f.grid, w, 2.0, &f.values)?;
        let g = &f.grid;
        let l2 = integral(g, f.values.iter().zip(&m2).map(|(a, m)| a * a * m));
        let vv = integral(g, gr.dv.iter().zip(&m2).map(|(a, m)| a * a * m));
        let xx = integral(g, gr.dx.iter().zip(&m2).map(|(a, m)| a * a * m));
        s.push(Sample {
            t: f.t,
            f: functional_f(f, &gr, f.t, co, w, star)?,
            l2,
            diss: vv + f.t * f.t * xx,
        });
    }
    let mut c_fit = 0.0f64;
    let mut quotients = Vec::with_capacity(s.len() - 1);
    let mut violations = Vec::new();
    for k in 0..s.len() - 1 {
        let dt = s[k + 1].t - s[k].t;
        if !(dt > 0.0) {
            return Err(KfpError::Contract("snapshot times must increase".into()));
        }
        let q = (s[k + 1].f - s[k].f) / dt;
        let norm = s[k].l2.max(s[k + 1].l2);
        let tol = 1e-12 * s[k].f.abs().max(s[k + 1].f.abs()) / dt;
        if norm > 0.0 {
            c_fit = c_fit.max(q / norm);
        } else if q > tol {
            violations.push((s[k].t, s[k + 1].t));
        }
        quotients.push((q, norm, tol, k));
    }
    let c = c_bound.unwrap_or(c_fit);
    let mut dissipation = f64::INFINITY;
    for &(q, norm, tol, k) in &quotients {
        if c_bound.is_some() && q > c * norm + tol {
            violations.push((s[k].t, s[k + 1].t));
        }
        let d = s[k].diss.max(s[k + 1].diss);
        if d > 0.0 {
            dissipation = dissipation.min((c_fit * norm - q) / d);
        }
    }
    Ok(MonotonicityReport {
        c_fit,
        dissipation,
        samples: s.len(),
        ok: violations.is_empty() && c_fit.is_finite(),
        violations,
        values: s.iter().map(|p| (p.t, p.f)).collect(),
    })
}

fn check_margin(f: &GridField, cells: usize, label: &str) -> Result<()> {
    let g = &f.grid;
    let peak = f.values.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let tol = 1e-12 * peak;
    for i in 0..g.nx {
        for j in 0..g.nv {
            let edge = i < cells || j < cells || i + cells >= g.nx || j + cells >= g.nv;
            if edge && f.values[g.index(i, j)].abs() > tol {
                return Err(KfpError::Contract(format!(
                    "{label} must vanish on a {cells}-cell margin (cell ({i}, {j}))"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityResidual {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs − rhs|` over `|lhs|` plus the integrals of the absolute
    /// right-hand integrands.
    pub relative: f64,
}

impl IdentityResidual {
    fn new(lhs: f64, rhs: f64, scale: f64) -> Self {
        Self {
            lhs,
            rhs,
            relative: if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 },
        }
    }
}

/// `‖∇(fm)‖²_{L²} = ‖∇f‖²_{L²(m)} − (f², mΔm)` with one gradient stencil on
/// both sides.
pub fn identity_l32(f: &GridField, w: &WeightSpec) -> Result<IdentityResidual> {
    check_margin(f, 2, "f")?;
    let g = &f.grid;
    let log_m = g.log_weight(w);
    let m: Vec<f64> = log_m.iter().map(|l| l.exp()).collect();
    if m.iter().zip(&f.values).any(|(m, a)| *a != 0.0 && !(m * m).is_finite()) {
        return Err(KfpError::Range("weight overflows on the support of f".into()));
    }
    let fm: Vec<f64> = f.values.iter().zip(&m).map(|(a, b)| a * b).collect();
    let (gx, gv) = (diff_x(g, &fm), diff_v(g, &fm));
    let lhs = integral(g, gx.iter().zip(&gv).map(|(a, b)| a * a + b * b));
    let gr = centered_gradients(f);
    let grad_term = integral(
        g,
        gr.dx.iter().zip(&gr.dv).zip(&m).map(|((a, b), m)| (a * a + b * b) * m * m),
    );
    let mut lap_term = 0.0;
    for i in 0..g.nx {
        for j in 0..g.nv {
            let k = g.index(i, j);
            let fv = f.values[k];
            if fv != 0.0 {
                let e = eval_weight_unchecked(w, &[g.x(i)], &[g.v(j)]);
                lap_term += fv * fv * m[k] * m[k] * e.lap_xv;
            }
        }
    }
    lap_term *= g.cell_volume();
    let rhs = grad_term - lap_term;
    Ok(IdentityResidual::new(lhs, rhs, lhs.abs() + grad_term.abs() + lap_term.abs()))
}

/// Empirical Nash envelope `C_n`: 1.5 × the Gaussian ratio (`1/√(2π)` for
/// `n = 1`, `1/(2√π)` for `n = 2`).
pub fn nash_envelope(n_dim: usize) -> f64 {
    match n_dim {
        1 => 1.5 / (2.0 * std::f64::consts::PI).sqrt(),
        _ => 1.5 / (2.0 * std::f64::consts::PI.sqrt()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NashRatio {
    pub lhs: f64,
    pub rhs_over_cd: f64,
    pub ratio: f64,
}

fn nash_parts(n: f64, l1: f64, l2sq: f64, grad_sq: f64) -> NashRatio {
    let lhs = l2sq.sqrt().powf(1.0 + 2.0 / n);
    let rhs = l1.powf(2.0 / n) * grad_sq.sqrt();
    NashRatio {
        lhs,
        rhs_over_cd: rhs,
        ratio: lhs / rhs,
    }
}

/// `‖f‖₂^{1+2/n}` against `‖f‖₁^{2/n}‖∇f‖₂`. `n = 2` uses the full
/// phase-space gradient; `n = 1` treats every x-row as a function of `v`
/// and returns the row with the largest ratio.
pub fn nash_check(f: &GridField, n_dim: usize) -> Result<NashRatio> {
    let g = &f.grid;
    match n_dim {
        2 => {
            let l1 = integral(g, f.values.iter().map(|a| a.abs()));
            if l1 == 0.0 {
                return Err(KfpError::Contract("Nash ratio is undefined for f ≡ 0".into()));
            }
            let l2sq = integral(g, f.values.iter().map(|a| a * a));
            let gr = centered_gradients(f);
            let gsq = integral(g, gr.dx.iter().zip(&gr.dv).map(|(a, b)| a * a + b * b));
            Ok(nash_parts(2.0, l1, l2sq, gsq))
        }
        1 => {
            let dv = diff_v(g, &f.values);
            let mut best: Option<NashRatio> = None;
            for i in 0..g.nx {
                let row = &f.values[i * g.nv..(i + 1) * g.nv];
                let l1: f64 = row.iter().map(|a| a.abs()).sum::<f64>() * g.hv;
                if l1 == 0.0 {
                    continue;
                }
                let l2sq: f64 = row.iter().map(|a| a * a).sum::<f64>() * g.hv;
                let gsq: f64 = dv[i * g.nv..(i + 1) * g.nv].iter().map(|a| a * a).sum::<f64>() * g.hv;
                let r = nash_parts(1.0, l1, l2sq, gsq);
                if best.map_or(true, |b| r.ratio > b.ratio) {
                    best = Some(r);
                }
            }
            best.ok_or_else(|| KfpError::Contract("Nash ratio is undefined for f ≡ 0".into()))
        }
        n => Err(KfpError::Contract(format!("Nash check supports n ∈ {{1, 2}}, got {n}"))),
    }
}

/// `‖f‖_{H^k(m)}` with centered derivatives up to order `k ≤ 2`, each weighted
/// by `m`.
pub fn sobolev_norm(f: &GridField, k: usize, w: &WeightSpec) -> Result<f64> {
    if k > 2 {
        return Err(KfpError::Unsupported(format!("H^{k} norms are limited to k ≤ 2")));
    }
    let g = &f.grid;
    let m2 = weight_power(g, w, 2.0, &f.values)?;
    let sq = |d: &[f64]| integral(g, d.iter().zip(&m2).map(|(a, m)| a * a * m));
    let mut total = sq(&f.values);
    if k >= 1 {
        let dx = diff_x(g, &f.values);
        let dv = diff_v(g, &f.values);
        total += sq(&dx) + sq(&dv);
        if k == 2 {
            let dxx = diff_x(g, &dx);
            let dvv = diff_v(g, &dv);
            let dxv = diff_v(g, &dx);
            total += sq(&dxx) + 2.0 * sq(&dxv) + sq(&dvv);
        }
    }
    Ok(total.sqrt())
}

/// Exponent `(5d + 2)/4` of the short-time `L¹(m) → L²(m)` bound.
pub fn regularization_exponent_l2(d: usize) -> f64 {
    (5.0 * d as f64 + 2.0) / 4.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularizationProbe {
    pub exponent: f64,
    /// `(t, t^{(5d+2)/4}‖f_t‖_{L²(m)} / ‖f₀‖_{L¹(m)})`.
    pub sequence: Vec<(f64, f64)>,
    /// Log-log slope over the last half of the ladder.
    pub tail_slope: f64,
    pub max_value: f64,
    pub bounded: bool,
}

/// Evolves a 3×3-cell bump at the grid center, normalized in `L¹(m)`, and
/// records the compensated `L²(m)` norm on the ladder.
pub fn regularization_probe(
    g: &GeneralKfp,
    w: &WeightSpec,
    op: &DiscreteOperator,
    t_ladder: &[f64],
) -> Result<RegularizationProbe> {
    if g.dim() != 1 {
        return Err(KfpError::Unsupported("the probe runs in d = 1".into()));
    }
    if t_ladder.len() < 2 || t_ladder.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(KfpError::Contract("ladder needs ≥ 2 positive times".into()));
    }
    let grid = op.grid;
    let (ci, cj) = (grid.nx / 2, grid.nv / 2);
    let mut vals = vec![0.0; grid.len()];
    for i in ci - 1..=ci + 1 {
        for j in cj - 1..=cj + 1 {
            vals[grid.index(i, j)] = 1.0;
        }
    }
    let mut f0 = GridField::new(grid, vals, 0.0)?;
    let l1m = crate::solver::weighted_norm(&f0, w, 1.0)?;
    f0.values.iter_mut().for_each(|a| *a /= l1m);
    let mut ladder = t_ladder.to_vec();
    ladder.sort_by(f64::total_cmp);
    let t_end = *ladder.last().unwrap();
    let mut obs = [Observer::weighted_norm(&grid, w, 2.0, "l2m")];
    let opts = EvolveOptions {
        ladder: ladder.clone(),
        ..Default::default()
    };
    let (_, log) = evolve(&f0, op, t_end, &mut obs, &opts)?;
    let exponent = regularization_exponent_l2(1);
    let sequence: Vec<(f64, f64)> = log
        .series("l2m")
        .into_iter()
        .map(|(t, n)| (t, t.powf(exponent) * n))
        .collect();
    let tail = &sequence[sequence.len() / 2..];
    let (tail_slope, _, _) = crate::solver::linear_fit(tail.iter().map(|(t, s)| (t.ln(), s.ln())));
    let max_value = sequence.iter().fold(0.0f64, |m, s| m.max(s.1));
    Ok(RegularizationProbe {
        exponent,
        tail_slope,
        max_value,
        bounded: max_value.is_finite() && tail_slope <= 0.0,
        sequence,
    })
}

/// Residuals of the weighted integral identities for `L` (centered fluxes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityPair {
    /// `∫(f Lg + g Lf) m² = −2K∫∇_v f·∇_v g m² + 2∫fg φ₂ m²`.
    pub b1: IdentityResidual,
    /// `∫sign f |f|^{p−1} Lf m^p = −(p−1)K∫|∇_v(mf)|²|f|^{p−2}m^{p−2} + ∫|f|^p φ_p m^p`.
    pub b2: IdentityResidual,
}

pub fn identity_b1_b2(
    g: &GeneralKfp,
    w: &WeightSpec,
    op: &DiscreteOperator,
    f: &GridField,
    gfun: &GridField,
    p: f64,
) -> Result<IdentityPair> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(KfpError::Contract(format!("p = {p} must be a finite real ≥ 1")));
    }
    if f.grid != op.grid || gfun.grid != op.grid {
        return Err(KfpError::Contract("fields and operator live on different grids".into()));
    }
    check_margin(f, 2, "f")?;
    check_margin(gfun, 2, "g")?;
    let grid = &op.grid;
    let k = op.k;
    let log_m = grid.log_weight(w);
    let (lf, lg) = (apply_l4(g, op, &f.values), apply_l4(g, op, &gfun.values));
    let (fv, gv) = (diff_v4(grid, &f.values), diff_v4(grid, &gfun.values));
    let m: Vec<f64> = log_m.iter().map(|l| l.exp()).collect();
    let mf: Vec<f64> = f.values.iter().zip(&m).map(|(a, b)| a * b).collect();
    let mfv = diff_v4(grid, &mf);

    let (mut l1, mut r1a, mut r1b) = (0.0, 0.0, 0.0);
    let (mut l2, mut r2a, mut r2b) = (0.0, 0.0, 0.0);
    // integrals of the absolute right-hand integrands; with |lhs| the residual scale
    let (mut s1, mut s2) = (0.0, 0.0);
    for i in 0..grid.nx {
        for j in 0..grid.nv {
            let c = grid.index(i, j);
            let (a, b) = (f.values[c], gfun.values[c]);
            let m2 = (2.0 * log_m[c]).exp();
            let (x, v) = ([grid.x(i)], [grid.v(j)]);
            if a != 0.0 || b != 0.0 || lf[c] != 0.0 || lg[c] != 0.0 {
                if !m2.is_finite() {
                    return Err(KfpError::Range(format!("weight overflows at cell {c}")));
                }
                let lt = (a * lg[c] + b * lf[c]) * m2;
                let ga = -2.0 * k * fv[c] * gv[c] * m2;
                let za = if a * b != 0.0 { 2.0 * a * b * phi2(g, w, &x, &v)? * m2 } else { 0.0 };
                l1 += lt;
                r1a += ga;
                r1b += za;
                s1 += ga.abs() + za.abs();
            }
            if a != 0.0 || lf[c] != 0.0 {
                let mp = (p * log_m[c]).exp();
                let sgn = a.signum() * a.abs().powf(p - 1.0);
                if a != 0.0 {
                    let lt = sgn * lf[c] * mp;
                    let ga = if p != 1.0 {
                        let mpm2 = ((p - 2.0) * log_m[c]).exp();
                        -(p - 1.0) * k * mfv[c] * mfv[c] * a.abs().powf(p - 2.0) * mpm2
                    } else {
                        0.0
                    };
                    let za = a.abs().powf(p) * phi_p(g, w, p, &x, &v)? * mp;
                    l2 += lt;
                    r2a += ga;
                    r2b += za;
                    s2 += ga.abs() + za.abs();
                }
            }
        }
    }
    let vol = grid.cell_volume();
    Ok(IdentityPair {
        b1: IdentityResidual::new(l1 * vol, (r1a + r1b) * vol, s1 * vol + (l1 * vol).abs()),
        b2: IdentityResidual::new(l2 * vol, (r2a + r2b) * vol, s2 * vol + (l2 * vol).abs()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    pub lambda: f64,
    pub ok: bool,
    /// Largest `‖f_t‖ − e^{λ(t−s)}‖f_s‖` relative to `‖f_s‖`.
    pub worst_excess: f64,
    pub witness: Option<(f64, f64)>,
    pub pairs: usize,
}

/// `‖f_t‖_{L¹(m)} ≤ e^{λ(t−s)}‖f_s‖_{L¹(m)}` for every sampled `s < t`, with
/// relative slack `slack`.
pub fn growth_check(series: &[(f64, f64)], lambda: f64, slack: f64) -> Result<GrowthReport> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(KfpError::Contract(format!("growth rate {lambda} must be finite and ≥ 0")));
    }
    let mut worst = f64::NEG_INFINITY;
    let mut witness = None;
    let mut pairs = 0;
    for (a, &(s, ns)) in series.iter().enumerate() {
        for &(t, nt) in &series[a + 1..] {
            if t <= s {
                continue;
            }
            pairs += 1;
            let excess = (nt - (lambda * (t - s)).exp() * ns) / ns.abs().max(f64::MIN_POSITIVE);
            if excess > worst {
                worst = excess;
                witness = Some((s, t));
            }
        }
    }
    Ok(GrowthReport {
        lambda,
        ok: pairs == 0 || worst <= slack,
        worst_excess: if pairs == 0 { 0.0 } else { worst },
        witness,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{to_general_form, ModelSpec};
    use crate::solver::{build_grid, discretize};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn gaussian(n: usize, l: f64) -> GridField {
        let g = build_grid(l, l, n, n).unwrap();
        GridField::from_fn(g, |x, v| (-(x * x + v * v) / 2.0).exp()).unwrap()
    }

    #[test]
    fn hypo_coeffs_validation() {
        assert!(HypoCoeffs::new(100.0, 1.0, 1.0, 1.5, 1.0).is_err());
        assert!(HypoCoeffs::new(1000.0, 36.0, 1.0, 6.0, 1.0).is_err());
        assert!(HypoCoeffs::new(1000.0, 36.0, 1.0, 6.0 + 1e-9, 1.0).is_err());
        assert!(HypoCoeffs::new(5000.0, 49.0, 1.0, 6.5, 1.0).is_ok());
        assert!(HypoCoeffs::new(4000.0, 49.0, 1.0, 6.5, 1.0).is_err());
    }

    #[test]
    fn functional_at_time_zero_and_zero_field() {
        let co = HypoCoeffs::new(5000.0, 49.0, 1.0, 6.5, 1.0).unwrap();
        let f = gaussian(64, 6.0);
        let gr = centered_gradients(&f);
        let w = WeightSpec::Unit;
        let l2 = f.values.iter().map(|a| a * a).sum::<f64>() * f.grid.cell_volume();
        let a = functional_f(&f, &gr, 0.0, &co, &w, false).unwrap();
        let b = functional_f(&f, &gr, 0.0, &co, &w, true).unwrap();
        assert_relative_eq!(a, 5000.0 * l2, max_relative = 1e-14);
        assert_eq!(a, b);
        let z = GridField::zeros(f.grid);
        assert_eq!(functional_f(&z, &centered_gradients(&z), 0.5, &co, &w, false).unwrap(), 0.0);
        assert!(functional_f(&f, &gr, 1.5, &co, &w, false).is_err());
    }

    #[test]
    fn nash_gaussian_ratio() {
        let f = gaussian(128, 8.0);
        let r = nash_check(&f, 2).unwrap();
        assert_relative_eq!(r.lhs, PI, max_relative = 1e-3);
        assert_relative_eq!(r.ratio, 1.0 / (2.0 * PI.sqrt()), max_relative = 1e-2);
        let r1 = nash_check(&f, 1).unwrap();
        assert_relative_eq!(r1.ratio, 1.0 / (2.0 * PI).sqrt(), max_relative = 1e-2);
        assert!(nash_check(&GridField::zeros(f.grid), 2).is_err());
    }

    #[test]
    fn sobolev_orders() {
        let f = gaussian(128, 8.0);
        let w = WeightSpec::Unit;
        let h0 = sobolev_norm(&f, 0, &w).unwrap();
        let l2 = crate::solver::weighted_norm(&f, &w, 2.0).unwrap();
        assert_relative_eq!(h0, l2, max_relative = 1e-13);
        // ‖f‖² = π, ‖∇f‖² = π
        assert_relative_eq!(sobolev_norm(&f, 1, &w).unwrap(), (2.0 * PI).sqrt(), max_relative = 1e-2);
        assert!(sobolev_norm(&f, 3, &w).is_err());
        let c = GridField::from_fn(f.grid, |_, _| 2.0).unwrap();
        let n0 = sobolev_norm(&c, 0, &w).unwrap();
        assert_relative_eq!(sobolev_norm(&c, 1, &w).unwrap(), n0, max_relative = 1e-14);
    }

    #[test]
    fn l32_trivial_cases() {
        let f = gaussian(64, 8.0);
        let r = identity_l32(&f, &WeightSpec::Unit).unwrap();
        assert!(r.relative <= 1e-13);
        let z = GridField::zeros(f.grid);
        assert_eq!(identity_l32(&z, &WeightSpec::Unit).unwrap().relative, 0.0);
        let wide = gaussian(64, 2.0);
        assert!(matches!(identity_l32(&wide, &WeightSpec::Unit), Err(KfpError::Contract(_))));
    }

    #[test]
    fn identities_vanish_for_zero_field() {
        let g = to_general_form(&ModelSpec::kfp(2.0, 2.0, 1).unwrap()).unwrap();
        let grid = build_grid(6.0, 6.0, 32, 32).unwrap();
        let op = discretize(&g, &grid, None).unwrap();
        let z = GridField::zeros(grid);
        let w = WeightSpec::kfp(0.05, 0.1, 2.0).unwrap();
        let r = identity_b1_b2(&g, &w, &op, &z, &z, 2.0).unwrap();
        assert_eq!(r.b1.relative, 0.0);
        assert_eq!(r.b2.relative, 0.0);
    }

    #[test]
    fn growth_check_examples() {
        let s = [(0.0, 1.0), (1.0, 2.0), (2.0, 4.0)];
        assert!(growth_check(&s, 2f64.ln(), 1e-12).unwrap().ok);
        assert!(!growth_check(&s, 0.5, 1e-8).unwrap().ok);
    }
}
