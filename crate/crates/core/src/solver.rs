//! Conservative finite-volume discretization of the canonical equation on a
//! truncated phase-space box `[−Lx, Lx] × [−Lv, Lv]` (d = 1).
//!
//! Cells are stored row-major with index `i * nv + j` (`i` along x). The
//! update is forward Euler in flux form with zero numerical flux on the
//! boundary, so the total mass telescopes exactly up to rounding.

use serde::Serialize;

use crate::error::{KfpError, Result};
use crate::model::GeneralKfp;
use crate::weights::{log_weight, WeightSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid {
    pub lx: f64,
    pub lv: f64,
    pub nx: usize,
    pub nv: usize,
    pub hx: f64,
    pub hv: f64,
}

pub fn build_grid(lx: f64, lv: f64, nx: usize, nv: usize) -> Result<Grid> {
    if !(lx.is_finite() && lv.is_finite() && lx > 0.0 && lv > 0.0) {
        return Err(KfpError::Contract(format!(
            "grid extents must be positive, got Lx = {lx}, Lv = {lv}"
        )));
    }
    if nx < 8 || nv < 8 {
        return Err(KfpError::Contract(format!(
            "grid needs at least 8 cells per axis, got {nx} × {nv}"
        )));
    }
    Ok(Grid {
        lx,
        lv,
        nx,
        nv,
        hx: 2.0 * lx / nx as f64,
        hv: 2.0 * lv / nv as f64,
    })
}

impl Grid {
    pub fn len(&self) -> usize {
        self.nx * self.nv
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.hx * self.hv
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.lx + (i as f64 + 0.5) * self.hx
    }

    pub fn v(&self, j: usize) -> f64 {
        -self.lv + (j as f64 + 0.5) * self.hv
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.nv + j
    }

    /// Cell containing `(x, v)`, if inside the box.
    pub fn locate(&self, x: f64, v: f64) -> Option<(usize, usize)> {
        let i = ((x + self.lx) / self.hx).floor();
        let j = ((v + self.lv) / self.hv).floor();
        if i < 0.0 || j < 0.0 || i >= self.nx as f64 || j >= self.nv as f64 {
            None
        } else {
            Some((i as usize, j as usize))
        }
    }

    /// `log m` at every cell center.
    pub fn log_weight(&self, w: &WeightSpec) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.nx {
            for j in 0..self.nv {
                out.push(log_weight(w, &[self.x(i)], &[self.v(j)]));
            }
        }
        out
    }
}

/// Cell averages of a density on a [`Grid`] at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub t: f64,
    /// Set when the field is known to be nonnegative; the stepper then
    /// enforces the positivity time-step bound.
    pub nonnegative: bool,
}

impl GridField {
    pub fn new(grid: Grid, values: Vec<f64>, t: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(KfpError::Contract(format!(
                "field has {} values for a {} × {} grid",
                values.len(),
                grid.nx,
                grid.nv
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KfpError::Domain("field contains a non-finite value".into()));
        }
        if !(t.is_finite() && t >= 0.0) {
            return Err(KfpError::Contract(format!("field time {t} must be ≥ 0")));
        }
        let nonnegative = values.iter().all(|&v| v >= 0.0);
        Ok(Self {
            grid,
            values,
            t,
            nonnegative,
        })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
            t: 0.0,
            nonnegative: true,
        }
    }

    /// Samples `f(x, v)` at the cell centers.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.nx {
            for j in 0..grid.nv {
                values.push(f(grid.x(i), grid.v(j)));
            }
        }
        Self::new(grid, values, 0.0)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn l1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_volume()
    }

    /// Scales to unit mass.
    pub fn normalized(mut self) -> Result<Self> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(KfpError::Contract("cannot normalize a field with nonpositive mass".into()));
        }
        for v in &mut self.values {
            *v /= m;
        }
        Ok(self)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Reconstruction used for the transport fluxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    /// First-order upwind.
    Upwind,
    /// Second-order MUSCL with minmod-limited slopes.
    Minmod,
}

/// Absorbing sink `M χ_R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sink {
    pub m: f64,
    pub r: f64,
}

/// Smooth cutoff: 1 for `x² + v² ≤ R²`, 0 for `≥ 2R²`, quintic in between.
pub fn cutoff(r: f64, x: f64, v: f64) -> f64 {
    let s = ((x * x + v * v) - r * r) / (r * r);
    if s <= 0.0 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }
}

/// Face coefficients of the discrete operator.
///
/// `ux` holds the x-transport velocity `v − Φ(x)` at the `nx − 1` interior
/// x-faces (row `i` is the face between cells `i` and `i + 1`), `wv` the
/// v-transport velocity `−B(x, v)` at the `nv − 1` interior v-faces of every
/// column.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteOperator {
    pub grid: Grid,
    pub ux: Vec<f64>,
    pub wv: Vec<f64>,
    pub k: f64,
    pub sink: Option<Vec<f64>>,
    pub sink_params: Option<Sink>,
    pub scheme: Scheme,
}

pub fn discretize(g: &GeneralKfp, grid: &Grid, sink: Option<Sink>) -> Result<DiscreteOperator> {
    if g.dim() != 1 {
        return Err(KfpError::Unsupported("the grid solver is one-dimensional".into()));
    }
    let (nx, nv) = (grid.nx, grid.nv);
    let mut ux = Vec::with_capacity((nx - 1) * nv);
    for i in 0..nx - 1 {
        let xf = grid.x(i) + 0.5 * grid.hx;
        let phi = g.phi1(xf);
        for j in 0..nv {
            ux.push(grid.v(j) - phi);
        }
    }
    let mut wv = Vec::with_capacity(nx * (nv - 1));
    for i in 0..nx {
        let x = grid.x(i);
        for j in 0..nv - 1 {
            let vf = grid.v(j) + 0.5 * grid.hv;
            wv.push(-g.drift_v1(x, vf));
        }
    }
    if ux.iter().chain(&wv).any(|c| !c.is_finite()) {
        return Err(KfpError::Domain("transport coefficients are not finite on the grid".into()));
    }
    let sink_field = match sink {
        None => None,
        Some(s) => {
            if !(s.m.is_finite() && s.m >= 0.0 && s.r.is_finite() && s.r > 0.0) {
                return Err(KfpError::Contract("sink needs M ≥ 0 and R > 0".into()));
            }
            let mut out = Vec::with_capacity(grid.len());
            for i in 0..nx {
                for j in 0..nv {
                    out.push(s.m * cutoff(s.r, grid.x(i), grid.v(j)));
                }
            }
            Some(out)
        }
    };
    Ok(DiscreteOperator {
        grid: *grid,
        ux,
        wv,
        k: g.diffusion(),
        sink: sink_field,
        sink_params: sink,
        scheme: Scheme::Upwind,
    })
}

#[inline]
fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Binding time-step constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CflBound {
    pub x_transport: f64,
    pub v_transport: f64,
    pub diffusion: f64,
    /// `1 / max_cell(outflow rate)`: the positivity-preserving step.
    pub positivity: f64,
}

impl CflBound {
    /// `0.9 · min` of the three transport/diffusion limits.
    pub fn cfl(&self) -> (f64, &'static str) {
        let mut best = (0.9 * self.x_transport, "x-transport");
        if 0.9 * self.v_transport < best.0 {
            best = (0.9 * self.v_transport, "v-transport");
        }
        if 0.9 * self.diffusion < best.0 {
            best = (0.9 * self.diffusion, "diffusion");
        }
        best
    }
}

impl DiscreteOperator {
    /// Operator with no transport, diffusion or sink.
    pub fn zero(grid: &Grid) -> Self {
        Self {
            grid: *grid,
            ux: vec![0.0; (grid.nx - 1) * grid.nv],
            wv: vec![0.0; grid.nx * (grid.nv - 1)],
            k: 0.0,
            sink: None,
            sink_params: None,
            scheme: Scheme::Upwind,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn has_sink(&self) -> bool {
        self.sink.is_some()
    }

    pub fn cfl_bound(&self) -> CflBound {
        let g = &self.grid;
        let (nx, nv) = (g.nx, g.nv);
        let umax = self.ux.iter().fold(0.0f64, |m, u| m.max(u.abs()));
        let wmax = self.wv.iter().fold(0.0f64, |m, u| m.max(u.abs()));
        let lim = |h: f64, c: f64| if c > 0.0 { h / c } else { f64::INFINITY };
        let diff = if self.k > 0.0 {
            g.hv * g.hv / (2.0 * self.k)
        } else {
            f64::INFINITY
        };
        let factor = match self.scheme {
            Scheme::Upwind => 1.0,
            Scheme::Minmod => 2.0,
        };
        let mut rate_max = 0.0f64;
        for i in 0..nx {
            for j in 0..nv {
                let ur = if i + 1 < nx { self.ux[i * nv + j].max(0.0) } else { 0.0 };
                let ul = if i > 0 { (-self.ux[(i - 1) * nv + j]).max(0.0) } else { 0.0 };
                let wt = if j + 1 < nv { self.wv[i * (nv - 1) + j].max(0.0) } else { 0.0 };
                let wb = if j > 0 { (-self.wv[i * (nv - 1) + j - 1]).max(0.0) } else { 0.0 };
                let (tx, tv) = match self.scheme {
                    Scheme::Upwind => (ur + ul, wt + wb),
                    Scheme::Minmod => (factor * ur.max(ul), factor * wt.max(wb)),
                };
                let s = self.sink.as_ref().map_or(0.0, |s| s[i * nv + j]);
                let rate = tx / g.hx + tv / g.hv + 2.0 * self.k / (g.hv * g.hv) + s;
                rate_max = rate_max.max(rate);
            }
        }
        CflBound {
            x_transport: lim(g.hx, umax),
            v_transport: lim(g.hv, wmax),
            diffusion: diff,
            positivity: if rate_max > 0.0 { 1.0 / rate_max } else { f64::INFINITY },
        }
    }

    /// Largest step satisfying both the CFL and the positivity bound, times
    /// `safety`.
    pub fn auto_dt(&self, safety: f64) -> f64 {
        let b = self.cfl_bound();
        (safety * b.positivity).min(b.cfl().0)
    }

    /// Right-hand side `L_h f` (upwind/MUSCL transport, centered diffusion,
    /// sink).
    pub fn apply(&self, f: &[f64], out: &mut [f64]) {
        self.apply_with(f, out, self.scheme, true)
    }

    /// `L_h f` with centered (second-order) transport fluxes: the face flux is
    /// the mean of `u f` over the two cells, with cell velocities averaged
    /// from the faces. Not positivity preserving.
    pub fn apply_centered(&self, f: &[f64], out: &mut [f64]) {
        self.apply_with(f, out, Scheme::Upwind, false)
    }

    fn apply_with(&self, f: &[f64], out: &mut [f64], scheme: Scheme, upwind: bool) {
        let g = &self.grid;
        let (nx, nv) = (g.nx, g.nv);
        assert_eq!(f.len(), nx * nv);
        assert_eq!(out.len(), nx * nv);
        out.iter_mut().for_each(|o| *o = 0.0);
        let (ihx, ihv) = (1.0 / g.hx, 1.0 / g.hv);
        let second = scheme == Scheme::Minmod && upwind;

        // x faces
        for i in 0..nx - 1 {
            for j in 0..nv {
                let u = self.ux[i * nv + j];
                let a = f[i * nv + j];
                let b = f[(i + 1) * nv + j];
                let flux = if !upwind {
                    let ua = if i > 0 { 0.5 * (u + self.ux[(i - 1) * nv + j]) } else { u };
                    let ub = if i + 2 < nx { 0.5 * (u + self.ux[(i + 1) * nv + j]) } else { u };
                    0.5 * (ua * a + ub * b)
                } else if second {
                    if u > 0.0 {
                        let slope = if i > 0 { minmod(a - f[(i - 1) * nv + j], b - a) } else { 0.0 };
                        u * (a + 0.5 * slope)
                    } else {
                        let slope = if i + 2 < nx { minmod(b - a, f[(i + 2) * nv + j] - b) } else { 0.0 };
                        u * (b - 0.5 * slope)
                    }
                } else if u > 0.0 {
                    u * a
                } else {
                    u * b
                };
                out[i * nv + j] -= flux * ihx;
                out[(i + 1) * nv + j] += flux * ihx;
            }
        }

        // v faces
        let kd = self.k * ihv;
        for i in 0..nx {
            let row = &f[i * nv..(i + 1) * nv];
            let wrow = &self.wv[i * (nv - 1)..(i + 1) * (nv - 1)];
            let orow = &mut out[i * nv..(i + 1) * nv];
            for j in 0..nv - 1 {
                let w = wrow[j];
                let a = row[j];
                let b = row[j + 1];
                let adv = if !upwind {
                    let wa = if j > 0 { 0.5 * (w + wrow[j - 1]) } else { w };
                    let wb = if j + 2 < nv { 0.5 * (w + wrow[j + 1]) } else { w };
                    0.5 * (wa * a + wb * b)
                } else if second {
                    if w > 0.0 {
                        let slope = if j > 0 { minmod(a - row[j - 1], b - a) } else { 0.0 };
                        w * (a + 0.5 * slope)
                    } else {
                        let slope = if j + 2 < nv { minmod(b - a, row[j + 2] - b) } else { 0.0 };
                        w * (b - 0.5 * slope)
                    }
                } else if w > 0.0 {
                    w * a
                } else {
                    w * b
                };
                let flux = adv - kd * (b - a);
                orow[j] -= flux * ihv;
                orow[j + 1] += flux * ihv;
            }
        }

        if let Some(s) = &self.sink {
            for (o, (si, fi)) in out.iter_mut().zip(s.iter().zip(f)) {
                *o -= si * fi;
            }
        }
    }

    fn check_dt(&self, dt: f64, nonnegative: bool) -> Result<()> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(KfpError::Contract(format!("time step {dt} must be positive")));
        }
        let b = self.cfl_bound();
        let (bound, constraint) = b.cfl();
        if dt > bound * (1.0 + 1e-12) {
            return Err(KfpError::Cfl {
                dt,
                bound,
                constraint,
            });
        }
        if nonnegative && dt > b.positivity * (1.0 + 1e-12) {
            return Err(KfpError::Cfl {
                dt,
                bound: b.positivity,
                constraint: "positivity",
            });
        }
        Ok(())
    }
}

/// One forward-Euler step.
pub fn step(f: &GridField, op: &DiscreteOperator, dt: f64) -> Result<GridField> {
    if f.grid != op.grid {
        return Err(KfpError::Contract("field and operator live on different grids".into()));
    }
    op.check_dt(dt, f.nonnegative)?;
    let mut rhs = vec![0.0; f.values.len()];
    let mut out = f.clone();
    raw_step(&mut out, op, dt, &mut rhs)?;
    Ok(out)
}

fn raw_step(f: &mut GridField, op: &DiscreteOperator, dt: f64, rhs: &mut [f64]) -> Result<()> {
    op.apply(&f.values, rhs);
    for (v, r) in f.values.iter_mut().zip(rhs.iter()) {
        *v += dt * r;
    }
    f.t += dt;
    if f.nonnegative {
        if let Some(pos) = f.values.iter().position(|&v| v < 0.0) {
            return Err(KfpError::Internal(format!(
                "negative cell {pos} ({:e}) after a positivity-bounded step",
                f.values[pos]
            )));
        }
    }
    Ok(())
}

/// How `evolve` chooses the time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DtMode {
    /// `safety ·` positivity bound (capped by the CFL bound), shortened to
    /// land on ladder times.
    Auto { safety: f64 },
    /// Constant step; ladder times are rounded to the nearest step.
    Fixed(f64),
}

impl Default for DtMode {
    fn default() -> Self {
        DtMode::Auto { safety: 0.9 }
    }
}

/// A quantity recorded at the ladder times.
pub enum Observer<'a> {
    Mass,
    /// `‖f m‖_{L^p}` with `log m` precomputed on the grid.
    WeightedNorm {
        name: String,
        log_m: Vec<f64>,
        p: f64,
    },
    /// `‖(f − M(f) G) m‖_{L¹}` for a unit-mass reference `G`.
    DistanceToSteady {
        name: String,
        reference: Vec<f64>,
        log_m: Vec<f64>,
    },
    Custom {
        name: String,
        f: Box<dyn FnMut(&GridField) -> f64 + 'a>,
    },
}

impl<'a> Observer<'a> {
    pub fn weighted_norm(grid: &Grid, w: &WeightSpec, p: f64, name: impl Into<String>) -> Self {
        Observer::WeightedNorm {
            name: name.into(),
            log_m: grid.log_weight(w),
            p,
        }
    }

    pub fn distance(g: &GridField, w: &WeightSpec, name: impl Into<String>) -> Self {
        Observer::DistanceToSteady {
            name: name.into(),
            reference: g.values.clone(),
            log_m: g.grid.log_weight(w),
        }
    }

    pub fn custom(name: impl Into<String>, f: impl FnMut(&GridField) -> f64 + 'a) -> Self {
        Observer::Custom {
            name: name.into(),
            f: Box::new(f),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Observer::Mass => "mass",
            Observer::WeightedNorm { name, .. }
            | Observer::DistanceToSteady { name, .. }
            | Observer::Custom { name, .. } => name,
        }
    }

    fn observe(&mut self, f: &GridField) -> f64 {
        let vol = f.grid.cell_volume();
        match self {
            Observer::Mass => f.mass(),
            Observer::WeightedNorm { log_m, p, .. } => norm_with_log_weight(&f.values, log_m, *p, vol),
            Observer::DistanceToSteady {
                reference, log_m, ..
            } => {
                let mass = f.mass();
                f.values
                    .iter()
                    .zip(reference.iter())
                    .zip(log_m.iter())
                    .map(|((a, g), l)| (a - mass * g).abs() * l.exp())
                    .sum::<f64>()
                    * vol
            }
            Observer::Custom { f: cb, .. } => cb(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub t: f64,
    pub observable: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ObservationLog {
    pub entries: Vec<Observation>,
}

impl ObservationLog {
    /// `(t, value)` pairs of one observable, in time order.
    pub fn series(&self, name: &str) -> Vec<(f64, f64)> {
        self.entries
            .iter()
            .filter(|e| e.observable == name)
            .map(|e| (e.t, e.value))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvolveOptions {
    pub dt: DtMode,
    /// Observation times; only those in `(f0.t, t_end]` are used.
    pub ladder: Vec<f64>,
    pub max_steps: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            dt: DtMode::default(),
            ladder: Vec::new(),
            max_steps: 50_000_000,
        }
    }
}

/// `n` equally spaced times in `(t0, t1]`.
pub fn uniform_ladder(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| t0 + (t1 - t0) * k as f64 / n as f64).collect()
}

/// Advances `f0` to `t_end`, recording every observer at each ladder time.
pub fn evolve(
    f0: &GridField,
    op: &DiscreteOperator,
    t_end: f64,
    observers: &mut [Observer<'_>],
    opts: &EvolveOptions,
) -> Result<(GridField, ObservationLog)> {
    if f0.grid != op.grid {
        return Err(KfpError::Contract("field and operator live on different grids".into()));
    }
    if !(t_end.is_finite() && t_end >= f0.t) {
        return Err(KfpError::Contract(format!(
            "t_end = {t_end} precedes the field time {}",
            f0.t
        )));
    }
    let mut ladder: Vec<f64> = opts
        .ladder
        .iter()
        .copied()
        .filter(|&t| t > f0.t && t <= t_end)
        .collect();
    ladder.sort_by(f64::total_cmp);
    ladder.dedup();

    let mut f = f0.clone();
    let mut log = ObservationLog::default();
    if t_end == f0.t {
        return Ok((f, log));
    }
    let mut rhs = vec![0.0; f.values.len()];
    let record = |f: &GridField, t: f64, observers: &mut [Observer<'_>], log: &mut ObservationLog| {
        for o in observers.iter_mut() {
            let value = o.observe(f);
            log.entries.push(Observation {
                t,
                observable: o.name().to_string(),
                value,
            });
        }
    };

    match opts.dt {
        DtMode::Fixed(dt) => {
            op.check_dt(dt, f.nonnegative)?;
            let t0 = f.t;
            let steps_to = |t: f64| ((t - t0) / dt).round().max(0.0) as usize;
            let n_total = {
                let n = (t_end - t0) / dt;
                if (n - n.round()).abs() <= 1e-9 * n.max(1.0) {
                    n.round() as usize
                } else {
                    n.ceil() as usize
                }
            };
            if n_total > opts.max_steps {
                return Err(KfpError::BudgetExceeded {
                    steps: opts.max_steps,
                    residual: f64::NAN,
                });
            }
            let marks: Vec<(usize, f64)> = ladder.iter().map(|&t| (steps_to(t).min(n_total), t)).collect();
            let mut next = 0;
            for s in 1..=n_total {
                raw_step(&mut f, op, dt, &mut rhs)?;
                f.t = t0 + s as f64 * dt;
                if s == n_total {
                    f.t = f.t.min(t_end).max(t_end);
                }
                while next < marks.len() && marks[next].0 == s {
                    record(&f, marks[next].1, observers, &mut log);
                    next += 1;
                }
            }
        }
        DtMode::Auto { safety } => {
            if !(safety > 0.0 && safety <= 1.0) {
                return Err(KfpError::Contract(format!("dt safety {safety} must be in (0, 1]")));
            }
            let dt_max = op.auto_dt(safety);
            let mut next = 0;
            let mut steps = 0usize;
            while f.t < t_end {
                let target = if next < ladder.len() { ladder[next] } else { t_end };
                let remaining = target - f.t;
                let dt = if remaining <= dt_max * (1.0 + 1e-12) {
                    remaining
                } else {
                    dt_max
                };
                if dt > 0.0 {
                    raw_step(&mut f, op, dt, &mut rhs)?;
                    steps += 1;
                }
                if dt == remaining {
                    f.t = target;
                    if next < ladder.len() {
                        record(&f, target, observers, &mut log);
                        next += 1;
                    }
                }
                if steps > opts.max_steps {
                    return Err(KfpError::BudgetExceeded {
                        steps: opts.max_steps,
                        residual: f64::NAN,
                    });
                }
            }
        }
    }
    Ok((f, log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStateOptions {
    pub max_steps: usize,
    /// Time between residual checks.
    pub check_interval: f64,
    pub dt_safety: f64,
}

impl Default for SteadyStateOptions {
    fn default() -> Self {
        Self {
            max_steps: 2_000_000,
            check_interval: 1.0,
            dt_safety: 0.9,
        }
    }
}

/// Long-time limit from the normalized Gaussian `e^{−(x²+v²)/2}`.
pub fn steady_state(op: &DiscreteOperator, grid: &Grid, tol: f64) -> Result<GridField> {
    steady_state_from(op, grid, tol, None, &SteadyStateOptions::default())
}

/// Integrates until the relative L¹ change per unit time,
/// `‖f(t+Δ) − f(t)‖₁ / (Δ ‖f(t)‖₁)`, drops below `tol`.
pub fn steady_state_from(
    op: &DiscreteOperator,
    grid: &Grid,
    tol: f64,
    initial: Option<GridField>,
    opts: &SteadyStateOptions,
) -> Result<GridField> {
    if op.grid != *grid {
        return Err(KfpError::Contract("operator and grid differ".into()));
    }
    if op.has_sink() {
        return Err(KfpError::Contract("steady states need a mass-conserving operator".into()));
    }
    if !(tol > 0.0) {
        return Err(KfpError::Contract("tolerance must be positive".into()));
    }
    let mut f = match initial {
        Some(f) => f.normalized()?,
        None => GridField::from_fn(*grid, |x, v| (-(x * x + v * v) / 2.0).exp())?.normalized()?,
    };
    f.t = 0.0;
    let dt = op.auto_dt(opts.dt_safety);
    let per_check = if dt.is_finite() {
        ((opts.check_interval / dt).ceil() as usize).max(1)
    } else {
        1
    };
    let dt = if dt.is_finite() { dt } else { opts.check_interval };
    let mut rhs = vec![0.0; f.values.len()];
    let mut steps = 0usize;
    loop {
        let before = f.values.clone();
        let t_before = f.t;
        for _ in 0..per_check {
            raw_step(&mut f, op, dt, &mut rhs)?;
        }
        steps += per_check;
        let span = f.t - t_before;
        let diff: f64 = f.values.iter().zip(&before).map(|(a, b)| (a - b).abs()).sum();
        let norm: f64 = before.iter().map(|a| a.abs()).sum();
        let residual = diff / (span * norm);
        if residual < tol {
            break;
        }
        if steps >= opts.max_steps {
            return Err(KfpError::BudgetExceeded { steps, residual });
        }
    }
    if let Some(pos) = f.values.iter().position(|&v| v <= 0.0) {
        return Err(KfpError::Internal(format!(
            "steady state has a nonpositive cell at index {pos}"
        )));
    }
    f.normalized()
}

pub(crate) fn norm_with_log_weight(values: &[f64], log_m: &[f64], p: f64, vol: f64) -> f64 {
    let mut vmax = f64::NEG_INFINITY;
    for (a, l) in values.iter().zip(log_m) {
        if *a != 0.0 {
            vmax = vmax.max(a.abs().ln() + l);
        }
    }
    if vmax == f64::NEG_INFINITY {
        return 0.0;
    }
    if p.is_infinite() {
        return vmax.exp();
    }
    // scale by the largest |f| m before raising to p
    let s: f64 = values
        .iter()
        .zip(log_m)
        .filter(|(a, _)| **a != 0.0)
        .map(|(a, l)| (p * (a.abs().ln() + l - vmax)).exp())
        .sum();
    vmax.exp() * (s * vol).powf(1.0 / p)
}

/// `‖f m‖_{L^p}` by cell quadrature; `p = ∞` gives the largest cell value.
pub fn weighted_norm(f: &GridField, w: &WeightSpec, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(KfpError::Contract(format!("norm exponent {p} must be ≥ 1")));
    }
    let log_m = f.grid.log_weight(w);
    if let Some(k) = f
        .values
        .iter()
        .zip(&log_m)
        .position(|(a, l)| *a != 0.0 && !l.exp().is_finite())
    {
        return Err(KfpError::Range(format!("weight overflows at cell {k} where f ≠ 0")));
    }
    Ok(norm_with_log_weight(&f.values, &log_m, p, f.grid.cell_volume()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub lambda: f64,
    pub c: f64,
    pub r2: f64,
    /// Number of samples in the fit window.
    pub window: usize,
}

/// Least-squares line through `(t, ln norm)` over the last half of the log.
pub fn decay_fit(log: &[(f64, f64)]) -> Result<DecayFit> {
    if log.len() < 8 {
        return Err(KfpError::Contract(format!(
            "decay fit needs at least 8 samples, got {}",
            log.len()
        )));
    }
    let window = &log[log.len() / 2..];
    if let Some((t, v)) = window.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(KfpError::Contract(format!("nonpositive norm {v} at t = {t}")));
    }
    let (slope, intercept, r2) = linear_fit(window.iter().map(|&(t, v)| (t, v.ln())));
    Ok(DecayFit {
        lambda: -slope,
        c: intercept.exp(),
        r2,
        window: window.len(),
    })
}

/// Ordinary least squares `y = slope·t + intercept`; `R² = 1` for exact or
/// constant data.
pub fn linear_fit(points: impl Iterator<Item = (f64, f64)> + Clone) -> (f64, f64, f64) {
    let n = points.clone().count() as f64;
    let (st, sy) = points.clone().fold((0.0, 0.0), |(a, b), (t, y)| (a + t, b + y));
    let (mt, my) = (st / n, sy / n);
    let (mut stt, mut sty, mut syy) = (0.0, 0.0, 0.0);
    for (t, y) in points.clone() {
        stt += (t - mt) * (t - mt);
        sty += (t - mt) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = if stt > 0.0 { sty / stt } else { 0.0 };
    let intercept = my - slope * mt;
    let ss_res: f64 = points.map(|(t, y)| (y - slope * t - intercept).powi(2)).sum();
    let r2 = if syy > 1e-300 { 1.0 - ss_res / syy } else { 1.0 };
    (slope, intercept, r2)
}
