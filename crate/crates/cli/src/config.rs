//! Experiment configuration (TOML). Unknown keys are rejected everywhere.

use std::fmt;

use kfp_core::model::{to_general_form, GeneralKfp, ModelSpec};
use kfp_core::solver::{build_grid, Grid, Scheme, Sink};
use kfp_core::weights::{ComparisonH, WeightSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    Verify,
    HarrisRate,
    Subsolution,
    Regularize,
    SteadyState,
    Report,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Verify => "verify",
            Self::HarrisRate => "harris-rate",
            Self::Subsolution => "subsolution",
            Self::Regularize => "regularize",
            Self::SteadyState => "steady-state",
            Self::Report => "report",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<WeightSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harris: Option<HarrisSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsolution: Option<SubsolutionSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSection {
    /// `W = ⟨v⟩^β/β`, `V = ⟨x⟩^γ/γ`.
    Kfp { gamma: f64, beta: f64 },
    /// Rescaled FitzHugh-Nagumo.
    Fhn { a: f64, b: f64, c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WeightSection {
    Gaussian {
        r: f64,
    },
    /// `gamma` defaults to the model's when the model is `kfp`.
    Kfp {
        lambda: f64,
        eps: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub lx: f64,
    pub lv: f64,
    pub nx: usize,
    pub nv: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    #[default]
    Upwind,
    Minmod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkSection {
    pub m: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialSection {
    /// `e^{−((x−x0)²+(v−v0)²)/width}`, normalized.
    Bump { x0: f64, v0: f64, width: f64 },
    /// Sum of `count` seeded bumps inside the central half of the box.
    Random { count: usize },
}

impl Default for InitialSection {
    fn default() -> Self {
        Self::Bump {
            x0: 1.0,
            v0: 0.0,
            width: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    /// Number of equally spaced observation times in `(0, t_end]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<usize>,
    /// Explicit observation times; overrides `observations`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Vec<f64>>,
    #[serde(default)]
    pub scheme: SchemeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_safety: Option<f64>,
    /// Steady-state stopping tolerance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub checkpoint: bool,
    #[serde(default)]
    pub timestamps: bool,
    /// Record `‖f − M(f)G‖_{L¹(m)}` (computes `G` first).
    #[serde(default)]
    pub distance: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink: Option<SinkSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PValue {
    Finite(f64),
    Named(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<PValue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_step: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarrisSection {
    pub alpha: Option<f64>,
    pub b: Option<f64>,
    pub t: Option<f64>,
    pub mu_mass: Option<f64>,
    pub m_of_r: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsolutionSection {
    pub m: Option<f64>,
    pub v: Option<f64>,
    pub r: Option<f64>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub experiments: Vec<Experiment>,
}

/// Validation problems, one entry per offending key.
#[derive(Debug, Default)]
pub struct Problems(pub Vec<String>);

impl Problems {
    pub fn push(&mut self, key: &str, msg: impl fmt::Display) {
        self.0.push(format!("{key}: {msg}"));
    }

    fn missing(&mut self, key: &str, exp: Experiment) {
        self.push(key, format!("section is required by `{exp}`"));
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub const DEFAULT_T_END: f64 = 10.0;
pub const DEFAULT_OBSERVATIONS: usize = 20;
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_SAMPLES: usize = 4096;

impl Config {
    pub fn parse(text: &str) -> Result<Self, Problems> {
        toml::from_str(text).map_err(|e| Problems(vec![format!("config: {}", e.message().trim())]))
    }

    pub fn seed(&self) -> u64 {
        self.run.seed.unwrap_or(0)
    }

    pub fn scheme(&self) -> Scheme {
        match self.run.scheme {
            SchemeName::Upwind => Scheme::Upwind,
            SchemeName::Minmod => Scheme::Minmod,
        }
    }

    pub fn sink(&self) -> Option<Sink> {
        self.run.sink.map(|s| Sink { m: s.m, r: s.r })
    }

    /// Checks the sections `exp` needs and every tolerance that is set.
    pub fn validate(&self, exp: Experiment, p: &mut Problems) {
        if let Some(e) = self.experiment {
            if e != exp {
                p.push("experiment", format!("config names `{e}` but `{exp}` was requested"));
            }
        }
        self.validate_for(exp, p);
        let r = &self.run;
        if let Some(t) = r.t_end {
            if !(t.is_finite() && t >= 0.0) {
                p.push("run.t_end", format!("{t} must be finite and nonnegative"));
            }
        }
        if r.observations == Some(0) {
            p.push("run.observations", "must be positive");
        }
        if let Some(l) = &r.ladder {
            if l.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                p.push("run.ladder", "times must be finite and positive");
            }
        }
        if let Some(s) = r.dt_safety {
            if !(s > 0.0 && s <= 1.0) {
                p.push("run.dt_safety", format!("{s} must lie in (0, 1]"));
            }
        }
        if let Some(t) = r.tolerance {
            if !(t.is_finite() && t > 0.0) {
                p.push("run.tolerance", format!("{t} must be positive"));
            }
        }
        if let Some(s) = r.sink {
            if !(s.m.is_finite() && s.m >= 0.0 && s.r.is_finite() && s.r > 0.0) {
                p.push("run.sink", "needs m ≥ 0 and r > 0");
            }
        }
        match r.initial {
            Some(InitialSection::Bump { width, .. }) if !(width.is_finite() && width > 0.0) => {
                p.push("run.initial.width", format!("{width} must be positive"));
            }
            Some(InitialSection::Random { count: 0 }) => p.push("run.initial.count", "must be positive"),
            _ => {}
        }
    }

    fn validate_for(&self, exp: Experiment, p: &mut Problems) {
        let needs_model = matches!(
            exp,
            Experiment::Simulate | Experiment::Verify | Experiment::Regularize | Experiment::SteadyState
        );
        let needs_weight = matches!(exp, Experiment::Verify | Experiment::Regularize);
        if needs_model {
            match &self.model {
                None => p.missing("model", exp),
                Some(_) => {
                    if let Err(e) = self.general_form() {
                        p.push("model", e);
                    }
                }
            }
            match &self.grid {
                None => p.missing("grid", exp),
                Some(g) => {
                    if let Err(e) = build_grid(g.lx, g.lv, g.nx, g.nv) {
                        p.push("grid", e);
                    }
                }
            }
        }
        if needs_weight && self.weight.is_none() {
            p.missing("weight", exp);
        }
        if self.weight.is_some() {
            if let Err(e) = self.weight_spec() {
                p.push("weight", e);
            }
        }
        match exp {
            Experiment::Verify => {
                if let Some(v) = &self.verify {
                    if let Err(e) = v.p_list() {
                        p.push("verify.p", e);
                    }
                    if let Some(r) = v.search_radius {
                        if !(r.is_finite() && r >= 0.0) {
                            p.push("verify.search_radius", format!("{r} must be nonnegative"));
                        }
                    }
                    if let Some(r) = v.radius_step {
                        if !(r.is_finite() && r > 0.0) {
                            p.push("verify.radius_step", format!("{r} must be positive"));
                        }
                    }
                }
            }
            Experiment::HarrisRate => {
                let h = self.harris.clone().unwrap_or_default();
                for (key, v) in [
                    ("harris.alpha", h.alpha),
                    ("harris.b", h.b),
                    ("harris.t", h.t),
                    ("harris.mu_mass", h.mu_mass),
                    ("harris.m_of_r", h.m_of_r),
                ] {
                    if v.is_none() {
                        p.push(key, "is required by `harris-rate`");
                    }
                }
            }
            Experiment::Subsolution => {
                let s = self.subsolution.clone().unwrap_or_default();
                for (key, v) in [
                    ("subsolution.m", s.m),
                    ("subsolution.v", s.v),
                    ("subsolution.r", s.r),
                    ("subsolution.tau", s.tau),
                    ("subsolution.alpha", s.alpha),
                ] {
                    if v.is_none() {
                        p.push(key, "is required by `subsolution`");
                    }
                }
                if s.samples == Some(0) {
                    p.push("subsolution.samples", "must be positive");
                }
            }
            Experiment::Report => match &self.report {
                None => p.missing("report", exp),
                Some(r) if r.experiments.is_empty() => {}
                Some(r) => {
                    for e in &r.experiments {
                        if *e == Experiment::Report {
                            p.push("report.experiments", "cannot contain `report`");
                        } else {
                            self.validate_for(*e, p);
                        }
                    }
                }
            },
            _ => {}
        }
    }

    pub fn model_spec(&self) -> kfp_core::Result<ModelSpec> {
        match self.model.as_ref().expect("validated") {
            ModelSection::Kfp { gamma, beta } => ModelSpec::kfp(*gamma, *beta, 1),
            ModelSection::Fhn { a, b, c } => ModelSpec::fhn(*a, *b, *c),
        }
    }

    pub fn general_form(&self) -> kfp_core::Result<GeneralKfp> {
        to_general_form(&self.model_spec()?)
    }

    pub fn weight_spec(&self) -> kfp_core::Result<WeightSpec> {
        match self.weight.as_ref().expect("validated") {
            WeightSection::Gaussian { r } => WeightSpec::gaussian(*r),
            WeightSection::Kfp { lambda, eps, gamma } => {
                let gamma = match (gamma, &self.model) {
                    (Some(g), _) => *g,
                    (None, Some(ModelSection::Kfp { gamma, .. })) => *gamma,
                    (None, _) => {
                        return Err(kfp_core::KfpError::Validation(
                            "gamma is required unless the model is `kfp`".into(),
                        ))
                    }
                };
                WeightSpec::kfp(*lambda, *eps, gamma)
            }
        }
    }

    pub fn comparison(&self) -> ComparisonH {
        match self.model.as_ref().expect("validated") {
            ModelSection::Kfp { gamma, beta } => ComparisonH::Kfp {
                beta: *beta,
                gamma: *gamma,
            },
            ModelSection::Fhn { .. } => ComparisonH::Fhn,
        }
    }

    pub fn grid(&self) -> Option<kfp_core::Result<Grid>> {
        self.grid.map(|g| build_grid(g.lx, g.lv, g.nx, g.nv))
    }

    pub fn ladder(&self) -> Vec<f64> {
        match &self.run.ladder {
            Some(l) => l.clone(),
            None => kfp_core::solver::uniform_ladder(
                0.0,
                self.run.t_end.unwrap_or(DEFAULT_T_END),
                self.run.observations.unwrap_or(DEFAULT_OBSERVATIONS),
            ),
        }
    }
}

impl VerifySection {
    pub fn p_list(&self) -> Result<Vec<f64>, String> {
        let Some(list) = &self.p else {
            return Ok(vec![2.0, f64::INFINITY]);
        };
        list.iter()
            .map(|p| match p {
                PValue::Finite(v) if *v >= 1.0 && v.is_finite() => Ok(*v),
                PValue::Named(s) if s == "inf" => Ok(f64::INFINITY),
                PValue::Finite(v) => Err(format!("p = {v} must be ≥ 1")),
                PValue::Named(s) => Err(format!("`{s}` is neither a number nor \"inf\"")),
            })
            .collect()
    }
}
