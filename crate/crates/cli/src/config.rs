//! Run configuration: one JSON document with `model`, `reservoir`,
//! `objective`, `numerics` and `experiment` sections. Every field has a
//! default, so `{}` describes the nominal setup.

use std::path::PathBuf;

use jumpres_core::dynamics::{ObjectiveSpec, ReservoirSpec, TargetProfile, NOMINAL_V_MAX};
use jumpres_core::jump_process::{InflowModel, TemperedStableParams};
use jumpres_core::lq_exact::DEquationVariant;
use jumpres_core::lsmc::{BasisId, LsmcNumerics, PicardConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub q_min: f64,
    pub rho: f64,
    pub alpha: f64,
    pub a: f64,
    pub b: f64,
    /// Initial inflow; `Q_min` when absent.
    pub q0: Option<f64>,
    /// Per-step jump mass is `rho a Q h` when true, `a Q h` otherwise.
    pub jump_scale_includes_rho: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { q_min: 0.5, rho: 0.295, alpha: 0.923, a: 0.0493, b: 0.007, q0: None, jump_scale_includes_rho: true }
    }
}

impl ModelConfig {
    pub fn build(&self) -> jumpres_core::Result<InflowModel> {
        let ts = TemperedStableParams::new(self.alpha, self.a, self.b)?;
        let mut model = InflowModel::new(self.q_min, self.rho, ts)?;
        model.jump_scale_includes_rho = self.jump_scale_includes_rho;
        match self.q0 {
            Some(q0) => model.with_initial(q0),
            None => Ok(model),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReservoirConfig {
    /// Capacity in scaled units (m³ / 3600).
    pub v_max: f64,
    pub q_max: f64,
    pub a_max: f64,
    pub constrained: bool,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        let spec = ReservoirSpec::default();
        Self { v_max: spec.v_max, q_max: spec.q_max, a_max: spec.a_max, constrained: spec.constrained }
    }
}

impl ReservoirConfig {
    pub fn build(&self) -> ReservoirSpec {
        if self.constrained {
            ReservoirSpec { v_max: self.v_max, q_max: self.q_max, a_max: self.a_max, constrained: true }
        } else {
            ReservoirSpec { a_max: self.a_max, ..ReservoirSpec::unconstrained(self.v_max) }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub w1: f64,
    /// `4 / v_max` when absent.
    pub w2: Option<f64>,
    pub w3: f64,
    pub w4: f64,
    pub delta: f64,
    pub q_env: f64,
    pub target: TargetProfile,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        let nominal = ObjectiveSpec::nominal(NOMINAL_V_MAX, 720.0);
        Self {
            w1: nominal.w1,
            w2: None,
            w3: nominal.w3,
            w4: nominal.w4,
            delta: nominal.delta,
            q_env: nominal.q_env,
            target: TargetProfile::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsConfig {
    pub h: f64,
    /// Step count; derived from the horizon when absent.
    pub steps: Option<usize>,
    /// Horizon in hours; `steps * h`, or 30 days, when absent.
    pub horizon: Option<f64>,
    pub paths: usize,
    pub bundles: usize,
    pub basis: BasisId,
    pub lambda: f64,
    pub epsilon: f64,
    pub relax: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Riccati reference step is `h / riccati_refinement`.
    pub riccati_refinement: usize,
    pub d_equation_variant: DEquationVariant,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        let picard = PicardConfig::default();
        Self {
            h: 1.0,
            steps: None,
            horizon: None,
            paths: 10_000,
            bundles: picard.bundle_count,
            basis: BasisId::Lq,
            lambda: picard.lambda,
            epsilon: picard.epsilon,
            relax: picard.relax_weight,
            max_iter: picard.max_iter,
            seed: 42,
            riccati_refinement: 100,
            d_equation_variant: DEquationVariant::default(),
        }
    }
}

impl NumericsConfig {
    pub const DEFAULT_HORIZON: f64 = 720.0;

    pub fn horizon(&self) -> f64 {
        match (self.horizon, self.steps) {
            (Some(t), _) => t,
            (None, Some(n)) => n as f64 * self.h,
            (None, None) => Self::DEFAULT_HORIZON,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or_else(|| (self.horizon() / self.h).round().max(1.0) as usize)
    }

    pub fn picard(&self) -> PicardConfig {
        PicardConfig {
            epsilon: self.epsilon,
            relax_weight: self.relax,
            max_iter: self.max_iter,
            lambda: self.lambda,
            bundle_count: self.bundles,
        }
    }

    pub fn lsmc(&self) -> LsmcNumerics {
        LsmcNumerics { h: self.h, steps: self.steps(), paths: self.paths, basis: self.basis, picard: self.picard() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulatePolicy {
    Zero,
    Lq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DumpFormat {
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Input CSV for `calibrate`, `moments` and `fit-rule`.
    pub series: Option<PathBuf>,
    pub initial_outflow: f64,
    /// `v_max / 2` when absent.
    pub initial_volume: Option<f64>,
    /// Step sizes of the convergence study.
    pub hs: Vec<f64>,
    /// Control weights of the convergence study.
    pub w3s: Vec<f64>,
    /// Ridge parameters of the convergence study; `numerics.lambda` when empty.
    pub lambdas: Vec<f64>,
    /// Paths are `paths_scale * h^-0.5` in the convergence study.
    pub paths_scale: f64,
    pub bins: usize,
    pub band_edges: Vec<f64>,
    /// Paths written by `solve-lq`.
    pub sample_paths: usize,
    pub policy: SimulatePolicy,
    pub dump_format: DumpFormat,
    pub max_lag: usize,
    pub min_lags: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            series: None,
            initial_outflow: 0.5,
            initial_volume: None,
            hs: vec![2.0, 1.0, 0.5],
            w3s: vec![2000.0],
            lambdas: Vec::new(),
            paths_scale: 10_000.0,
            bins: 100,
            band_edges: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            sample_paths: 20,
            policy: SimulatePolicy::Zero,
            dump_format: DumpFormat::Csv,
            max_lag: jumpres_core::calibration::DEFAULT_MAX_LAG,
            min_lags: jumpres_core::calibration::DEFAULT_MIN_LAGS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub reservoir: ReservoirConfig,
    pub objective: ObjectiveConfig,
    pub numerics: NumericsConfig,
    pub experiment: ExperimentConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn objective(&self) -> ObjectiveSpec {
        let o = &self.objective;
        ObjectiveSpec {
            w1: o.w1,
            w2: o.w2.unwrap_or(4.0 / self.reservoir.v_max),
            w3: o.w3,
            w4: o.w4,
            delta: o.delta,
            q_env: o.q_env,
            horizon: self.numerics.horizon(),
            target: o.target.clone(),
        }
    }

    pub fn initial_volume(&self) -> f64 {
        self.experiment.initial_volume.unwrap_or(0.5 * self.reservoir.v_max)
    }

    /// Fills every derived default so the document is self-contained.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.objective.w2 = Some(self.objective().w2);
        c.model.q0 = Some(self.model.q0.unwrap_or(self.model.q_min));
        c.numerics.horizon = Some(self.numerics.horizon());
        c.numerics.steps = Some(self.numerics.steps());
        c.experiment.initial_volume = Some(self.initial_volume());
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
    pub severity: Severity,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}: {}", self.field, self.message)
    }
}

/// Every violated constraint of `config`; empty when all hold.
pub fn validate_config(config: &RunConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut error =
        |field: &str, message: String| out.push(Violation { field: field.into(), message, severity: Severity::Error });
    let core = |r: jumpres_core::Result<()>| r.err().map(|e| e.to_string());

    if let Err(e) = config.model.build() {
        error("model", e.to_string());
    }
    if let Some(m) = core(config.reservoir.build().validate()) {
        error("reservoir", m);
    }
    if let Some(m) = core(config.objective().validate()) {
        error("objective", m);
    }
    let n = &config.numerics;
    if !(n.h > 0.0 && n.h.is_finite()) {
        error("numerics.h", format!("must be positive, got {}", n.h));
    } else if let (Some(t), Some(steps)) = (n.horizon, n.steps) {
        if (steps as f64 * n.h - t).abs() > 1e-9 * t.abs().max(1.0) {
            error("numerics.steps", format!("horizon mismatch: {steps} * {} != {t}", n.h));
        }
    } else if n.steps.is_none() {
        let t = n.horizon();
        let steps = (t / n.h).round();
        if !(t > 0.0) || steps < 1.0 || (steps * n.h - t).abs() > 1e-9 * t.max(1.0) {
            error("numerics.horizon", format!("horizon mismatch: {t} is not a multiple of h = {}", n.h));
        }
    }
    if n.paths == 0 {
        error("numerics.paths", "must be >= 1".into());
    }
    if n.bundles == 0 {
        error("numerics.bundles", "must be >= 1".into());
    } else if n.paths % n.bundles != 0 {
        error("numerics.bundles", format!("B must divide S ({} paths, {} bundles)", n.paths, n.bundles));
    }
    if let Some(m) = core(n.picard().validate()) {
        error("numerics", m);
    }
    if n.riccati_refinement == 0 {
        error("numerics.riccati_refinement", "must be >= 1".into());
    }

    let x = &config.experiment;
    if !(x.initial_outflow >= 0.0) {
        error("experiment.initial_outflow", "must be >= 0".into());
    }
    let v0 = config.initial_volume();
    if config.reservoir.constrained && !(0.0..=config.reservoir.v_max).contains(&v0) {
        error("experiment.initial_volume", format!("{v0} lies outside [0, v_max]"));
    }
    if x.hs.iter().any(|h| !(*h > 0.0)) {
        error("experiment.hs", "step sizes must be positive".into());
    }
    if x.w3s.iter().any(|w| !(*w > 0.0)) {
        error("experiment.w3s", "weights must be positive".into());
    }
    if x.lambdas.iter().any(|l| !(*l >= 0.0)) {
        error("experiment.lambdas", "ridge parameters must be >= 0".into());
    }
    if !(x.paths_scale >= 1.0) {
        error("experiment.paths_scale", "must be >= 1".into());
    }
    if x.bins == 0 {
        error("experiment.bins", "must be >= 1".into());
    }
    if x.band_edges.len() < 2 || x.band_edges.windows(2).any(|w| !(w[0] < w[1])) {
        error("experiment.band_edges", "need at least two strictly increasing edges".into());
    }

    if config.objective.w4 > 0.0 && n.basis == BasisId::Lq {
        out.push(Violation {
            field: "numerics.basis".into(),
            message: "hinge terms unrepresentable: w4 > 0 needs a nonlinear basis".into(),
            severity: Severity::Warning,
        });
    }
    out
}

/// Sets `path` (dot separated) in a JSON document, creating sections as
/// needed. The value is parsed as JSON, or taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(vec![format!("override {assignment:?} is not key=value")]))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Config(vec![format!("override {assignment:?} has an empty key")]))
}

/// Parses a config or a run manifest (whose `config` section is used).
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc: Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(vec![format!("invalid JSON: {e}")]))?;
    if let Some(inner) = doc.get("config").filter(|_| doc.get("version").is_some()) {
        doc = inner.clone();
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| CliError::Config(vec![e.to_string()]))
}
