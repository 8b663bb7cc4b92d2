//! Experiment configuration.
//!
//! A config file is flat `key = value` text; `#` starts a comment. Every key
//! has a default, so an empty file is a valid two-moons SALD run. CLI
//! overrides use the same keys and are applied after the file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    TwoMoons,
    EightGaussian,
    UnguidedSanity,
    FlowToy,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::TwoMoons, Task::EightGaussian, Task::UnguidedSanity, Task::FlowToy];

    pub fn name(self) -> &'static str {
        match self {
            Task::TwoMoons => "two_moons",
            Task::EightGaussian => "eight_gaussian",
            Task::UnguidedSanity => "unguided_sanity",
            Task::FlowToy => "flow_toy",
        }
    }

    pub fn is_flow(self) -> bool {
        self == Task::FlowToy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sald,
    VaSald,
    Doit,
    VaSaldFlow,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sald => "sald",
            Method::VaSald => "va_sald",
            Method::Doit => "doit",
            Method::VaSaldFlow => "va_sald_flow",
        }
    }

    pub fn is_flow(self) -> bool {
        self == Method::VaSaldFlow
    }
}

macro_rules! name_parsing {
    ($ty:ty, $what:literal, [$($v:expr),+]) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                [$($v),+]
                    .into_iter()
                    .find(|v| v.name() == s.trim())
                    .ok_or_else(|| Error::config(format!(concat!("unknown ", $what, " '{}'"), s)))
            }
        }
    };
}

name_parsing!(Task, "task", [Task::TwoMoons, Task::EightGaussian, Task::UnguidedSanity, Task::FlowToy]);
name_parsing!(Method, "method", [Method::Sald, Method::VaSald, Method::Doit, Method::VaSaldFlow]);

/// Raw `key -> value` pairs with the line each came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Parse { line: line_no, msg: format!("expected key = value, got '{body}'") });
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse { line: line_no, msg: "empty key".into() });
            }
            if raw.entries.insert(key.to_string(), (v.trim().to_string(), line_no)).is_some() {
                return Err(Error::Parse { line: line_no, msg: format!("duplicate key '{key}'") });
            }
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::from(e).with_context(format!("reading {}", path.display())))?;
        RawConfig::parse(&text).map_err(|e| e.with_context(path.display().to_string()))
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{assignment}' is not key=value")))?;
        self.entries.insert(k.trim().to_string(), (v.trim().to_string(), 0));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|e| {
                let msg = format!("{key}: cannot parse '{v}': {e}");
                if *line > 0 { Error::Parse { line: *line, msg } } else { Error::config(msg) }
            }),
        }
    }
}

/// Comma-separated list, e.g. `1,2,4,10`.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| Error::config(format!("bad list item '{p}': {e}"))))
        .collect()
}

/// Everything needed to run one experiment. Task-dependent defaults
/// (`eta`, the flow settings) are resolved by the accessor methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub task: Task,
    pub method: Method,
    pub budget_r: f64,
    /// Step size; `None` means 0.001 (VP tasks) or 0.025 (flow toy).
    pub eta: Option<f64>,
    /// SALD/VA-SALD particle count; DOIT runs `n_particles / doit_proposals`.
    pub n_particles: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub metric_every: Option<u64>,
    pub kl_eps: f64,
    pub grid_half_width: f64,
    pub grid_cells: usize,
    pub cache_nodes: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
    pub two_gaussian_offset: f64,
    pub ring_radius: f64,
    pub penalty_lambda: f64,
    pub penalty_length: f64,
    pub moons_lambda: f64,
    pub moons_points: usize,
    pub moons_jitter: f64,
    pub moons_scale: f64,
    pub doit_proposals: usize,
    pub doit_temperature: f64,
    pub doit_strength: f64,
    pub zo_batch: usize,
    pub zo_normalize: bool,
    pub flow_sigma0: f64,
    pub record_timing: bool,
    pub output: Option<PathBuf>,
    pub trajectory_output: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            task: Task::TwoMoons,
            method: Method::Sald,
            budget_r: 1.0,
            eta: None,
            n_particles: 10_000,
            guidance_scale: 1.0,
            seed: 0,
            metric_every: None,
            kl_eps: crate::metrics::KL_EPS,
            grid_half_width: 8.0,
            grid_cells: 256,
            cache_nodes: 512,
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
            two_gaussian_offset: 2.25,
            ring_radius: 3.0,
            penalty_lambda: 1.0,
            penalty_length: 1.0,
            moons_lambda: 1.0,
            moons_points: 2000,
            moons_jitter: 0.05,
            moons_scale: 2.0,
            doit_proposals: 4,
            doit_temperature: 1.0,
            doit_strength: 1.0,
            zo_batch: 32,
            zo_normalize: false,
            flow_sigma0: 1.0,
            record_timing: false,
            output: None,
            trajectory_output: None,
        }
    }
}

/// Keys read by [`SweepSpec`] on top of the experiment keys.
const SWEEP_KEYS: [&str; 2] = ["methods", "r_values"];

macro_rules! read_keys {
    ($raw:expr, $spec:expr, { $($key:literal => $field:ident),+ $(,)? }) => {{
        $( if let Some(v) = $raw.typed($key)? { $spec.$field = v; } )+
        &[$($key),+]
    }};
}

impl ExperimentSpec {
    pub const DEFAULT_ETA: f64 = 0.001;
    pub const FLOW_ETA: f64 = 0.025;

    /// Builds a spec from raw pairs. Unknown keys are errors.
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        Self::from_raw_allowing(raw, &[])
    }

    fn from_raw_allowing(raw: &RawConfig, extra: &[&str]) -> Result<Self> {
        let mut s = ExperimentSpec::default();
        let known: &[&str] = read_keys!(raw, s, {
            "task" => task,
            "method" => method,
            "r" => budget_r,
            "n_particles" => n_particles,
            "guidance_scale" => guidance_scale,
            "seed" => seed,
            "kl_eps" => kl_eps,
            "grid_half_width" => grid_half_width,
            "grid_cells" => grid_cells,
            "cache_nodes" => cache_nodes,
            "beta_min" => beta_min,
            "beta_max" => beta_max,
            "horizon" => horizon,
            "two_gaussian_offset" => two_gaussian_offset,
            "ring_radius" => ring_radius,
            "penalty_lambda" => penalty_lambda,
            "penalty_length" => penalty_length,
            "moons_lambda" => moons_lambda,
            "moons_points" => moons_points,
            "moons_jitter" => moons_jitter,
            "moons_scale" => moons_scale,
            "doit_proposals" => doit_proposals,
            "doit_temperature" => doit_temperature,
            "doit_strength" => doit_strength,
            "zo_batch" => zo_batch,
            "zo_normalize" => zo_normalize,
            "flow_sigma0" => flow_sigma0,
            "record_timing" => record_timing,
        });
        if let Some(v) = raw.typed::<f64>("eta")? {
            s.eta = Some(v);
        }
        if let Some(v) = raw.typed::<u64>("metric_every")? {
            s.metric_every = Some(v);
        }
        if let Some(v) = raw.get("output") {
            s.output = Some(PathBuf::from(v));
        }
        if let Some(v) = raw.get("trajectory_output") {
            s.trajectory_output = Some(PathBuf::from(v));
        }
        let optional = ["eta", "metric_every", "output", "trajectory_output"];
        if let Some(bad) = raw
            .keys()
            .find(|k| !known.contains(k) && !optional.contains(k) && !extra.contains(k))
        {
            return Err(Error::config(format!("unknown config key '{bad}'")));
        }
        if s.task.is_flow() && raw.get("method").is_none() {
            s.method = Method::VaSaldFlow;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(if self.task.is_flow() { Self::FLOW_ETA } else { Self::DEFAULT_ETA })
    }

    /// Particles the chosen method actually simulates.
    pub fn method_particles(&self) -> usize {
        match self.method {
            Method::Doit => self.n_particles / self.doit_proposals.max(1),
            _ => self.n_particles,
        }
    }

    /// Field-level validation.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool, v: &dyn fmt::Display| -> Result<()> {
            if ok { Ok(()) } else { Err(Error::config(format!("{name}: invalid value {v}"))) }
        };
        if self.task.is_flow() != self.method.is_flow() {
            return Err(Error::config(format!(
                "method: {} cannot run task {}",
                self.method, self.task
            )));
        }
        field("r", self.budget_r >= 1.0 && self.budget_r.is_finite(), &self.budget_r)?;
        let eta = self.eta();
        field("eta", eta > 0.0 && eta.is_finite(), &eta)?;
        field("n_particles", self.n_particles >= 1, &self.n_particles)?;
        field("guidance_scale", self.guidance_scale >= 0.0 && self.guidance_scale.is_finite(), &self.guidance_scale)?;
        field("metric_every", self.metric_every != Some(0), &0)?;
        field("kl_eps", self.kl_eps > 0.0, &self.kl_eps)?;
        field("grid_half_width", self.grid_half_width > 0.0, &self.grid_half_width)?;
        field("grid_cells", self.grid_cells >= 2, &self.grid_cells)?;
        field("cache_nodes", self.cache_nodes >= 2, &self.cache_nodes)?;
        field("horizon", self.horizon > 0.0, &self.horizon)?;
        field("ring_radius", self.ring_radius > 0.0, &self.ring_radius)?;
        field("moons_points", self.moons_points >= 1, &self.moons_points)?;
        field("moons_scale", self.moons_scale > 0.0, &self.moons_scale)?;
        field("moons_jitter", self.moons_jitter >= 0.0, &self.moons_jitter)?;
        field("doit_proposals", self.doit_proposals >= 1, &self.doit_proposals)?;
        field("flow_sigma0", self.flow_sigma0 >= 0.0 && self.flow_sigma0.is_finite(), &self.flow_sigma0)?;
        if self.method == Method::Doit {
            field("n_particles", self.method_particles() >= 1, &self.n_particles)?;
        }
        Ok(())
    }

    /// All resolved settings as `key -> value`, for the JSON summary.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("task", self.task.to_string());
        put("method", self.method.to_string());
        put("r", self.budget_r.to_string());
        put("eta", self.eta().to_string());
        put("n_particles", self.n_particles.to_string());
        put("guidance_scale", self.guidance_scale.to_string());
        put("seed", self.seed.to_string());
        put(
            "metric_every",
            self.metric_every.map_or_else(|| "auto".to_string(), |v| v.to_string()),
        );
        put("kl_eps", self.kl_eps.to_string());
        put("grid_half_width", self.grid_half_width.to_string());
        put("grid_cells", self.grid_cells.to_string());
        put("cache_nodes", self.cache_nodes.to_string());
        put("beta_min", self.beta_min.to_string());
        put("beta_max", self.beta_max.to_string());
        put("horizon", self.horizon.to_string());
        put("two_gaussian_offset", self.two_gaussian_offset.to_string());
        put("ring_radius", self.ring_radius.to_string());
        put("penalty_lambda", self.penalty_lambda.to_string());
        put("penalty_length", self.penalty_length.to_string());
        put("moons_lambda", self.moons_lambda.to_string());
        put("moons_points", self.moons_points.to_string());
        put("moons_jitter", self.moons_jitter.to_string());
        put("moons_scale", self.moons_scale.to_string());
        put("doit_proposals", self.doit_proposals.to_string());
        put("doit_temperature", self.doit_temperature.to_string());
        put("doit_strength", self.doit_strength.to_string());
        put("zo_batch", self.zo_batch.to_string());
        put("zo_normalize", self.zo_normalize.to_string());
        put("flow_sigma0", self.flow_sigma0.to_string());
        put("record_timing", self.record_timing.to_string());
        m
    }
}

/// A budget sweep: one run per `(method, r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentSpec,
    pub methods: Vec<Method>,
    pub r_values: Vec<f64>,
}

impl SweepSpec {
    pub const PAPER_BUDGETS: [f64; 6] = [1.0, 2.0, 4.0, 10.0, 50.0, 100.0];

    /// `methods` defaults to the base method, `r_values` to the paper budgets.
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let base = ExperimentSpec::from_raw_allowing(raw, &SWEEP_KEYS)?;
        let methods = match raw.get("methods") {
            Some(s) => parse_list(s)?,
            None => vec![base.method],
        };
        let r_values = match raw.get("r_values") {
            Some(s) => parse_list(s)?,
            None => Self::PAPER_BUDGETS.to_vec(),
        };
        let sweep = SweepSpec { base, methods, r_values };
        sweep.validate()?;
        Ok(sweep)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_values.is_empty() {
            return Err(Error::config("r_values: empty budget list"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods: empty method list"));
        }
        for &m in &self.methods {
            ExperimentSpec { method: m, ..self.base.clone() }.validate()?;
        }
        for &r in &self.r_values {
            ExperimentSpec { budget_r: r, ..self.base.clone() }.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let spec = ExperimentSpec::from_raw(&RawConfig::parse("").unwrap()).unwrap();
        assert_eq!(spec, ExperimentSpec::default());
        assert_eq!(spec.eta(), 0.001);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let mut raw = RawConfig::parse("# demo\ntask = eight_gaussian\nmethod=doit # baseline\nr = 10\n\n").unwrap();
        raw.set("seed=7").unwrap();
        let spec = ExperimentSpec::from_raw(&raw).unwrap();
        assert_eq!(spec.task, Task::EightGaussian);
        assert_eq!(spec.method, Method::Doit);
        assert_eq!(spec.budget_r, 10.0);
        assert_eq!(spec.seed, 7);
        assert_eq!(spec.method_particles(), 2500);
    }

    #[test]
    fn flow_task_defaults() {
        let spec = ExperimentSpec::from_raw(&RawConfig::parse("task = flow_toy").unwrap()).unwrap();
        assert_eq!(spec.method, Method::VaSaldFlow);
        assert_eq!(spec.eta(), 0.025);
    }

    #[test]
    fn field_level_errors() {
        let err = ExperimentSpec::from_raw(&RawConfig::parse("r = 0.5").unwrap()).unwrap_err();
        assert!(err.to_string().contains("r:"), "{err}");
        let err = ExperimentSpec::from_raw(&RawConfig::parse("colour = red").unwrap()).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        let err = ExperimentSpec::from_raw(&RawConfig::parse("\nseed = x").unwrap()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = ExperimentSpec::from_raw(&RawConfig::parse("task = flow_toy\nmethod = sald").unwrap()).unwrap_err();
        assert!(err.to_string().contains("method"), "{err}");
        assert!(RawConfig::parse("a = 1\na = 2").is_err());
        assert!(RawConfig::parse("novalue").is_err());
    }

    #[test]
    fn sweep_lists() {
        let raw = RawConfig::parse("methods = sald, va_sald,doit\nr_values = 1,2,4").unwrap();
        let sweep = SweepSpec::from_raw(&raw).unwrap();
        assert_eq!(sweep.methods, vec![Method::Sald, Method::VaSald, Method::Doit]);
        assert_eq!(sweep.r_values, vec![1.0, 2.0, 4.0]);
        assert!(ExperimentSpec::from_raw(&raw).is_err());
    }
}
