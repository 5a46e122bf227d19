//! Run configuration: a TOML file, optionally layered on a named preset.
//!
//! A file may set `preset = "gaussian_toy" | "gamma_telescope" | "mhealth"`;
//! every key it leaves out is taken from the preset (or the global defaults)
//! and reported in `LoadedConfig::defaults_applied`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::scheduler::{HyperParams, TMode};
use crate::topology::{Graph, GraphKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    GaussianToy,
    GammaTelescope,
    Mhealth,
    /// Shards and test set previously written by the `ingest` verb.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    /// `ring`, `complete` or `edge_list`.
    pub kind: String,
    pub n: Option<usize>,
    pub path: Option<PathBuf>,
}

impl GraphSpec {
    pub fn build(&self) -> Result<Graph> {
        match self.kind.as_str() {
            "ring" | "complete" => {
                let n = self.n.ok_or_else(|| {
                    Error::validation("graph.n", "required for ring/complete graphs")
                })?;
                let kind = if self.kind == "ring" {
                    GraphKind::Ring
                } else {
                    GraphKind::Complete
                };
                crate::topology::build_graph(kind, n)
            }
            "edge_list" => {
                let path = self.path.as_ref().ok_or_else(|| {
                    Error::validation("graph.path", "required for edge_list graphs")
                })?;
                let g = Graph::from_edge_list_file(path)?;
                if let Some(n) = self.n {
                    if n != g.n() {
                        return Err(Error::validation(
                            "graph.n",
                            format!("edge list declares {} agents, config says {n}", g.n()),
                        ));
                    }
                }
                Ok(g)
            }
            other => Err(Error::validation(
                "graph.kind",
                format!("unknown graph kind `{other}` (expected ring, complete or edge_list)"),
            )),
        }
    }
}

/// One output set of a sweep: overrides of the local-computation schedule
/// and, optionally, the minibatch fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub t_mode: TMode,
    pub f: Option<f64>,
}

impl SweepPoint {
    pub fn label(&self, base_f: f64) -> String {
        let f = self.f.unwrap_or(base_f);
        match self.t_mode {
            TMode::Static { t } => format!("T{t}_f{f}"),
            TMode::Dynamic { t_min, t_max } => format!("T{t_min}-{t_max}_f{f}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub sigma_theta: f64,
    pub sigma_x: f64,
    pub n_data: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub path: Option<PathBuf>,
    pub test_fraction: f64,
    /// Rows kept per shard (mHealth); all rows when absent.
    pub subsample: Option<usize>,
    pub train_subjects: Vec<usize>,
    pub test_subject: usize,
    /// Z-score features with training statistics (dataset experiments).
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub rho_u: Option<f64>,
    pub lipschitz_probes: usize,
    pub lipschitz_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub experiment: Experiment,
    pub master_seed: u64,
    pub cycles: usize,
    pub trials: usize,
    pub chains: usize,
    pub cadence: usize,
    pub burn_in_fraction: f64,
    pub graph: GraphSpec,
    pub hyper: HyperParams,
    #[serde(default)]
    pub sweep: Vec<SweepPoint>,
    pub prior_std: f64,
    pub toy: ToySpec,
    pub data: DataSpec,
    /// Likelihood for `custom` experiments.
    pub model: Option<ModelKind>,
    pub conditions: ConditionSpec,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Sweep points, or the base schedule when no sweep is configured.
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        if self.sweep.is_empty() {
            vec![SweepPoint {
                t_mode: self.hyper.t_mode,
                f: None,
            }]
        } else {
            self.sweep.clone()
        }
    }

    pub fn hyper_for(&self, point: &SweepPoint) -> HyperParams {
        HyperParams {
            t_mode: point.t_mode,
            f: point.f.unwrap_or(self.hyper.f),
            ..self.hyper
        }
    }

    pub fn burn_in(&self) -> usize {
        (self.cycles as f64 * self.burn_in_fraction).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("cycles", self.cycles),
            ("trials", self.trials),
            ("chains", self.chains),
            ("cadence", self.cadence),
        ] {
            if v == 0 {
                return Err(Error::validation(field, "must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::validation("burn_in_fraction", "must lie in [0, 1)"));
        }
        if !(self.prior_std > 0.0) {
            return Err(Error::validation("prior_std", "must be > 0"));
        }
        self.hyper.validate()?;
        for (idx, p) in self.sweep.iter().enumerate() {
            self.hyper_for(p).validate().map_err(|e| match e {
                Error::Validation { field, message } => Error::validation(
                    field.replacen("hyper", &format!("sweep[{idx}]"), 1),
                    message,
                ),
                other => other,
            })?;
        }
        self.graph.build()?;
        match self.experiment {
            Experiment::GaussianToy => {
                if self.toy.n_data == 0 {
                    return Err(Error::validation("toy.n_data", "must be >= 1"));
                }
                if !(self.toy.sigma_theta > 0.0 && self.toy.sigma_x > 0.0) {
                    return Err(Error::validation(
                        "toy",
                        "sigma_theta and sigma_x must be > 0",
                    ));
                }
                if self.chains < 2 {
                    return Err(Error::validation("chains", "KL needs at least 2 chains"));
                }
            }
            Experiment::GammaTelescope | Experiment::Mhealth | Experiment::Custom => {
                let path = self.data.path.as_ref().ok_or_else(|| {
                    Error::validation("data.path", "required for dataset experiments")
                })?;
                if !path.exists() {
                    return Err(Error::validation(
                        "data.path",
                        format!("{} does not exist", path.display()),
                    ));
                }
                if !(0.0..1.0).contains(&self.data.test_fraction) {
                    return Err(Error::validation(
                        "data.test_fraction",
                        "must lie in [0, 1)",
                    ));
                }
                if self.experiment == Experiment::Custom && self.model.is_none() {
                    return Err(Error::validation(
                        "model",
                        "required for custom experiments",
                    ));
                }
            }
        }
        if self.conditions.lipschitz_probes < 100 {
            return Err(Error::validation(
                "conditions.lipschitz_probes",
                "must be >= 100",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Dotted paths of keys filled from the preset or global defaults.
    pub defaults_applied: Vec<String>,
    pub source: Option<PathBuf>,
}

const GLOBAL_DEFAULTS: &str = r#"
master_seed = 0
trials = 1
chains = 1
cadence = 1
burn_in_fraction = 0.1
prior_std = 20.0

[hyper]
overlap_mode = "sequential"

[toy]
sigma_theta = 1.0
sigma_x = 5.0
n_data = 50

[data]
test_fraction = 0.2
train_subjects = [1, 2, 3, 4, 5, 6]
test_subject = 10
standardize = true

[conditions]
lipschitz_probes = 1000
lipschitz_radius = 5.0
"#;

const GAUSSIAN_TOY: &str = r#"
experiment = "gaussian_toy"
cycles = 10000
chains = 5000

[graph]
kind = "ring"
n = 5

[hyper]
a = 1e-4
delta_alpha = 0.01
beta = 0.5
f = 0.1
t_mode = { mode = "static", t = 1 }

[[sweep]]
t_mode = { mode = "static", t = 1 }
[[sweep]]
t_mode = { mode = "static", t = 3 }
[[sweep]]
t_mode = { mode = "static", t = 5 }
"#;

const GAMMA_TELESCOPE: &str = r#"
experiment = "gamma_telescope"
cycles = 150
trials = 10

[graph]
kind = "ring"
n = 6

[hyper]
a = 1e-5
delta_alpha = 0.5
beta = 0.5
f = 0.1
t_mode = { mode = "static", t = 5 }

[[sweep]]
t_mode = { mode = "static", t = 1 }
f = 1.0
[[sweep]]
t_mode = { mode = "static", t = 5 }
f = 0.1
"#;

const MHEALTH: &str = r#"
experiment = "mhealth"
cycles = 500
trials = 10

[graph]
kind = "ring"
n = 6

[hyper]
a = 1e-5
delta_alpha = 0.5
beta = 0.8
f = 0.1
t_mode = { mode = "static", t = 5 }

[data]
subsample = 100
test_fraction = 0.0

[[sweep]]
t_mode = { mode = "static", t = 1 }
[[sweep]]
t_mode = { mode = "static", t = 3 }
[[sweep]]
t_mode = { mode = "static", t = 5 }
[[sweep]]
t_mode = { mode = "dynamic", t_min = 1, t_max = 10 }
"#;

pub fn preset_names() -> &'static [&'static str] {
    &["gaussian_toy", "gamma_telescope", "mhealth"]
}

fn preset_table(name: &str) -> Result<Table> {
    let text = match name {
        "gaussian_toy" => GAUSSIAN_TOY,
        "gamma_telescope" => GAMMA_TELESCOPE,
        "mhealth" => MHEALTH,
        other => {
            return Err(Error::validation(
                "preset",
                format!(
                    "unknown preset `{other}` (expected one of {:?})",
                    preset_names()
                ),
            ))
        }
    };
    Ok(text.parse::<Table>().expect("built-in preset parses"))
}

/// Overlays `over` onto `base`, recording keys that only `base` provides.
fn merge(base: &mut Table, over: Table, prefix: &str, filled: &mut Vec<String>) {
    let over_keys: Vec<String> = over.keys().cloned().collect();
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) if !o.contains_key("mode") => {
                merge(b, o, &format!("{prefix}{key}."), filled);
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
    for (key, value) in base.iter() {
        if over_keys.contains(key) {
            continue;
        }
        match value {
            Value::Table(t) => collect_leaves(t, &format!("{prefix}{key}."), filled),
            _ => filled.push(format!("{prefix}{key}")),
        }
    }
}

fn collect_leaves(t: &Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in t {
        match value {
            Value::Table(inner) if !inner.contains_key("mode") => {
                collect_leaves(inner, &format!("{prefix}{key}."), out)
            }
            _ => out.push(format!("{prefix}{key}")),
        }
    }
}

const REQUIRED: &[&str] = &[
    "experiment",
    "cycles",
    "graph.kind",
    "hyper.a",
    "hyper.delta_alpha",
    "hyper.beta",
    "hyper.f",
    "hyper.t_mode",
];

fn lookup<'a>(t: &'a Table, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut cur = t.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

/// Parses TOML text into a validated config. `origin` names the source in errors.
pub fn parse_config(text: &str, origin: &str) -> Result<LoadedConfig> {
    let user: Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    let mut merged: Table = GLOBAL_DEFAULTS.parse().expect("defaults parse");
    let mut defaults_applied = Vec::new();
    if let Some(name) = user.get("preset") {
        let name = name
            .as_str()
            .ok_or_else(|| Error::validation("preset", "must be a string"))?;
        let mut scratch = Vec::new();
        merge(&mut merged, preset_table(name)?, "", &mut scratch);
    }
    merge(&mut merged, user, "", &mut defaults_applied);
    defaults_applied.sort();
    for field in REQUIRED {
        if lookup(&merged, field).is_none() {
            return Err(Error::validation(*field, "missing required field"));
        }
    }
    let config: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
    config.validate()?;
    Ok(LoadedConfig {
        config,
        defaults_applied,
        source: None,
    })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<LoadedConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut loaded = parse_config(&text, &path.display().to_string())?;
    loaded.source = Some(path.to_path_buf());
    Ok(loaded)
}

/// Preset with no user overrides. Dataset presets still need `data.path`.
pub fn preset(name: &str) -> Result<LoadedConfig> {
    parse_config(&format!("preset = \"{name}\"\n"), name)
}

/// Preset with extra TOML layered on top.
pub fn preset_with(name: &str, overrides: &str) -> Result<LoadedConfig> {
    parse_config(&format!("preset = \"{name}\"\n{overrides}"), name)
}
