//! Run configuration: preset defaults, then the config file, then flags.

use std::path::{Path, PathBuf};

use moe_oco::experiment::{ExperimentConfig, LossKind};
use moe_oco::learners::LearnerKind;
use moe_oco::presets::Preset;
use moe_oco::simulation::ScenarioSpec;
use moe_oco::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CommonArgs;

/// Fully resolved configuration, echoed as `config.json`.
///
/// Feeding this document back through `--config` reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub seed: u64,
    /// Inline scenario; ignored when `trace` is set.
    #[serde(default)]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub experiment: ExperimentConfig,
}

fn config_error(field: impl Into<String>, reason: impl ToString) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.to_string(),
    }
}

/// Overwrites `base` with `patch`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_field<T: serde::de::DeserializeOwned>(prefix: &str, value: Value) -> Result<T, Error> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { prefix.to_string() } else { format!("{prefix}.{path}") };
        config_error(field, e.into_inner())
    })
}

fn read_file(path: &Path) -> Result<serde_json::Map<String, Value>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error("config", format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(config_error("config", "top level must be a JSON object")),
        Err(e) => Err(config_error("config", e)),
    }
}

const KNOWN_KEYS: [&str; 6] = ["preset", "seed", "scenario", "trace", "out", "experiment"];

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<Self, Error> {
        let mut file = match &args.config {
            Some(path) => read_file(path)?,
            None => serde_json::Map::new(),
        };
        if let Some(key) = file.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(config_error(key.clone(), "unknown field"));
        }

        let preset: Option<Preset> = match (&args.preset, file.remove("preset")) {
            (Some(name), _) => Some(name.parse()?),
            (None, Some(Value::Null)) | (None, None) => None,
            (None, Some(v)) => Some(parse_field("preset", v)?),
        };
        let trace: Option<PathBuf> = match (&args.trace, file.remove("trace")) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(v)) => parse_field("trace", v)?,
            (None, None) => None,
        };
        let file_scenario = file.remove("scenario").filter(|v| !v.is_null());
        // a bare invocation runs the stationary preset
        let preset = match preset {
            None if trace.is_none() && file_scenario.is_none() => Some(Preset::StationaryConvex),
            p => p,
        };
        let seed: Option<u64> = match (args.seed, file.remove("seed")) {
            (Some(s), _) => Some(s),
            (None, Some(v)) => Some(parse_field("seed", v)?),
            (None, None) => None,
        };
        let out: Option<PathBuf> = match (&args.out, file.remove("out")) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(v)) => parse_field("out", v)?,
            (None, None) => None,
        };

        let scenario = if trace.is_some() {
            None
        } else {
            let mut base = match preset {
                Some(p) => serde_json::to_value(p.scenario(seed.unwrap_or(0))).expect("scenario serializes"),
                None => Value::Object(Default::default()),
            };
            if let Some(v) = file_scenario {
                merge(&mut base, v);
            }
            let mut spec: ScenarioSpec = parse_field("scenario", base)?;
            if let Some(s) = seed {
                spec.rng_seed = s;
            }
            spec.validate()?;
            Some(spec)
        };

        let mut exp = serde_json::to_value(preset.map(Preset::experiment).unwrap_or_default())
            .expect("experiment config serializes");
        if let Some(v) = file.remove("experiment") {
            merge(&mut exp, v);
        }
        let mut experiment: ExperimentConfig = parse_field("experiment", exp)?;
        if let Some(s) = seed {
            experiment.sample_seed = s;
        }
        args.apply(&mut experiment);
        experiment.validate()?;

        Ok(RunConfig {
            preset,
            seed: seed.unwrap_or_else(|| scenario.as_ref().map_or(0, |s| s.rng_seed)),
            scenario,
            trace,
            out,
            experiment,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("results"))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

impl CommonArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(kind) = self.learner {
            cfg.learner.kind = match kind {
                LearnerArg::Squint => LearnerKind::Squint,
                LearnerArg::Eg => LearnerKind::Eg,
            };
        }
        if let Some(loss) = self.loss {
            cfg.loss = match loss {
                LossArg::Probability => LossKind::Probability,
                LossArg::SoftMinFrde => LossKind::SoftMinFrde,
                LossArg::SampleMse => LossKind::SampleMse,
                LossArg::SampleTopk => LossKind::SampleTopk,
            };
        }
        if let Some(d) = self.discount {
            cfg.learner.discount = d;
        }
        if let Some(b) = self.beta {
            cfg.smoothing.softmin_beta = b;
        }
        if let Some(t) = self.tau {
            cfg.smoothing.softsort_tau = t;
        }
        if let Some(k) = self.topk {
            cfg.smoothing.k = k;
            cfg.metric_k = k;
        }
        if let Some(w) = self.window {
            cfg.window = w;
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum LearnerArg {
    Squint,
    Eg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum LossArg {
    Probability,
    SoftMinFrde,
    SampleMse,
    SampleTopk,
}
