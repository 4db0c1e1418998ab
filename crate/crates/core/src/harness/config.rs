//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Values are JSON
//! (`0.01`, `true`, `"gspo_seq"`, `[0.9, 1.1]`); a value that does not parse
//! as JSON is taken as a bare string.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::objectives::{EstimatorFamily, EstimatorSpec};
use crate::rollout::AdvantageMode;
use crate::transforms::{TransformKind, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    ToyUnified,
    MinimalPrefix,
    ClipBreak,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [
        ScenarioKind::ToyUnified,
        ScenarioKind::MinimalPrefix,
        ScenarioKind::ClipBreak,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::ToyUnified => "toy_unified",
            ScenarioKind::MinimalPrefix => "minimal_prefix",
            ScenarioKind::ClipBreak => "clip_break",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ScenarioKind::ToyUnified => {
                "three answers to \"10+10\" (one wrong, two equivalent correct); tracks log-odds and entropy of the correct pair"
            }
            ScenarioKind::MinimalPrefix => {
                "G=2, T=3 group sharing a two-token prefix; tracks the shared-prefix coefficient"
            }
            ScenarioKind::ClipBreak => {
                "shared token with mixed-sign advantages; sweeps its ratio across the clip band"
            }
        }
    }
}

/// Per-token norm fed to the energy metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnergyNorm {
    /// `|coefficient| · ‖score‖` under the active estimator.
    #[default]
    Weighted,
    /// `‖score‖` alone.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Fixed trajectories scored under a frozen old policy.
    #[default]
    Replay,
    /// Fresh groups sampled from the old policy at every refresh.
    Live,
}

/// Estimator selection: one of the objective families, or the decoupled
/// estimator driven by `transform`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    GrpoToken,
    GrpoClipped,
    GrpoSymclip,
    GspoSeq,
    GspoClipped,
    Dfpo,
}

impl EstimatorChoice {
    pub fn family(self) -> Option<EstimatorFamily> {
        match self {
            EstimatorChoice::GrpoToken => Some(EstimatorFamily::GrpoToken),
            EstimatorChoice::GrpoClipped => Some(EstimatorFamily::GrpoClipped),
            EstimatorChoice::GrpoSymclip => Some(EstimatorFamily::GrpoSymclip),
            EstimatorChoice::GspoSeq => Some(EstimatorFamily::GspoSeq),
            EstimatorChoice::GspoClipped => Some(EstimatorFamily::GspoClipped),
            EstimatorChoice::Dfpo => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub mode: SamplingMode,
    pub estimator: EstimatorChoice,
    #[serde(default = "default_clip_eps")]
    pub clip_eps: f64,
    #[serde(default = "default_true")]
    pub length_norm: bool,
    #[serde(default)]
    pub transform: TransformKind,
    #[serde(default = "default_floor_eps")]
    pub floor_eps: f64,
    #[serde(default)]
    pub transform_on_raw: bool,
    #[serde(default)]
    pub advantage: AdvantageMode,
    #[serde(default = "default_group_size", alias = "G")]
    pub group_size: usize,
    #[serde(default = "default_max_len", alias = "T_max")]
    pub max_len: usize,
    pub eta: f64,
    #[serde(alias = "K")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Optimizer steps between old-policy refreshes; 0 keeps it frozen.
    #[serde(default)]
    pub refresh_every: usize,
    #[serde(default)]
    pub reward: Option<String>,
    /// Score threshold for steps-to-threshold.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub energy_norm: EnergyNorm,
    #[serde(default)]
    pub out: Option<String>,
    /// Shared-prefix ratios (minimal_prefix).
    #[serde(default = "default_rho")]
    pub rho: Vec<f64>,
    /// Final-token ratios per member (minimal_prefix).
    #[serde(default = "default_lambda")]
    pub lambda: Vec<f64>,
    /// Shared-token ratios to sweep (clip_break).
    #[serde(default = "default_sweep_w")]
    pub sweep_w: Vec<f64>,
}

fn default_name() -> String {
    "run".into()
}
fn default_clip_eps() -> f64 {
    0.2
}
fn default_true() -> bool {
    true
}
fn default_floor_eps() -> f64 {
    1e-8
}
fn default_group_size() -> usize {
    3
}
fn default_max_len() -> usize {
    crate::policy::DEFAULT_MAX_LEN
}
fn default_threshold() -> f64 {
    0.9
}
fn default_rho() -> Vec<f64> {
    vec![1.0, 1.0]
}
fn default_lambda() -> Vec<f64> {
    vec![0.9, 1.1]
}
fn default_sweep_w() -> Vec<f64> {
    vec![0.5, 0.7, 0.79, 0.8, 1.0, 1.2, 1.21, 1.5]
}

/// Canonical key for a possibly aliased field name.
fn canonical_key(key: &str) -> &str {
    match key {
        "G" => "group_size",
        "K" => "steps",
        "T_max" => "max_len",
        other => other,
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Parses the flat key-value text into a JSON object.
pub fn parse_kv(text: &str) -> Result<Map<String, Value>> {
    let mut map = Map::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            // keep '#' inside quoted strings
            Some(pos) if !line[..pos].contains('"') => &line[..pos],
            _ => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1)))?;
        let key = canonical_key(key.trim());
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.to_string(), parse_value(value.trim())).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
        }
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let cfg: ExperimentConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_kv_str(&text)
    }

    /// Renders the config back into the flat key-value format.
    pub fn to_kv_string(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config is a struct");
        };
        map.iter()
            .filter(|(_, v)| !v.is_null())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Returns a copy with `key` set to the JSON (or bare string) `raw`.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(self)? else {
            unreachable!("config is a struct");
        };
        let key = canonical_key(key);
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config field {key:?}")));
        }
        map.insert(key.to_string(), parse_value(raw.trim()));
        let cfg: ExperimentConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        self.estimator_spec().validate()?;
        self.transform_spec().validate()?;
        if self.estimator != EstimatorChoice::Dfpo && self.transform != TransformKind::Identity {
            return Err(Error::Config(format!(
                "transform {} requires estimator = dfpo",
                self.transform.name()
            )));
        }
        match self.scenario {
            ScenarioKind::ToyUnified => {
                if self.mode == SamplingMode::Replay && self.group_size != 3 {
                    return Err(Error::Config(
                        "toy_unified replays its three fixed trajectories; group_size must be 3".into(),
                    ));
                }
            }
            ScenarioKind::MinimalPrefix | ScenarioKind::ClipBreak => {
                if self.mode != SamplingMode::Replay {
                    return Err(Error::Config(format!(
                        "{} is a constructed replay scenario",
                        self.scenario.name()
                    )));
                }
                if self.group_size != 2 {
                    return Err(Error::Config(format!(
                        "{} uses a group of 2 trajectories",
                        self.scenario.name()
                    )));
                }
            }
        }
        if self.scenario == ScenarioKind::MinimalPrefix && (self.rho.len() != 2 || self.lambda.len() != 2) {
            return Err(Error::Config("minimal_prefix needs rho and lambda of length 2".into()));
        }
        if self.scenario == ScenarioKind::ClipBreak && self.sweep_w.is_empty() {
            return Err(Error::Config("clip_break needs a nonempty sweep_w".into()));
        }
        Ok(())
    }

    /// Estimator parameters; the decoupled estimator runs its pipeline on
    /// GSPO-style clipped sequence weights.
    pub fn estimator_spec(&self) -> EstimatorSpec {
        let family = self.estimator.family().unwrap_or(EstimatorFamily::GspoClipped);
        EstimatorSpec::new(family, self.clip_eps, self.length_norm)
    }

    pub fn transform_spec(&self) -> TransformSpec {
        TransformSpec {
            kind: self.transform,
            floor_eps: self.floor_eps,
            stop_grad: true,
            on_raw: self.transform_on_raw,
        }
    }

    /// Human-readable estimator label, e.g. `dfpo(min_replace)`.
    pub fn estimator_label(&self) -> String {
        match self.estimator {
            EstimatorChoice::Dfpo => format!("dfpo({})", self.transform.name()),
            other => other.family().expect("family").name().to_string(),
        }
    }
}
