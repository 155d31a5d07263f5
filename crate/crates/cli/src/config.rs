//! Run configuration: one JSON document covering every command, with
//! strict key checking, `--seed` and `--set key=value` overrides.

use std::path::Path;

use agcm_core::data::SceneSpec;
use agcm_core::network::NetworkConfig;
use agcm_core::training::TrainConfig;
use agcm_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

/// Synthetic scenes used by `synth`, and by `train`, `eval` and `ablate`
/// when no data directory is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    /// Size of the held-out split generated alongside the training scenes.
    pub eval_count: usize,
    pub scene: SceneSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 16,
            seed: 0,
            eval_count: 8,
            scene: SceneSpec::default(),
        }
    }
}

impl SynthConfig {
    /// Seed of the held-out split; disjoint from the training scenes.
    pub fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}

/// Predictor used by `eval` in place of a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// The ground-truth mask itself.
    GroundTruth,
    /// A constant 0.5 map.
    Half,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub baseline: Option<Baseline>,
}

/// Small AGCM instance checked against finite differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub prototypes: usize,
    pub edgeconv_layers: usize,
    pub k_nn: usize,
    pub edge_hidden: usize,
    pub heads: usize,
    pub seed: u64,
    pub h: f64,
    pub tolerance: f64,
    pub end_to_end_tolerance: f64,
    /// Name of an op whose backward rule is deliberately corrupted.
    pub fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 6,
            width: 6,
            prototypes: 3,
            edgeconv_layers: 2,
            k_nn: 2,
            edge_hidden: 8,
            heads: 2,
            seed: 0,
            h: 1e-5,
            tolerance: 1e-4,
            end_to_end_tolerance: 2e-4,
            fault: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// One seed for every stochastic component.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
        self.gradcheck.seed = seed;
    }

    /// Apply `a.b.c=value`. The key must already exist; the value is read as
    /// JSON and falls back to a plain string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{spec}` is not of the form key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override `{spec}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.synth.scene.validate()
    }
}
