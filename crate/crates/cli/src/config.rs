use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use vinet_core::data::SynthOptions;
use vinet_core::model::{FusionMode, ModelConfig, Preset};
use vinet_core::train::{EvalConfig, TrainConfig};

/// Settings for the synthetic data generated when no `--data` is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub videos: usize,
    pub val_videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_informative: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 4,
            val_videos: 2,
            frames: 8,
            height: 32,
            width: 64,
            audio_informative: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn options(&self, videos: usize, seed: u64) -> SynthOptions {
        SynthOptions {
            audio_informative: self.audio_informative,
            ..SynthOptions::new(videos, self.frames, self.height, self.width, seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            model: ModelConfig::preset(preset),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Flag values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub clip_size: Option<usize>,
    pub fusion: Option<FusionMode>,
    /// `key.path=value` pairs; values are parsed as JSON, falling back to a string.
    pub sets: Vec<String>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_set(set: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{set}' is not of the form key=value"))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        bail!("override key '{key}' has an empty component");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

fn nested(path: &[String], value: Value) -> Value {
    path.iter().rev().fold(value, |v, k| {
        let mut m = Map::new();
        m.insert(k.clone(), v);
        Value::Object(m)
    })
}

/// Preset defaults, then the config file, then `--set` overrides, then flags.
/// The result is validated before it is returned.
pub fn resolve(config_path: Option<&Path>, flags: &FlagOverrides) -> Result<RunConfig> {
    let file = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            if !v.is_object() {
                bail!("config {} must hold a JSON object", p.display());
            }
            v
        }
        None => Value::Object(Map::new()),
    };
    let sets = flags.sets.iter().map(|s| parse_set(s)).collect::<Result<Vec<_>>>()?;

    let preset_value = sets
        .iter()
        .rev()
        .find(|(p, _)| p == &["model", "preset"])
        .map(|(_, v)| v.clone())
        .or_else(|| file.get("model").and_then(|m| m.get("preset")).cloned());
    let preset = match (flags.preset, preset_value) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v).context("model.preset must be \"paper\" or \"toy\"")?,
        (None, None) => Preset::Toy,
    };

    let mut merged = serde_json::to_value(RunConfig::preset(preset)).expect("config serializes");
    merge(&mut merged, file);
    for (path, value) in sets {
        merge(&mut merged, nested(&path, value));
    }
    let mut flag_values = vec![(vec!["model", "preset"], serde_json::to_value(preset).expect("preset serializes"))];
    if let Some(seed) = flags.seed {
        for section in ["train", "eval", "synth"] {
            flag_values.push((vec![section, "seed"], Value::from(seed)));
        }
    }
    if let Some(c) = flags.clip_size {
        flag_values.push((vec!["model", "clip_len"], Value::from(c)));
    }
    if let Some(f) = flags.fusion {
        flag_values.push((vec!["model", "fusion_mode"], serde_json::to_value(f).expect("mode serializes")));
    }
    for (path, value) in flag_values {
        let path: Vec<String> = path.into_iter().map(str::to_string).collect();
        merge(&mut merged, nested(&path, value));
    }

    let cfg: RunConfig = serde_json::from_value(merged).context("invalid configuration")?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.eval.sauc_splits == 0 || !(cfg.eval.sigma > 0.0) || !(cfg.eval.kl_eps > 0.0) {
        bail!("eval needs sauc_splits >= 1, sigma > 0 and kl_eps > 0");
    }
    let s = &cfg.synth;
    if s.videos == 0 || s.val_videos == 0 || s.frames == 0 || s.height == 0 || s.width == 0 {
        bail!("synth sizes must be positive");
    }
    Ok(cfg)
}
