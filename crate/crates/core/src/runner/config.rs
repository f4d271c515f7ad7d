use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::adapter::AdapterConfig;
use crate::alignment::SaPlacement;
use crate::decoder::{AdapterKind, DecoderConfig};
use crate::synth::SynthSpec;
use crate::{Error, Result};

/// Where the alignment target comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SaTarget {
    /// `+1/-1` block affinity of the planted entity labels.
    #[default]
    Planted,
    /// Cosine affinity of the raw frame features.
    Features,
}

/// Everything a run needs. Keys are addressed with dotted paths such as
/// `lambda`, `adapter.n_slots` or `synth.domain_shift.bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<String>,
    pub lambda: f64,
    pub sa_placement: SaPlacement,
    pub sa_target: SaTarget,
    pub mask_diagonal: bool,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Steps of base-model training on a separate synthetic stream before
    /// the base is frozen.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Train the base together with the tuning parameters.
    pub full_finetune: bool,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub clamp_inverted: bool,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let decoder = DecoderConfig::default();
        Self {
            seed: 0,
            output_dir: None,
            lambda: 0.1,
            sa_placement: SaPlacement::LastLayer,
            sa_target: SaTarget::Planted,
            mask_diagonal: false,
            epochs: 5,
            lr: 5e-5,
            weight_decay: 0.01,
            batch_size: 8,
            n_train: 2000,
            n_eval: 200,
            pretrain_steps: 2000,
            pretrain_lr: 1e-3,
            full_finetune: false,
            checkpoint_every: 0,
            clamp_inverted: false,
            adapter: AdapterConfig {
                model_dim: decoder.model_dim,
                ..AdapterConfig::default()
            },
            decoder,
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    /// Small configuration sized for single-core CPU runs of a few minutes:
    /// 4x4 token grids, a 4-layer width-32 decoder, and learning rates
    /// suited to that scale.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.synth.n_tokens = 16;
        c.decoder = DecoderConfig {
            n_layers: 4,
            model_dim: 32,
            n_heads: 2,
            mlp_dim: 64,
            max_positions: 512,
            adapter_layers: vec![1],
            lora_layers: vec![2, 3, 4],
            lora_rank: 4,
            lora_alpha: 8.0,
            ..DecoderConfig::default()
        };
        c.adapter = AdapterConfig {
            model_dim: 32,
            bottleneck_dim: 16,
            n_heads: 2,
            ..AdapterConfig::default()
        };
        c.lr = 3e-3;
        c.epochs = 1;
        c.batch_size = 4;
        c.n_train = 1200;
        c.n_eval = 100;
        c.pretrain_steps = 3000;
        c.pretrain_lr = 2e-3;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::config("preset", format!("unknown preset `{other}` (expected default or desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter.validate().map_err(|e| prefixed("adapter", e))?;
        self.decoder.validate().map_err(|e| prefixed("decoder", e))?;
        self.synth.validate().map_err(|e| prefixed("synth", e))?;
        let finite_pos = [("lr", self.lr), ("pretrain_lr", self.pretrain_lr)];
        for (k, v) in finite_pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be finite and > 0"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        for (k, v) in [("epochs", self.epochs), ("batch_size", self.batch_size), ("n_train", self.n_train), ("n_eval", self.n_eval)] {
            if v == 0 {
                return Err(Error::config(k, "must be >= 1"));
            }
        }
        if self.adapter.model_dim != self.decoder.model_dim {
            return Err(Error::config(
                "adapter.model_dim",
                format!("{} differs from decoder.model_dim {}", self.adapter.model_dim, self.decoder.model_dim),
            ));
        }
        if self.decoder.feature_dim != self.synth.feature_dim {
            return Err(Error::config("decoder.feature_dim", "must equal synth.feature_dim"));
        }
        if self.decoder.frames_per_video != self.synth.n_frames {
            return Err(Error::config("decoder.frames_per_video", "must equal synth.n_frames"));
        }
        if self.decoder.n_query_words != self.synth.n_types {
            return Err(Error::config("decoder.n_query_words", "must equal synth.n_types"));
        }
        let no_adapter = self.decoder.adapter_kind == AdapterKind::None || self.decoder.adapter_layers.is_empty();
        if no_adapter && self.decoder.lora_layers.is_empty() && !self.full_finetune {
            return Err(Error::config("decoder.adapter_kind", "no adapter and no LoRA layers leaves nothing to train"));
        }
        Ok(())
    }

    /// Parses `text` as a JSON object (nested or with dotted keys) or as
    /// `key = value` lines, applied on top of `base`.
    pub fn parse_onto(base: Self, text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let pairs = if trimmed.starts_with('{') {
            let v: Value = serde_json::from_str(trimmed).map_err(|e| Error::config("<file>", e.to_string()))?;
            let mut out = Vec::new();
            flatten("", &v, &mut out)?;
            out
        } else {
            parse_lines(text)?
        };
        apply(base, pairs)
    }

    pub fn from_file(base: Self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_onto(base, &text)
    }

    /// Applies `key=value` overrides.
    pub fn with_overrides<S: AsRef<str>>(self, sets: &[S]) -> Result<Self> {
        let pairs = sets.iter().map(|s| split_pair(s.as_ref())).collect::<Result<Vec<_>>>()?;
        apply(self, pairs)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::Config { key, msg } => Error::Config {
            key: format!("{section}.{key}"),
            msg,
        },
        other => other,
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn split_pair(line: &str) -> Result<(String, Value)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::config(line.trim(), "expected key=value"))?;
    let key = k.trim();
    if key.is_empty() {
        return Err(Error::config("<empty>", "missing key"));
    }
    Ok((key.to_string(), parse_value(v.trim())))
}

fn parse_lines(text: &str) -> Result<Vec<(String, Value)>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(split_pair)
        .collect()
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) -> Result<()> {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                if child.is_object() {
                    flatten(&key, child, out)?;
                } else {
                    out.push((key, child.clone()));
                }
            }
            Ok(())
        }
        _ if prefix.is_empty() => Err(Error::config("<file>", "top level must be an object")),
        other => {
            out.push((prefix.to_string(), other.clone()));
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = match cur {
            Value::Object(m) => m,
            // an unset optional section, e.g. synth.domain_shift = null
            Value::Null => {
                *cur = Value::Object(Map::new());
                cur.as_object_mut().expect("just set")
            }
            _ => return Err(Error::config(key, "not a section")),
        };
        if i + 1 == parts.len() {
            if !obj.contains_key(*p) && !optional_leaf(key) {
                return Err(Error::config(key, "unknown key"));
            }
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*p).ok_or_else(|| Error::config(key, "unknown key"))?;
    }
    Ok(())
}

/// Leaves of sections that serialise as `null` when unset.
fn optional_leaf(key: &str) -> bool {
    matches!(key, "synth.domain_shift.angle" | "synth.domain_shift.bias")
}

fn apply(base: RunConfig, pairs: Vec<(String, Value)>) -> Result<RunConfig> {
    let mut root = serde_json::to_value(&base)?;
    for (key, value) in pairs {
        set_path(&mut root, &key, value)?;
        if key.starts_with("synth.domain_shift.") {
            let ds = &mut root["synth"]["domain_shift"];
            let defaults = serde_json::to_value(crate::synth::DomainShift::default())?;
            for f in ["angle", "bias"] {
                if ds.get(f).is_none() {
                    ds[f] = defaults[f].clone();
                }
            }
        }
        serde_json::from_value::<RunConfig>(root.clone()).map_err(|e| Error::config(&key, e.to_string()))?;
    }
    let cfg: RunConfig = serde_json::from_value(root)?;
    cfg.validate()?;
    Ok(cfg)
}
