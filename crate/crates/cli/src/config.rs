//! Run configuration: a sectioned TOML file plus `--set section.key=value`
//! overrides. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use agileir::training::TrainConfig;
use agileir::{gswa::AttentionKind, ModelConfig};
use serde::Deserialize;

use crate::CliError;

/// Every field is optional; absent ones take the defaults documented in
/// `configs/default.toml`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drawn from the OS when absent everywhere.
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub paths: PathsSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub channels: Option<usize>,
    pub num_blocks: Option<usize>,
    pub layers_per_block: Option<usize>,
    pub heads: Option<usize>,
    pub qk_dim: Option<usize>,
    pub window: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub scale: Option<usize>,
    pub img_range: Option<f64>,
    pub attention: Option<String>,
    pub cascade: Option<bool>,
    pub qkv_bias: Option<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "agileir".into(),
            channels: None,
            num_blocks: None,
            layers_per_block: None,
            heads: None,
            qk_dim: None,
            window: None,
            mlp_ratio: None,
            scale: None,
            img_range: None,
            attention: None,
            cascade: None,
            qkv_bias: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr0: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub weight_decay: Option<f64>,
    pub eps: Option<f64>,
    pub batch: Option<usize>,
    pub patch_lr: Option<usize>,
    pub iters: Option<usize>,
    pub milestones: Option<Vec<usize>>,
    pub charb_eps: Option<f64>,
    pub augment: Option<bool>,
    /// Batch queue depth; 0 samples on the training thread.
    pub prefetch: Option<usize>,
    pub clip_grad: Option<f64>,
    pub log_every: Option<usize>,
    pub eval_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
}

fn set<T: Copy>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig, CliError> {
        let mut cfg = ModelConfig::preset(&self.preset)?;
        set(&mut cfg.channels, self.channels);
        set(&mut cfg.num_blocks, self.num_blocks);
        set(&mut cfg.layers_per_block, self.layers_per_block);
        set(&mut cfg.heads, self.heads);
        set(&mut cfg.qk_dim, self.qk_dim);
        set(&mut cfg.window, self.window);
        set(&mut cfg.mlp_ratio, self.mlp_ratio);
        set(&mut cfg.scale, self.scale);
        set(&mut cfg.img_range, self.img_range);
        set(&mut cfg.cascade, self.cascade);
        set(&mut cfg.qkv_bias, self.qkv_bias);
        if let Some(kind) = &self.attention {
            cfg.attention = AttentionKind::parse(kind)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainSection {
    pub fn resolve(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
        set(&mut cfg.lr0, self.lr0);
        set(&mut cfg.beta1, self.beta1);
        set(&mut cfg.beta2, self.beta2);
        set(&mut cfg.weight_decay, self.weight_decay);
        set(&mut cfg.eps, self.eps);
        set(&mut cfg.batch, self.batch);
        set(&mut cfg.patch_lr, self.patch_lr);
        set(&mut cfg.iters, self.iters);
        set(&mut cfg.charb_eps, self.charb_eps);
        set(&mut cfg.augment, self.augment);
        set(&mut cfg.log_every, self.log_every);
        set(&mut cfg.eval_every, self.eval_every);
        if let Some(m) = &self.milestones {
            cfg.milestones = Some(m.clone());
        }
        if let Some(depth) = self.prefetch {
            cfg.prefetch = (depth > 0).then_some(depth);
        }
        if self.clip_grad.is_some() {
            cfg.clip_grad = self.clip_grad;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `text` and applies `overrides` (`section.key=value`, value in
/// TOML syntax; bare words are taken as strings).
pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table: toml::Table = text.parse().map_err(|e| CliError::usage(format!("config: {e}")))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("override `{item}` is not key=value")))?;
        let value = parse_value(raw.trim());
        insert(&mut table, key.trim(), value)?;
    }
    RunConfig::deserialize(table).map_err(|e| CliError::usage(format!("config: {e}")))
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::usage(format!("cannot read config `{}`: {e}", p.display())))?,
        None => String::new(),
    };
    parse(&text, overrides)
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn insert(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::usage(format!("empty override key `{key}`")))?;
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file() {
        let cfg = parse("", &[]).unwrap();
        assert_eq!(cfg.model.resolve().unwrap(), ModelConfig::preset("agileir").unwrap());
        assert_eq!(cfg.train.resolve(3).unwrap(), TrainConfig { seed: 3, ..TrainConfig::default() });
    }

    #[test]
    fn overrides_win_over_file() {
        let text = "seed = 1\n[model]\npreset = \"agileir\"\n[train]\niters = 10\n";
        let cfg = parse(text, &["model.preset=agileir_plus".into(), "train.iters=20".into(), "seed=9".into()]).unwrap();
        assert_eq!(cfg.model.preset, "agileir_plus");
        assert_eq!(cfg.train.iters, Some(20));
        assert_eq!(cfg.seed, Some(9));
        let cfg = parse("", &["train.milestones=[5, 7]".into(), "train.prefetch=0".into()]).unwrap();
        let train = cfg.train.resolve(0).unwrap();
        assert_eq!(train.milestones, Some(vec![5, 7]));
        assert_eq!(train.prefetch, None);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("[model]\nwidth = 3\n", &[]).is_err());
        assert!(parse("", &["train.speed=3".into()]).is_err());
        assert!(parse("", &["nonsense".into()]).is_err());
        assert!(parse("[train]\niters = \"many\"\n", &[]).is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = load(Some(&path), &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.model.resolve().unwrap();
            cfg.train.resolve(0).unwrap();
        }
    }
}
