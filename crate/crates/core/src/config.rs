//! Flat `key=value` run configuration.
//!
//! One setting per line; blank lines and lines starting with `#` are
//! ignored. Unknown keys and repeated keys are errors. [`RunConfig::to_text`]
//! writes every key, and parsing that text yields an identical config.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{DatasetSpec, ManipulationFamily, Protocol, Quality};
use crate::error::{Error, Result};
use crate::lora::ProjectionTarget;
use crate::model::ViTConfig;
use crate::train::TrainConfig;

/// Name of the resolved config written next to run outputs.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_real: usize,
    pub n_fake_per_family: usize,
    pub base_seed: u64,
    /// Families, tiers and domains materialized by dataset generation.
    pub families: Vec<ManipulationFamily>,
    pub qualities: Vec<Quality>,
    pub domains: Vec<u32>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_real: 200,
            n_fake_per_family: 200,
            base_seed: 0,
            families: ManipulationFamily::ALL.to_vec(),
            qualities: vec![Quality::Hq, Quality::Lq],
            domains: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ViTConfig,
    /// Optimizer, loss and adapter settings.
    pub train: TrainConfig,
    /// Inject adapters; otherwise only the head trains.
    pub lora_enabled: bool,
    pub freeze_head: bool,
    pub eval_batch_size: usize,
    pub data: DataConfig,
    /// Sides of a single train/eval run.
    pub protocol: Protocol,
    /// Family trained and tested by the cross-domain harness.
    pub xdataset_family: ManipulationFamily,
    /// Number of shifted test domains (`1..=k`).
    pub xdataset_domains: u32,
    pub ablation_seeds: Vec<u64>,
    /// Ablation baseline trains every backbone weight instead of the head.
    pub full_finetune_baseline: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::default(),
            train: TrainConfig::default(),
            lora_enabled: true,
            freeze_head: false,
            eval_batch_size: 100,
            data: DataConfig::default(),
            protocol: Protocol::leave_one_out(ManipulationFamily::Blend, Quality::Hq),
            xdataset_family: ManipulationFamily::Blend,
            xdataset_domains: 4,
            ablation_seeds: vec![0, 1, 2],
            full_finetune_baseline: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "model.image_size",
    "model.patch_size",
    "model.channels",
    "model.embed_dim",
    "model.depth",
    "model.heads",
    "model.mlp_ratio",
    "model.head_hidden",
    "model.seed",
    "lora.enabled",
    "lora.rank",
    "lora.scale",
    "lora.targets",
    "lora.init_std",
    "lora.seed",
    "loss.lambda",
    "loss.margin",
    "loss.center_policy",
    "loss.empty_class_policy",
    "train.learning_rate",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.adam_epsilon",
    "train.batch_size",
    "train.steps",
    "train.seed",
    "train.freeze_head",
    "eval.batch_size",
    "data.n_real",
    "data.n_fake_per_family",
    "data.base_seed",
    "data.families",
    "data.qualities",
    "data.domains",
    "protocol.train_families",
    "protocol.test_families",
    "protocol.quality",
    "protocol.train_domain",
    "protocol.test_domain",
    "xdataset.family",
    "xdataset.domains",
    "ablation.seeds",
    "ablation.full_finetune_baseline",
];

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| {
            let msg = e.to_string();
            let msg = msg.strip_prefix("invalid config: ").unwrap_or(&msg);
            Error::Config(format!("invalid value {value:?} for {key}: {msg}"))
        })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_one(key, v.trim())).collect()
}

impl RunConfig {
    /// Geometry and counts for one generated split.
    pub fn dataset_spec(&self, quality: Quality, domain_id: u32) -> DatasetSpec {
        DatasetSpec {
            n_real: self.data.n_real,
            n_fake_per_family: self.data.n_fake_per_family,
            quality,
            domain_id,
            base_seed: self.data.base_seed,
            image_size: self.model.image_size,
            channels: self.model.channels,
        }
    }

    /// The same config with every seed that drives a run set to `seed`.
    pub fn with_run_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.seed = seed;
        c.train.lora.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.dataset_spec(Quality::Hq, 0).validate()?;
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        if self.data.families.is_empty() || self.data.qualities.is_empty() || self.data.domains.is_empty() {
            return Err(Error::Config("data.families, data.qualities and data.domains must be non-empty".into()));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::Config("ablation.seeds must be non-empty".into()));
        }
        self.protocol.validate()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        let p = &self.protocol;
        Some(match key {
            "model.image_size" => m.image_size.to_string(),
            "model.patch_size" => m.patch_size.to_string(),
            "model.channels" => m.channels.to_string(),
            "model.embed_dim" => m.embed_dim.to_string(),
            "model.depth" => m.depth.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.mlp_ratio" => m.mlp_ratio.to_string(),
            "model.head_hidden" => m.head_hidden.to_string(),
            "model.seed" => m.seed.to_string(),
            "lora.enabled" => self.lora_enabled.to_string(),
            "lora.rank" => t.lora.rank.to_string(),
            "lora.scale" => t.lora.scale.to_string(),
            "lora.targets" => join(&t.lora.targets),
            "lora.init_std" => t.lora.init_std.to_string(),
            "lora.seed" => t.lora.seed.to_string(),
            "loss.lambda" => t.loss.lambda.to_string(),
            "loss.margin" => t.loss.margin.to_string(),
            "loss.center_policy" => t.loss.center_policy.to_string(),
            "loss.empty_class_policy" => t.loss.empty_class_policy.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.adam_epsilon" => t.adam_epsilon.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.freeze_head" => self.freeze_head.to_string(),
            "eval.batch_size" => self.eval_batch_size.to_string(),
            "data.n_real" => self.data.n_real.to_string(),
            "data.n_fake_per_family" => self.data.n_fake_per_family.to_string(),
            "data.base_seed" => self.data.base_seed.to_string(),
            "data.families" => join(&self.data.families),
            "data.qualities" => join(&self.data.qualities),
            "data.domains" => join(&self.data.domains),
            "protocol.train_families" => join(&p.train_families),
            "protocol.test_families" => join(&p.test_families),
            "protocol.quality" => p.quality.to_string(),
            "protocol.train_domain" => p.train_domain.to_string(),
            "protocol.test_domain" => p.test_domain.to_string(),
            "xdataset.family" => self.xdataset_family.to_string(),
            "xdataset.domains" => self.xdataset_domains.to_string(),
            "ablation.seeds" => join(&self.ablation_seeds),
            "ablation.full_finetune_baseline" => self.full_finetune_baseline.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let p = &mut self.protocol;
        match key {
            "model.image_size" => m.image_size = parse_one(key, v)?,
            "model.patch_size" => m.patch_size = parse_one(key, v)?,
            "model.channels" => m.channels = parse_one(key, v)?,
            "model.embed_dim" => m.embed_dim = parse_one(key, v)?,
            "model.depth" => m.depth = parse_one(key, v)?,
            "model.heads" => m.heads = parse_one(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse_one(key, v)?,
            "model.head_hidden" => m.head_hidden = parse_one(key, v)?,
            "model.seed" => m.seed = parse_one(key, v)?,
            "lora.enabled" => self.lora_enabled = parse_one(key, v)?,
            "lora.rank" => t.lora.rank = parse_one(key, v)?,
            "lora.scale" => t.lora.scale = parse_one(key, v)?,
            "lora.targets" => t.lora.targets = parse_list::<ProjectionTarget>(key, v)?,
            "lora.init_std" => t.lora.init_std = parse_one(key, v)?,
            "lora.seed" => t.lora.seed = parse_one(key, v)?,
            "loss.lambda" => t.loss.lambda = parse_one(key, v)?,
            "loss.margin" => t.loss.margin = parse_one(key, v)?,
            "loss.center_policy" => t.loss.center_policy = parse_one(key, v)?,
            "loss.empty_class_policy" => t.loss.empty_class_policy = parse_one(key, v)?,
            "train.learning_rate" => t.learning_rate = parse_one(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_one(key, v)?,
            "train.beta1" => t.beta1 = parse_one(key, v)?,
            "train.beta2" => t.beta2 = parse_one(key, v)?,
            "train.adam_epsilon" => t.adam_epsilon = parse_one(key, v)?,
            "train.batch_size" => t.batch_size = parse_one(key, v)?,
            "train.steps" => t.steps = parse_one(key, v)?,
            "train.seed" => t.seed = parse_one(key, v)?,
            "train.freeze_head" => self.freeze_head = parse_one(key, v)?,
            "eval.batch_size" => self.eval_batch_size = parse_one(key, v)?,
            "data.n_real" => self.data.n_real = parse_one(key, v)?,
            "data.n_fake_per_family" => self.data.n_fake_per_family = parse_one(key, v)?,
            "data.base_seed" => self.data.base_seed = parse_one(key, v)?,
            "data.families" => self.data.families = parse_list(key, v)?,
            "data.qualities" => self.data.qualities = parse_list(key, v)?,
            "data.domains" => self.data.domains = parse_list(key, v)?,
            "protocol.train_families" => p.train_families = parse_list(key, v)?,
            "protocol.test_families" => p.test_families = parse_list(key, v)?,
            "protocol.quality" => p.quality = parse_one(key, v)?,
            "protocol.train_domain" => p.train_domain = parse_one(key, v)?,
            "protocol.test_domain" => p.test_domain = parse_one(key, v)?,
            "xdataset.family" => self.xdataset_family = parse_one(key, v)?,
            "xdataset.domains" => self.xdataset_domains = parse_one(key, v)?,
            "ablation.seeds" => self.ablation_seeds = parse_list(key, v)?,
            "ablation.full_finetune_baseline" => self.full_finetune_baseline = parse_one(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key {key} set twice", n + 1)));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Every key, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            s.push_str(k);
            s.push('=');
            s.push_str(&self.get(k).expect("every listed key is readable"));
            s.push('\n');
        }
        s
    }

    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}
