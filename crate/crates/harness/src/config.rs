//! Run configuration and its text format.
//!
//! ```text
//! file    := line*
//! line    := blank | comment | section | entry
//! comment := '#' any*
//! section := '[' key ']'            keys below it get "key." prepended
//! entry   := key '=' value          surrounding whitespace is trimmed
//! key     := name ('.' name)*       name := [a-z0-9_]+
//! ```
//!
//! Lists are comma-separated, booleans are `true|false|on|off`. Every key
//! may appear at most once; unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use sesa_core::backbone::{DenoiserConfig, NoiseSchedule};
use sesa_core::enhance::IndexRule;
use sesa_core::fusion::FusionConfig;
use sesa_core::pipeline::EnhanceConfig;

use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Respaced steps used by the sampler.
    pub sample_steps: usize,
    /// Bound on the sampler's implied clean latent; 0 disables clipping.
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Samples in the fixed-noise probe used to report loss before and after.
    pub probe_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
    pub embed_extent: usize,
    pub embed_grid: usize,
    /// 0 means one pass over the whole sets.
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    /// Luminance threshold applied before embedding; negative disables it.
    pub binarize: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticsConfig {
    pub captioner_url: String,
    pub extractor_url: String,
    pub model: String,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Fixture table for `mock:` endpoints; empty for none.
    pub fixtures: String,
    pub parallelism: usize,
    pub max_field_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub image_extent: usize,
    pub condition_channels: usize,
    pub schedule: ScheduleConfig,
    pub fusion: FusionConfig,
    pub enhance: EnhanceConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub semantics: SemanticsConfig,
}

pub const METRIC_KEYS: [&str; 4] = ["fid", "kid", "fid_h", "kid_h"];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: DenoiserConfig::default(),
            image_extent: 64,
            condition_channels: 1,
            schedule: ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02, sample_steps: 50, clip: 1.0 },
            fusion: FusionConfig::default(),
            enhance: EnhanceConfig::default(),
            train: TrainConfig { epochs: 30, batch: 2, lr: 1e-5, weight_decay: 0.01, seed: 0, probe_size: 16 },
            data: DataConfig { count: 200 },
            eval: EvalConfig {
                metrics: vec!["fid".into(), "kid".into()],
                embed_extent: 16,
                embed_grid: 4,
                kid_subset_size: 0,
                kid_subsets: 1,
                binarize: -1.0,
            },
            semantics: SemanticsConfig {
                captioner_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
                extractor_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
                model: "default".into(),
                timeout_ms: 30_000,
                retries: 2,
                fixtures: String::new(),
                parallelism: 4,
                max_field_len: 1024,
            },
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" => Ok(true),
        "false" | "off" => Ok(false),
        _ => Err(format!("{v:?} is not a boolean")),
    }
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let s = &self.schedule;
        let t = &self.train;
        let e = &self.eval;
        let se = &self.semantics;
        vec![
            ("model.latent_extent", m.latent_extent.to_string()),
            ("model.latent_channels", m.latent_channels.to_string()),
            ("model.channels", list(&m.channels)),
            ("model.attention_resolutions", list(&m.attention_resolutions)),
            ("model.heads", m.heads.to_string()),
            ("model.text_width", m.text_width.to_string()),
            ("model.time_width", m.time_width.to_string()),
            ("model.max_tokens", m.max_tokens.to_string()),
            ("model.image_extent", self.image_extent.to_string()),
            ("model.condition_channels", self.condition_channels.to_string()),
            ("schedule.steps", s.steps.to_string()),
            ("schedule.beta_start", format!("{:?}", s.beta_start)),
            ("schedule.beta_end", format!("{:?}", s.beta_end)),
            ("schedule.sample_steps", s.sample_steps.to_string()),
            ("schedule.clip", format!("{:?}", s.clip)),
            ("fusion.enabled", self.fusion.enabled.to_string()),
            ("fusion.normalize", self.fusion.normalize.to_string()),
            ("fusion.per_level", self.fusion.per_level.to_string()),
            ("fusion.transpose", self.fusion.transpose.to_string()),
            ("enhance.alpha", format!("{:?}", self.enhance.alpha)),
            ("enhance.rule", self.enhance.rule.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.seed", t.seed.to_string()),
            ("train.probe_size", t.probe_size.to_string()),
            ("data.count", self.data.count.to_string()),
            ("eval.metrics", list(&e.metrics)),
            ("eval.embed_extent", e.embed_extent.to_string()),
            ("eval.embed_grid", e.embed_grid.to_string()),
            ("eval.kid_subset_size", e.kid_subset_size.to_string()),
            ("eval.kid_subsets", e.kid_subsets.to_string()),
            ("eval.binarize", format!("{:?}", e.binarize)),
            ("semantics.captioner_url", se.captioner_url.clone()),
            ("semantics.extractor_url", se.extractor_url.clone()),
            ("semantics.model", se.model.clone()),
            ("semantics.timeout_ms", se.timeout_ms.to_string()),
            ("semantics.retries", se.retries.to_string()),
            ("semantics.fixtures", se.fixtures.clone()),
            ("semantics.parallelism", se.parallelism.to_string()),
            ("semantics.max_field_len", se.max_field_len.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "model.latent_extent" => m.latent_extent = parse(v)?,
            "model.latent_channels" => m.latent_channels = parse(v)?,
            "model.channels" => m.channels = parse_list(v)?,
            "model.attention_resolutions" => m.attention_resolutions = parse_list(v)?,
            "model.heads" => m.heads = parse(v)?,
            "model.text_width" => m.text_width = parse(v)?,
            "model.time_width" => m.time_width = parse(v)?,
            "model.max_tokens" => m.max_tokens = parse(v)?,
            "model.image_extent" => self.image_extent = parse(v)?,
            "model.condition_channels" => self.condition_channels = parse(v)?,
            "schedule.steps" => self.schedule.steps = parse(v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse(v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse(v)?,
            "schedule.sample_steps" => self.schedule.sample_steps = parse(v)?,
            "schedule.clip" => self.schedule.clip = parse(v)?,
            "fusion.enabled" => self.fusion.enabled = parse_bool(v)?,
            "fusion.normalize" => self.fusion.normalize = parse_bool(v)?,
            "fusion.per_level" => self.fusion.per_level = parse_bool(v)?,
            "fusion.transpose" => self.fusion.transpose = parse_bool(v)?,
            "enhance.alpha" => self.enhance.alpha = parse(v)?,
            "enhance.rule" => self.enhance.rule = v.parse::<IndexRule>()?,
            "train.epochs" => self.train.epochs = parse(v)?,
            "train.batch" => self.train.batch = parse(v)?,
            "train.lr" => self.train.lr = parse(v)?,
            "train.weight_decay" => self.train.weight_decay = parse(v)?,
            "train.seed" => self.train.seed = parse(v)?,
            "train.probe_size" => self.train.probe_size = parse(v)?,
            "data.count" => self.data.count = parse(v)?,
            "eval.metrics" => self.eval.metrics = if v.is_empty() { Vec::new() } else { parse_list(v)? },
            "eval.embed_extent" => self.eval.embed_extent = parse(v)?,
            "eval.embed_grid" => self.eval.embed_grid = parse(v)?,
            "eval.kid_subset_size" => self.eval.kid_subset_size = parse(v)?,
            "eval.kid_subsets" => self.eval.kid_subsets = parse(v)?,
            "eval.binarize" => self.eval.binarize = parse(v)?,
            "semantics.captioner_url" => self.semantics.captioner_url = v.into(),
            "semantics.extractor_url" => self.semantics.extractor_url = v.into(),
            "semantics.model" => self.semantics.model = v.into(),
            "semantics.timeout_ms" => self.semantics.timeout_ms = parse(v)?,
            "semantics.retries" => self.semantics.retries = parse(v)?,
            "semantics.fixtures" => self.semantics.fixtures = v.into(),
            "semantics.parallelism" => self.semantics.parallelism = parse(v)?,
            "semantics.max_field_len" => self.semantics.max_field_len = parse(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then validated.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| HarnessError::Config { line, msg };
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            if let Some(name) = l.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err("unclosed section header".into()))?.trim();
                if !valid_key(name) {
                    return Err(err(format!("bad section name {name:?}")));
                }
                section = format!("{name}.");
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| err(format!("expected key = value, got {l:?}")))?;
            let key = format!("{section}{}", k.trim());
            if !valid_key(&key) {
                return Err(err(format!("bad key {key:?}")));
            }
            if !seen.insert(key.clone()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(&key, v.trim()).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        RunConfig::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)?)
    }

    pub fn clip(&self) -> Option<f64> {
        (self.schedule.clip > 0.0).then_some(self.schedule.clip)
    }

    pub fn latent_factor(&self) -> usize {
        self.image_extent / self.model.latent_extent
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config { line: 0, msg });
        self.model.validate().map_err(|e| HarnessError::Config { line: 0, msg: e.to_string() })?;
        let f = self.image_extent / self.model.latent_extent.max(1);
        if self.image_extent % self.model.latent_extent != 0 || !f.is_power_of_two() {
            return bad(format!("image extent {} is not a power-of-two multiple of the latent extent", self.image_extent));
        }
        if !matches!(self.condition_channels, 1 | 3) {
            return bad("condition channels must be 1 or 3".into());
        }
        self.noise_schedule().map_err(|e| HarnessError::Config { line: 0, msg: e.to_string() })?;
        let s = &self.schedule;
        if s.sample_steps == 0 || s.sample_steps > s.steps {
            return bad(format!("sample steps {} outside 1..={}", s.sample_steps, s.steps));
        }
        if !(s.clip.is_finite() && s.clip >= 0.0) {
            return bad(format!("clip {} must be finite and >= 0", s.clip));
        }
        if !(self.enhance.alpha.is_finite() && self.enhance.alpha >= 0.0) {
            return bad(format!("alpha {} must be finite and >= 0", self.enhance.alpha));
        }
        let t = &self.train;
        if t.batch == 0 || !(t.lr.is_finite() && t.lr > 0.0) || !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return bad("batch must be positive, lr positive and weight decay non-negative".into());
        }
        let e = &self.eval;
        if let Some(k) = e.metrics.iter().find(|k| !METRIC_KEYS.contains(&k.as_str())) {
            return bad(format!("unknown metric {k:?} (expected one of {METRIC_KEYS:?})"));
        }
        if e.embed_grid == 0 || e.embed_extent % e.embed_grid != 0 {
            return bad("embed extent must be a multiple of a positive grid".into());
        }
        if e.kid_subsets == 0 || self.semantics.parallelism == 0 {
            return bad("kid subsets and parallelism must be positive".into());
        }
        Ok(())
    }
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.split('.').all(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_'))
}
