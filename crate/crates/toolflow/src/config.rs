//! Run configuration: plain-text `key = value` files with `#` comments.
//! Unknown keys are rejected so typos fail loudly, and the normalized
//! content hash ties experiment reports to the exact configuration.

use crate::model::{Fusion, ModelConfig, SaLevel};
use crate::scene::Affordance;
use crate::sim::{RolloutConfig, RolloutMode};
use crate::synth::{DatasetConfig, SceneGenConfig, SensorSimConfig};
use crate::train::{LossWeights, TrainConfig};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: '{text}' is not 'key = value'")]
    BadLine { line: usize, text: String },
    #[error("unknown config key '{key}'; nearest known: {}", nearest.join(", "))]
    UnknownKey { key: String, nearest: Vec<String> },
    #[error("duplicate config key '{0}'")]
    DuplicateKey(String),
    #[error("key '{key}': cannot parse '{value}' as {ty}")]
    BadValue { key: String, value: String, ty: &'static str },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Every key the pipeline understands.
pub const KNOWN_KEYS: &[&str] = &[
    // dataset generation
    "data.kinds",
    "data.samples_per_kind",
    "data.size_scale_lo",
    "data.size_scale_hi",
    "data.pos_jitter",
    "data.points_per_object",
    "data.points_table",
    "data.points_executor",
    "data.distractors",
    "data.sensor.enabled",
    "data.sensor.pixel_noise",
    "data.sensor.depth_noise",
    "data.clean.radius",
    "data.clean.min_cluster",
    "data.crop.radius",
    "data.queries.total",
    "data.queries.ratio_tool",
    "data.queries.ratio_target",
    "data.frame_rate",
    // grounding
    "ground.n_min",
    "ground.kappa",
    "ground.tables_file",
    // model
    "model.d",
    "model.d_lang",
    "model.d_model",
    "model.heads",
    "model.layers",
    "model.ff_ratio",
    "model.pos_freqs",
    "model.steps_per_clip",
    "model.k_steps",
    "model.beta_lo",
    "model.beta_hi",
    "model.gamma_minsnr",
    "model.fusion",
    "model.sa.levels",
    "model.sa.ratio",
    "model.sa.radius",
    "model.sa.k",
    // training
    "train.steps",
    "train.batch",
    "train.lr",
    "train.clip_norm",
    "train.lambda_diff",
    "train.lambda_step",
    "train.lambda_acc",
    "train.lambda_mix",
    "train.huber_delta",
    "train.log_every",
    // rollout
    "rollout.mode",
    "rollout.max_steps",
    "rollout.reground_every_step",
    "rollout.obs_noise",
    "rollout.crop_radius",
    "rollout.seeds",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur.push(sub.min(prev[j] + 1).min(cur[j - 1] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine { line: lineno + 1, text: raw.to_string() })?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if !KNOWN_KEYS.contains(&key.as_str()) {
                let mut scored: Vec<(usize, &str)> =
                    KNOWN_KEYS.iter().map(|k| (edit_distance(&key, k), *k)).collect();
                scored.sort();
                return Err(ConfigError::UnknownKey {
                    key,
                    nearest: scored.iter().take(3).map(|(_, k)| k.to_string()).collect(),
                });
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        Ok(RunConfig { entries })
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        RunConfig::parse(&text)
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        debug_assert!(KNOWN_KEYS.contains(&key), "unknown key '{key}' queried");
        self.entries.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    fn get_parsed<T: std::str::FromStr>(
        &self,
        key: &str,
        default: T,
        ty: &'static str,
    ) -> Result<T, ConfigError> {
        debug_assert!(KNOWN_KEYS.contains(&key), "unknown key '{key}' queried");
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                ty,
            }),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.get_parsed(key, default, "float")
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.get_parsed(key, default, "unsigned integer")
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.get_parsed(key, default, "bool (true|false)")
    }

    /// FNV-1a hash of the normalized (sorted, trimmed) entries; ties emitted
    /// reports to the exact configuration that produced them.
    pub fn content_hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for (k, v) in &self.entries {
            for b in k.bytes().chain([b'='].into_iter()).chain(v.bytes()).chain([b'\n']) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        format!("{h:016x}")
    }

    /// Materialize the dataset-generation section.
    pub fn dataset_config(&self) -> Result<DatasetConfig, ConfigError> {
        let d = DatasetConfig::default();
        let kinds = match self.entries.get("data.kinds") {
            None => d.kinds,
            Some(list) => list
                .split(',')
                .map(|s| {
                    Affordance::parse(s.trim()).map_err(|_| ConfigError::BadValue {
                        key: "data.kinds".into(),
                        value: s.trim().to_string(),
                        ty: "affordance kind",
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        Ok(DatasetConfig {
            kinds,
            samples_per_kind: self.get_usize("data.samples_per_kind", d.samples_per_kind)?,
            gen: SceneGenConfig {
                size_scale_lo: self.get_f64("data.size_scale_lo", d.gen.size_scale_lo)?,
                size_scale_hi: self.get_f64("data.size_scale_hi", d.gen.size_scale_hi)?,
                pos_jitter: self.get_f64("data.pos_jitter", d.gen.pos_jitter)?,
                points_per_object: self
                    .get_usize("data.points_per_object", d.gen.points_per_object)?,
                points_table: self.get_usize("data.points_table", d.gen.points_table)?,
                points_executor: self.get_usize("data.points_executor", d.gen.points_executor)?,
                distractors: self.get_usize("data.distractors", d.gen.distractors)?,
            },
            sensor: SensorSimConfig {
                enabled: self.get_bool("data.sensor.enabled", d.sensor.enabled)?,
                pixel_noise: self.get_f64("data.sensor.pixel_noise", d.sensor.pixel_noise)?,
                depth_noise: self.get_f64("data.sensor.depth_noise", d.sensor.depth_noise)?,
            },
            clean_cluster_radius: self.get_f64("data.clean.radius", d.clean_cluster_radius)?,
            clean_min_cluster: self.get_usize("data.clean.min_cluster", d.clean_min_cluster)?,
            crop_radius: self.get_f64("data.crop.radius", d.crop_radius)?,
            total_queries: self.get_usize("data.queries.total", d.total_queries)?,
            query_ratio: (
                self.get_usize("data.queries.ratio_tool", d.query_ratio.0)?,
                self.get_usize("data.queries.ratio_target", d.query_ratio.1)?,
            ),
            frame_rate: self.get_f64("data.frame_rate", d.frame_rate)?,
        })
    }

    fn get_f64_list(&self, key: &str, n: usize, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        debug_assert!(KNOWN_KEYS.contains(&key), "unknown key '{key}' queried");
        let mut out: Vec<f64> = match self.entries.get(key) {
            None => default.to_vec(),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| ConfigError::BadValue {
                        key: key.to_string(),
                        value: s.trim().to_string(),
                        ty: "float list",
                    })
                })
                .collect::<Result<_, _>>()?,
        };
        // pad short lists with the last value so one scalar applies to all
        while out.len() < n {
            out.push(*out.last().unwrap());
        }
        out.truncate(n);
        Ok(out)
    }

    /// Materialize the model section.
    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let d = ModelConfig::default();
        let fusion = match self.get_str("model.fusion", "late").as_str() {
            "late" => Fusion::Late,
            "early" => Fusion::Early,
            other => {
                return Err(ConfigError::BadValue {
                    key: "model.fusion".into(),
                    value: other.to_string(),
                    ty: "fusion (early|late)",
                })
            }
        };
        let n_levels = self.get_usize("model.sa.levels", d.sa_levels.len())?;
        let def_ratio: Vec<f64> = d.sa_levels.iter().map(|l| l.ratio as f64).collect();
        let def_radius: Vec<f64> = d.sa_levels.iter().map(|l| l.radius).collect();
        let def_k: Vec<f64> = d.sa_levels.iter().map(|l| l.k as f64).collect();
        let def_width: Vec<f64> = d.sa_levels.iter().map(|l| l.width as f64).collect();
        let ratios = self.get_f64_list("model.sa.ratio", n_levels, &def_ratio)?;
        let radii = self.get_f64_list("model.sa.radius", n_levels, &def_radius)?;
        let ks = self.get_f64_list("model.sa.k", n_levels, &def_k)?;
        let widths: Vec<f64> = (0..n_levels)
            .map(|i| *def_width.get(i).unwrap_or(def_width.last().unwrap()))
            .collect();
        let sa_levels = (0..n_levels)
            .map(|i| SaLevel {
                ratio: ratios[i] as usize,
                radius: radii[i],
                k: ks[i] as usize,
                width: widths[i] as usize,
            })
            .collect();
        Ok(ModelConfig {
            d: self.get_usize("model.d", d.d)?,
            d_lang: self.get_usize("model.d_lang", d.d_lang)?,
            d_model: self.get_usize("model.d_model", d.d_model)?,
            heads: self.get_usize("model.heads", d.heads)?,
            layers: self.get_usize("model.layers", d.layers)?,
            ff_ratio: self.get_usize("model.ff_ratio", d.ff_ratio)?,
            pos_freqs: self.get_usize("model.pos_freqs", d.pos_freqs)?,
            m: self.get_usize("model.steps_per_clip", d.m)?,
            k_steps: self.get_usize("model.k_steps", d.k_steps)?,
            beta_lo: self.get_f64("model.beta_lo", d.beta_lo)?,
            beta_hi: self.get_f64("model.beta_hi", d.beta_hi)?,
            gamma_minsnr: self.get_f64("model.gamma_minsnr", d.gamma_minsnr)?,
            fusion,
            sa_levels,
            vocab: d.vocab,
        })
    }

    /// Materialize the loss-weight section. `wloss = false` disables
    /// motion-aware weighting (mixing scalar forced to zero).
    pub fn loss_weights(&self, wloss: bool) -> Result<LossWeights, ConfigError> {
        let d = LossWeights::default();
        Ok(LossWeights {
            lambda_diff: self.get_f64("train.lambda_diff", d.lambda_diff)?,
            lambda_step: self.get_f64("train.lambda_step", d.lambda_step)?,
            lambda_acc: self.get_f64("train.lambda_acc", d.lambda_acc)?,
            lambda_mix: if wloss { self.get_f64("train.lambda_mix", d.lambda_mix)? } else { 0.0 },
            huber_delta: self.get_f64("train.huber_delta", d.huber_delta)?,
            weight_floor: d.weight_floor,
        })
    }

    /// Materialize the training section.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, ConfigError> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            steps: self.get_usize("train.steps", d.steps)?,
            batch: self.get_usize("train.batch", d.batch)?,
            lr: self.get_f64("train.lr", d.lr)?,
            clip_norm: self.get_f64("train.clip_norm", d.clip_norm)?,
            log_every: self.get_usize("train.log_every", d.log_every)?,
            seed,
        })
    }

    /// Materialize the rollout section plus the configured mode.
    pub fn rollout_config(&self) -> Result<(RolloutConfig, RolloutMode), ConfigError> {
        let d = RolloutConfig::default();
        let mode_str = self.get_str("rollout.mode", "closed_loop");
        let mode = RolloutMode::parse(&mode_str).ok_or_else(|| ConfigError::BadValue {
            key: "rollout.mode".into(),
            value: mode_str,
            ty: "mode (closed_loop|open_loop|oracle)",
        })?;
        Ok((
            RolloutConfig {
                max_steps: self.get_usize("rollout.max_steps", d.max_steps)?,
                obs_noise: self.get_f64("rollout.obs_noise", d.obs_noise)?,
                reground_every_step: self
                    .get_bool("rollout.reground_every_step", d.reground_every_step)?,
                crop_radius: self.get_f64("rollout.crop_radius", d.crop_radius)?,
            },
            mode,
        ))
    }

    pub fn rollout_seeds(&self) -> Result<usize, ConfigError> {
        self.get_usize("rollout.seeds", 10)
    }
}
