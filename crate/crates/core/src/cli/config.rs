use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::saliency::ProbeOptions;
use crate::seq2seq::{EncoderKind, ModelConfig, Pooling};
use crate::synthworld::{InputMode, SynthConfig};
use crate::training::TrainConfig;

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data_seed", "1", "seed of the synthetic dataset"),
    ("n_train", "2000", "training scenes"),
    ("n_val", "200", "validation scenes"),
    ("n_test", "200", "test scenes"),
    ("grid", "4", "cells per grid side (g)"),
    ("frames", "8", "frames per scene (m); 1 for images"),
    ("min_objects", "1", "fewest objects per scene"),
    ("max_objects", "3", "most objects per scene"),
    (
        "min_span",
        "4",
        "fewest frames on either side of a \"then\" split",
    ),
    ("noise", "0.05", "Gaussian noise on every cell feature"),
    (
        "pooling",
        "mean",
        "grid pooling into item descriptors: mean | sum",
    ),
    ("codebook_seed", "1234", "seed of the feature codebook"),
    ("code_scale", "16", "standard deviation of codebook entries"),
    (
        "code_cosine",
        "0.3",
        "largest allowed |cosine| between codes",
    ),
    (
        "background_scale",
        "0.1",
        "background code norm relative to object codes",
    ),
    (
        "input_mode",
        "video",
        "encoder input: video (frames) | image (row-major cells)",
    ),
    ("d_feat", "24", "descriptor dimension"),
    ("d_red", "16", "reduced descriptor dimension"),
    ("d_emb", "16", "word embedding size"),
    ("hidden", "64", "LSTM hidden size"),
    ("encoder", "lstm", "encoder variant: lstm | mean"),
    (
        "attention",
        "0",
        "soft-attention size; 0 disables attention",
    ),
    ("init_seed", "7", "seed of the parameter initialisation"),
    ("learning_rate", "0.0005", "Adam learning rate"),
    ("batch_size", "4", "examples per update"),
    ("epochs", "100", "passes over the training set"),
    ("clip_norm", "5", "global gradient-norm clip"),
    ("train_seed", "7", "seed of the per-epoch shuffle"),
    ("max_caption_len", "20", "greedy decoding limit"),
    (
        "probe_batch",
        "512",
        "probe sequences per batched forward pass",
    ),
    ("eval_seed", "7", "seed of the random pointing baseline"),
    ("heatmap_px", "16", "pixels per cell in exported graymaps"),
];

/// Flat `key=value` configuration. Lines starting with `#` are comments.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            config
                .set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` assignment.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .map(|(k, _, _)| *k)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        self.values.insert(slot, value.to_string());
        Ok(())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = &self.values[key];
        raw.parse()
            .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
    }

    /// Checks every value by building all derived configurations.
    pub fn validate(&self) -> Result<()> {
        self.synth()?.validate()?;
        self.model()?.validate()?;
        self.train()?.validate()?;
        self.eval()?;
        for key in ["n_train", "n_val", "n_test", "heatmap_px"] {
            if self.get::<usize>(key)? == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        Ok(())
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            grid: self.get("grid")?,
            frames: self.get("frames")?,
            min_objects: self.get("min_objects")?,
            max_objects: self.get("max_objects")?,
            noise: self.get("noise")?,
            min_span: self.get("min_span")?,
            d_feat: self.get("d_feat")?,
            pooling: self.get::<String>("pooling")?.parse::<Pooling>()?,
            codebook_seed: self.get("codebook_seed")?,
            code_scale: self.get("code_scale")?,
            code_cosine: self.get("code_cosine")?,
            background_scale: self.get("background_scale")?,
        })
    }

    pub fn splits(&self) -> Result<(u64, usize, usize, usize)> {
        Ok((
            self.get("data_seed")?,
            self.get("n_train")?,
            self.get("n_val")?,
            self.get("n_test")?,
        ))
    }

    pub fn input_mode(&self) -> Result<InputMode> {
        self.get::<String>("input_mode")?.parse()
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let attention: usize = self.get("attention")?;
        Ok(ModelConfig {
            d_feat: self.get("d_feat")?,
            d_red: self.get("d_red")?,
            d_emb: self.get("d_emb")?,
            hidden: self.get("hidden")?,
            encoder: self.get::<String>("encoder")?.parse::<EncoderKind>()?,
            attention: (attention > 0).then_some(attention),
        })
    }

    pub fn init_seed(&self) -> Result<u64> {
        self.get("init_seed")
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            learning_rate: self.get("learning_rate")?,
            batch_size: self.get("batch_size")?,
            epochs: self.get("epochs")?,
            clip_norm: self.get("clip_norm")?,
            seed: self.get("train_seed")?,
            ..TrainConfig::default()
        })
    }

    pub fn eval(&self) -> Result<EvalOptions> {
        let max_batch: usize = self.get("probe_batch")?;
        if max_batch == 0 {
            return Err(Error::Config("probe_batch must be positive".into()));
        }
        let max_caption_len: usize = self.get("max_caption_len")?;
        if max_caption_len == 0 {
            return Err(Error::Config("max_caption_len must be positive".into()));
        }
        Ok(EvalOptions {
            seed: self.get("eval_seed")?,
            mode: self.input_mode()?,
            max_caption_len,
            probe: ProbeOptions {
                spatial: true,
                max_batch,
            },
        })
    }

    pub fn heatmap_px(&self) -> Result<usize> {
        self.get("heatmap_px")
    }

    /// All keys in declaration order, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _, _) in KEYS {
            writeln!(out, "{key}={}", self.values[key]).unwrap();
        }
        out
    }

    /// Writes the resolved configuration as `config.txt` into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("config.txt"), self.to_text())?;
        Ok(())
    }
}
