//! Line-oriented `key = value` run configuration.
//!
//! ```text
//! # toy run
//! model.features = 64
//! optim.lr = 1e-3
//! seed = 7
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::chunking::Overlap;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Everything a training or inference run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub delta: f64,
    pub halving_interval: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    /// Training manifest; synthetic mixtures are generated when absent.
    pub manifest: Option<PathBuf>,
    pub synth_items: usize,
    pub synth_eval_items: usize,
    pub duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            delta: 0.1,
            halving_interval: 64,
            clip_norm: 5.0,
            epochs: 50,
            batch_size: 4,
            checkpoint_every: 1,
            manifest: None,
            synth_items: 200,
            synth_eval_items: 20,
            duration: 2.0,
            sample_rate: 8000,
            seed: 0,
            output_dir: PathBuf::from("run"),
        }
    }
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| Error::Config {
        line,
        key: key.to_string(),
        message: format!("cannot parse `{raw}`: {e}"),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, val)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    key: content.to_string(),
                    message: "expected `key = value`".into(),
                });
            };
            let (key, val) = (key.trim(), val.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config { line, key: key.into(), message: "duplicate key".into() });
            }
            c.set(line, key, val)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.features" => m.features = value(line, key, v)?,
            "model.kernel" => m.kernel = value(line, key, v)?,
            "model.stride" => m.stride = value(line, key, v)?,
            "model.padding" => m.padding = value(line, key, v)?,
            "model.chunk" => m.chunk = value(line, key, v)?,
            "model.overlap" => m.overlap = value::<Overlap>(line, key, v)?,
            "model.latent" => m.latent = value(line, key, v)?,
            "model.blocks" => m.blocks = value(line, key, v)?,
            "model.heads" => m.heads = value(line, key, v)?,
            "model.latent_layers" => m.latent_layers = value(line, key, v)?,
            "model.perceiving_layers" => m.perceiving_layers = value(line, key, v)?,
            "model.speakers" => m.speakers = value(line, key, v)?,
            "model.ffn_width" => m.ffn_width = value(line, key, v)?,
            "model.mask_ffw_width" => m.mask_ffw_width = value(line, key, v)?,
            "model.share_blocks" => m.share_blocks = value(line, key, v)?,
            "optim.lr" => self.lr = value(line, key, v)?,
            "optim.beta1" => self.beta1 = value(line, key, v)?,
            "optim.beta2" => self.beta2 = value(line, key, v)?,
            "optim.eps" => self.adam_eps = value(line, key, v)?,
            "optim.weight_decay" => self.weight_decay = value(line, key, v)?,
            "optim.delta" => self.delta = value(line, key, v)?,
            "optim.halving_interval" => self.halving_interval = value(line, key, v)?,
            "optim.clip_norm" => self.clip_norm = value(line, key, v)?,
            "train.epochs" => self.epochs = value(line, key, v)?,
            "train.batch_size" => self.batch_size = value(line, key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = value(line, key, v)?,
            "data.manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.synth_items" => self.synth_items = value(line, key, v)?,
            "data.synth_eval_items" => self.synth_eval_items = value(line, key, v)?,
            "data.duration" => self.duration = value(line, key, v)?,
            "data.sample_rate" => self.sample_rate = value(line, key, v)?,
            "seed" => self.seed = value(line, key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => {
                return Err(Error::Config { line, key: key.into(), message: "unknown key".into() });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let finite_pos = [("optim.lr", self.lr), ("optim.eps", self.adam_eps), ("data.duration", self.duration)];
        for (k, v) in finite_pos {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{k} must be a finite non-negative number, got {v}")));
            }
        }
        for (k, v) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        for (k, v) in [("optim.weight_decay", self.weight_decay), ("optim.delta", self.delta), ("optim.clip_norm", self.clip_norm)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{k} must be a finite non-negative number, got {v}")));
            }
        }
        for (k, v) in [
            ("optim.halving_interval", self.halving_interval),
            ("train.batch_size", self.batch_size),
            ("train.checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{k} must be at least 1")));
            }
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("data.sample_rate must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order, no comments.
    pub fn render(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.features", &m.features);
        kv("model.kernel", &m.kernel);
        kv("model.stride", &m.stride);
        kv("model.padding", &m.padding);
        kv("model.chunk", &m.chunk);
        kv("model.overlap", &m.overlap);
        kv("model.latent", &m.latent);
        kv("model.blocks", &m.blocks);
        kv("model.heads", &m.heads);
        kv("model.latent_layers", &m.latent_layers);
        kv("model.perceiving_layers", &m.perceiving_layers);
        kv("model.speakers", &m.speakers);
        kv("model.ffn_width", &m.ffn_width);
        kv("model.mask_ffw_width", &m.mask_ffw_width);
        kv("model.share_blocks", &m.share_blocks);
        kv("optim.lr", &self.lr);
        kv("optim.beta1", &self.beta1);
        kv("optim.beta2", &self.beta2);
        kv("optim.eps", &self.adam_eps);
        kv("optim.weight_decay", &self.weight_decay);
        kv("optim.delta", &self.delta);
        kv("optim.halving_interval", &self.halving_interval);
        kv("optim.clip_norm", &self.clip_norm);
        kv("train.epochs", &self.epochs);
        kv("train.batch_size", &self.batch_size);
        kv("train.checkpoint_every", &self.checkpoint_every);
        let manifest = self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        kv("data.manifest", &manifest);
        kv("data.synth_items", &self.synth_items);
        kv("data.synth_eval_items", &self.synth_eval_items);
        kv("data.duration", &self.duration);
        kv("data.sample_rate", &self.sample_rate);
        kv("seed", &self.seed);
        kv("output_dir", &self.output_dir.display());
        s
    }
}
