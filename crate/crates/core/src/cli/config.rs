//! Flat `key = value` run configuration.

use std::fmt::Write as _;

use thiserror::Error;

use crate::attention::{AttentionMode, Pruning};
use crate::decay::DecayFamily;
use crate::objective::DiversityConfig;
use crate::synth::SynthSpec;
use crate::train::{ModelSpec, OptimizerKind, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {message}")]
    BadValue {
        key: String,
        value: String,
        message: String,
    },
}

/// Every tunable default of the pipeline; `0` sizes mean "input dimension".
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub heads: usize,
    pub d_k: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub decay: DecayFamily,
    pub baseline: AttentionMode,
    pub tau: f64,
    pub kmax: f64,
    pub alpha: f64,
    pub kde_bandwidth: f64,
    pub mc_samples: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub similarity_smoothing: f64,
    pub grid_size: usize,
    pub embed_dim: usize,
    pub signal_count: usize,
    pub signal_shift: f64,
    pub noise_std: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub bench_sides: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let synth = SynthSpec::default();
        Self {
            seed: 0,
            heads: train.model.heads,
            d_k: 0,
            d_model: 0,
            d_attn: 0,
            decay: train.model.family,
            baseline: train.mode,
            tau: train.pruning.tau(),
            kmax: train.pruning.k_max(),
            alpha: train.diversity.alpha,
            kde_bandwidth: train.diversity.bandwidth,
            mc_samples: train.diversity.samples,
            optimizer: train.optimizer,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            similarity_smoothing: train.smoothing,
            grid_size: synth.grid_size,
            embed_dim: synth.embed_dim,
            signal_count: synth.signal_count,
            signal_shift: synth.signal_shift,
            noise_std: synth.noise_std,
            train_per_class: synth.train_per_class,
            val_per_class: synth.val_per_class,
            test_per_class: synth.test_per_class,
            bench_sides: vec![16, 32, 64],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        message: e.to_string(),
    })
}

fn opt_size(v: usize) -> Option<usize> {
    (v > 0).then_some(v)
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: k + 1 })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "d_k" => self.d_k = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "d_attn" => self.d_attn = parse(key, value)?,
            "decay" => self.decay = parse(key, value)?,
            "baseline" => self.baseline = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "kmax" => self.kmax = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "kde_bandwidth" => self.kde_bandwidth = parse(key, value)?,
            "mc_samples" => self.mc_samples = parse(key, value)?,
            "optimizer" => self.optimizer = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "similarity_smoothing" => self.similarity_smoothing = parse(key, value)?,
            "grid_size" => self.grid_size = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "signal_count" => self.signal_count = parse(key, value)?,
            "signal_shift" => self.signal_shift = parse(key, value)?,
            "noise_std" => self.noise_std = parse(key, value)?,
            "train_per_class" => self.train_per_class = parse(key, value)?,
            "val_per_class" => self.val_per_class = parse(key, value)?,
            "test_per_class" => self.test_per_class = parse(key, value)?,
            "bench_sides" => {
                self.bench_sides = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, message: &str| ConfigError::BadValue {
            key: key.into(),
            value,
            message: message.into(),
        };
        Pruning::new(self.tau, self.kmax)
            .map_err(|e| bad("tau/kmax", format!("{}/{}", self.tau, self.kmax), &e.to_string()))?;
        if self.heads == 0 {
            return Err(bad("heads", "0".into(), "must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(bad("alpha", self.alpha.to_string(), "must be non-negative"));
        }
        if !(self.kde_bandwidth > 0.0 && self.kde_bandwidth.is_finite()) {
            return Err(bad("kde_bandwidth", self.kde_bandwidth.to_string(), "must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(bad("mc_samples", "0".into(), "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", self.learning_rate.to_string(), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "0".into(), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.similarity_smoothing) {
            return Err(bad(
                "similarity_smoothing",
                self.similarity_smoothing.to_string(),
                "must be in [0, 1)",
            ));
        }
        self.synth_spec()
            .validate()
            .map_err(|e| bad("synth", String::new(), &e.to_string()))?;
        Ok(())
    }

    pub fn pruning(&self) -> Pruning {
        Pruning::new(self.tau, self.kmax).expect("validated config")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: ModelSpec {
                heads: self.heads,
                d_k: opt_size(self.d_k),
                d_model: opt_size(self.d_model),
                d_attn: opt_size(self.d_attn),
                family: self.decay,
            },
            mode: self.baseline,
            pruning: self.pruning(),
            diversity: DiversityConfig {
                bandwidth: self.kde_bandwidth,
                samples: self.mc_samples,
                alpha: self.alpha,
            },
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            smoothing: self.similarity_smoothing,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            grid_size: self.grid_size,
            embed_dim: self.embed_dim,
            signal_count: self.signal_count,
            signal_shift: self.signal_shift,
            noise_std: self.noise_std,
            train_per_class: self.train_per_class,
            val_per_class: self.val_per_class,
            test_per_class: self.test_per_class,
            seed: self.seed,
        }
    }

    /// Fully resolved config in the file syntax; parses back to `self`.
    pub fn to_text(&self) -> String {
        let sides: Vec<String> = self.bench_sides.iter().map(usize::to_string).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("heads", self.heads.to_string());
        kv("d_k", self.d_k.to_string());
        kv("d_model", self.d_model.to_string());
        kv("d_attn", self.d_attn.to_string());
        kv("decay", self.decay.to_string());
        kv("baseline", self.baseline.to_string());
        kv("tau", self.tau.to_string());
        kv("kmax", self.kmax.to_string());
        kv("alpha", self.alpha.to_string());
        kv("kde_bandwidth", self.kde_bandwidth.to_string());
        kv("mc_samples", self.mc_samples.to_string());
        kv("optimizer", self.optimizer.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("similarity_smoothing", self.similarity_smoothing.to_string());
        kv("grid_size", self.grid_size.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("signal_count", self.signal_count.to_string());
        kv("signal_shift", self.signal_shift.to_string());
        kv("noise_std", self.noise_std.to_string());
        kv("train_per_class", self.train_per_class.to_string());
        kv("val_per_class", self.val_per_class.to_string());
        kv("test_per_class", self.test_per_class.to_string());
        kv("bench_sides", sides.join(","));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_roundtrips() {
        let mut c = RunConfig::default();
        c.apply_text("tau = 0.01 # coarser\n\n# comment\nbaseline = klocal:2\nbench_sides = 8, 64\ndecay = cauchy")
            .unwrap();
        assert_eq!(c.tau, 0.01);
        assert_eq!(c.baseline, AttentionMode::KLocal(2));
        assert_eq!(c.bench_sides, vec![8, 64]);
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert_eq!(
            RunConfig::from_text("taus = 1"),
            Err(ConfigError::UnknownKey("taus".into()))
        );
        assert_eq!(RunConfig::from_text("tau 1"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(
            RunConfig::from_text("heads = two"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::from_text("tau = 1.5"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn defaults_match_module_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train_config(), TrainConfig::default());
        assert_eq!(c.synth_spec(), SynthSpec::default());
    }
}
