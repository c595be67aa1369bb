//! JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::optim::OptimizerConfig;
use crate::par::Exec;
use crate::sam::SamConfig;
use crate::tasks::{self, Dataset, SubsampleSpec};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Spirals {
        n_per_class: usize,
        #[serde(default = "default_test_per_class")]
        n_test_per_class: usize,
        noise_sigma: f64,
        seed: u64,
    },
    SeqLookup {
        n_train: usize,
        n_test: usize,
        vocab: usize,
        seq_len: usize,
        seed: u64,
    },
}

fn default_test_per_class() -> usize {
    200
}

impl TaskSpec {
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        match *self {
            TaskSpec::Spirals {
                n_per_class,
                n_test_per_class,
                noise_sigma,
                seed,
            } => tasks::gen_spirals_split(n_per_class, n_test_per_class, noise_sigma, seed),
            TaskSpec::SeqLookup {
                n_train,
                n_test,
                vocab,
                seq_len,
                seed,
            } => tasks::gen_seq_lookup_split(n_train, n_test, vocab, seq_len, seed),
        }
    }
}

fn default_batch_size() -> usize {
    128
}
fn default_eval_every() -> u64 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec_version: u32,
    pub task: TaskSpec,
    #[serde(default)]
    pub subsample: Option<SubsampleSpec>,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub sam: SamConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub total_steps: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Extra periodic checkpoints; 0 disables them. Must be a multiple of
    /// `eval_every` so every periodic checkpoint has metrics.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub run_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub exec: Exec,
    /// Timed steps per arm for overhead measurement.
    #[serde(default = "default_overhead_steps")]
    pub overhead_steps: usize,
}

fn default_overhead_steps() -> usize {
    200
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spec_version != SPEC_VERSION {
            return Err(Error::config(format!(
                "spec_version {} is not supported (expected {SPEC_VERSION})",
                self.spec_version
            )));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.sam.validate(self.batch_size)?;
        if let Some(s) = &self.subsample {
            s.validate()?;
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if !self.checkpoint_every.is_multiple_of(self.eval_every) {
            return Err(Error::config(format!(
                "checkpoint_every ({}) must be a multiple of eval_every ({})",
                self.checkpoint_every, self.eval_every
            )));
        }
        if self.overhead_steps < 200 {
            return Err(Error::config("overhead_steps must be at least 200"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative `output_dir`s resolve against the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Model init seed for this run: the spec's seed offset by `run_seed`,
    /// so each run seed gets its own initialization.
    pub fn init_seed(&self) -> u64 {
        let base = match &self.model {
            ModelSpec::Mlp(s) => s.init_seed,
            ModelSpec::Transformer(s) => s.init_seed,
        };
        base.wrapping_add(self.run_seed)
    }

    /// Training and test splits, with the training split subsampled if
    /// configured.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = self.task.generate()?;
        let train = match &self.subsample {
            Some(spec) => tasks::subsample(&train, spec)?,
            None => train,
        };
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "spec_version": 1,
        "task": {"kind": "spirals", "n_per_class": 10, "noise_sigma": 0.05, "seed": 1},
        "model": {"kind": "mlp", "layer_sizes": [2, 4, 2], "activation": "tanh", "init_seed": 0},
        "optimizer": {"kind": "sgd", "learning_rate": 0.1},
        "batch_size": 8,
        "total_steps": 10,
        "output_dir": "out"
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.eval_every, 50);
        assert_eq!(c.sam.rho, 0.15);
        assert_eq!(c.sam.ascent_size_for(c.batch_size), 2);
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let text = MINIMAL.replace("\"spec_version\": 1", "\"spec_version\": 2");
        assert!(matches!(
            ExperimentConfig::from_json(&text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_cadence_must_align() {
        let text = MINIMAL.replace(
            "\"total_steps\": 10",
            "\"total_steps\": 10, \"eval_every\": 4, \"checkpoint_every\": 6",
        );
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = MINIMAL.replace("\"batch_size\": 8", "\"batch_size\": 8, \"bogus\": 1");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }
}
