use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::optim::AdamWConfig;
use crate::pathstar::{TaskSpec, Vocabulary};
use crate::transformer::ModelConfig;

/// Backbone shape; vocabulary size and context length follow from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    /// Defaults to prefix + answer + [`PLAN_HEADROOM`] for the task.
    pub max_seq_len: Option<usize>,
}

/// Positions reserved for planning tokens when the context length is
/// derived from the task, so every objective shares the position table.
pub const PLAN_HEADROOM: usize = 16;

/// Fields excluded from [`RunConfig::hash`].
pub const RUN_CONTROL_FIELDS: &[&str] = &["max_steps", "max_epochs", "eval_samples", "eval_every", "keep_checkpoints", "patience"];

impl Default for ArchConfig {
    fn default() -> Self {
        Self { n_layers: 6, n_heads: 8, d_model: 256, d_ff: 1024, dropout: 0.0, tie_embeddings: true, max_seq_len: None }
    }
}

/// A named task shape with its default sample counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub degree: usize,
    pub path_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Too slow for a desktop CPU.
    pub long_running: bool,
}

pub const PRESETS: &[Preset] = &[
    Preset { name: "g2-5", degree: 2, path_len: 5, n_train: 20_000, n_test: 2_000, long_running: false },
    Preset { name: "g5-5", degree: 5, path_len: 5, n_train: 20_000, n_test: 2_000, long_running: false },
    Preset { name: "g4-5", degree: 4, path_len: 5, n_train: 20_000, n_test: 2_000, long_running: false },
    Preset { name: "g5-20", degree: 5, path_len: 20, n_train: 200_000, n_test: 20_000, long_running: true },
    Preset { name: "g5-30", degree: 5, path_len: 30, n_train: 200_000, n_test: 20_000, long_running: true },
    Preset { name: "g10-20", degree: 10, path_len: 20, n_train: 200_000, n_test: 20_000, long_running: true },
    Preset { name: "g20-5", degree: 20, path_len: 5, n_train: 200_000, n_test: 20_000, long_running: true },
];

pub fn preset(name: &str) -> Result<Preset> {
    PRESETS.iter().copied().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
        Error::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
    })
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ArchConfig,
    pub objective: ObjectiveConfig,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    /// Examples per graph; gradients are accumulated over a batch.
    pub micro_batch: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    /// Evaluate every this many steps; `None` evaluates once per epoch.
    pub eval_every: Option<u64>,
    /// Test examples scored at each evaluation; `None` uses all of them.
    pub eval_samples: Option<usize>,
    /// Early stop once test exact-match reaches this value.
    pub stop_threshold: f64,
    /// Stop after this many evaluations without exact-match gain.
    pub patience: Option<usize>,
    pub keep_checkpoints: usize,
    pub seed: u64,
    /// Digest of the dataset the run trains on, filled in at start.
    pub dataset_hash: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec { degree: 2, path_len: 5, n_values: 10 },
            model: ArchConfig::default(),
            objective: ObjectiveConfig::default(),
            optim: AdamWConfig::default(),
            batch_size: 32,
            micro_batch: 32,
            max_epochs: 100,
            max_steps: None,
            eval_every: None,
            eval_samples: None,
            stop_threshold: 0.999,
            patience: None,
            keep_checkpoints: 2,
            seed: 0,
            dataset_hash: None,
        }
    }
}

impl RunConfig {
    pub fn for_objective(task: TaskSpec, kind: ObjectiveKind) -> Self {
        Self { task, objective: ObjectiveConfig::new(kind), ..Self::default() }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.objective.vocabulary(self.task.n_values)
    }

    pub fn max_seq_len(&self) -> usize {
        self.model
            .max_seq_len
            .unwrap_or(self.task.prefix_len() + self.task.answer_len() + PLAN_HEADROOM)
    }

    pub fn model_config(&self) -> ModelConfig {
        let a = &self.model;
        ModelConfig {
            n_layers: a.n_layers,
            n_heads: a.n_heads,
            d_model: a.d_model,
            d_ff: a.d_ff,
            vocab_size: self.vocabulary().size(),
            max_seq_len: self.max_seq_len(),
            dropout: a.dropout,
            tie_embeddings: a.tie_embeddings,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model_config().validate()?;
        self.objective.validate(self.model.d_model)?;
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Config("batch_size and micro_batch must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        let needed = self.task.prefix_len() + self.task.answer_len() + self.objective.planning_tokens();
        if needed > self.max_seq_len() {
            return Err(Error::Config(format!(
                "sequences of {needed} tokens do not fit max_seq_len {}",
                self.max_seq_len()
            )));
        }
        Ok(())
    }

    /// Short digest of the canonical JSON form. Fields that only bound or
    /// observe a run (step cap, eval subset, checkpoint retention) are left
    /// out so a run can be extended or resumed under a new cap.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            for key in RUN_CONTROL_FIELDS {
                m.remove(*key);
            }
        }
        let json = serde_json::to_vec(&v).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_every_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.max_steps = Some(10);
        b.max_epochs = 3;
        b.eval_every = Some(7);
        assert_eq!(a.hash(), b.hash());
        b.objective.alpha = 0.5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn presets_resolve_and_validate() {
        for p in PRESETS {
            let task = TaskSpec::new(p.degree, p.path_len, None).unwrap();
            for kind in ObjectiveKind::ALL {
                RunConfig::for_objective(task, kind).validate().unwrap();
            }
        }
        assert_eq!(preset("g5-20").unwrap().n_train, 200_000);
        assert!(preset("g9-9").is_err());
    }

    #[test]
    fn pause_and_standard_share_position_tables() {
        let task = TaskSpec::new(2, 5, None).unwrap();
        let s = RunConfig::for_objective(task, ObjectiveKind::Standard).model_config();
        let p = RunConfig::for_objective(task, ObjectiveKind::Pause).model_config();
        assert_eq!(s.max_seq_len, p.max_seq_len);
        assert_eq!(p.vocab_size, s.vocab_size + 4);
    }
}
