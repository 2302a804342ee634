use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{append_records, read_records, MetricsRecord};
use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, IoContext, Result};
use crate::objectives::{Example, LossValues, Model};
use crate::optim::AdamWState;
use crate::params::GradStore;
use crate::pathstar::{evaluate, read_records as read_samples, DatasetFiles, EvalReport, EvalSample};
use crate::tensor::Float;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOCK_FILE: &str = "run.lock";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Smallest rise in test exact-match that resets the plateau counter.
pub const PLATEAU_MIN_GAIN: f64 = 0.01;

// Stream tags keeping the shuffling and dropout generators apart.
const SHUFFLE_STREAM: u64 = 1 << 62;
const DROPOUT_STREAM: u64 = 1 << 61;

/// Counters that, with the parameters and optimizer moments, fully determine
/// the rest of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    /// Epochs started so far; the current epoch is `epoch - 1` once running.
    pub epoch: usize,
    /// Position in the current epoch's permutation.
    pub cursor: usize,
    pub best_exact_match: f64,
    pub best_step: u64,
    /// Evaluations since exact-match last rose by at least [`PLATEAU_MIN_GAIN`].
    #[serde(default)]
    pub evals_without_gain: usize,
    pub wall_time: f64,
    /// Loss sums since the last evaluation.
    pub loss_sum: LossValues,
    pub loss_steps: u64,
}

/// Derivation of every random stream, recorded for reproducibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub generator: String,
    pub shuffle_stream: String,
    pub dropout_stream: String,
}

impl RngState {
    fn describe(seed: u64) -> Self {
        Self {
            seed,
            generator: "chacha8".into(),
            shuffle_stream: format!("{SHUFFLE_STREAM:#x} | epoch"),
            dropout_stream: format!("{DROPOUT_STREAM:#x} | step * 4096 + micro_batch"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointState {
    trainer: TrainerState,
    rng: RngState,
    /// Metrics written at this checkpoint, replayed if the append was lost.
    records: Vec<MetricsRecord>,
}

/// Why a run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    MaxEpochs,
    MaxSteps,
    /// No gain in exact-match for `patience` evaluations.
    Plateau,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub objective: String,
    pub steps: u64,
    pub epochs: usize,
    pub stop_reason: StopReason,
    /// Best test exact-match over all evaluation points, and where it occurred.
    pub best_exact_match: f64,
    pub best_step: u64,
    pub final_report: EvalReport,
    pub wall_time: f64,
    /// Floating-point width of the build that trained the run.
    pub precision: String,
}

/// In-memory trainer: model, optimizer, data and counters.
pub struct Trainer {
    pub config: RunConfig,
    pub config_hash: String,
    pub model: Model,
    pub adam: AdamWState,
    pub state: TrainerState,
    train: Vec<EvalSample>,
    test: Vec<EvalSample>,
    perm: Vec<usize>,
    perm_epoch: usize,
}

fn permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM | epoch as u64);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

impl Trainer {
    pub fn new(config: RunConfig, train: Vec<EvalSample>, test: Vec<EvalSample>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("training and test sets must be non-empty".into()));
        }
        let vocab = config.vocabulary();
        let model = Model::new(vocab, config.model_config(), config.objective.clone(), config.seed)?;
        let adam = AdamWState::new(config.optim.clone(), &model.store);
        Ok(Self {
            config_hash: config.hash(),
            config,
            model,
            adam,
            state: TrainerState::default(),
            train,
            test,
            perm: Vec::new(),
            perm_epoch: usize::MAX,
        })
    }

    /// Loads both splits of a dataset directory, checking that it matches the
    /// configured task. The dataset digest is recorded in the config.
    pub fn from_dataset(mut config: RunConfig, data: &DatasetFiles) -> Result<Self> {
        let manifest = data.read_manifest()?;
        if manifest.task != config.task {
            return Err(Error::Mismatch(format!(
                "dataset task {:?} differs from configured task {:?}",
                manifest.task, config.task
            )));
        }
        match &config.dataset_hash {
            Some(h) if *h != manifest.dataset_hash => {
                return Err(Error::Mismatch(format!(
                    "config expects dataset {h}, directory holds {}",
                    manifest.dataset_hash
                )))
            }
            _ => config.dataset_hash = Some(manifest.dataset_hash.clone()),
        }
        let load = |p: &Path| -> Result<Vec<EvalSample>> {
            Ok(read_samples(p)?
                .into_iter()
                .map(|r| EvalSample { prefix: r.prefix, answer: r.answer })
                .collect())
        };
        Self::new(config, load(&data.train())?, load(&data.test())?)
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn test_set(&self) -> &[EvalSample] {
        &self.test
    }

    fn ensure_perm(&mut self) {
        let epoch = self.state.epoch.saturating_sub(1);
        if self.perm_epoch != epoch {
            self.perm = permutation(self.train.len(), self.config.seed, epoch);
            self.perm_epoch = epoch;
        }
    }

    /// One optimizer step on the next batch. Returns the batch-mean losses
    /// and whether the step completed an epoch.
    pub fn train_step(&mut self) -> Result<(LossValues, bool)> {
        if self.state.epoch == 0 || self.state.cursor >= self.train.len() {
            self.state.epoch += 1;
            self.state.cursor = 0;
        }
        self.ensure_perm();
        let end = (self.state.cursor + self.config.batch_size).min(self.train.len());
        let idx = self.perm[self.state.cursor..end].to_vec();
        let b = idx.len();
        // Group equal-length examples so every graph holds one shape.
        let mut groups: Vec<Vec<Example>> = Vec::new();
        for &i in &idx {
            let s = &self.train[i];
            let key = (s.prefix.len(), s.answer.len());
            match groups.iter_mut().find(|g| (g[0].0.len(), g[0].1.len()) == key) {
                Some(g) => g.push((&s.prefix, &s.answer)),
                None => groups.push(vec![(&s.prefix, &s.answer)]),
            }
        }
        let mut grads = GradStore::new(&self.model.store);
        let mut values = LossValues::default();
        let mut micro = 0u64;
        for group in &groups {
            for chunk in group.chunks(self.config.micro_batch) {
                let mut rng = (self.config.model.dropout > 0.0).then(|| {
                    let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
                    r.set_stream(DROPOUT_STREAM | (self.state.step * 4096 + micro));
                    r
                });
                micro += 1;
                let w = chunk.len() as f64 / b as f64;
                let mut g = Graph::new(&self.model.store);
                let nodes = self.model.batch_loss(&mut g, chunk, rng.as_mut())?;
                values.add_scaled(&LossValues::read(&g, &nodes), w);
                g.backward_into(nodes.total, &mut grads, w as Float)?;
            }
        }
        if !values.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.state.step)));
        }
        self.adam.step(&mut self.model.store, &grads)?;
        self.state.step += 1;
        self.state.cursor = end;
        self.state.loss_sum.add_scaled(&values, 1.0);
        self.state.loss_steps += 1;
        Ok((values, end >= self.train.len()))
    }

    /// Scores the model on the (possibly capped) test set.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let n = self.config.eval_samples.unwrap_or(self.test.len()).min(self.test.len());
        Ok(evaluate(&self.model, &self.test[..n])?.0)
    }

    /// Evaluates and returns the train/test record pair for this point,
    /// resetting the loss accumulators.
    pub fn eval_point(&mut self, wall_time: f64) -> Result<(EvalReport, Vec<MetricsRecord>)> {
        let report = self.evaluate()?;
        if report.exact_match >= self.state.best_exact_match + PLATEAU_MIN_GAIN || self.state.best_step == 0 {
            self.state.evals_without_gain = 0;
        } else {
            self.state.evals_without_gain += 1;
        }
        if report.exact_match > self.state.best_exact_match || self.state.best_step == 0 {
            self.state.best_exact_match = report.exact_match;
            self.state.best_step = self.state.step;
        }
        let steps = self.state.loss_steps.max(1) as f64;
        let mean = |x: f64| Some(x / steps);
        let has = |x: f64| (x != 0.0).then_some(x / steps);
        let base = MetricsRecord {
            config_hash: self.config_hash.clone(),
            step: self.state.step,
            epoch: self.state.epoch,
            split: "train".into(),
            lm: mean(self.state.loss_sum.lm),
            ae: has(self.state.loss_sum.ae),
            rp: has(self.state.loss_sum.rp),
            total: mean(self.state.loss_sum.total),
            exact_match: None,
            first_node_acc: None,
            continuation_acc: None,
            wall_time,
        };
        let test = MetricsRecord {
            split: "test".into(),
            lm: None,
            ae: None,
            rp: None,
            total: None,
            exact_match: Some(report.exact_match),
            first_node_acc: Some(report.first_node_acc),
            continuation_acc: Some(report.continuation_acc),
            ..base.clone()
        };
        self.state.loss_sum = LossValues::default();
        self.state.loss_steps = 0;
        Ok((report, vec![base, test]))
    }

    pub fn to_checkpoint(&self, records: &[MetricsRecord]) -> Result<Checkpoint> {
        let state = CheckpointState {
            trainer: self.state.clone(),
            rng: RngState::describe(self.config.seed),
            records: records.to_vec(),
        };
        let mut c = Checkpoint::new(
            self.config_hash.clone(),
            serde_json::to_value(&self.config)?,
            serde_json::to_value(&state)?,
        );
        c.push_model(&self.model.store, Some(&self.adam));
        c.state["adam_step"] = serde_json::json!(self.adam.step);
        Ok(c)
    }

    /// Restores parameters, optimizer and counters. The checkpoint must come
    /// from a run with an identical configuration.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<Vec<MetricsRecord>> {
        if c.config_hash != self.config_hash {
            return Err(Error::Mismatch(format!(
                "checkpoint config {} differs from run config {}",
                c.config_hash, self.config_hash
            )));
        }
        let state: CheckpointState = serde_json::from_value(c.state.clone())?;
        c.restore_model(&mut self.model.store, Some(&mut self.adam))?;
        self.adam.step = c.state["adam_step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?;
        self.state = state.trainer;
        Ok(state.records)
    }
}

/// Exclusive ownership of a run directory for the lifetime of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display()))
            } else {
                Error::Io { context: format!("creating {}", path.display()), source: e }
            }
        })?;
        use std::io::Write;
        writeln!(f, "{}", std::process::id()).io_context(|| format!("writing {}", path.display()))?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Where to pick up an existing run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Resume {
    #[default]
    Fresh,
    Latest,
    From(PathBuf),
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("ckpt-{step:08}.bin"))
}

/// Checkpoints of a run directory, oldest first.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(&dir)
        .io_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("ckpt-") && name.ends_with(".bin")
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Runs a full training job in `run_dir`: evaluation, checkpoints, metrics
/// and a closing summary. `log` receives one line per evaluation point.
pub fn run_training(
    config: RunConfig,
    data: &DatasetFiles,
    run_dir: &Path,
    resume: Resume,
    log: &mut dyn FnMut(&str),
) -> Result<RunSummary> {
    let mut trainer = Trainer::from_dataset(config, data)?;
    fs::create_dir_all(run_dir.join(CHECKPOINT_DIR)).io_context(|| format!("creating {}", run_dir.display()))?;
    let _lock = RunLock::acquire(run_dir)?;
    let metrics = run_dir.join(METRICS_FILE);
    let ckpt = match resume {
        Resume::Fresh => None,
        Resume::Latest => list_checkpoints(run_dir)?.pop(),
        Resume::From(p) => Some(p),
    };
    match ckpt {
        Some(p) => {
            let c = Checkpoint::load(&p)?;
            let records = trainer.restore(&c)?;
            let written = if metrics.exists() { read_records(&metrics)? } else { Vec::new() };
            let last = written.last().map(|r| r.step);
            if last.is_some_and(|s| s > trainer.state.step) {
                return Err(Error::Mismatch(format!(
                    "{} already has metrics past step {}; resume from the latest checkpoint or use a new directory",
                    metrics.display(),
                    trainer.state.step
                )));
            }
            if last != Some(trainer.state.step) {
                append_records(&metrics, &records)?;
            }
            log(&format!("resumed from {} at step {}", p.display(), trainer.state.step));
        }
        None => {
            if metrics.exists() || !list_checkpoints(run_dir)?.is_empty() {
                return Err(Error::Config(format!(
                    "{} already holds a run; pass --resume or choose another directory",
                    run_dir.display()
                )));
            }
        }
    }
    let config_json = serde_json::json!({ "config_hash": trainer.config_hash, "config": trainer.config });
    fs::write(run_dir.join(CONFIG_FILE), serde_json::to_string_pretty(&config_json)? + "\n")
        .io_context(|| "writing run config".into())?;

    let start = Instant::now();
    let wall0 = trainer.state.wall_time;
    let cfg = trainer.config.clone();
    let mut last_report = None;
    let stop_reason = loop {
        if cfg.max_steps.is_some_and(|m| trainer.state.step >= m) {
            break StopReason::MaxSteps;
        }
        if trainer.state.epoch >= cfg.max_epochs && trainer.state.cursor >= trainer.train_len() {
            break StopReason::MaxEpochs;
        }
        let (_, epoch_end) = trainer.train_step()?;
        let step = trainer.state.step;
        let last_step = cfg.max_steps.is_some_and(|m| step >= m) || (epoch_end && trainer.state.epoch >= cfg.max_epochs);
        let due = match cfg.eval_every {
            Some(e) => step % e == 0,
            None => epoch_end,
        };
        if !(due || last_step) {
            continue;
        }
        let wall = wall0 + start.elapsed().as_secs_f64();
        let (report, records) = trainer.eval_point(wall)?;
        trainer.state.wall_time = wall;
        let c = trainer.to_checkpoint(&records)?;
        c.save(&checkpoint_path(run_dir, step))?;
        append_records(&metrics, &records)?;
        let all = list_checkpoints(run_dir)?;
        for old in all.iter().take(all.len().saturating_sub(cfg.keep_checkpoints.max(1))) {
            fs::remove_file(old).io_context(|| format!("removing {}", old.display()))?;
        }
        log(&format!(
            "step {step} epoch {} loss {:.4} exact {:.4} first {:.4} cont {:.4} ({:.0}s)",
            trainer.state.epoch,
            records[0].total.unwrap_or(f64::NAN),
            report.exact_match,
            report.first_node_acc,
            report.continuation_acc,
            wall
        ));
        let hit = report.exact_match >= cfg.stop_threshold;
        last_report = Some(report);
        if hit {
            break StopReason::Threshold;
        }
        if cfg.patience.is_some_and(|p| trainer.state.evals_without_gain >= p) {
            break StopReason::Plateau;
        }
    };
    let final_report = match last_report {
        Some(r) => r,
        None => trainer.evaluate()?,
    };
    let summary = RunSummary {
        config_hash: trainer.config_hash.clone(),
        objective: trainer.config.objective.kind.to_string(),
        steps: trainer.state.step,
        epochs: trainer.state.epoch,
        stop_reason,
        best_exact_match: trainer.state.best_exact_match,
        best_step: trainer.state.best_step,
        final_report,
        wall_time: wall0 + start.elapsed().as_secs_f64(),
        precision: format!("f{}", 8 * std::mem::size_of::<Float>()),
    };
    fs::write(run_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")
        .io_context(|| "writing summary".into())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ObjectiveKind;
    use crate::pathstar::{write_dataset, TaskSpec};

    fn tiny(kind: ObjectiveKind) -> RunConfig {
        let task = TaskSpec::new(2, 3, Some(12)).unwrap();
        let mut c = RunConfig::for_objective(task, kind);
        c.model.n_layers = 1;
        c.model.n_heads = 2;
        c.model.d_model = 16;
        c.model.d_ff = 32;
        c.objective.latent_dim = 4;
        c.objective.dec_layers = 1;
        c.batch_size = 4;
        c.micro_batch = 2;
        c.max_epochs = 2;
        c.eval_every = Some(3);
        c
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let tmp = tempfile::tempdir().unwrap();
        let data = DatasetFiles::new(tmp.path().join("data"));
        write_dataset(&tmp.path().join("data"), tiny(ObjectiveKind::Semformer).task, 10, 4, 3).unwrap();
        let mut quiet = |_: &str| {};

        let full = run_training(tiny(ObjectiveKind::Semformer), &data, &tmp.path().join("a"), Resume::Fresh, &mut quiet).unwrap();

        let mut first = tiny(ObjectiveKind::Semformer);
        first.max_steps = Some(3);
        let b = tmp.path().join("b");
        run_training(first, &data, &b, Resume::Fresh, &mut quiet).unwrap();
        let c = Checkpoint::load(&checkpoint_path(&b, 3)).unwrap();
        let mut t = Trainer::from_dataset(tiny(ObjectiveKind::Semformer), &data).unwrap();
        t.restore(&c).unwrap();
        while t.state.step < full.steps {
            t.train_step().unwrap();
        }
        let reference = Checkpoint::load(&list_checkpoints(&tmp.path().join("a")).unwrap().pop().unwrap()).unwrap();
        let mut fresh = Trainer::from_dataset(tiny(ObjectiveKind::Semformer), &data).unwrap();
        fresh.restore(&reference).unwrap();
        for ((_, p), (_, q)) in t.model.store.iter().zip(fresh.model.store.iter()) {
            assert_eq!(p.tensor, q.tensor, "{}", p.name);
        }
        assert_eq!(full.epochs, 2);
        assert_eq!(full.stop_reason, StopReason::MaxEpochs);
    }

    #[test]
    fn resume_latest_appends_metrics_and_refuses_reuse() {
        let tmp = tempfile::tempdir().unwrap();
        let data = DatasetFiles::new(tmp.path().join("data"));
        write_dataset(&tmp.path().join("data"), tiny(ObjectiveKind::Standard).task, 8, 4, 1).unwrap();
        let dir = tmp.path().join("run");
        let mut quiet = |_: &str| {};
        let s = run_training(tiny(ObjectiveKind::Standard), &data, &dir, Resume::Fresh, &mut quiet).unwrap();
        assert!(run_training(tiny(ObjectiveKind::Standard), &data, &dir, Resume::Fresh, &mut quiet).is_err());
        let again = run_training(tiny(ObjectiveKind::Standard), &data, &dir, Resume::Latest, &mut quiet).unwrap();
        assert_eq!(again.steps, s.steps);
        let records = read_records(&dir.join(METRICS_FILE)).unwrap();
        assert!(records.windows(2).all(|w| w[0].step <= w[1].step));
        assert!(list_checkpoints(&dir).unwrap().len() <= 2);
        assert!(!dir.join(LOCK_FILE).exists());
    }

    #[test]
    fn lock_is_exclusive() {
        let tmp = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(tmp.path()).unwrap();
        assert!(RunLock::acquire(tmp.path()).is_err());
        drop(a);
        RunLock::acquire(tmp.path()).unwrap();
    }

    #[test]
    fn permutations_are_per_epoch_and_complete() {
        let a = permutation(50, 7, 0);
        assert_eq!(a, permutation(50, 7, 0));
        assert_ne!(a, permutation(50, 7, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
