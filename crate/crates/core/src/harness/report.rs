use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{read_records, to_csv};
use super::train::{run_training, Resume, RunSummary, METRICS_FILE};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, IoContext, Result};
use crate::objectives::Model;
use crate::pathstar::{evaluate, read_records as read_samples, EvalReport, EvalSample, DatasetFiles, SampleRecord, Vocabulary};
use crate::semformer::build_planned_sequence;
use crate::transformer::export_attention as attention_maps;

/// Rebuilds the model stored in a checkpoint.
pub fn load_model(c: &Checkpoint) -> Result<(RunConfig, Model)> {
    let config: RunConfig = serde_json::from_value(c.config.clone())?;
    if config.hash() != c.config_hash {
        return Err(Error::Mismatch(format!(
            "checkpoint header hash {} does not match its embedded config ({})",
            c.config_hash,
            config.hash()
        )));
    }
    let mut model = Model::new(config.vocabulary(), config.model_config(), config.objective.clone(), config.seed)?;
    c.restore_model(&mut model.store, None)?;
    Ok((config, model))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub test_file: PathBuf,
    /// Task of the test file, `d`, `l`, `N`.
    pub test_task: [usize; 3],
    pub out_of_distribution: bool,
    pub report: EvalReport,
}

/// Maps file records into the model's vocabulary. Records whose tokens have
/// no counterpart, or that cannot fit the context, are counted and skipped.
pub fn prepare_samples(model: &Model, records: &[SampleRecord]) -> (Vec<EvalSample>, usize, usize) {
    let max_len = model.lm.config.max_seq_len;
    let k = model.objective.planning_tokens();
    let (mut out, mut skip_len, mut skip_vocab) = (Vec::new(), 0, 0);
    for r in records {
        let from = Vocabulary::new(r.n, 0);
        let (Some(prefix), Some(answer)) = (model.vocab.translate(&from, &r.prefix), model.vocab.translate(&from, &r.answer))
        else {
            skip_vocab += 1;
            continue;
        };
        if prefix.len() + k + answer.len() > max_len {
            skip_len += 1;
            continue;
        }
        out.push(EvalSample { prefix, answer });
    }
    (out, skip_len, skip_vocab)
}

/// Scores a checkpoint on a dataset file. A file from another task is an
/// error unless `ood` is set.
pub fn eval_checkpoint(checkpoint: &Path, test_file: &Path, ood: bool, limit: Option<usize>) -> Result<EvalOutput> {
    let c = Checkpoint::load(checkpoint)?;
    let (config, model) = load_model(&c)?;
    let model = model.inference_only()?;
    let mut records = read_samples(test_file)?;
    if let Some(n) = limit {
        records.truncate(n);
    }
    let first = records
        .first()
        .ok_or_else(|| Error::Degenerate(format!("{} holds no samples", test_file.display())))?;
    let task = first.task();
    let shifted = task != config.task || records.iter().any(|r| r.task() != task);
    if shifted && !ood {
        return Err(Error::Mismatch(format!(
            "test file task {task:?} differs from training task {:?}; pass the out-of-distribution flag to evaluate anyway",
            config.task
        )));
    }
    let (samples, skipped_length, skipped_vocab) = prepare_samples(&model, &records);
    let mut report = if samples.is_empty() { EvalReport::default() } else { evaluate(&model, &samples)?.0 };
    report.skipped_length = skipped_length;
    report.skipped_vocab = skipped_vocab;
    Ok(EvalOutput {
        config_hash: c.config_hash,
        checkpoint: checkpoint.to_path_buf(),
        test_file: test_file.to_path_buf(),
        test_task: [task.degree, task.path_len, task.n_values],
        out_of_distribution: shifted,
        report,
    })
}

/// Human-readable summary of an evaluation.
pub fn render_eval(out: &EvalOutput) -> String {
    let r = &out.report;
    let mut s = format!(
        "config {}\ntest task d={} l={} N={}{}\nevaluated {}  skipped: {} too long, {} unknown tokens\nexact_match      {:.4}\nfirst_node_acc   {:.4}\ncontinuation_acc {:.4}\nper-position accuracy:\n",
        out.config_hash,
        out.test_task[0],
        out.test_task[1],
        out.test_task[2],
        if out.out_of_distribution { " (out of distribution)" } else { "" },
        r.evaluated,
        r.skipped_length,
        r.skipped_vocab,
        r.exact_match,
        r.first_node_acc,
        r.continuation_acc,
    );
    for (i, a) in r.per_position_acc.iter().enumerate() {
        s += &format!("  {i:>3} {a:.4} {}\n", "#".repeat((a * 40.0).round() as usize));
    }
    s
}

/// CSV of every metrics record in a run directory.
pub fn export_curves(run_dir: &Path) -> Result<String> {
    let path = run_dir.join(METRICS_FILE);
    if !path.exists() {
        return Err(Error::Degenerate(format!("{} has no {METRICS_FILE}; nothing to export", run_dir.display())));
    }
    let records = read_records(&path)?;
    if records.is_empty() {
        return Err(Error::Degenerate(format!("{} is empty; nothing to export", path.display())));
    }
    Ok(to_csv(&records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub config_hash: String,
    pub layer: usize,
    pub tokens: Vec<String>,
    /// Head-averaged weights, `matrix[i][j]` from query `i` to key `j`.
    pub matrix: Vec<Vec<f64>>,
}

/// Attention maps of every layer for one sample, with planning tokens in
/// place for objectives that use them.
pub fn export_attention(checkpoint: &Path, sample: &SampleRecord) -> Result<Vec<AttentionRecord>> {
    let c = Checkpoint::load(checkpoint)?;
    let (_, model) = load_model(&c)?;
    let (samples, too_long, unknown) = prepare_samples(&model, std::slice::from_ref(sample));
    let s = samples.first().ok_or_else(|| {
        Error::Mismatch(format!("sample cannot be fed to this model ({too_long} too long, {unknown} unknown tokens)"))
    })?;
    let seq = build_planned_sequence(&s.prefix, &s.answer, &model.vocab.plan_ids(), model.lm.config.max_seq_len)?;
    let maps = attention_maps(&model.store, &model.lm, &seq.tokens)?;
    let t = seq.tokens.len();
    let tokens: Vec<String> = seq.tokens.iter().map(|&i| model.vocab.surface(i)).collect();
    Ok((0..maps.shape()[0])
        .map(|layer| AttentionRecord {
            config_hash: c.config_hash.clone(),
            layer,
            tokens: tokens.clone(),
            matrix: (0..t)
                .map(|i| maps.data()[(layer * t + i) * t..(layer * t + i + 1) * t].iter().map(|&x| x as f64).collect())
                .collect(),
        })
        .collect())
}

/// Ablation axes for [`sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    LatentDim,
    PlanningTokens,
    Alpha,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dz" | "latent_dim" => Ok(Self::LatentDim),
            "k" => Ok(Self::PlanningTokens),
            "alpha" => Ok(Self::Alpha),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?}; expected dz, k or alpha"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::LatentDim => "dz",
            Self::PlanningTokens => "k",
            Self::Alpha => "alpha",
        }
    }

    fn apply(self, config: &mut RunConfig, value: f64) -> Result<()> {
        let whole = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} needs a positive integer, got {value}", self.name())))
            }
        };
        match self {
            Self::LatentDim => config.objective.latent_dim = whole()?,
            Self::PlanningTokens => config.objective.k = whole()?,
            Self::Alpha => config.objective.alpha = value,
        }
        Ok(())
    }
}

/// Trains one run per value under `out_dir/<param>-<value>` and returns the
/// summaries together with a CSV holding every curve, keyed by value.
pub fn sweep(
    base: &RunConfig,
    data: &DatasetFiles,
    param: SweepParam,
    values: &[f64],
    out_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<(Vec<RunSummary>, String)> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut configs = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = base.clone();
        param.apply(&mut c, v)?;
        c.validate()?;
        configs.push(c);
    }
    fs::create_dir_all(out_dir).io_context(|| format!("creating {}", out_dir.display()))?;
    let mut csv = format!("{},{}\n", param.name(), super::metrics::CSV_HEADER);
    let mut summaries = Vec::new();
    for (c, &v) in configs.into_iter().zip(values) {
        let dir = out_dir.join(format!("{}-{v}", param.name()));
        let resume = if dir.join(METRICS_FILE).exists() { Resume::Latest } else { Resume::Fresh };
        log(&format!("{} = {v}: {}", param.name(), dir.display()));
        summaries.push(run_training(c, data, &dir, resume, log)?);
        for line in export_curves(&dir)?.lines().skip(1) {
            csv += &format!("{v},{line}\n");
        }
    }
    Ok((summaries, csv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ObjectiveKind;
    use crate::pathstar::{write_dataset, TaskSpec};

    fn tiny(task: TaskSpec, kind: ObjectiveKind) -> RunConfig {
        let mut c = RunConfig::for_objective(task, kind);
        c.model.n_layers = 1;
        c.model.n_heads = 2;
        c.model.d_model = 16;
        c.model.d_ff = 32;
        c.objective.latent_dim = 4;
        c.objective.dec_layers = 1;
        c.batch_size = 4;
        c.max_epochs = 1;
        c
    }

    #[test]
    fn eval_requires_flag_for_foreign_tasks_and_counts_skips() {
        let tmp = tempfile::tempdir().unwrap();
        let small = TaskSpec::new(2, 3, Some(12)).unwrap();
        let other = TaskSpec::new(3, 4, Some(20)).unwrap();
        write_dataset(&tmp.path().join("a"), small, 8, 4, 1).unwrap();
        write_dataset(&tmp.path().join("b"), other, 8, 6, 1).unwrap();
        let run = tmp.path().join("run");
        let data = DatasetFiles::new(tmp.path().join("a"));
        run_training(tiny(small, ObjectiveKind::Pause), &data, &run, Resume::Fresh, &mut |_| {}).unwrap();
        let ckpt = super::super::train::list_checkpoints(&run).unwrap().pop().unwrap();

        let own = eval_checkpoint(&ckpt, &data.test(), false, None).unwrap();
        assert_eq!(own.report.evaluated, 4);
        assert!(!own.out_of_distribution);

        let foreign = DatasetFiles::new(tmp.path().join("b")).test();
        assert!(matches!(eval_checkpoint(&ckpt, &foreign, false, None), Err(Error::Mismatch(_))));
        let ood = eval_checkpoint(&ckpt, &foreign, true, None).unwrap();
        let r = &ood.report;
        assert_eq!(r.evaluated + r.skipped_length + r.skipped_vocab, 6);
        assert!(r.skipped_length + r.skipped_vocab > 0);
        assert!(render_eval(&ood).contains("out of distribution"));

        let maps = export_attention(&ckpt, &read_samples(&data.test()).unwrap()[0]).unwrap();
        assert_eq!(maps.len(), 1);
        let t = maps[0].tokens.len();
        assert_eq!(t, small.prefix_len() + 4 + small.answer_len());
        for row in &maps[0].matrix {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        let csv = export_curves(&run).unwrap();
        assert!(csv.starts_with(super::super::metrics::CSV_HEADER));
        assert!(export_curves(tmp.path()).is_err());
    }

    #[test]
    fn sweep_runs_one_curve_per_value() {
        let tmp = tempfile::tempdir().unwrap();
        let task = TaskSpec::new(2, 3, Some(12)).unwrap();
        write_dataset(&tmp.path().join("d"), task, 4, 2, 2).unwrap();
        let data = DatasetFiles::new(tmp.path().join("d"));
        let mut base = tiny(task, ObjectiveKind::Semformer);
        base.max_steps = Some(1);
        let (summaries, csv) = sweep(&base, &data, SweepParam::PlanningTokens, &[1.0, 2.0], tmp.path(), &mut |_| {}).unwrap();
        assert_eq!(summaries.len(), 2);
        assert_ne!(summaries[0].config_hash, summaries[1].config_hash);
        assert!(csv.lines().skip(1).any(|l| l.starts_with("1,")));
        assert!(csv.lines().skip(1).any(|l| l.starts_with("2,")));
        assert!(sweep(&base, &data, SweepParam::LatentDim, &[0.5], tmp.path(), &mut |_| {}).is_err());
    }
}
