//! `semformer` command-line harness.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! runtime failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use semformer_core::harness::{self, preset, Resume, RunConfig, SweepParam};
use semformer_core::objectives::ObjectiveKind;
use semformer_core::pathstar::{read_records, write_dataset, DatasetFiles, TaskSpec};
use semformer_core::Error;

const OUTPUT_ROOT_ENV: &str = "SEMFORMER_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "semformer", version, about = "Path-star planning experiments with latent-plan language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test files, vocabulary and manifest.
    GenData(GenDataArgs),
    /// Train a model, writing checkpoints and metrics to a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Write a run's metrics as CSV.
    ExportCurves(ExportCurvesArgs),
    /// Write per-layer attention maps for one sample as JSON lines.
    ExportAttention(ExportAttentionArgs),
    /// Train one run per value of a hyper-parameter.
    Sweep(SweepArgs),
}

/// Task selection shared by several commands.
#[derive(Args, Clone, Default)]
struct TaskArgs {
    /// Named preset such as g2-5 or g5-20.
    #[arg(long)]
    preset: Option<String>,
    /// Degree of the center node.
    #[arg(long = "d")]
    degree: Option<usize>,
    /// Nodes per arm, center included.
    #[arg(long = "l")]
    path_len: Option<usize>,
    /// Size of the node value range (default d * l).
    #[arg(long = "n")]
    n_values: Option<usize>,
}

impl TaskArgs {
    fn resolve(&self) -> anyhow::Result<Option<TaskSpec>> {
        let (mut d, mut l) = (self.degree, self.path_len);
        if let Some(name) = &self.preset {
            let p = preset(name)?;
            d = d.or(Some(p.degree));
            l = l.or(Some(p.path_len));
        }
        match (d, l) {
            (Some(d), Some(l)) => Ok(Some(TaskSpec::new(d, l, self.n_values)?)),
            (None, None) => Ok(None),
            _ => Err(Error::Config("--d and --l must be given together".into()).into()),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default <output root>/data/g<d>-<l>-s<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Model, objective and optimizer overrides.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML file holding any subset of the run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    /// Planning tokens.
    #[arg(long)]
    k: Option<usize>,
    /// Latent plan width.
    #[arg(long)]
    dz: Option<usize>,
    /// Weight of the representation-prediction loss.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    bow_coeff: Option<f64>,
    #[arg(long)]
    n_future_heads: Option<usize>,
    /// Also train next-token prediction on the prefix.
    #[arg(long)]
    include_prefix_loss: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Examples per forward pass; gradients accumulate over the batch.
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Evaluate every N steps instead of once per epoch.
    #[arg(long)]
    eval_every: Option<u64>,
    /// Score only the first N test samples at each evaluation.
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    stop_threshold: Option<f64>,
    /// Stop after N evaluations without a gain in exact-match.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Run directory (default <output root>/<objective>-g<d>-<l>-s<seed>).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in the run directory, or from the
    /// given checkpoint file.
    #[arg(long, num_args = 0..=1, default_missing_value = "latest")]
    resume: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file to score (JSON lines).
    #[arg(long)]
    test: PathBuf,
    /// Allow a test file from a different task.
    #[arg(long)]
    ood: bool,
    /// Score only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Report file (default: eval-<checkpoint>.json beside the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportCurvesArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// CSV file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportAttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Line of the test file to visualize.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// JSON-lines file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// dz, k or alpha.
    #[arg(long)]
    param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Parent directory of the runs (default <output root>/sweep-<param>).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Layout of `--config` files: run configuration fields at top level plus
/// optional dataset and path sections.
#[derive(Deserialize, Default)]
#[serde(default)]
struct ConfigFile {
    #[serde(flatten)]
    run: toml::Table,
    data: DataSection,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct DataSection {
    dir: Option<PathBuf>,
    n_train: Option<usize>,
    n_test: Option<usize>,
    seed: Option<u64>,
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn read_config_file(path: &Path) -> anyhow::Result<(RunConfig, DataSection, bool)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ConfigFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let has_task = file.run.contains_key("task");
    let run: RunConfig = toml::Value::Table(file.run)
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((run, file.data, has_task))
}

fn dataset_dir(task: &TaskSpec, seed: u64) -> PathBuf {
    output_root().join("data").join(format!("g{}-{}-s{seed}", task.degree, task.path_len))
}

impl RunArgs {
    /// Builds the run configuration from the config file, the dataset
    /// manifest and the flags, in increasing priority.
    fn build(&self) -> anyhow::Result<(RunConfig, DatasetFiles)> {
        let (mut c, data_section, mut task_set) = match &self.config {
            Some(p) => read_config_file(p)?,
            None => (RunConfig::default(), DataSection::default(), false),
        };
        if let Some(t) = self.task.resolve()? {
            c.task = t;
            task_set = true;
        }
        if let Some(kind) = self.objective {
            c.objective.kind = kind;
        }
        let o = &mut c.objective;
        set(&mut o.k, self.k);
        set(&mut o.latent_dim, self.dz);
        set(&mut o.alpha, self.alpha);
        set(&mut o.dec_layers, self.dec_layers);
        set(&mut o.bow_coeff, self.bow_coeff);
        set(&mut o.n_future_heads, self.n_future_heads);
        o.include_prefix_loss |= self.include_prefix_loss;
        let m = &mut c.model;
        set(&mut m.n_layers, self.layers);
        set(&mut m.n_heads, self.heads);
        set(&mut m.d_model, self.d_model);
        set(&mut m.d_ff, self.d_ff);
        set(&mut m.dropout, self.dropout);
        set(&mut c.optim.lr, self.lr);
        set(&mut c.optim.warmup_steps, self.warmup_steps);
        set(&mut c.optim.weight_decay, self.weight_decay);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.micro_batch, self.micro_batch);
        set(&mut c.max_epochs, self.max_epochs);
        set(&mut c.stop_threshold, self.stop_threshold);
        set(&mut c.seed, self.seed);
        c.max_steps = self.max_steps.or(c.max_steps);
        c.eval_every = self.eval_every.or(c.eval_every);
        c.eval_samples = self.eval_samples.or(c.eval_samples);
        c.patience = self.patience.or(c.patience);

        let dir = match (self.data.clone(), data_section.dir) {
            (Some(d), _) | (None, Some(d)) => d,
            (None, None) if task_set => dataset_dir(&c.task, data_section.seed.unwrap_or(c.seed)),
            (None, None) => bail!(Error::Config("give --data, a task (--preset or --d/--l) or a config file with one".into())),
        };
        let files = DatasetFiles::new(dir);
        if !task_set {
            c.task = files
                .read_manifest()
                .with_context(|| format!("no dataset at {}; run gen-data first", files.manifest().display()))?
                .task;
        }
        c.validate()?;
        Ok((c, files))
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn log_line(line: &str) {
    eprintln!("{line}");
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let (file_cfg, section) = match &a.config {
        Some(p) => {
            let (c, s, has_task) = read_config_file(p)?;
            (has_task.then_some(c), s)
        }
        None => (None, DataSection::default()),
    };
    let task = match a.task.resolve()? {
        Some(t) => t,
        None => file_cfg
            .as_ref()
            .map(|c| c.task)
            .ok_or_else(|| Error::Config("give --preset or --d and --l".into()))?,
    };
    let named = a.task.preset.as_deref().map(preset).transpose()?;
    let n_train = a.n_train.or(section.n_train).or(named.map(|p| p.n_train)).unwrap_or(20_000);
    let n_test = a.n_test.or(section.n_test).or(named.map(|p| p.n_test)).unwrap_or(2_000);
    let seed = a.seed.or(section.seed).or(file_cfg.map(|c| c.seed)).unwrap_or(0);
    let out = a.out.or(section.dir).unwrap_or_else(|| dataset_dir(&task, seed));
    let m = write_dataset(&out, task, n_train, n_test, seed)?;
    println!(
        "wrote {} train / {} test samples of G({},{}) N={} to {} (dataset {}, {} duplicate test draws skipped)",
        m.n_train,
        m.n_test,
        task.degree,
        task.path_len,
        task.n_values,
        out.display(),
        m.dataset_hash,
        m.duplicates_skipped
    );
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let (config, data) = a.run.build()?;
    let run_dir = a.run_dir.unwrap_or_else(|| {
        output_root().join(format!(
            "{}-g{}-{}-s{}",
            config.objective.kind, config.task.degree, config.task.path_len, config.seed
        ))
    });
    let resume = match a.resume.as_deref() {
        None => Resume::Fresh,
        Some("latest") => Resume::Latest,
        Some(p) => Resume::From(PathBuf::from(p)),
    };
    eprintln!("run {} ({}) in {}", config.hash(), config.objective.kind, run_dir.display());
    let s = harness::run_training(config, &data, &run_dir, resume, &mut log_line)?;
    println!(
        "{} stopped ({:?}) after {} steps / {} epochs: best exact_match {:.4} at step {}, final exact_match {:.4} first_node_acc {:.4} continuation_acc {:.4}",
        s.objective,
        s.stop_reason,
        s.steps,
        s.epochs,
        s.best_exact_match,
        s.best_step,
        s.final_report.exact_match,
        s.final_report.first_node_acc,
        s.final_report.continuation_acc
    );
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let out = harness::eval_checkpoint(&a.checkpoint, &a.test, a.ood, a.limit)?;
    print!("{}", harness::render_eval(&out));
    let path = a.out.unwrap_or_else(|| {
        let stem = a.checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        a.checkpoint.with_file_name(format!("eval-{stem}.json"))
    });
    write_output(Some(&path), &(serde_json::to_string_pretty(&out)? + "\n"))?;
    eprintln!("report written to {}", path.display());
    Ok(())
}

fn export_attention(a: ExportAttentionArgs) -> anyhow::Result<()> {
    let records = read_records(&a.test)?;
    let sample = records
        .get(a.index)
        .ok_or_else(|| anyhow!("{} has {} samples; index {} is out of range", a.test.display(), records.len(), a.index))?;
    let mut text = String::new();
    for r in harness::export_attention(&a.checkpoint, sample)? {
        text += &serde_json::to_string(&r)?;
        text.push('\n');
    }
    write_output(a.out.as_deref(), &text)
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let (config, data) = a.run.build()?;
    let out_dir = a.out_dir.unwrap_or_else(|| output_root().join(format!("sweep-{}", a.param.name())));
    let (summaries, csv) = harness::sweep(&config, &data, a.param, &a.values, &out_dir, &mut log_line)?;
    let csv_path = out_dir.join("curves.csv");
    write_output(Some(&csv_path), &csv)?;
    for (v, s) in a.values.iter().zip(&summaries) {
        println!("{}={v}: best exact_match {:.4} at step {}", a.param.name(), s.best_exact_match, s.best_step);
    }
    println!("curves written to {}", csv_path.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportCurves(a) => write_output(a.out.as_deref(), &harness::export_curves(&a.run_dir)?),
        Command::ExportAttention(a) => export_attention(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Error>().is_some_and(|e| matches!(e, Error::Config(_)));
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}
