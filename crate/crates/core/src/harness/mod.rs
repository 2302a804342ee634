//! Training runs: configuration, metrics, the trainer loop and reports.

pub mod config;
pub mod metrics;
pub mod report;
pub mod train;

pub use config::{preset, ArchConfig, Preset, RunConfig, PLAN_HEADROOM, PRESETS};
pub use metrics::{append_records, read_records, to_csv, MetricsRecord, CSV_HEADER};
pub use train::{checkpoint_path, list_checkpoints, run_training, Resume, RunLock, RunSummary, StopReason, Trainer, TrainerState};
pub use report::{eval_checkpoint, export_attention, export_curves, load_model, render_eval, sweep, AttentionRecord, EvalOutput, SweepParam};
