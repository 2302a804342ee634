//! Planning-token language models on the path-star graph task.
//!
//! The crate contains a small reverse-mode autodiff engine over dense
//! tensors, a GPT-2 style decoder, the latent-plan objective with its
//! baselines, the synthetic task and a training harness.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod infer;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pathstar;
pub mod semformer;
pub mod tensor;
pub mod transformer;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use harness::{run_training, RunConfig, RunSummary, Trainer};
pub use objectives::{LossValues, Model, ObjectiveConfig, ObjectiveKind};
pub use pathstar::{EvalReport, EvalSample, PathSolver, TaskSpec, Vocabulary};
pub use optim::{AdamWConfig, AdamWState, StepReport};
pub use params::{GradStore, ParamId, ParamStore, Parameter};
pub use semformer::{build_planned_sequence, LatentPlan, PlannedSequence, PlannedBatch, SemformerConfig, SemformerHeads, SemformerLosses};
pub use tensor::{Float, Tensor};
pub use transformer::{greedy_decode, LanguageModel, ModelConfig};
