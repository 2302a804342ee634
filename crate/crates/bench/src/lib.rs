//! Fixtures shared by the engine benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semformer_core::harness::RunConfig;
use semformer_core::objectives::{Model, ObjectiveKind};
use semformer_core::pathstar::{build_dataset, SampleRecord, TaskSpec};
use semformer_core::{Float, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0) as Float).collect()).expect("shape matches")
}

/// A desk-preset model for `kind` and a handful of G(2,5) samples.
pub fn desk_fixture(kind: ObjectiveKind, n_samples: usize) -> (Model, Vec<SampleRecord>) {
    let task = TaskSpec::new(2, 5, None).expect("valid task");
    let config = RunConfig::for_objective(task, kind);
    let model = Model::new(config.vocabulary(), config.model_config(), config.objective.clone(), 0).expect("model builds");
    let (train, _, _) = build_dataset(task, n_samples, 1, 0).expect("dataset builds");
    (model, train)
}
