//! The path-star graph task: generation, serialization, datasets and scoring.

mod dataset;
mod eval;
mod graph;
mod vocab;

pub use dataset::{
    build_dataset, make_record, read_records, sample_rng, write_dataset, write_records, DatasetFiles, DatasetManifest,
    SampleRecord, Split, DATASET_FORMAT, MANIFEST_FILE, TEST_FILE, TRAIN_FILE, VOCAB_FILE,
};
pub use eval::{evaluate, run_sample, score, EvalReport, EvalSample, OracleSolver, PathSolver, RandomFirstNodeSolver, SampleOutcome};
pub use graph::{bfs_path, generate_graph, parse_prefix, serialize_sample, GraphSample, ParsedPrefix, PathStarGraph, TaskSpec};
pub use vocab::Vocabulary;
