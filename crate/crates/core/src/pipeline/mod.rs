//! Training loops, checkpoints and the end-to-end sampler.

pub mod checkpoint;
pub mod compare;
pub mod models;
pub mod optim;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointError, ModelKind};
pub use compare::{compare_runs, results_csv, GridCell, ResultRow};
pub use models::{load_discon, load_prior, DisConObjective, EncodedData, PriorObjective};
pub use sampler::{
    evaluate_generation, generate, generate_from_checkpoints, ConditionSource, EvalSettings, Generated,
    GenerationEval, Provenance, SampleError, SampleRequest,
};
pub use schedule::reveal_counts;
pub use train::{metrics_csv, parse_metrics_csv, train, MetricRecord, Objective, Split, TrainConfig, TrainError, TrainOutcome};
