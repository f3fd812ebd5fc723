//! Training loop, learning-rate schedule, checkpoints, evaluation and the
//! component-ablation runner.

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod optim;
mod schedule;
mod train;

pub use ablate::{
    ablate, write_ablation_csv, AblationGrid, AblationResult, AblationRow, SeedScore,
    ABLATION_CSV_HEADER,
};
pub use checkpoint::{param_hash, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{LossKind, TrainConfig};
pub use eval::{distance_report, embed_manifest, evaluate, synthetic_benchmark, Benchmark};
pub use optim::Sgd;
pub use schedule::lr_at;
pub use train::{train, EpochLog, StepReport, TrainOutcome, Trainer};
