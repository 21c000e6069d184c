//! Training, evaluation, multi-seed experiments, paired ablations, hidden
//! size sweeps and profiling.

mod experiment;
mod metrics;
mod profile;
mod train;

pub use experiment::{
    ablate, differing_fields, pick_best, prepare, read_log, run_experiment, run_seed, sweep_hidden, Ablation,
    AblationAxis, LogRecord, ResultLog, RunResult, SeedResult, SweepResult, DEFAULT_ABLATION_D_EMB,
    DEFAULT_HIDDEN_GRID,
};
pub use metrics::{metrics, MetricAccumulator, Metrics, Stat};
pub use profile::{profile, Profile, MIN_TIMED_BATCHES, WARMUP_BATCHES};
pub use train::{
    evaluate, evaluate_block, fit_batch, masked_mse, plan_batches, step, train, train_with, EpochRecord, History, Plan,
    TrainSpec, DEFAULT_BATCH_SIZE, DEFAULT_LR, DEFAULT_MAX_EPOCHS, DEFAULT_PATIENCE, DEFAULT_SEEDS,
};
