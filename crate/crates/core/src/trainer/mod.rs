//! Losses, the epoch loop, best-epoch selection, and the cross-validation
//! and grid-search harnesses.

mod config;
mod harness;
mod loss;
mod run;
mod rundir;

pub use config::{Regimen, TrainConfig, FINETUNE_SEED_OFFSET};
pub use harness::{
    all_folds, crossval, grid_search, rank, run_fold, Averages, CrossvalInit, FoldRow, GridResult,
    GridSpace, Summary,
};
pub use loss::{
    batch_loss, mbm_loss, multitask_loss, ntp_loss, sg_loss, Batch, Head, LossVars, Objective,
    PROB_EPS,
};
pub use run::{
    evaluate, evaluate_validation, finetune_run, initial_params, metrics_csv, prepare_batch,
    pretrain_run, run_seed, train_epoch, train_run, EpochMetrics, EvalStats, FinetuneInit,
    MaskSource, RunData, RunOutcome, TrainStats,
};
pub use rundir::{
    dataset_json, digest_files, load_manifest, sha256_hex, InputDigest, RunContext, RunDir,
    RunManifest, Seeds,
};

#[cfg(test)]
mod tests;
