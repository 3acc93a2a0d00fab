//! Configuration, training, evaluation and ablation runs.

mod ablate;
mod config;
mod train;

pub use ablate::{ablate, finished_run, report, AblationRow, AblationTable, MeanStd, ABLATION_ROWS};
pub use config::{DataConfig, TrainConfig};
pub use train::{
    compute_gaze_boxes, cosine_lr, evaluate, evaluate_model, gaze_only_boxes, load_checkpoint, overfit_batch, predict_all, train,
    train_on, write_pr_csv, CheckpointMeta, EpochRecord, RunRecord, TrainOutcome, GAZE_CACHE_FILE, PR_CSV_HEADER,
};
