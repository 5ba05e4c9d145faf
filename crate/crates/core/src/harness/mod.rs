//! Participant-level cross-validation, video decisions, metrics and the
//! ablation grids.

mod cv;
mod dataset;
mod folds;
mod metrics;

pub use cv::{run_ablations, run_cv, train_all, AblationAxis, CvConfig, EvalReport, FoldReport, ThemeReport, VideoPrediction};
pub use dataset::{
    dataset_hash, encode_video, frames_to_encode, group_participants, sample_training_faces, EncodedSequence, EncodedVideo, Participant, PreprocessedEntry,
};
pub use folds::{check_fold_hygiene, make_folds, FoldPlan};
pub use metrics::{auc, classify_video, metrics, Metrics, VideoDecision};
