//! Success/precision metrics, the one-pass tracking loop, toy training and
//! report output.

mod metrics;
mod report;
mod track;
mod train;

pub use metrics::{
    auc, iou, pr_radii, precision_curve, precision_rate, sr_thresholds, success_curve, success_rate, SequenceResult,
    PR_MAX_RADIUS, PR_RADIUS, SR_STEPS,
};
pub use report::{write_curves_csv, Curve, Curves, Report};
pub use track::{
    evaluate, evaluate_frames, read_predictions, track_sequence, write_predictions, ConstantTracker, FreqTracker, OracleTracker,
    Prediction, Tracker,
};
pub use train::{sample_pool, train, train_toy, Optimizer, Sample, TrainConfig, TrainReport};
