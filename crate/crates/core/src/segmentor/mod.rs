//! Box-prompted segmentation model with frozen encoders and a trainable decoder.

pub mod metrics;
pub mod model;
pub mod prompt;
pub mod train;

pub use metrics::{ce_loss, dice_loss, dsc, sam_loss, SamLoss};
pub use model::{ImageFeatures, Prediction, SegConfig, SegModel};
pub use prompt::{perturb_box, scaled_q_max, BoxPrompt, DEFAULT_Q_MAX, PROMPT_FRAME};
pub use train::{evaluate, fine_tune, AugmentFn, EpochRecord, EvalReport, FineTuneOutcome, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SegError {
    #[error("prediction and ground truth shapes differ")]
    ShapeMismatch,
    #[error("both the real and the synthetic batch are empty")]
    BothBatchesEmpty,
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("box prompt lies outside the image")]
    BoxOutOfBounds,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("image size {height}x{width} is not a multiple of 4 (min 8)")]
    UnsupportedSize { height: usize, width: usize },
    #[error("invalid training config: {0}")]
    BadConfig(&'static str),
    #[error("loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),
}
