//! Losses, metrics, optimizer, synthetic data and the training loop.

pub mod data;
pub mod dice;
pub mod optim;

pub use data::{augment, crop, flip_axis, synth_dataset, AugmentConfig, SynthConfig, VolumeSample};
pub use dice::{
    argmax_labels, dice_loss, dice_metric, one_hot, soft_dice_from_probs, DiceActivation,
    DiceConfig, DiceScores, DEFAULT_SMOOTH,
};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimState};
pub mod trainer;

pub use trainer::{
    evaluate, predict_labels, predict_scores, train_loop, EvalRecord, History, StepRecord,
    TrainConfig,
};
