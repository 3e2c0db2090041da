//! Losses, optimizer and the joint training loop.

mod checkpoint;
mod eval;
mod losses;
mod optim;
pub mod pipeline_check;
mod train;

pub use checkpoint::Checkpoint;
pub use eval::{accuracy, predict, Prediction, EVAL_CHUNK};
pub use losses::{
    candidate_cosines, ce_from_cosines, ce_loss, cl_loss, cl_loss_value, class_probabilities,
    LossBreakdown,
};
pub use optim::{OptimConfig, Sgd};
pub use train::{
    choose_negatives, contrastive, epoch_batches, fit, forward, init_params, solve_gates,
    steps_per_epoch, train_step, BatchCandidates, ClassSpace, EpochEnd, EpochSummary, Forward,
    Negatives, StepOutput, TaskData, TrainConfig, TrainContext, TrainState,
};
