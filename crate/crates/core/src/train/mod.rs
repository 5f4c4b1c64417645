//! Synthetic data, assignment, losses, optimizers and the training stages.

pub mod assign;
pub mod dataset;
pub mod loss;
pub mod optim;
pub mod sanitize;
pub mod stages;

pub use assign::{assign_one_to_one, box_iou, AssignParams, AssignmentResult, GroundTruth, Pair};
pub use dataset::{generate_dataset, generate_scene, load_dataset, save_dataset, DatasetSpec, Instance, SyntheticScene};
pub use loss::{loss_box, loss_cls, loss_mask, total_loss, LossReport, LossTerms, LossWeights};
pub use optim::{warmup_cosine, Optimizer, OptimizerKind};
pub use sanitize::{remove_fragments, sanitize_mask, suppress_leakage};
pub use stages::{
    proto_targets, recommend_delta, text_trainable, train_stage_prompt_free, train_stage_savpe, train_stage_text,
    DeltaReport, EpochLog, Stage, StageReport, StepLog, TrainConfig, TrainState,
};
