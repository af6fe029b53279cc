//! Joint feature learning: contrastive alignment between projected region
//! features and label embeddings, the linear relation head, and SGD training.

mod loss;
mod model;
mod train;

pub use loss::{contrastive_loss, contrastive_loss_with_grad, cosine_sim, ContrastiveLoss};
pub use model::batch_losses;
pub use model::{
    backward, box_delta, forward, objective_value, Forward, Gradients, Objective, PairBatch,
    RelationModel, BOX_DELTA_DIM,
};
pub use train::{train, write_loss_history, LossRecord, TrainConfig, TrainOutcome, DEFAULT_LR};
