//! Sequence assembly for the three schemes, loss masks, the streaming
//! objective and the optimization loop.

mod assemble;
mod loss;
mod optim;
mod trainer;

pub use assemble::{
    assemble, compute_masks, next_tokens, per_frame_template, AssembledSequence, LossMask, Scheme, SeqItem,
    PER_FRAME_TEMPLATE_LEN,
};
pub use loss::{attach_loss, live_loss, LossNodes, LossTerms};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use trainer::{epoch_batches, prepare, write_log, StepLog, TrainConfig, TrainExample, Trainer, LOG_HEADER};
