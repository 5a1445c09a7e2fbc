//! Hinge-loss training with Adam on a cyclic schedule, and retrieval metrics.

mod adam;
mod loss;
mod retrieval;
mod train;

pub use adam::Adam;
pub use loss::{batch_hinge_loss, cyclic_lr};
pub use retrieval::{
    encode_captions, encode_images, evaluate_retrieval, median, rank_of, retrieval_from_embeddings, write_retrieval_csv,
    Direction, RetrievalReport,
};
pub use train::{
    batch_objective, make_batches, train, train_phase, train_vq_phase, warmup_captions, BatchLoss, EpochRecord,
    PairedData, TrainConfig, TrainOutcome,
};
