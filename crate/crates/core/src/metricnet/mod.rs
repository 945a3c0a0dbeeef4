//! Embedding head, triplet mining and loss, training, gradient checking.

pub mod gradcheck;
pub mod head;
pub mod train;
pub mod triplet;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamSelection};
pub use head::{embed, Embedding, EmbeddingHead, EMBEDDING_DIM, UNIT_NORM_TOL};
pub use train::{evaluate_batch, train_staged, train_staged_with, EpochLog, TrainConfig, TrainOutcome};
pub use triplet::{mine_hard_triplets, pairwise_distances, triplet_loss, Mining, Triplet, TripletLoss, DEFAULT_MARGIN};
