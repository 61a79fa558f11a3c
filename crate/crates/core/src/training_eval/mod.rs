//! Optimisation, the link-prediction and classifier training procedures,
//! evaluation metrics, reports and checkpoints.

mod checkpoint;
mod metrics;
mod optimizer;
mod report;
mod tasks;
mod train;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use metrics::{filtered_rank, micro_f1, span_f1, Prf, RankingMetrics, Span};
pub use optimizer::{Adam, AdamConfig};
pub use report::MetricsReport;
pub use tasks::{
    entity_scores, evaluate_ranking, evaluate_sequence, example_gradients, example_loss, example_loss_value,
    link_ranks, load_corpus_images, predict_relation, predict_tags, Example, LinkData, SequenceData, Target,
};
pub use train::{
    apply_freeze, no_hook, train_classifier_head, train_entity_modeling, train_examples, train_link_prediction,
    EpochHook, TrainConfig, TrainTask,
};
