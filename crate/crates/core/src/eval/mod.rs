//! Evaluation protocols: masked-token top-k recovery over block sizes, and
//! graded query/product similarity with CoSENT fine-tuning, a fixed label
//! score map, and Spearman rank correlation.

mod recovery;
mod similarity;
mod stats;

pub use recovery::{model_recovery, topk_recovery, RecoveryReport, RecoveryRow};
pub use similarity::{
    embed, esci_score_map, evaluate_similarity, fine_tune_similarity, EsciLabel, FineTuneConfig,
    FineTuneReport, SimilarityPair,
};
pub use stats::{cosent_loss_value, spearman};
