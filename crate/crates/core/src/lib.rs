//! Teacher-student distillation and start-point fine-tuning for
//! short-utterance speaker verification, at desk scale.

pub mod backend;
mod binio;
pub mod data;
pub mod error;
pub mod network;
pub mod numerics;
pub mod objectives;
pub mod regularizers;
pub mod training;

pub use backend::{compute_eer, extract_embeddings, fit_backend, BackendConfig, BackendModel, EerReport, Scoring};
pub use data::{
    crop, crop_or_whole, generate_corpus, make_trials, random_subspace, Corpus, CorpusSpec, Domain, DomainShift,
    LengthClass, Trial, TrialList, Utterance,
};
pub use error::{Error, Result};
pub use network::{
    backward, forward, lde_pool, replace_classifier, select_groups, EncoderConfig, FeatureSequence, ForwardTrace,
    Gradients, LayerSelection, ParameterSet, Pooling, Snapshot, TrainableMask,
};
pub use numerics::{Matrix, Rng};
pub use objectives::{composite_loss, ClassLoss, DistillationConfig, LossReport};
pub use regularizers::{penalty, Regularizer, SpReference};
pub use training::{
    finetune, train_baseline, train_student, train_teacher, EpochLog, FineTuneConfig, FineTuneOutcome, LrSchedule,
    TrainConfig, TrainOutcome,
};
