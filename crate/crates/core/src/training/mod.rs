//! Training: joint reconstruction + score matching with domain-adversarial
//! emotion removal from the style vector and null-embedding dropout, plus
//! the separately trained emotion classifier on noisy frames.

mod checkpoint;
mod classifier;
mod model;
mod train;

pub use checkpoint::Checkpoint;
pub(crate) use classifier::argmax;
pub use classifier::{
    classifier_accuracy, train_noisy_classifier, ClassifierConfig, ClassifierPosterior,
    LabeledExample, NoisyClassifier,
};
pub use model::{DataDims, Model};
pub use train::{
    dat_gradients, dat_step, draw_batch, train_model, DatBatch, DatRecord, LossRecord, RecordHook,
    TrainBatch, TrainConfig, TrainOutcome,
};
