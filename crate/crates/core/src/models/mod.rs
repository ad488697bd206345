//! Learned components: the denoiser, the attribute classifier, the trigram
//! fluency judge, and their training loops.

pub mod checkpoint;
pub mod classifier;
pub mod denoiser;
pub mod params;
pub mod reference;
pub mod train;

pub use classifier::{Classifier, ClassifierConfig};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use params::{Adam, AdamConfig, ParamStore};
pub use reference::{reference_perplexity, ReferenceLm};
pub use train::{
    reduce_steps, sequence_cross_entropy, train_classifier, train_denoiser, ReduceConfig, RolloutConfig,
    TrainConfig, TrainReport,
};
