pub mod analyze;
pub mod duality;
pub mod generate;
pub mod reduce;
pub mod train;

pub use analyze::{analyze, AnalysisSummary, PairedComparison, RunSummary, SampleMetrics};
pub use duality::duality;
pub use generate::{generate, run_name, RunInfo, SampleRecord, RUN_FILE, SAMPLES_FILE};
pub use reduce::{reduce, StudentReport};
pub use train::{train, TrainSummary, CLASSIFIER_FILE, DENOISER_FILE};

use tta_core::data::{split, synthesize, Corpus};
use tta_core::rng::derive_seed;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Stream indices under the master seed, one per consumer.
pub(crate) mod streams {
    pub const DENOISER_INIT: u64 = 1;
    pub const DENOISER_TRAIN: u64 = 2;
    pub const CLASSIFIER_INIT: u64 = 3;
    pub const CLASSIFIER_TRAIN: u64 = 4;
    pub const REDUCE: u64 = 10;
    pub const REDUCE_EVAL: u64 = 11;
    pub const GENERATE: u64 = 20;
    pub const DUALITY: u64 = 30;
    pub const EVAL: u64 = 40;
}

pub(crate) fn stream(cfg: &RunConfig, index: u64) -> u64 {
    derive_seed(cfg.seed, index)
}

/// The configured corpus and its train/test split.
pub(crate) fn load_corpus(cfg: &RunConfig) -> Result<(Corpus, Corpus)> {
    let corpus = match &cfg.corpus.path {
        Some(_) => {
            let path = cfg.existing("corpus.path", cfg.corpus.path.as_ref())?;
            let c = Corpus::load(&path)?;
            if c.spec.vocab_size != cfg.corpus.spec.vocab_size || c.spec.seq_len != cfg.corpus.spec.seq_len {
                return Err(CliError::config(
                    "corpus.spec",
                    format!(
                        "file has V={} N={}, config says V={} N={}",
                        c.spec.vocab_size, c.spec.seq_len, cfg.corpus.spec.vocab_size, cfg.corpus.spec.seq_len
                    ),
                ));
            }
            c
        }
        None => synthesize(&cfg.corpus.spec)?,
    };
    Ok(split(&corpus, cfg.corpus.split, cfg.corpus.split_seed)?)
}

pub(crate) fn sequences(c: &Corpus) -> Vec<Vec<usize>> {
    c.sequences().map(<[usize]>::to_vec).collect()
}

pub(crate) fn json_line<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string(value).map_err(tta_core::Error::from)?;
    s.push('\n');
    Ok(s)
}

pub(crate) fn json_pretty<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value).map_err(tta_core::Error::from)?;
    s.push('\n');
    Ok(s.into_bytes())
}
