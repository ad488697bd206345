use serde::{Deserialize, Serialize};
use tta_core::diffusion::NoiseSchedule;
use tta_core::models::train::{classifier_accuracy, denoising_accuracy, train_classifier, train_denoiser};
use tta_core::models::{Classifier, Denoiser};
use tta_core::rng::seeded;

use super::{json_pretty, load_corpus, sequences, stream, streams};
use crate::config::RunConfig;
use crate::error::Result;
use crate::manifest::Stage;

pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub denoiser_final_loss: Option<f64>,
    pub classifier_final_loss: Option<f64>,
    pub classifier_heldout_accuracy: f64,
    /// Held-out token accuracy of one denoising step from `t = T / 4`.
    pub denoising_accuracy_quarter_t: f64,
}

/// Fits the denoiser and the guidance classifier on the training split.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let mut stage = Stage::begin(cfg, "train")?;
    let (train_set, test_set) = load_corpus(cfg)?;
    let seqs = sequences(&train_set);
    let k = cfg.schedule.k;

    let sched = NoiseSchedule::cosine(cfg.schedule.t_max, cfg.schedule.s, k)?;
    let init = stage.seed("denoiser_init", stream(cfg, streams::DENOISER_INIT));
    let mut den = Denoiser::new(cfg.denoiser_config(), sched, &mut seeded(init))?;
    let seed = stage.seed("denoiser_train", stream(cfg, streams::DENOISER_TRAIN));
    eprintln!("training denoiser for {} steps", cfg.train.denoiser.steps);
    let den_report = train_denoiser(&mut den, &seqs, &cfg.train.denoiser.to_train_config(seed))?;

    let init = stage.seed("classifier_init", stream(cfg, streams::CLASSIFIER_INIT));
    let mut clf = Classifier::new(cfg.classifier_config(), &mut seeded(init))?;
    let seed = stage.seed("classifier_train", stream(cfg, streams::CLASSIFIER_TRAIN));
    eprintln!("training classifier for {} steps", cfg.train.classifier.steps);
    let clf_report = train_classifier(&mut clf, &train_set.examples, k, &cfg.train.classifier.to_train_config(seed))?;

    stage.write(DENOISER_FILE, &den.to_bytes()?)?;
    stage.write(CLASSIFIER_FILE, &clf.to_bytes()?)?;
    let mut losses = String::from("step,denoiser_loss\n");
    for (i, l) in den_report.losses.iter().enumerate() {
        losses.push_str(&format!("{i},{l}\n"));
    }
    stage.write("denoiser_losses.csv", losses.as_bytes())?;

    let test_seqs: Vec<Vec<usize>> = sequences(&test_set).into_iter().take(256).collect();
    let eval_seed = stage.seed("eval", stream(cfg, streams::EVAL));
    let quarter = (cfg.schedule.t_max / 4).max(1);
    let summary = TrainSummary {
        denoiser_final_loss: den_report.final_loss(100),
        classifier_final_loss: clf_report.final_loss(100),
        classifier_heldout_accuracy: classifier_accuracy(&clf, &test_set.examples, k)?,
        denoising_accuracy_quarter_t: denoising_accuracy(&den, &test_seqs, quarter, eval_seed)?,
    };
    stage.write("report.json", &json_pretty(&summary)?)?;
    stage.finish()?;
    Ok(summary)
}
