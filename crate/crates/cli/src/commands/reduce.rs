use serde::{Deserialize, Serialize};
use tta_core::models::train::{reduce_steps, sequence_cross_entropy, RolloutConfig};
use tta_core::models::Denoiser;
use tta_core::rng::derive_seed;

use super::{json_pretty, load_corpus, sequences, stream, streams};
use crate::config::RunConfig;
use crate::error::Result;
use crate::manifest::Stage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentReport {
    pub ratio: f64,
    #[serde(rename = "T")]
    pub t_max: usize,
    pub file: String,
    pub final_loss: Option<f64>,
    /// Held-out sequence cross-entropy of the student at its own step count.
    pub student_ce: f64,
    /// The teacher at the same number of inference steps.
    pub teacher_ce_same_steps: f64,
    /// The teacher at its full step count.
    pub teacher_ce_full: f64,
}

/// Runs the reduction ladder, each student starting from the previous one.
pub fn reduce(cfg: &RunConfig) -> Result<Vec<StudentReport>> {
    let teacher_path = cfg.existing("reduce.teacher", cfg.reduce.teacher.as_ref())?;
    let mut stage = Stage::begin(cfg, "reduce")?;
    let teacher = Denoiser::<f64>::load(&teacher_path)?;
    let (train_set, test_set) = load_corpus(cfg)?;
    let seqs = sequences(&train_set);
    let held: Vec<Vec<usize>> = sequences(&test_set).into_iter().take(cfg.reduce.eval_sequences).collect();
    let base_t = teacher.schedule().t_max();
    let ft = &cfg.reduce.finetune;
    let eval_seed = stage.seed("eval", stream(cfg, streams::REDUCE_EVAL));
    let ce = |m: &Denoiser<f64>, steps: usize| {
        let rc = RolloutConfig {
            steps,
            prompt_len: ft.prompt_len,
            top_p: ft.top_p,
        };
        sequence_cross_entropy(m, &held, &rc, eval_seed)
    };
    let teacher_full = ce(&teacher, base_t)?;

    let master = stream(cfg, streams::REDUCE);
    let mut current = teacher.clone();
    let mut reports = Vec::new();
    for (i, &ratio) in cfg.reduce.ladder.iter().enumerate() {
        let seed = stage.seed(&format!("ladder_{i}"), derive_seed(master, i as u64));
        eprintln!("reducing to ratio {ratio}");
        let (student, rep) = reduce_steps(&current, ratio, base_t, &seqs, &ft.to_reduce_config(seed))?;
        let t = student.schedule().t_max();
        let file = format!("student_T{t}.ckpt");
        stage.write(&file, &student.to_bytes()?)?;
        reports.push(StudentReport {
            ratio,
            t_max: t,
            file,
            final_loss: rep.final_loss(rep.losses.len().clamp(1, 50)),
            student_ce: ce(&student, t)?,
            teacher_ce_same_steps: ce(&teacher, t)?,
            teacher_ce_full: teacher_full,
        });
        current = student;
    }
    stage.write("report.json", &json_pretty(&reports)?)?;
    stage.finish()?;
    Ok(reports)
}
