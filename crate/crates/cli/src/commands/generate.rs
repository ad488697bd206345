use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tta_core::allocation::SchedulePolicy;
use tta_core::data::detokenize;
use tta_core::guidance::{GenerationTrace, Generator, GuidanceConfig, SamplerConfig};
use tta_core::models::{Classifier, Denoiser};
use tta_core::rng::{derive_seed, seeded};

use super::{json_line, json_pretty, stream, streams};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::Stage;

pub const RUN_FILE: &str = "run.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";

/// Settings of one (policy, lambda) run, stored next to its samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub name: String,
    pub policy: SchedulePolicy,
    pub lambda: f64,
    pub target_label: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub tokens: Vec<usize>,
    pub text: String,
}

pub fn run_name(policy: &SchedulePolicy, lambda: f64) -> String {
    let kind = serde_json::to_value(policy.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    let mut name = kind;
    if let Some(a) = policy.alpha_smooth {
        name.push_str(&format!("{a}"));
    }
    if let Some(seed) = policy.seed {
        name.push_str(&format!("_seed{seed}"));
    }
    format!("{name}_lambda{lambda}")
}

pub fn trace_file(index: usize) -> String {
    format!("traces/sample_{index:04}.jsonl")
}

/// One run per (policy, lambda) pair, sharing per-sample seeds across runs.
pub fn generate(cfg: &RunConfig) -> Result<Vec<RunInfo>> {
    let g = &cfg.generate;
    let den_path = cfg.existing("generate.denoiser", g.denoiser.as_ref())?;
    let clf_path = match &g.classifier {
        Some(_) => Some(cfg.existing("generate.classifier", g.classifier.as_ref())?),
        None => None,
    };
    let target = cfg.label_index()?;
    let mut stage = Stage::begin(cfg, "generate")?;
    let den = Denoiser::<f64>::load(&den_path)?;
    let clf = clf_path.map(|p| Classifier::<f64>::load(&p)).transpose()?;
    if den.config().vocab_size != cfg.corpus.spec.vocab_size {
        return Err(CliError::config(
            "generate.denoiser",
            format!("checkpoint has V={}, corpus has V={}", den.config().vocab_size, cfg.corpus.spec.vocab_size),
        ));
    }
    let master = stage.seed("samples", stream(cfg, streams::GENERATE));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::config("generate.threads", e.to_string()))?;

    let mut names: Vec<String> = g.policies.iter().flat_map(|p| g.lambdas.iter().map(|&l| run_name(p, l))).collect();
    names.sort();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(CliError::config("generate.policies", format!("run {} is listed twice", w[0])));
    }

    let mut runs = Vec::new();
    for policy in &g.policies {
        for &lambda in &g.lambdas {
            let name = run_name(policy, lambda);
            eprintln!("generating {} samples for {name}", g.samples);
            let mut gen = Generator::new(
                &den,
                SamplerConfig {
                    steps: g.steps,
                    seq_len: cfg.corpus.spec.seq_len,
                    top_p: g.top_p,
                },
            );
            gen.classifier = clf.as_ref();
            gen.policy = policy.clone();
            gen.prompt = g.prompt.clone();
            gen.constraint = g.constraint.clone();
            if clf.is_some() {
                gen.guidance = Some(GuidanceConfig {
                    lambda,
                    target_label: target,
                    iterations: g.iterations,
                    window: g.window,
                });
            }
            gen.validate()?;
            let results: Vec<(u64, Vec<usize>, GenerationTrace)> = pool.install(|| {
                (0..g.samples)
                    .into_par_iter()
                    .map(|i| {
                        let seed = derive_seed(master, i as u64);
                        let (tokens, trace) = gen.generate(&mut seeded(seed))?;
                        Ok((seed, tokens, trace))
                    })
                    .collect::<tta_core::Result<_>>()
            })?;

            let mut samples = String::new();
            for (i, (seed, tokens, trace)) in results.iter().enumerate() {
                samples.push_str(&json_line(&SampleRecord {
                    index: i,
                    seed: *seed,
                    text: detokenize(tokens),
                    tokens: tokens.clone(),
                })?);
                stage.write(format!("{name}/{}", trace_file(i)), trace.to_jsonl()?.as_bytes())?;
            }
            stage.write(format!("{name}/{SAMPLES_FILE}"), samples.as_bytes())?;
            let info = RunInfo {
                name: name.clone(),
                policy: policy.clone(),
                lambda,
                target_label: target,
                samples: g.samples,
            };
            stage.write(format!("{name}/{RUN_FILE}"), &json_pretty(&info)?)?;
            runs.push(info);
        }
    }
    stage.finish()?;
    Ok(runs)
}
