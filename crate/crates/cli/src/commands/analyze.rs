use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tta_core::allocation::PolicyKind;
use tta_core::data::NaiveBayes;
use tta_core::guidance::GenerationTrace;
use tta_core::metrics::{binned_correlation, dist_n, key_token_change, step_fluctuations, trace_fluctuation};
use tta_core::models::reference::DEFAULT_ADD_K;
use tta_core::models::ReferenceLm;

use super::generate::trace_file;
use super::{json_pretty, load_corpus, RunInfo, SampleRecord, RUN_FILE, SAMPLES_FILE};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::Stage;

pub const STEPS_FILE: &str = "steps.csv";
pub const PER_SAMPLE_FILE: &str = "samples.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// One row of the per-step table; optional columns are empty when the trace
/// carries no classifier information.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub r_t: f64,
    /// Running mean of `R_s` over steps `1..=step`.
    pub mean_r: f64,
    pub key_change_ratio: Option<f64>,
    pub conf_after: Option<f64>,
    pub conf_before_next: Option<f64>,
    pub drop: Option<f64>,
}

/// Per-step rows averaged over `traces`, for every step with both a
/// predecessor and a successor.
pub fn step_rows(traces: &[GenerationTrace], key_tokens: usize) -> Result<Vec<StepRow>> {
    let Some(first) = traces.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if let Some(i) = traces.iter().position(|t| t.len() != len) {
        return Err(tta_core::Error::TraceSchema {
            record: traces[i].len().min(len),
            reason: format!("trace {i} has {} steps, trace 0 has {len}", traces[i].len()),
        }
        .into());
    }
    let fluct: Vec<Vec<f64>> = traces.iter().map(step_fluctuations).collect::<tta_core::Result<_>>()?;
    let n = traces.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_opt = |v: Vec<Option<f64>>| -> Option<f64> { v.into_iter().collect::<Option<Vec<_>>>().map(|v| mean(&v)) };

    let mut rows = Vec::new();
    let mut cum = 0.0;
    for s in 1..len.saturating_sub(1) {
        let r_t = fluct.iter().map(|f| f[s - 1]).sum::<f64>() / n;
        cum += r_t;
        let key = traces
            .iter()
            .map(|t| match t.records[s].key_tokens.is_empty() {
                true => Ok(None),
                false => key_token_change(t, s, key_tokens).map(Some),
            })
            .collect::<tta_core::Result<Vec<_>>>()?;
        let after: Vec<Option<f64>> = traces.iter().map(|t| t.records[s].conf_after_guidance).collect();
        let before: Vec<Option<f64>> = traces.iter().map(|t| t.records[s].conf_before_next).collect();
        let drops = after.iter().zip(&before).map(|(a, b)| Some((*a)? - (*b)?)).collect();
        rows.push(StepRow {
            step: s,
            r_t,
            mean_r: cum / s as f64,
            key_change_ratio: mean_opt(key),
            conf_after: mean_opt(after),
            conf_before_next: mean_opt(before),
            drop: mean_opt(drops),
        });
    }
    Ok(rows)
}

/// Fixed six-decimal CSV rendering of [`step_rows`].
pub fn steps_csv(rows: &[StepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("step,R_t,mean_R,key_change_ratio,conf_after,conf_before_next,drop\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{},{},{}\n",
            r.step,
            r.r_t,
            r.mean_r,
            opt(r.key_change_ratio),
            opt(r.conf_after),
            opt(r.conf_before_next),
            opt(r.drop)
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub seed: u64,
    pub mean_fluctuation: f64,
    pub mean_key_change: Option<f64>,
    pub mean_conf_drop: Option<f64>,
    pub ppl: f64,
    pub predicted_label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub policy: PolicyKind,
    pub lambda: f64,
    pub samples: usize,
    pub mean_fluctuation: f64,
    pub mean_key_change: Option<f64>,
    pub mean_conf_drop: Option<f64>,
    pub dist3: f64,
    pub ppl: f64,
    /// Fraction of samples the evaluation classifier assigns to the target label.
    pub accuracy: f64,
    /// Binned correlation of per-sample mean fluctuation with perplexity.
    pub binned_r: Option<f64>,
}

/// Seed-paired comparison of two runs at the same lambda. The win fractions
/// count samples where `candidate` is no worse than `baseline`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub lambda: f64,
    pub baseline: String,
    pub candidate: String,
    pub pairs: usize,
    pub fluctuation_wins: f64,
    pub key_change_wins: Option<f64>,
    pub ppl_wins: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub source: PathBuf,
    pub runs: Vec<RunSummary>,
    pub comparisons: Vec<PairedComparison>,
}

/// A run directory read back from disk and scored.
#[derive(Clone, Debug)]
pub struct RunAnalysis {
    pub info: RunInfo,
    pub summary: RunSummary,
    pub samples: Vec<SampleMetrics>,
    pub steps: Vec<StepRow>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn read_run(dir: &Path) -> Result<(RunInfo, Vec<SampleRecord>, Vec<GenerationTrace>)> {
    let info: RunInfo = serde_json::from_str(&read_text(&dir.join(RUN_FILE))?).map_err(tta_core::Error::from)?;
    let samples = read_text(&dir.join(SAMPLES_FILE))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::from(tta_core::Error::from(e))))
        .collect::<Result<Vec<SampleRecord>>>()?;
    let traces = samples
        .iter()
        .map(|s| {
            let p = dir.join(trace_file(s.index));
            let f = fs::File::open(&p).map_err(|e| CliError::io(&p, e))?;
            let trace = GenerationTrace::read_jsonl(BufReader::new(f))?;
            if trace.final_tokens() != Some(s.tokens.as_slice()) {
                return Err(tta_core::Error::Contract(format!("{} does not end in sample {}", p.display(), s.index)).into());
            }
            Ok(trace)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((info, samples, traces))
}

/// Run directories (those holding a run file) directly under `dir`, sorted by name.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut runs = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        if p.join(RUN_FILE).is_file() {
            runs.push(p);
        }
    }
    runs.sort();
    Ok(runs)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn mean_opt(v: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    v.into_iter().collect::<Option<Vec<_>>>().filter(|v| !v.is_empty()).map(mean)
}

fn score_run(
    info: RunInfo,
    samples: &[SampleRecord],
    traces: &[GenerationTrace],
    lm: &ReferenceLm,
    nb: &NaiveBayes,
    cfg: &RunConfig,
) -> Result<RunAnalysis> {
    let k = cfg.analyze.key_tokens;
    let mut metrics = Vec::with_capacity(samples.len());
    for (s, t) in samples.iter().zip(traces) {
        let key = match t.records.iter().all(|r| !r.key_tokens.is_empty()) && t.len() > 1 {
            true => Some(tta_core::metrics::mean_key_token_change(t, k)?),
            false => None,
        };
        let drops = mean_opt(
            t.records[..t.len().saturating_sub(1)]
                .iter()
                .map(|r| Some(r.conf_after_guidance? - r.conf_before_next?)),
        );
        metrics.push(SampleMetrics {
            index: s.index,
            seed: s.seed,
            mean_fluctuation: trace_fluctuation(t)?,
            mean_key_change: key,
            mean_conf_drop: drops,
            ppl: lm.perplexity(&s.tokens)?,
            predicted_label: nb.predict(&s.tokens),
        });
    }
    let fl: Vec<f64> = metrics.iter().map(|m| m.mean_fluctuation).collect();
    let ppl: Vec<f64> = metrics.iter().map(|m| m.ppl).collect();
    let tokens: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
    let hits = metrics.iter().filter(|m| m.predicted_label == info.target_label).count();
    let summary = RunSummary {
        run: info.name.clone(),
        policy: info.policy.kind,
        lambda: info.lambda,
        samples: samples.len(),
        mean_fluctuation: mean(fl.iter().copied()),
        mean_key_change: mean_opt(metrics.iter().map(|m| m.mean_key_change)),
        mean_conf_drop: mean_opt(metrics.iter().map(|m| m.mean_conf_drop)),
        dist3: dist_n(&tokens, 3)?,
        ppl: mean(ppl.iter().copied()),
        accuracy: hits as f64 / samples.len() as f64,
        binned_r: binned_correlation(&fl, &ppl, cfg.analyze.bins).ok(),
    };
    Ok(RunAnalysis {
        steps: step_rows(traces, k)?,
        info,
        summary,
        samples: metrics,
    })
}

fn compare(baseline: &RunAnalysis, candidate: &RunAnalysis) -> Option<PairedComparison> {
    let pairs: Vec<(&SampleMetrics, &SampleMetrics)> = baseline
        .samples
        .iter()
        .filter_map(|b| candidate.samples.iter().find(|c| c.seed == b.seed).map(|c| (b, c)))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let frac = |f: &dyn Fn(&SampleMetrics, &SampleMetrics) -> bool| pairs.iter().filter(|(b, c)| f(b, c)).count() as f64 / n;
    let key_change_wins = pairs
        .iter()
        .map(|(b, c)| Some(c.mean_key_change? <= b.mean_key_change?))
        .collect::<Option<Vec<bool>>>()
        .map(|w| w.iter().filter(|&&x| x).count() as f64 / n);
    Some(PairedComparison {
        lambda: baseline.info.lambda,
        baseline: baseline.info.name.clone(),
        candidate: candidate.info.name.clone(),
        pairs: pairs.len(),
        fluctuation_wins: frac(&|b, c| c.mean_fluctuation <= b.mean_fluctuation),
        key_change_wins,
        ppl_wins: frac(&|b, c| c.ppl <= b.ppl),
    })
}

fn samples_csv(samples: &[SampleMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("index,seed,mean_fluctuation,mean_key_change,mean_conf_drop,ppl,predicted_label\n");
    for m in samples {
        out.push_str(&format!(
            "{},{},{:.6},{},{},{:.6},{}\n",
            m.index,
            m.seed,
            m.mean_fluctuation,
            opt(m.mean_key_change),
            opt(m.mean_conf_drop),
            m.ppl,
            m.predicted_label
        ));
    }
    out
}

fn comparison_csv(runs: &[RunSummary]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("run,policy,lambda,fluctuation_ratio,key_token_change_ratio,conf_drop,accuracy,ppl,dist3,binned_r\n");
    for r in runs {
        let policy = serde_json::to_value(r.policy).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:.6},{},{},{:.6},{:.6},{:.6},{}\n",
            r.run,
            policy,
            r.lambda,
            r.mean_fluctuation,
            opt(r.mean_key_change),
            opt(r.mean_conf_drop),
            r.accuracy,
            r.ppl,
            r.dist3,
            opt(r.binned_r)
        ));
    }
    out
}

/// Scores every run of a generate stage directory.
pub fn analyze(cfg: &RunConfig) -> Result<AnalysisSummary> {
    let src = cfg.existing("analyze.traces", cfg.analyze.traces.as_ref())?;
    let dirs = find_runs(&src)?;
    if dirs.is_empty() {
        return Err(CliError::Usage(format!("no generation runs under {}", src.display())));
    }
    let mut stage = Stage::begin(cfg, "analyze")?;
    let (train_set, _) = load_corpus(cfg)?;
    let lm = ReferenceLm::fit(train_set.sequences(), cfg.corpus.spec.vocab_size, DEFAULT_ADD_K)?;
    let nb = NaiveBayes::fit(&train_set);

    let mut analyses = Vec::new();
    for dir in &dirs {
        let (info, samples, traces) = read_run(dir)?;
        if samples.is_empty() {
            return Err(CliError::Usage(format!("{} holds no samples", dir.display())));
        }
        let a = score_run(info, &samples, &traces, &lm, &nb, cfg)?;
        stage.write(Path::new(&a.info.name).join(STEPS_FILE), steps_csv(&a.steps).as_bytes())?;
        stage.write(Path::new(&a.info.name).join(PER_SAMPLE_FILE), samples_csv(&a.samples).as_bytes())?;
        analyses.push(a);
    }

    let mut comparisons = Vec::new();
    for base in analyses.iter().filter(|a| a.info.policy.kind == PolicyKind::Constant) {
        for cand in analyses.iter().filter(|a| a.info.policy.kind != PolicyKind::Constant && a.info.lambda == base.info.lambda) {
            comparisons.extend(compare(base, cand));
        }
    }
    let runs: Vec<RunSummary> = analyses.into_iter().map(|a| a.summary).collect();
    stage.write(COMPARISON_FILE, comparison_csv(&runs).as_bytes())?;
    let summary = AnalysisSummary {
        source: src,
        runs,
        comparisons,
    };
    stage.write(SUMMARY_FILE, &json_pretty(&summary)?)?;
    stage.finish()?;
    Ok(summary)
}
