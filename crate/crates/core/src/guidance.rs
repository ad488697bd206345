//! Classifier-guided reverse sampling with per-token timestep plans.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::allocation::{Allocator, ImportanceScores, SchedulePolicy};
use crate::data::EOS_ID;
use crate::diffusion::{forward_noise, project_argmax, project_top_p, reverse_step, SimplexState, TimestepPlan, TokenId};
use crate::error::{Error, Result};
use crate::models::train::strided_timestep;
use crate::models::{Classifier, Denoiser};
use crate::rng::{state_digest, RngStream};
use crate::scalar::Scalar;

/// Number of key tokens recorded per step.
pub const KEY_TOKENS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub target_label: usize,
    /// Ascent steps per diffusion step.
    pub iterations: usize,
    /// Leading fraction of the reverse steps during which guidance is applied.
    pub window: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            target_label: 1,
            iterations: 1,
            window: 1.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.window) {
            return Err(Error::Config(format!("guidance window must be in [0, 1], got {}", self.window)));
        }
        Ok(())
    }

    /// Whether step `idx` (0 = first reverse step) of `steps` is inside the window.
    pub fn active(&self, idx: usize, steps: usize) -> bool {
        idx < (self.window * steps as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Length,
}

/// Pins the end-of-sequence token at `eos_position`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexicalConstraint {
    pub kind: ConstraintKind,
    pub eos_position: usize,
}

impl LexicalConstraint {
    pub fn length(eos_position: usize) -> Self {
        Self {
            kind: ConstraintKind::Length,
            eos_position,
        }
    }
}

/// One reverse step of a generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t_global: usize,
    pub plan: Vec<usize>,
    pub tokens: Vec<TokenId>,
    pub grad_norms: Vec<f64>,
    pub key_tokens: Vec<usize>,
    pub conf_after_guidance: Option<f64>,
    pub conf_before_next: Option<f64>,
    pub seed_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationTrace {
    pub records: Vec<StepRecord>,
}

impl GenerationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_tokens(&self) -> Option<&[TokenId]> {
        self.records.last().map(|r| r.tokens.as_slice())
    }

    /// Structural checks shared by every consumer of a trace.
    pub fn validate(&self) -> Result<()> {
        let n = self.records.first().map(|r| r.tokens.len()).unwrap_or(0);
        for (i, r) in self.records.iter().enumerate() {
            let err = |reason: String| Err(Error::TraceSchema { record: i, reason });
            if r.step != i {
                return err(format!("step {} out of order", r.step));
            }
            if r.tokens.len() != n || r.plan.len() != n {
                return err(format!("expected {n} tokens and plan entries"));
            }
            if !r.grad_norms.is_empty() && r.grad_norms.len() != n {
                return err(format!("{} gradient norms for {n} tokens", r.grad_norms.len()));
            }
            if r.key_tokens.iter().any(|&k| k >= n) {
                return err("key token index out of range".into());
            }
        }
        Ok(())
    }

    /// One JSON object per line, fields in declaration order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("json is utf-8"))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| Error::TraceSchema {
                record: i,
                reason: e.to_string(),
            })?;
            records.push(rec);
        }
        let trace = Self { records };
        trace.validate()?;
        Ok(trace)
    }
}

/// `x <- x + lambda * grad log P(target | x)`, repeated `iterations` times.
/// The importance scores come from the gradient of the last iteration; with
/// zero iterations the gradient is still evaluated once for scoring.
pub fn guided_update<T: Scalar>(
    x: &SimplexState<T>,
    clf: &Classifier<T>,
    cfg: &GuidanceConfig,
) -> Result<(SimplexState<T>, ImportanceScores)> {
    cfg.validate()?;
    let mut state = x.clone();
    let lambda = T::lit(cfg.lambda);
    let mut last = None;
    for it in 0..cfg.iterations.max(1) {
        let (_, grad) = clf.log_prob_grad(&state, cfg.target_label)?;
        if !grad.is_finite() {
            return Err(Error::Guidance {
                iteration: it,
                reason: "classifier gradient is not finite".into(),
            });
        }
        if it < cfg.iterations && cfg.lambda > 0.0 {
            let mut logits = state.into_logits();
            for (v, &g) in logits.data_mut().iter_mut().zip(grad.data()) {
                *v += lambda * g;
            }
            state = SimplexState::from_logits(logits)?;
        }
        last = Some(grad);
    }
    let scores = ImportanceScores::from_gradients(&last.expect("at least one gradient"))?;
    Ok((state, scores))
}

/// Overwrites the listed rows with the `±K` encodings of `ids`.
pub fn clamp<T: Scalar>(x: &SimplexState<T>, ids: &[TokenId], positions: &[usize], k: T) -> Result<SimplexState<T>> {
    if ids.len() != positions.len() {
        return Err(Error::Contract(format!(
            "{} ids for {} clamp positions",
            ids.len(),
            positions.len()
        )));
    }
    let mut out = x.clone();
    for (&p, &id) in positions.iter().zip(ids) {
        out.set_token(p, id, k)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Reverse steps; global timesteps are `round(T * s / steps)`.
    pub steps: usize,
    pub seq_len: usize,
    pub top_p: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            seq_len: 16,
            top_p: 0.9,
        }
    }
}

/// Everything one generation reads. Parameters are borrowed immutably, so
/// many generations can share them across threads.
#[derive(Clone, Debug)]
pub struct Generator<'a, T> {
    pub denoiser: &'a Denoiser<T>,
    pub classifier: Option<&'a Classifier<T>>,
    pub policy: SchedulePolicy,
    pub guidance: Option<GuidanceConfig>,
    pub constraint: Option<LexicalConstraint>,
    pub prompt: Vec<TokenId>,
    pub sampler: SamplerConfig,
}

impl<'a, T: Scalar> Generator<'a, T> {
    pub fn new(denoiser: &'a Denoiser<T>, sampler: SamplerConfig) -> Self {
        Self {
            denoiser,
            classifier: None,
            policy: SchedulePolicy::new(crate::allocation::PolicyKind::Constant),
            guidance: None,
            constraint: None,
            prompt: Vec::new(),
            sampler,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t_max = self.denoiser.schedule().t_max();
        let n = self.sampler.seq_len;
        if self.sampler.steps == 0 || self.sampler.steps > t_max {
            return Err(Error::Config(format!(
                "steps must be in 1..={t_max}, got {}",
                self.sampler.steps
            )));
        }
        if n == 0 {
            return Err(Error::Config("seq_len must be >= 1".into()));
        }
        if self.prompt.len() > n {
            return Err(Error::Config(format!("prompt of {} tokens exceeds length {n}", self.prompt.len())));
        }
        if let Some(c) = &self.constraint {
            if c.eos_position >= n {
                return Err(Error::Config(format!("eos_position {} outside 0..{n}", c.eos_position)));
            }
        }
        if self.policy.needs_scores() && self.classifier.is_none() {
            return Err(Error::Config("adaptive policy requires a classifier".into()));
        }
        if self.classifier.is_some() && self.guidance.is_none() {
            return Err(Error::Config("a classifier needs a guidance config (target label)".into()));
        }
        if let Some(g) = &self.guidance {
            g.validate()?;
            if let Some(c) = self.classifier {
                if g.target_label >= c.config().num_labels {
                    return Err(Error::Config(format!(
                        "target_label {} but the classifier has {} labels",
                        g.target_label,
                        c.config().num_labels
                    )));
                }
            }
        }
        self.policy.validate()
    }

    /// Positions and tokens held fixed at every step.
    fn clamped(&self) -> (Vec<usize>, Vec<TokenId>) {
        let mut pos: Vec<usize> = (0..self.prompt.len()).collect();
        let mut ids = self.prompt.clone();
        if let Some(c) = &self.constraint {
            if let Some(i) = pos.iter().position(|&p| p == c.eos_position) {
                ids[i] = EOS_ID;
            } else {
                pos.push(c.eos_position);
                ids.push(EOS_ID);
            }
        }
        (pos, ids)
    }

    fn confidence(&self, x: &SimplexState<T>) -> Result<Option<f64>> {
        match (self.classifier, &self.guidance) {
            (Some(c), Some(g)) => Ok(Some(c.classify(x)?[g.target_label].as_f64())),
            _ => Ok(None),
        }
    }

    /// Runs the reverse process. Every random draw comes from `rng`, and the
    /// number of draws does not depend on the policy, so runs that differ only
    /// in their policy share their noise.
    pub fn generate(&self, rng: &mut RngStream) -> Result<(Vec<TokenId>, GenerationTrace)> {
        self.generate_observed(rng, |_, _| {})
    }

    /// [`Generator::generate`], calling `observe(step, x)` with the noisy
    /// state entering every reverse step.
    pub fn generate_observed<F>(&self, rng: &mut RngStream, mut observe: F) -> Result<(Vec<TokenId>, GenerationTrace)>
    where
        F: FnMut(usize, &SimplexState<T>),
    {
        self.validate()?;
        let sched = self.denoiser.schedule();
        let (t_max, k) = (sched.t_max(), sched.k());
        let (n, steps) = (self.sampler.seq_len, self.sampler.steps);
        let v = self.denoiser.config().vocab_size;
        let (fixed_pos, fixed_ids) = self.clamped();
        let mut allocator = Allocator::new(self.policy.clone())?;
        let freeze = |plan: &mut TimestepPlan| {
            for &p in &fixed_pos {
                plan.as_mut_slice()[p] = 0;
            }
        };

        let mut plan = TimestepPlan::constant(n, t_max);
        freeze(&mut plan);
        let start = clamp(&SimplexState::encode(&vec![0; n], v, k)?, &fixed_ids, &fixed_pos, k)?;
        let mut x = forward_noise(&start, &plan, sched, rng)?;
        let mut trace = GenerationTrace::default();
        let mut last = None;

        for (idx, s) in (1..=steps).rev().enumerate() {
            let t = strided_timestep(t_max, s, steps);
            if idx == 0 {
                plan = TimestepPlan::constant(n, t);
                freeze(&mut plan);
            }
            observe(idx, &x);
            let logits = self.denoiser.denoise(&x, &plan)?;
            let mut x_hat = project_top_p(&logits, self.sampler.top_p, k, rng)?;
            for (i, &ti) in plan.as_slice().iter().enumerate() {
                if ti == 0 {
                    x_hat.row_mut(i).copy_from_slice(x.row(i));
                }
            }
            if let Some(prev) = trace.records.last_mut() {
                prev.conf_before_next = self.confidence(&x_hat)?;
            }

            let mut scores = None;
            if let (Some(clf), Some(g)) = (self.classifier, &self.guidance) {
                let mut cfg = g.clone();
                if !g.active(idx, steps) {
                    cfg.lambda = 0.0;
                }
                let (guided, sc) = guided_update(&x_hat, clf, &cfg).map_err(|e| match e {
                    Error::Guidance { iteration, reason } => Error::Guidance {
                        iteration,
                        reason: format!("{reason} (reverse step {idx}, t = {t})"),
                    },
                    other => other,
                })?;
                if cfg.lambda > 0.0 && cfg.iterations > 0 {
                    x_hat = project_argmax(&guided, k);
                }
                scores = Some(sc);
            }
            let x_out = clamp(&x_hat, &fixed_ids, &fixed_pos, k)?;

            trace.records.push(StepRecord {
                step: idx,
                t_global: t,
                plan: plan.as_slice().to_vec(),
                tokens: x_out.decode(),
                grad_norms: scores.as_ref().map(|s| s.raw().to_vec()).unwrap_or_default(),
                key_tokens: scores.as_ref().map(|s| s.top_k(KEY_TOKENS)).unwrap_or_default(),
                conf_after_guidance: self.confidence(&x_out)?,
                conf_before_next: None,
                seed_digest: state_digest(rng),
            });

            if s > 1 {
                let t_next = strided_timestep(t_max, s - 1, steps);
                plan = allocator.plan(t_next, n, t_max, scores.as_ref())?;
                freeze(&mut plan);
                x = reverse_step(&x_out, &plan, sched, rng)?;
            }
            last = Some(x_out);
        }
        let tokens = last.expect("at least one step").decode();
        Ok((tokens, trace))
    }
}
