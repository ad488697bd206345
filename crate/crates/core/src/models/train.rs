//! Training loops: denoiser, classifier, progressive step reduction, and the
//! held-out evaluations that go with them.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::LabeledExample;
use crate::diffusion::{forward_noise, project_top_p, reverse_step, NoiseSchedule, SimplexState, TimestepPlan, TokenId};
use crate::error::{Error, Result};
use crate::models::classifier::Classifier;
use crate::models::denoiser::Denoiser;
use crate::models::params::{Adam, AdamConfig};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::{argmax, log_sum_exp, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Longest clean prefix kept at timestep 0 (and excluded from the loss)
    /// in a denoiser batch. Teaches the model to condition on prompts.
    pub max_prefix: usize,
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 12_000,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
            max_prefix: 4,
            clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip: self.clip,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Trailing moving average with the given window.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        if self.losses.len() < w {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.losses.len() - w + 1);
        let mut acc: f64 = self.losses[..w].iter().sum();
        out.push(acc / w as f64);
        for i in w..self.losses.len() {
            acc += self.losses[i] - self.losses[i - w];
            out.push(acc / w as f64);
        }
        out
    }

    pub fn final_loss(&self, window: usize) -> Option<f64> {
        self.smoothed(window).last().copied()
    }
}

fn check_sequences(data: &[Vec<TokenId>], vocab: usize) -> Result<usize> {
    let n = data
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Contract("training corpus is empty".into()))?;
    if n == 0 || data.iter().any(|s| s.len() != n) {
        return Err(Error::Contract("training sequences must share one non-zero length".into()));
    }
    if let Some(&bad) = data.iter().flatten().find(|&&w| w >= vocab) {
        return Err(Error::Index { index: bad, bound: vocab });
    }
    Ok(n)
}

fn stack<T: Scalar>(seqs: &[&[TokenId]], vocab: usize, k: T) -> Result<SimplexState<T>> {
    let ids: Vec<TokenId> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    SimplexState::encode(&ids, vocab, k)
}

/// Minimizes the clean-token cross-entropy of `model` on noisy inputs. Each
/// batch shares one timestep `t ~ U{1..T}`.
pub fn train_denoiser<T: Scalar>(model: &mut Denoiser<T>, data: &[Vec<TokenId>], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let vocab = model.config().vocab_size;
    let n = check_sequences(data, vocab)?;
    let mut rng = seeded(cfg.seed);
    let mut opt = Adam::new(cfg.adam(), model.params());
    let mut report = TrainReport::default();
    let t_max = model.schedule().t_max();
    let k = model.schedule().k();
    for step in 0..cfg.steps {
        let batch: Vec<&[TokenId]> = (0..cfg.batch_size)
            .map(|_| data[rng.random_range(0..data.len())].as_slice())
            .collect();
        let t = rng.random_range(1..=t_max);
        let mut plan = Vec::with_capacity(batch.len() * n);
        let mut weights = Vec::with_capacity(batch.len() * n);
        for _ in 0..batch.len() {
            let prefix = rng.random_range(0..=cfg.max_prefix.min(n - 1));
            for i in 0..n {
                plan.push(if i < prefix { 0 } else { t });
                weights.push(if i < prefix { T::zero() } else { T::one() });
            }
        }
        let x0 = stack(&batch, vocab, k)?;
        let xt = forward_noise(&x0, &TimestepPlan::new(plan.clone()), model.schedule(), &mut rng)?;
        let targets = x0.decode();

        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let logits = model.forward(&mut tape, &bound, xt.logits(), &plan, n)?;
        let loss = tape.weighted_cross_entropy(logits, &targets, &weights)?;
        let lv = tape.value(loss).item()?.as_f64();
        if !lv.is_finite() {
            return Err(Error::Training { step, loss: lv });
        }
        let mut grads = tape.backward(loss)?;
        let g = model.params().collect_grads(&bound, &mut grads);
        opt.update(model.params_mut(), &g)?;
        report.losses.push(lv);
    }
    if !model.params().is_finite() {
        return Err(Error::Training {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    Ok(report)
}

/// Fits the attribute classifier on clean encoded sequences.
pub fn train_classifier<T: Scalar>(
    clf: &mut Classifier<T>,
    data: &[LabeledExample],
    k: T,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let vocab = clf.config().vocab_size;
    let seqs: Vec<Vec<TokenId>> = data.iter().map(|e| e.ids.clone()).collect();
    let n = check_sequences(&seqs, vocab)?;
    if let Some(e) = data.iter().find(|e| e.label >= clf.config().num_labels) {
        return Err(Error::Index {
            index: e.label,
            bound: clf.config().num_labels,
        });
    }
    let mut rng = seeded(cfg.seed);
    let mut opt = Adam::new(cfg.adam(), clf.params());
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let batch: Vec<&[TokenId]> = picks.iter().map(|&i| data[i].ids.as_slice()).collect();
        let labels: Vec<usize> = picks.iter().map(|&i| data[i].label).collect();
        let x = stack(&batch, vocab, k)?;
        let mut tape = Tape::new();
        let bound = clf.params().bind(&mut tape);
        let xv = tape.leaf(x.into_logits());
        let logits = clf.forward(&mut tape, &bound, xv, n)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let lv = tape.value(loss).item()?.as_f64();
        if !lv.is_finite() {
            return Err(Error::Training { step, loss: lv });
        }
        let mut grads = tape.backward(loss)?;
        let g = clf.params().collect_grads(&bound, &mut grads);
        opt.update(clf.params_mut(), &g)?;
        report.losses.push(lv);
    }
    Ok(report)
}

/// Fraction of `data` classified correctly from clean encodings.
pub fn classifier_accuracy<T: Scalar>(clf: &Classifier<T>, data: &[LabeledExample], k: T) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("accuracy over no examples".into()));
    }
    let mut hits = 0;
    for e in data {
        let x = SimplexState::encode(&e.ids, clf.config().vocab_size, k)?;
        if argmax(&clf.classify(&x)?) == e.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Per-token argmax accuracy of the denoiser on `data` noised at a constant
/// timestep `t`.
pub fn denoising_accuracy<T: Scalar>(model: &Denoiser<T>, data: &[Vec<TokenId>], t: usize, seed: u64) -> Result<f64> {
    let vocab = model.config().vocab_size;
    let n = check_sequences(data, vocab)?;
    let mut rng = seeded(seed);
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in data.chunks(64) {
        let seqs: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        let x0 = stack(&seqs, vocab, model.schedule().k())?;
        let plan = TimestepPlan::constant(x0.seq_len(), t);
        let xt = forward_noise(&x0, &plan, model.schedule(), &mut rng)?;
        let logits = model.denoise_batch(xt.logits(), plan.as_slice(), n)?;
        for (pred, want) in logits.argmax_rows().into_iter().zip(x0.decode()) {
            hits += usize::from(pred == want);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Inference steps; global timesteps are `round(T * s / steps)`.
    pub steps: usize,
    /// Leading positions clamped to the reference tokens throughout.
    pub prompt_len: usize,
    pub top_p: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            steps: 16,
            prompt_len: 4,
            top_p: 0.9,
        }
    }
}

/// Global timestep of inference step `s` (counting down from `steps`).
pub fn strided_timestep(t_max: usize, s: usize, steps: usize) -> usize {
    ((t_max * s) as f64 / steps as f64).round() as usize
}

/// Runs the model's own reverse process on a batch of reference sequences
/// whose first `prompt_len` tokens are clamped. `visit` sees, for each step
/// index (0 = noisiest), the model input, its plan, and the output logits.
fn rollout<T: Scalar, R: Rng + ?Sized>(
    model: &Denoiser<T>,
    seqs: &[&[TokenId]],
    cfg: &RolloutConfig,
    rng: &mut R,
    mut visit: impl FnMut(usize, &Tensor<T>, &[usize], &Tensor<T>),
) -> Result<()> {
    let sched = model.schedule();
    let t_max = sched.t_max();
    if cfg.steps == 0 || cfg.steps > t_max {
        return Err(Error::Config(format!("rollout steps must be in 1..={t_max}, got {}", cfg.steps)));
    }
    let n = seqs[0].len();
    if cfg.prompt_len >= n {
        return Err(Error::Config(format!("prompt length {} must be < {n}", cfg.prompt_len)));
    }
    let vocab = model.config().vocab_size;
    let k = sched.k();
    let clean = stack(seqs, vocab, k)?;
    let plan_at = |t: usize| -> Vec<usize> {
        (0..seqs.len() * n)
            .map(|r| if r % n < cfg.prompt_len { 0 } else { t })
            .collect()
    };
    let mut x = forward_noise(&clean, &TimestepPlan::new(plan_at(t_max)), sched, rng)?;
    for (idx, s) in (1..=cfg.steps).rev().enumerate() {
        let plan = plan_at(strided_timestep(t_max, s, cfg.steps));
        let logits = model.denoise_batch(x.logits(), &plan, n)?;
        visit(idx, x.logits(), &plan, &logits);
        let mut x_hat = project_top_p(&logits, cfg.top_p, k, rng)?;
        for r in (0..seqs.len() * n).filter(|r| r % n < cfg.prompt_len) {
            x_hat.row_mut(r).copy_from_slice(clean.row(r));
        }
        if s > 1 {
            let next = plan_at(strided_timestep(t_max, s - 1, cfg.steps));
            x = reverse_step(&x_hat, &TimestepPlan::new(next), sched, rng)?;
        }
    }
    Ok(())
}

/// Held-out sequence cross-entropy: mean over rollout steps and non-prompt
/// positions of the cross-entropy between the denoiser's logits and the
/// reference tokens, with the reference prompt clamped.
pub fn sequence_cross_entropy<T: Scalar>(
    model: &Denoiser<T>,
    data: &[Vec<TokenId>],
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<f64> {
    let n = check_sequences(data, model.config().vocab_size)?;
    let mut rng = seeded(seed);
    let (mut sum, mut count) = (0.0f64, 0usize);
    for chunk in data.chunks(64) {
        let seqs: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        let targets: Vec<TokenId> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        rollout(model, &seqs, cfg, &mut rng, |_, _, _, logits| {
            for (r, &y) in targets.iter().enumerate() {
                if r % n >= cfg.prompt_len {
                    let row = logits.row(r);
                    sum += (log_sum_exp(row) - row[y]).as_f64();
                    count += 1;
                }
            }
        })?;
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReduceConfig {
    /// Fine-tuning updates.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip: Option<f64>,
    /// Rollout steps per example that contribute to the loss.
    pub sampled_steps: usize,
    pub prompt_len: usize,
    pub top_p: f64,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            clip: Some(1.0),
            sampled_steps: 4,
            prompt_len: 4,
            top_p: 0.9,
        }
    }
}

/// Student step count `ceil(ratio * base_t)`.
pub fn reduced_steps(ratio: f64, base_t: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("reduction ratio must be in (0, 1], got {ratio}")));
    }
    // tolerate representation error such as 0.3 * 10 = 3.0000000000000004
    let raw = ratio * base_t as f64;
    let steps = (raw - 1e-9).ceil().max(1.0) as usize;
    Ok(steps)
}

/// Progressive step reduction. The student starts from the teacher's weights
/// on a schedule with `ceil(ratio * base_t)` steps (same offset and `K`) and
/// is fine-tuned on the unrolled cross-entropy of its own reverse process:
/// every update rolls a batch out from noise, keeps the inputs of
/// `sampled_steps` uniformly chosen steps, and minimizes the cross-entropy of
/// the student's logits at those inputs against the reference tokens.
pub fn reduce_steps<T: Scalar>(
    teacher: &Denoiser<T>,
    ratio: f64,
    base_t: usize,
    data: &[Vec<TokenId>],
    cfg: &ReduceConfig,
) -> Result<(Denoiser<T>, TrainReport)> {
    let target = reduced_steps(ratio, base_t)?;
    let ts = teacher.schedule();
    if target > ts.t_max() {
        return Err(Error::Config(format!(
            "student would have {target} steps but the teacher only has {}",
            ts.t_max()
        )));
    }
    let sched = NoiseSchedule::cosine(target, ts.offset(), ts.k())?;
    let mut student = teacher.with_schedule(sched);
    let mut report = TrainReport::default();
    if cfg.steps == 0 {
        return Ok((student, report));
    }
    let vocab = student.config().vocab_size;
    let n = check_sequences(data, vocab)?;
    if cfg.batch_size == 0 || cfg.sampled_steps == 0 {
        return Err(Error::Config("batch_size and sampled_steps must be >= 1".into()));
    }
    let rollout_cfg = RolloutConfig {
        steps: target,
        prompt_len: cfg.prompt_len,
        top_p: cfg.top_p,
    };
    let mut rng = seeded(cfg.seed);
    let adam = AdamConfig {
        lr: cfg.lr,
        clip: cfg.clip,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(adam, student.params());
    for step in 0..cfg.steps {
        let batch: Vec<&[TokenId]> = (0..cfg.batch_size)
            .map(|_| data[rng.random_range(0..data.len())].as_slice())
            .collect();
        let keep = sample_indices(&mut rng, target, cfg.sampled_steps.min(target)).into_vec();
        let mut inputs = Vec::new();
        let mut plans = Vec::new();
        rollout(&student, &batch, &rollout_cfg, &mut rng, |idx, x, plan, _| {
            if keep.contains(&idx) {
                inputs.extend_from_slice(x.data());
                plans.extend_from_slice(plan);
            }
        })?;
        let rows = plans.len();
        let x = Tensor::new(vec![rows, vocab], inputs)?;
        let targets: Vec<TokenId> = (0..keep.len())
            .flat_map(|_| batch.iter().flat_map(|s| s.iter().copied()))
            .collect();
        let weights: Vec<T> = (0..rows)
            .map(|r| if r % n < cfg.prompt_len { T::zero() } else { T::one() })
            .collect();

        let mut tape = Tape::new();
        let bound = student.params().bind(&mut tape);
        let logits = student.forward(&mut tape, &bound, &x, &plans, n)?;
        let loss = tape.weighted_cross_entropy(logits, &targets, &weights)?;
        let lv = tape.value(loss).item()?.as_f64();
        if !lv.is_finite() {
            return Err(Error::Training { step, loss: lv });
        }
        let mut grads = tape.backward(loss)?;
        let g = student.params().collect_grads(&bound, &mut grads);
        opt.update(student.params_mut(), &g)?;
        report.losses.push(lv);
    }
    Ok((student, report))
}
