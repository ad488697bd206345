//! Diagnostics over generations: fluctuation, update-forgetting, confidence
//! drop, diversity, binned correlation, and the Pinsker bound chain.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::diffusion::TokenId;
use crate::error::{Error, Result};
use crate::guidance::GenerationTrace;

/// Normalized Hamming distance.
pub fn fluctuation(prev: &[TokenId], next: &[TokenId]) -> Result<f64> {
    if prev.len() != next.len() {
        return Err(Error::Contract(format!(
            "fluctuation of sequences of length {} and {}",
            prev.len(),
            next.len()
        )));
    }
    if prev.is_empty() {
        return Ok(0.0);
    }
    let diff = prev.iter().zip(next).filter(|(a, b)| a != b).count();
    Ok(diff as f64 / prev.len() as f64)
}

/// `R_s` for every step `s >= 1`: the distance between the tokens a step
/// starts from (the previous step's output) and the tokens it produces.
/// Entry `s - 1` of the result belongs to step `s`.
pub fn step_fluctuations(trace: &GenerationTrace) -> Result<Vec<f64>> {
    trace
        .records
        .windows(2)
        .map(|w| fluctuation(&w[0].tokens, &w[1].tokens))
        .collect()
}

/// Mean of `R_s` over steps `1..=upto`.
pub fn mean_fluctuation(trace: &GenerationTrace, upto: usize) -> Result<f64> {
    if upto == 0 || upto >= trace.len() {
        return Err(Error::Contract(format!(
            "fluctuation is defined for steps 1..{}, asked for {upto}",
            trace.len()
        )));
    }
    let r = step_fluctuations(trace)?;
    Ok(r[..upto].iter().sum::<f64>() / upto as f64)
}

/// Mean fluctuation over the whole trace (0 for single-step traces).
pub fn trace_fluctuation(trace: &GenerationTrace) -> Result<f64> {
    if trace.len() < 2 {
        return Ok(0.0);
    }
    mean_fluctuation(trace, trace.len() - 1)
}

/// Fraction of step `step`'s first `k` key tokens whose token differs in the
/// following step's output.
pub fn key_token_change(trace: &GenerationTrace, step: usize, k: usize) -> Result<f64> {
    if step + 1 >= trace.len() {
        return Err(Error::Contract(format!("step {step} has no successor in a trace of {}", trace.len())));
    }
    let (cur, next) = (&trace.records[step], &trace.records[step + 1]);
    if k == 0 || k > cur.key_tokens.len() {
        return Err(Error::TraceSchema {
            record: step,
            reason: format!("{} key tokens recorded, {k} requested", cur.key_tokens.len()),
        });
    }
    let keys = &cur.key_tokens[..k];
    if keys.iter().any(|&i| i >= cur.tokens.len() || i >= next.tokens.len()) {
        return Err(Error::TraceSchema {
            record: step,
            reason: "key token index out of range".into(),
        });
    }
    let changed = keys.iter().filter(|&&i| cur.tokens[i] != next.tokens[i]).count();
    Ok(changed as f64 / k as f64)
}

/// Mean key-token change ratio over every step that has a successor.
pub fn mean_key_token_change(trace: &GenerationTrace, k: usize) -> Result<f64> {
    if trace.len() < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for s in 0..trace.len() - 1 {
        sum += key_token_change(trace, s, k)?;
    }
    Ok(sum / (trace.len() - 1) as f64)
}

/// `conf_after_guidance - conf_before_next` at `step`.
pub fn confidence_drop(trace: &GenerationTrace, step: usize) -> Result<f64> {
    let r = trace.records.get(step).ok_or_else(|| Error::TraceSchema {
        record: step,
        reason: "no such record".into(),
    })?;
    match (r.conf_after_guidance, r.conf_before_next) {
        (Some(a), Some(b)) => Ok(a - b),
        _ => Err(Error::TraceSchema {
            record: step,
            reason: "confidence fields missing".into(),
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub r_t: f64,
    pub key_change_ratio: f64,
    pub conf_drop: f64,
}

/// Per-step metrics for steps `1..len - 1`, i.e. every step with both a
/// predecessor and a successor.
pub fn step_metrics(trace: &GenerationTrace, k: usize) -> Result<Vec<StepMetrics>> {
    let r = step_fluctuations(trace)?;
    (1..trace.len().saturating_sub(1))
        .map(|s| {
            Ok(StepMetrics {
                r_t: r[s - 1],
                key_change_ratio: key_token_change(trace, s, k)?,
                conf_drop: confidence_drop(trace, s)?,
            })
        })
        .collect()
}

/// Distinct-n: unique n-grams over total n-grams, pooled over samples.
pub fn dist_n(samples: &[Vec<TokenId>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("dist-n needs n >= 1".into()));
    }
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for s in samples {
        for g in s.windows(n) {
            seen.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Undefined(format!("no sequence has {n} tokens")));
    }
    Ok(seen.len() as f64 / total as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract("pearson needs two equal-length series of >= 2 points".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation of per-bin means after sorting by `x` and cutting the
/// points into `bins` equal-count bins (sizes differ by at most one).
pub fn binned_correlation(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract("binned correlation of unequal series".into()));
    }
    if bins < 2 || x.len() < 2 * bins {
        return Err(Error::Contract(format!("{} points cannot fill {bins} bins of two", x.len())));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut bx = Vec::with_capacity(bins);
    let mut by = Vec::with_capacity(bins);
    for b in 0..bins {
        let (lo, hi) = (b * x.len() / bins, (b + 1) * x.len() / bins);
        let idx = &order[lo..hi];
        let m = idx.len() as f64;
        bx.push(idx.iter().map(|&i| x[i]).sum::<f64>() / m);
        by.push(idx.iter().map(|&i| y[i]).sum::<f64>() / m);
    }
    pearson(&bx, &by)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta_r: f64,
    pub tv_lower: f64,
    pub kl_lower: f64,
    /// Lower bound on the per-step cross-entropy increment.
    pub ce_bound_increment: f64,
}

/// `|dR| <= TV <= sqrt(KL / 2)`, hence `KL >= 2 dR^2`.
pub fn pinsker_bound(delta_r: f64) -> Result<BoundReport> {
    if !(-1.0..=1.0).contains(&delta_r) {
        return Err(Error::Domain(format!("excess fluctuation must be in [-1, 1], got {delta_r}")));
    }
    let kl = 2.0 * delta_r * delta_r;
    Ok(BoundReport {
        delta_r,
        tv_lower: delta_r.abs(),
        kl_lower: kl,
        ce_bound_increment: kl,
    })
}

/// `KL(p || q)` in nats; infinite when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract("KL of distributions over different supports".into()));
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Jaccard overlap of the two sequences' trigram sets. A cheap lexical
/// similarity offered alongside Hamming distance; not a semantic embedding.
pub fn trigram_overlap(a: &[TokenId], b: &[TokenId]) -> Result<f64> {
    let ga: HashSet<&[TokenId]> = a.windows(3).collect();
    let gb: HashSet<&[TokenId]> = b.windows(3).collect();
    let union = ga.union(&gb).count();
    if union == 0 {
        return Err(Error::Undefined("both sequences are shorter than 3 tokens".into()));
    }
    Ok(ga.intersection(&gb).count() as f64 / union as f64)
}
