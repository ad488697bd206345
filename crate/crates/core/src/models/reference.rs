//! Smoothed trigram language model used as the fluency judge.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::TokenId;
use crate::error::{Error, Result};

pub const DEFAULT_ADD_K: f64 = 0.01;

/// Add-k trigram with backoff: a context never seen in training falls back
/// to the add-k bigram, and an unseen bigram context to the add-k unigram.
/// The first two positions are conditioned on a beginning-of-sequence symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLm {
    vocab: usize,
    add_k: f64,
    uni: Vec<f64>,
    uni_total: f64,
    /// `(V + 1) x V`, row `V` is the start context.
    bi: Vec<f64>,
    bi_total: Vec<f64>,
    /// `(V + 1)^2 x V`.
    tri: Vec<f64>,
    tri_total: Vec<f64>,
}

impl ReferenceLm {
    pub fn fit<'a>(sequences: impl IntoIterator<Item = &'a [TokenId]>, vocab: usize, add_k: f64) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::Config("reference LM needs a vocabulary of >= 2".into()));
        }
        if !(add_k > 0.0) {
            return Err(Error::Config(format!("add-k constant must be > 0, got {add_k}")));
        }
        let c = vocab + 1;
        let mut lm = Self {
            vocab,
            add_k,
            uni: vec![0.0; vocab],
            uni_total: 0.0,
            bi: vec![0.0; c * vocab],
            bi_total: vec![0.0; c],
            tri: vec![0.0; c * c * vocab],
            tri_total: vec![0.0; c * c],
        };
        let mut any = false;
        for seq in sequences {
            for (i, &w) in seq.iter().enumerate() {
                if w >= vocab {
                    return Err(Error::Index { index: w, bound: vocab });
                }
                let (u, v) = lm.context(seq, i);
                lm.uni[w] += 1.0;
                lm.uni_total += 1.0;
                lm.bi[v * vocab + w] += 1.0;
                lm.bi_total[v] += 1.0;
                lm.tri[(u * c + v) * vocab + w] += 1.0;
                lm.tri_total[u * c + v] += 1.0;
                any = true;
            }
        }
        if !any {
            return Err(Error::Contract("reference LM fit on an empty corpus".into()));
        }
        Ok(lm)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn bos(&self) -> usize {
        self.vocab
    }

    fn context(&self, seq: &[TokenId], i: usize) -> (usize, usize) {
        let at = |j: isize| if j < 0 { self.bos() } else { seq[j as usize] };
        (at(i as isize - 2), at(i as isize - 1))
    }

    /// `P(w | u, v)`; `u` and `v` may be the start symbol `V`.
    pub fn prob(&self, u: usize, v: usize, w: TokenId) -> f64 {
        let (vf, k) = (self.vocab as f64, self.add_k);
        let c = self.vocab + 1;
        let ctx = u * c + v;
        if self.tri_total[ctx] > 0.0 {
            (self.tri[ctx * self.vocab + w] + k) / (self.tri_total[ctx] + k * vf)
        } else if self.bi_total[v] > 0.0 {
            (self.bi[v * self.vocab + w] + k) / (self.bi_total[v] + k * vf)
        } else {
            (self.uni[w] + k) / (self.uni_total + k * vf)
        }
    }

    /// Full conditional distribution for a context.
    pub fn conditional(&self, u: usize, v: usize) -> Vec<f64> {
        (0..self.vocab).map(|w| self.prob(u, v, w)).collect()
    }

    pub fn log_prob(&self, ids: &[TokenId]) -> Result<f64> {
        let mut lp = 0.0;
        for (i, &w) in ids.iter().enumerate() {
            if w >= self.vocab {
                return Err(Error::Index { index: w, bound: self.vocab });
            }
            let (u, v) = self.context(ids, i);
            lp += self.prob(u, v, w).ln();
        }
        Ok(lp)
    }

    /// `exp` of the mean negative log-probability per token.
    pub fn perplexity(&self, ids: &[TokenId]) -> Result<f64> {
        if ids.is_empty() {
            return Err(Error::Contract("perplexity of an empty sequence".into()));
        }
        Ok((-self.log_prob(ids)? / ids.len() as f64).exp())
    }

    /// Mean per-sequence perplexity.
    pub fn mean_perplexity<'a>(&self, seqs: impl IntoIterator<Item = &'a [TokenId]>) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for s in seqs {
            sum += self.perplexity(s)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Contract("mean perplexity of no sequences".into()));
        }
        Ok(sum / n as f64)
    }

    /// Ancestral sample of `len` tokens.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let (u, v) = self.context(&out, i);
            let probs = self.conditional(u, v);
            let mut r: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
            let mut pick = self.vocab - 1;
            for (w, p) in probs.iter().enumerate() {
                if r < *p {
                    pick = w;
                    break;
                }
                r -= p;
            }
            out.push(pick);
        }
        out
    }

    /// Always takes the most probable continuation (lowest index on ties).
    pub fn greedy(&self, len: usize) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let (u, v) = self.context(&out, i);
            let probs = self.conditional(u, v);
            out.push(crate::tensor::argmax(&probs));
        }
        out
    }
}

/// `exp(mean negative log trigram probability)` of `ids`.
pub fn reference_perplexity(lm: &ReferenceLm, ids: &[TokenId]) -> Result<f64> {
    lm.perplexity(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ReferenceLm {
        let seqs: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3], vec![0, 1, 2, 0], vec![3, 2, 1, 0]];
        ReferenceLm::fit(seqs.iter().map(|s| s.as_slice()), 5, DEFAULT_ADD_K).unwrap()
    }

    #[test]
    fn conditionals_normalize_and_stay_positive() {
        let lm = tiny();
        for u in 0..=5 {
            for v in 0..=5 {
                let p = lm.conditional(u, v);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(p.iter().all(|&x| x > 0.0));
            }
        }
    }

    #[test]
    fn seen_trigram_dominates() {
        let lm = tiny();
        // (0, 1) is always followed by 2 in training
        assert!(lm.prob(0, 1, 2) > 0.9);
        assert!(lm.perplexity(&[0, 1, 2, 3]).unwrap() < lm.perplexity(&[4, 4, 4, 4]).unwrap());
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(tiny().perplexity(&[]).is_err());
    }
}
