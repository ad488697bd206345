//! Synthetic attribute-controlled corpora.
//!
//! Sequences come from one shared bigram backbone whose transitions are tilted
//! toward label-specific token subsets. Labels are therefore identifiable from
//! token statistics while every sequence still follows the same local
//! grammar, which gives both the control and the fluency axes something to
//! measure.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::TokenId;
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const EOS_NAME: &str = "<eos>";
pub const EOS_ID: TokenId = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub labels: Vec<String>,
    /// Log-weight added to a label's favored tokens (and subtracted from the
    /// tokens favored by other labels).
    pub tilt: f64,
    pub favored_per_label: usize,
    /// Number of preferred successors of each token in the backbone.
    pub successors: usize,
    /// Backbone mass spread uniformly over all successors.
    pub floor: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 16,
            labels: vec!["negative".into(), "positive".into()],
            tilt: 1.0,
            favored_per_label: 12,
            successors: 6,
            floor: 0.05,
            size: 10_000,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 8 {
            return bad(format!("vocab_size must be >= 8, got {}", self.vocab_size));
        }
        if self.seq_len == 0 {
            return bad("seq_len must be >= 1".into());
        }
        if self.labels.len() < 2 {
            return bad("need at least two labels".into());
        }
        if self.favored_per_label == 0 || self.favored_per_label * self.labels.len() > self.vocab_size {
            return bad(format!(
                "favored_per_label {} x {} labels does not fit a vocabulary of {}",
                self.favored_per_label,
                self.labels.len(),
                self.vocab_size
            ));
        }
        if self.successors == 0 || self.successors > self.vocab_size {
            return bad(format!("successors must be in 1..={}", self.vocab_size));
        }
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return bad(format!("floor must be in (0, 1], got {}", self.floor));
        }
        if !self.tilt.is_finite() {
            return bad("tilt must be finite".into());
        }
        Ok(())
    }
}

/// One corpus sequence with its attribute label (an index into `spec.labels`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabeledExample {
    pub ids: Vec<TokenId>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub examples: Vec<LabeledExample>,
}

/// The generative model behind a [`CorpusSpec`]: backbone plus label tilts.
#[derive(Clone, Debug)]
pub struct CorpusModel {
    vocab: usize,
    seq_len: usize,
    /// `profiles[l][v]`: label `l`'s normalized emission tilt.
    profiles: Vec<Vec<f64>>,
    /// `start[l][v]` and `trans[l][u][v]`, already tilted and normalized.
    start: Vec<Vec<f64>>,
    trans: Vec<Vec<Vec<f64>>>,
}

impl CorpusModel {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let v = spec.vocab_size;
        let mut rng = seeded(spec.seed);

        let mut backbone = vec![vec![spec.floor / v as f64; v]; v];
        let mut pool: Vec<usize> = (0..v).collect();
        for row in backbone.iter_mut() {
            pool.shuffle(&mut rng);
            let weights: Vec<f64> = (0..spec.successors)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (0.7 * z).exp()
                })
                .collect();
            let total: f64 = weights.iter().sum();
            for (&w, &succ) in weights.iter().zip(&pool) {
                row[succ] += (1.0 - spec.floor) * w / total;
            }
        }

        let mut order: Vec<usize> = (0..v).collect();
        order.shuffle(&mut rng);
        let labels = spec.labels.len();
        let mut owner = vec![None; v];
        for l in 0..labels {
            for &tok in &order[l * spec.favored_per_label..(l + 1) * spec.favored_per_label] {
                owner[tok] = Some(l);
            }
        }
        let mut profiles = Vec::with_capacity(labels);
        let mut start = Vec::with_capacity(labels);
        let mut trans = Vec::with_capacity(labels);
        for l in 0..labels {
            let tilt: Vec<f64> = owner
                .iter()
                .map(|o| match o {
                    Some(x) if *x == l => spec.tilt.exp(),
                    Some(_) => (-spec.tilt).exp(),
                    None => 1.0,
                })
                .collect();
            let z: f64 = tilt.iter().sum();
            profiles.push(tilt.iter().map(|w| w / z).collect::<Vec<_>>());
            start.push(tilt.iter().map(|w| w / z).collect());
            let t: Vec<Vec<f64>> = backbone
                .iter()
                .map(|row| {
                    let raw: Vec<f64> = row.iter().zip(&tilt).map(|(b, w)| b * w).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / s).collect()
                })
                .collect();
            trans.push(t);
        }
        for p in &profiles {
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 || p.iter().any(|x| !x.is_finite() || *x <= 0.0) {
                return Err(Error::Config("degenerate label profile".into()));
            }
        }
        Ok(Self {
            vocab: v,
            seq_len: spec.seq_len,
            profiles,
            start,
            trans,
        })
    }

    pub fn profile(&self, label: usize) -> &[f64] {
        &self.profiles[label]
    }

    pub fn num_labels(&self) -> usize {
        self.profiles.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(self.seq_len);
        let mut prev = draw(&self.start[label], rng);
        ids.push(prev);
        for _ in 1..self.seq_len {
            prev = draw(&self.trans[label][prev], rng);
            ids.push(prev);
        }
        ids
    }

    /// `log P(ids | label)` under the exact generative model.
    pub fn log_likelihood(&self, ids: &[TokenId], label: usize) -> f64 {
        let mut lp = 0.0;
        for (i, &tok) in ids.iter().enumerate() {
            lp += if i == 0 {
                self.start[label][tok].ln()
            } else {
                self.trans[label][ids[i - 1]][tok].ln()
            };
        }
        lp
    }

    /// Exact label posterior under a uniform label prior.
    pub fn posterior(&self, ids: &[TokenId]) -> Vec<f64> {
        let lls: Vec<f64> = (0..self.num_labels()).map(|l| self.log_likelihood(ids, l)).collect();
        let m = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lls.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    /// Exact per-position token posteriors given independent per-position
    /// evidence `log_evidence[i][v] = log p(obs_i | token v)`, marginalized
    /// over labels under a uniform prior (forward-backward per label).
    pub fn token_posteriors(&self, log_evidence: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = log_evidence.len();
        let v = self.vocab;
        let lik: Vec<Vec<f64>> = log_evidence
            .iter()
            .map(|row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter().map(|x| (x - m).exp()).collect()
            })
            .collect();
        let mut out = vec![vec![0.0; v]; n];
        let mut log_z = Vec::with_capacity(self.num_labels());
        let mut per_label = Vec::with_capacity(self.num_labels());
        for l in 0..self.num_labels() {
            let mut alpha = vec![vec![0.0; v]; n];
            let mut scale = vec![0.0; n];
            for i in 0..n {
                for y in 0..v {
                    let prior = if i == 0 {
                        self.start[l][y]
                    } else {
                        (0..v).map(|u| alpha[i - 1][u] * self.trans[l][u][y]).sum()
                    };
                    alpha[i][y] = prior * lik[i][y];
                }
                scale[i] = alpha[i].iter().sum::<f64>().max(f64::MIN_POSITIVE);
                alpha[i].iter_mut().for_each(|a| *a /= scale[i]);
            }
            let mut beta = vec![vec![1.0; v]; n];
            for i in (0..n.saturating_sub(1)).rev() {
                for u in 0..v {
                    beta[i][u] = (0..v)
                        .map(|y| self.trans[l][u][y] * lik[i + 1][y] * beta[i + 1][y])
                        .sum::<f64>()
                        / scale[i + 1];
                }
            }
            log_z.push(scale.iter().map(|s| s.ln()).sum::<f64>());
            per_label.push(
                (0..n)
                    .map(|i| {
                        let row: Vec<f64> = (0..v).map(|y| alpha[i][y] * beta[i][y]).collect();
                        let z: f64 = row.iter().sum();
                        row.into_iter().map(|p| p / z).collect::<Vec<f64>>()
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let m = log_z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_z.iter().map(|z| (z - m).exp()).collect();
        let wz: f64 = w.iter().sum();
        for (l, post) in per_label.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(post) {
                for (a, b) in o.iter_mut().zip(p) {
                    *a += w[l] / wz * b;
                }
            }
        }
        out
    }

    /// Expected token frequencies of label `label`, averaged over positions.
    pub fn expected_unigram(&self, label: usize) -> Vec<f64> {
        let mut marginal = self.start[label].clone();
        let mut acc = marginal.clone();
        for _ in 1..self.seq_len {
            let mut next = vec![0.0; self.vocab];
            for (u, &pu) in marginal.iter().enumerate() {
                for (n, &t) in next.iter_mut().zip(&self.trans[label][u]) {
                    *n += pu * t;
                }
            }
            for (a, &n) in acc.iter_mut().zip(&next) {
                *a += n;
            }
            marginal = next;
        }
        let n = self.seq_len as f64;
        acc.into_iter().map(|a| a / n).collect()
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws `spec.size` sequences with labels assigned round-robin.
pub fn synthesize(spec: &CorpusSpec) -> Result<Corpus> {
    let model = CorpusModel::new(spec)?;
    let mut rng = seeded(spec.seed.wrapping_add(1));
    let labels = spec.labels.len();
    let examples = (0..spec.size)
        .map(|i| {
            let label = i % labels;
            LabeledExample {
                ids: model.sample(label, &mut rng),
                label,
            }
        })
        .collect();
    Ok(Corpus {
        spec: spec.clone(),
        examples,
    })
}

/// Label-stratified, disjoint, exhaustive split. Each label contributes
/// `round(ratio * count)` examples to the training side.
pub fn split(corpus: &Corpus, ratio: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut rng = seeded(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for l in 0..corpus.spec.labels.len() {
        let mut idx: Vec<usize> = (0..corpus.examples.len())
            .filter(|&i| corpus.examples[i].label == l)
            .collect();
        idx.shuffle(&mut rng);
        let cut = (ratio * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let pick = |ix: &[usize]| Corpus {
        spec: corpus.spec.clone(),
        examples: ix.iter().map(|&i| corpus.examples[i].clone()).collect(),
    };
    Ok((pick(&train), pick(&test)))
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: CorpusSpec,
}

#[derive(Serialize, Deserialize)]
struct Record {
    ids: Vec<TokenId>,
    label: String,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[TokenId]> {
        self.examples.iter().map(|e| e.ids.as_slice())
    }

    /// Canonical JSONL: a header line with the spec, then one record per example.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Header {
            spec: self.spec.clone(),
        })?;
        out.push('\n');
        for e in &self.examples {
            out.push_str(&serde_json::to_string(&Record {
                ids: e.ids.clone(),
                label: self.spec.labels[e.label].clone(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::read(BufReader::new(text.as_bytes()))
    }

    fn read(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Config("empty corpus file".into())),
        };
        let spec = header.spec;
        spec.validate()?;
        let mut examples = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)?;
            let label = spec
                .labels
                .iter()
                .position(|l| *l == r.label)
                .ok_or_else(|| Error::Config(format!("record {n}: unknown label {:?}", r.label)))?;
            if let Some(&bad) = r.ids.iter().find(|&&i| i >= spec.vocab_size) {
                return Err(Error::Index {
                    index: bad,
                    bound: spec.vocab_size,
                });
            }
            examples.push(LabeledExample { ids: r.ids, label });
        }
        Ok(Self { spec, examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(fs::File::open(path)?))
    }
}

/// Toy whitespace tokenizer: id 0 is `<eos>`, every other id `i` is `w{i}`.
pub fn detokenize(ids: &[TokenId]) -> String {
    ids.iter()
        .map(|&i| if i == 0 { EOS_NAME.to_string() } else { format!("w{i}") })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn tokenize(text: &str, vocab: usize) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|w| {
            let id = if w == EOS_NAME {
                0
            } else {
                w.strip_prefix('w')
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::Config(format!("unknown token {w:?}")))?
            };
            if id >= vocab {
                return Err(Error::Index { index: id, bound: vocab });
            }
            Ok(id)
        })
        .collect()
}

/// Multinomial naive Bayes over token counts with add-one smoothing.
#[derive(Clone, Debug)]
pub struct NaiveBayes {
    log_prior: Vec<f64>,
    log_lik: Vec<Vec<f64>>,
}

impl NaiveBayes {
    pub fn fit(corpus: &Corpus) -> Self {
        let labels = corpus.spec.labels.len();
        let v = corpus.spec.vocab_size;
        let mut counts = vec![vec![1.0; v]; labels];
        let mut docs = vec![0.0; labels];
        for e in &corpus.examples {
            docs[e.label] += 1.0;
            for &t in &e.ids {
                counts[e.label][t] += 1.0;
            }
        }
        let n: f64 = docs.iter().sum();
        let log_prior = docs.iter().map(|d: &f64| ((d + 1.0) / (n + labels as f64)).ln()).collect();
        let log_lik = counts
            .into_iter()
            .map(|row| {
                let z: f64 = row.iter().sum();
                row.into_iter().map(|c| (c / z).ln()).collect()
            })
            .collect();
        Self { log_prior, log_lik }
    }

    pub fn scores(&self, ids: &[TokenId]) -> Vec<f64> {
        self.log_prior
            .iter()
            .zip(&self.log_lik)
            .map(|(&p, row)| p + ids.iter().map(|&t| row[t]).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, ids: &[TokenId]) -> usize {
        let s = self.scores(ids);
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        best
    }

    pub fn accuracy(&self, corpus: &Corpus) -> f64 {
        let hits = corpus
            .examples
            .iter()
            .filter(|e| self.predict(&e.ids) == e.label)
            .count();
        hits as f64 / corpus.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            size: 1000,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(synthesize(&small()).unwrap(), synthesize(&small()).unwrap());
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let cases = [
            CorpusSpec { vocab_size: 4, ..small() },
            CorpusSpec { labels: vec!["a".into()], ..small() },
            CorpusSpec { favored_per_label: 40, ..small() },
            CorpusSpec { floor: 0.0, ..small() },
            CorpusSpec { tilt: f64::NAN, ..small() },
        ];
        for c in cases {
            assert!(synthesize(&c).is_err(), "{c:?}");
        }
    }

    #[test]
    fn split_is_stratified_disjoint_exhaustive() {
        let c = synthesize(&small()).unwrap();
        let (train, test) = split(&c, 0.8, 3).unwrap();
        assert_eq!(train.len(), 800);
        assert_eq!(test.len(), 200);
        for l in 0..2 {
            let tr = train.examples.iter().filter(|e| e.label == l).count();
            assert!((tr as i64 - 400).abs() <= 1);
        }
        let tr: std::collections::HashSet<_> = train.examples.iter().collect();
        assert!(test.examples.iter().all(|e| !tr.contains(e)));
        let mut all: Vec<_> = train.examples.iter().chain(&test.examples).cloned().collect();
        let mut orig = c.examples.clone();
        let key = |e: &LabeledExample| (e.ids.clone(), e.label);
        all.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(all, orig);
        assert!(split(&c, 1.0, 0).is_err());
    }

    #[test]
    fn tokenizer_roundtrip() {
        let ids = vec![0, 5, 63, 1];
        let text = detokenize(&ids);
        assert_eq!(text, "<eos> w5 w63 w1");
        assert_eq!(tokenize(&text, 64).unwrap(), ids);
        assert!(tokenize("w64", 64).is_err());
        assert!(tokenize("hello", 64).is_err());
    }
}
