//! Timestep-conditioned bidirectional transformer mapping noisy simplex states
//! to clean-token logits.
//!
//! For a row noised to timestep `t`, the token log-likelihood is
//! `c_t * x + const` with `c_t = 2 sqrt(abar_t) / (K (1 - abar_t))`. The model
//! reads `softmax(c_t * x)` (the per-row posterior under a flat prior), mixes
//! rows with attention, and adds `c_t * x` back onto its output logits.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::{NoiseSchedule, SimplexState, TimestepPlan};
use crate::error::{Error, Result};
use crate::models::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub vocab_size: usize,
    /// Longest sequence the position table covers.
    pub max_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub blocks: usize,
    /// Width of the sinusoidal timestep features (even).
    pub time_features: usize,
    /// Learned absolute position embeddings and per-head relative-offset
    /// attention biases. Without them the network is permutation-equivariant
    /// over rows.
    pub positional: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_len: 16,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            blocks: 2,
            time_features: 16,
            positional: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.vocab_size < 2 || self.max_len == 0 || self.d_model == 0 || self.d_ff == 0 || self.blocks == 0 {
            return bad("denoiser dimensions must be positive (vocab >= 2)");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.time_features < 2 || !self.time_features.is_multiple_of(2) {
            return bad("time_features must be an even number >= 2");
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;
/// Upper bound on the input sharpening factor, in units of `1 / K`.
const MAX_SHARPEN: f64 = 10.0;

struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    rel: Option<usize>,
    ln2_g: usize,
    ln2_b: usize,
    ff1: usize,
    ff1_b: usize,
    ff2: usize,
    ff2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    schedule: NoiseSchedule<T>,
    params: ParamStore<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, schedule: NoiseSchedule<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let w = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert_randn("tok_emb", &[v, d], 0.5, rng);
        if config.positional {
            p.insert_randn("pos_emb", &[config.max_len, d], 0.1, rng);
        }
        p.insert_randn("time_proj", &[config.time_features, d], w(config.time_features), rng);
        p.insert("time_bias", Tensor::zeros(&[d]));
        for b in 0..config.blocks {
            p.insert(format!("blk{b}.ln1.g"), Tensor::filled(&[d], T::one()));
            p.insert(format!("blk{b}.ln1.b"), Tensor::zeros(&[d]));
            for m in ["wq", "wk", "wv", "wo"] {
                p.insert_randn(&format!("blk{b}.{m}"), &[d, d], w(d), rng);
            }
            if config.positional {
                // one bias per head and offset j - i in -(L-1)..=(L-1)
                p.insert(format!("blk{b}.rel"), Tensor::zeros(&[2 * config.max_len - 1, config.heads]));
            }
            p.insert(format!("blk{b}.ln2.g"), Tensor::filled(&[d], T::one()));
            p.insert(format!("blk{b}.ln2.b"), Tensor::zeros(&[d]));
            p.insert_randn(&format!("blk{b}.ff1"), &[d, f], w(d), rng);
            p.insert(format!("blk{b}.ff1.b"), Tensor::zeros(&[f]));
            p.insert_randn(&format!("blk{b}.ff2"), &[f, d], w(f), rng);
            p.insert(format!("blk{b}.ff2.b"), Tensor::zeros(&[d]));
        }
        p.insert("ln_f.g", Tensor::filled(&[d], T::one()));
        p.insert("ln_f.b", Tensor::zeros(&[d]));
        p.insert_randn("out", &[d, v], w(d), rng);
        p.insert("out.b", Tensor::zeros(&[v]));
        Ok(Self { config, schedule, params: p })
    }

    /// Reassembles a model from stored parameters, checking names and shapes
    /// against a fresh initialization.
    pub fn from_parts(config: DenoiserConfig, schedule: NoiseSchedule<T>, params: ParamStore<T>) -> Result<Self> {
        let template = Self::new(config.clone(), schedule.clone(), &mut crate::rng::seeded(0))?;
        check_layout(&template.params, &params)?;
        Ok(Self { config, schedule, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same weights under a different schedule. Timesteps enter the network
    /// only through `t / T` and the schedule's noise level, so a model can be
    /// moved to a coarser schedule without reshaping anything.
    pub fn with_schedule(&self, schedule: NoiseSchedule<T>) -> Self {
        Self {
            config: self.config.clone(),
            schedule,
            params: self.params.clone(),
        }
    }

    /// Per-row sharpening factor: the scale at which `softmax(c * x)` is the
    /// exact token posterior of a single noisy row, capped for nearly clean rows.
    fn sharpen(&self, t: usize) -> T {
        let k = self.schedule.k().as_f64();
        let ab = self.schedule.alpha_bar(t).as_f64();
        let cap = MAX_SHARPEN / k;
        if ab >= 1.0 {
            return T::lit(cap);
        }
        T::lit((2.0 * ab.sqrt() / (k * (1.0 - ab))).min(cap))
    }

    fn time_features(&self, plan: &[usize]) -> Tensor<T> {
        let half = self.config.time_features / 2;
        let t_max = self.schedule.t_max() as f64;
        let mut data = Vec::with_capacity(plan.len() * half * 2);
        for &t in plan {
            let u = t as f64 / t_max;
            for k in 0..half {
                let expo = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
                let w = PI * 64f64.powf(expo);
                data.push(T::lit((w * u).sin()));
                data.push(T::lit((w * u).cos()));
            }
        }
        Tensor::new(vec![plan.len(), half * 2], data).expect("feature shape")
    }

    /// Records the forward pass for `x` (`B*N x V`, `B` sequences of length
    /// `seq_len` stacked) on `tape`; returns the logits node.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: &Tensor<T>, plan: &[usize], seq_len: usize) -> Result<Var> {
        let rows = x.rows();
        if x.rank() != 2 || x.cols() != self.config.vocab_size {
            return Err(Error::Shape(format!(
                "denoiser expects rows over a vocabulary of {}, got {:?}",
                self.config.vocab_size,
                x.shape()
            )));
        }
        if seq_len == 0 || !rows.is_multiple_of(seq_len) || plan.len() != rows {
            return Err(Error::Shape(format!(
                "{rows} rows / {} plan entries do not form sequences of {seq_len}",
                plan.len()
            )));
        }
        if seq_len > self.config.max_len && self.config.positional {
            return Err(Error::Shape(format!(
                "sequence length {seq_len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&t) = plan.iter().find(|&&t| t > self.schedule.t_max()) {
            return Err(Error::Contract(format!("plan entry {t} exceeds T = {}", self.schedule.t_max())));
        }
        let p = |name: &str| bound.var(self.params.position(name).expect("known parameter"));
        let d = self.config.d_model;
        let batch = rows / seq_len;

        let xin = tape.leaf(x.clone());
        let sharp = tape.scale_rows(xin, plan.iter().map(|&t| self.sharpen(t)).collect())?;
        let post = tape.softmax(sharp);
        let mut h = tape.matmul(post, p("tok_emb"))?;
        if self.config.positional {
            let ids: Vec<usize> = (0..rows).map(|r| r % seq_len).collect();
            let pe = tape.gather_rows(p("pos_emb"), &ids)?;
            h = tape.add(h, pe)?;
        }
        let tf = tape.leaf(self.time_features(plan));
        let te = tape.matmul(tf, p("time_proj"))?;
        let te = tape.add_bias(te, p("time_bias"))?;
        h = tape.add(h, te)?;

        let heads = self.config.heads;
        let dh = d / heads;
        let inv_sqrt = T::lit(1.0 / (dh as f64).sqrt());
        let span = self.config.max_len;
        let offsets: Vec<usize> = (0..seq_len * seq_len)
            .map(|e| (e % seq_len + span - 1) - e / seq_len)
            .collect();
        for b in 0..self.config.blocks {
            let ix = self.block_idx(b);
            let a = tape.layer_norm(h, bound.var(ix.ln1_g), bound.var(ix.ln1_b), T::lit(LN_EPS))?;
            let q = tape.matmul(a, bound.var(ix.wq))?;
            let k = tape.matmul(a, bound.var(ix.wk))?;
            let v = tape.matmul(a, bound.var(ix.wv))?;
            let rel = match ix.rel {
                Some(r) => {
                    let biases = tape.gather_rows(bound.var(r), &offsets)?;
                    let per_head: Result<Vec<Var>> = (0..heads)
                        .map(|hd| {
                            let col = tape.slice_cols(biases, hd, 1)?;
                            tape.reshape(col, &[seq_len, seq_len])
                        })
                        .collect();
                    Some(per_head?)
                }
                None => None,
            };
            let mut seqs = Vec::with_capacity(batch);
            for s in 0..batch {
                let (qs, ks, vs) = (
                    tape.slice_rows(q, s * seq_len, seq_len)?,
                    tape.slice_rows(k, s * seq_len, seq_len)?,
                    tape.slice_rows(v, s * seq_len, seq_len)?,
                );
                let mut outs = Vec::with_capacity(heads);
                for hd in 0..heads {
                    let (qh, kh, vh) = if heads == 1 {
                        (qs, ks, vs)
                    } else {
                        (
                            tape.slice_cols(qs, hd * dh, dh)?,
                            tape.slice_cols(ks, hd * dh, dh)?,
                            tape.slice_cols(vs, hd * dh, dh)?,
                        )
                    };
                    let sc = tape.matmul_nt(qh, kh)?;
                    let mut sc = tape.scalar_scale(sc, inv_sqrt);
                    if let Some(rel) = &rel {
                        sc = tape.add(sc, rel[hd])?;
                    }
                    let att = tape.softmax(sc);
                    outs.push(tape.matmul(att, vh)?);
                }
                seqs.push(if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? });
            }
            let att = if batch == 1 { seqs[0] } else { tape.concat_rows(&seqs)? };
            let o = tape.matmul(att, bound.var(ix.wo))?;
            h = tape.add(h, o)?;

            let f = tape.layer_norm(h, bound.var(ix.ln2_g), bound.var(ix.ln2_b), T::lit(LN_EPS))?;
            let f = tape.matmul(f, bound.var(ix.ff1))?;
            let f = tape.add_bias(f, bound.var(ix.ff1_b))?;
            let f = tape.relu(f);
            let f = tape.matmul(f, bound.var(ix.ff2))?;
            let f = tape.add_bias(f, bound.var(ix.ff2_b))?;
            h = tape.add(h, f)?;
        }
        let h = tape.layer_norm(h, p("ln_f.g"), p("ln_f.b"), T::lit(LN_EPS))?;
        let logits = tape.matmul(h, p("out"))?;
        let logits = tape.add_bias(logits, p("out.b"))?;
        // The row's own evidence enters the output additively, so the network
        // only has to supply the contextual prior term of the log-posterior.
        tape.add(logits, sharp)
    }

    fn block_idx(&self, b: usize) -> BlockIdx {
        let f = |s: &str| self.params.position(&format!("blk{b}.{s}")).expect("block parameter");
        BlockIdx {
            ln1_g: f("ln1.g"),
            ln1_b: f("ln1.b"),
            wq: f("wq"),
            wk: f("wk"),
            wv: f("wv"),
            wo: f("wo"),
            rel: self.params.position(&format!("blk{b}.rel")),
            ln2_g: f("ln2.g"),
            ln2_b: f("ln2.b"),
            ff1: f("ff1"),
            ff1_b: f("ff1.b"),
            ff2: f("ff2"),
            ff2_b: f("ff2.b"),
        }
    }

    /// Clean-token logits (`N x V`) for one noisy sequence.
    pub fn denoise(&self, x: &SimplexState<T>, plan: &TimestepPlan) -> Result<Tensor<T>> {
        plan.validate(x.seq_len(), self.schedule.t_max())?;
        self.denoise_batch(x.logits(), plan.as_slice(), x.seq_len())
    }

    /// Logits for `B` stacked sequences of length `seq_len`.
    pub fn denoise_batch(&self, x: &Tensor<T>, plan: &[usize], seq_len: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, x, plan, seq_len)?;
        Ok(tape.value(out).clone())
    }
}

pub(crate) fn check_layout<T: Scalar>(want: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    if want.names() != got.names() {
        return Err(Error::Checkpoint(format!(
            "parameter names differ: expected {:?}, found {:?}",
            want.names(),
            got.names()
        )));
    }
    for ((n, a), b) in want.names().iter().zip(want.tensors()).zip(got.tensors()) {
        if a.shape() != b.shape() {
            return Err(Error::Checkpoint(format!(
                "{n}: expected shape {:?}, found {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}
