//! Bag-of-rows attribute classifier over simplex states.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::SimplexState;
use crate::error::{Error, Result};
use crate::models::denoiser::check_layout;
use crate::models::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub vocab_size: usize,
    pub d_hidden: usize,
    pub num_labels: usize,
    /// Rows are read as `softmax(row / temperature)`.
    pub temperature: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_hidden: 32,
            num_labels: 2,
            temperature: 1.0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::Config(format!("classifier needs >= 2 labels, got {}", self.num_labels)));
        }
        if self.vocab_size < 2 || self.d_hidden == 0 {
            return Err(Error::Config("classifier dimensions must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    config: ClassifierConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d, l) = (config.vocab_size, config.d_hidden, config.num_labels);
        let mut p = ParamStore::new();
        p.insert_randn("in", &[v, d], 1.0, rng);
        p.insert("in.b", Tensor::zeros(&[d]));
        p.insert_randn("hid", &[d, d], (1.0 / d as f64).sqrt(), rng);
        p.insert("hid.b", Tensor::zeros(&[d]));
        p.insert_randn("head", &[d, l], (1.0 / d as f64).sqrt(), rng);
        p.insert("head.b", Tensor::zeros(&[l]));
        Ok(Self { config, params: p })
    }

    pub fn from_parts(config: ClassifierConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Self::new(config.clone(), &mut crate::rng::seeded(0))?;
        check_layout(&template.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Label logits (`B x L`) for `B` stacked sequences of length `seq_len`
    /// held in the node `x`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, seq_len: usize) -> Result<Var> {
        if tape.value(x).cols() != self.config.vocab_size {
            return Err(Error::Shape(format!(
                "classifier expects {} columns, got {}",
                self.config.vocab_size,
                tape.value(x).cols()
            )));
        }
        let p = |name: &str| bound.var(self.params.position(name).expect("known parameter"));
        let scaled = tape.scalar_scale(x, T::lit(1.0 / self.config.temperature));
        let probs = tape.softmax(scaled);
        let h = tape.matmul(probs, p("in"))?;
        let h = tape.add_bias(h, p("in.b"))?;
        let h = tape.relu(h);
        let pooled = tape.mean_row_groups(h, seq_len)?;
        let h = tape.matmul(pooled, p("hid"))?;
        let h = tape.add_bias(h, p("hid.b"))?;
        let h = tape.relu(h);
        let out = tape.matmul(h, p("head"))?;
        tape.add_bias(out, p("head.b"))
    }

    /// Label distribution for one state.
    pub fn classify(&self, x: &SimplexState<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.leaf(x.logits().clone());
        let logits = self.forward(&mut tape, &bound, xv, x.seq_len())?;
        Ok(tape.value(logits).softmax().into_data())
    }

    /// `log P(label | x)` and its gradient with respect to the raw simplex logits.
    pub fn log_prob_grad(&self, x: &SimplexState<T>, label: usize) -> Result<(T, Tensor<T>)> {
        if label >= self.config.num_labels {
            return Err(Error::Index {
                index: label,
                bound: self.config.num_labels,
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.leaf(x.logits().clone());
        let logits = self.forward(&mut tape, &bound, xv, x.seq_len())?;
        let nll = tape.cross_entropy(logits, &[label])?;
        let logp = -tape.value(nll).item()?;
        let mut grads = tape.backward(nll)?;
        let g = grads.take(xv).map(|v| -v);
        Ok((logp, g))
    }
}
