//! Simplex diffusion: the cosine noise schedule, the `±K` token mapping, and
//! per-token forward noising / reverse re-noising.
//!
//! Every row of a [`SimplexState`] carries its own local timestep through a
//! [`TimestepPlan`]. A plan entry of 0 is an exact pass-through: the row is
//! copied bit-for-bit and never resampled.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{argmax, softmax_in_place, Tensor};

pub type TokenId = usize;

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_SIMPLEX_K: f64 = 5.0;

/// Precomputed signal coefficients for a discrete-time schedule with `T` steps.
///
/// `alpha_bar[0] == 1`, `alpha_bar` and `alpha` strictly decrease, so the
/// per-step injected variance `1 - alpha[t]` strictly increases.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    t_max: usize,
    offset: T,
    k: T,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
}

/// On-disk form of a schedule: `{T, s, K, alpha_bar[]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDocument {
    #[serde(rename = "T")]
    pub t_max: usize,
    pub s: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub alpha_bar: Vec<f64>,
}

/// Squared-cosine schedule with the default offset `s = 0.008`.
pub fn cosine_schedule<T: Scalar>(t_max: usize, k: T) -> Result<NoiseSchedule<T>> {
    NoiseSchedule::cosine(t_max, T::lit(DEFAULT_COSINE_OFFSET), k)
}

impl<T: Scalar> NoiseSchedule<T> {
    /// `alpha_bar(t) = f(t) / f(0)` with `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`.
    pub fn cosine(t_max: usize, offset: T, k: T) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        if !(k > T::zero()) || !k.is_finite() {
            return Err(Error::Config(format!("simplex constant K must be > 0, got {k}")));
        }
        if !(offset >= T::zero()) {
            return Err(Error::Config(format!("cosine offset must be >= 0, got {offset}")));
        }
        let tf = T::from_usize_lossy(t_max);
        let half_pi = T::lit(std::f64::consts::FRAC_PI_2);
        let f = |t: usize| {
            let c = (((T::from_usize_lossy(t) / tf) + offset) / (T::one() + offset) * half_pi).cos();
            c * c
        };
        let f0 = f(0);
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(T::one());
        for t in 1..=t_max {
            alpha_bar.push(f(t) / f0);
        }
        let mut alpha = Vec::with_capacity(t_max + 1);
        alpha.push(T::one());
        for t in 1..=t_max {
            alpha.push(alpha_bar[t] / alpha_bar[t - 1]);
        }
        Ok(Self {
            t_max,
            offset,
            k,
            alpha,
            alpha_bar,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn offset(&self) -> T {
        self.offset
    }

    pub fn k(&self) -> T {
        self.k
    }

    /// Per-step signal coefficient, `t` in `1..=T` (`alpha(0)` is 1).
    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t]
    }

    /// Cumulative signal coefficient, `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }

    /// Variance of the noise injected by the single step `t - 1 -> t`.
    pub fn injected_variance(&self, t: usize) -> T {
        T::one() - self.alpha[t]
    }

    /// Checks the structural invariants; returns the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar[0] != T::one() {
            return Err(Error::Contract("alpha_bar[0] != 1".into()));
        }
        for t in 1..=self.t_max {
            if !(self.alpha_bar[t] < self.alpha_bar[t - 1]) {
                return Err(Error::Contract(format!("alpha_bar not decreasing at t={t}")));
            }
            if t >= 2 && !(self.alpha[t] < self.alpha[t - 1]) {
                return Err(Error::Contract(format!("alpha not decreasing at t={t}")));
            }
            if !(self.alpha[t] > T::zero() && self.alpha[t] <= T::one()) {
                return Err(Error::Contract(format!("alpha[{t}] outside (0, 1]")));
            }
        }
        if !(self.alpha_bar[self.t_max] < T::lit(0.01)) {
            return Err(Error::Contract("alpha_bar[T] >= 0.01".into()));
        }
        Ok(())
    }

    pub fn to_document(&self) -> ScheduleDocument {
        ScheduleDocument {
            t_max: self.t_max,
            s: self.offset.as_f64(),
            k: self.k.as_f64(),
            alpha_bar: self.alpha_bar.iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Rebuilds from a document and checks the stored table against the closed form.
    pub fn from_document(doc: &ScheduleDocument) -> Result<Self> {
        let sched = Self::cosine(doc.t_max, T::lit(doc.s), T::lit(doc.k))?;
        if doc.alpha_bar.len() != doc.t_max + 1 {
            return Err(Error::Config(format!(
                "alpha_bar has {} entries, expected {}",
                doc.alpha_bar.len(),
                doc.t_max + 1
            )));
        }
        let tol = T::epsilon().as_f64() * 64.0;
        for (t, (&stored, ours)) in doc.alpha_bar.iter().zip(&sched.alpha_bar).enumerate() {
            if (stored - ours.as_f64()).abs() > tol {
                return Err(Error::Config(format!(
                    "alpha_bar[{t}] = {stored} disagrees with the cosine closed form"
                )));
            }
        }
        Ok(sched)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(s)?)
    }
}

/// Per-token local timesteps `t_i`, each in `0..=T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimestepPlan(Vec<usize>);

impl TimestepPlan {
    pub fn new(steps: Vec<usize>) -> Self {
        Self(steps)
    }

    pub fn constant(n: usize, t: usize) -> Self {
        Self(vec![t; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [usize] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn validate(&self, n: usize, t_max: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(Error::Contract(format!(
                "plan has {} entries for {n} rows",
                self.0.len()
            )));
        }
        if let Some(&bad) = self.0.iter().find(|&&t| t > t_max) {
            return Err(Error::Contract(format!("plan entry {bad} exceeds T = {t_max}")));
        }
        Ok(())
    }
}

/// `N x V` matrix of per-token vocabulary logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexState<T> {
    logits: Tensor<T>,
}

impl<T: Scalar> SimplexState<T> {
    pub fn from_logits(logits: Tensor<T>) -> Result<Self> {
        if logits.rank() != 2 {
            return Err(Error::Shape(format!(
                "simplex state must be N x V, got {:?}",
                logits.shape()
            )));
        }
        Ok(Self { logits })
    }

    /// Row `i` gets `+K` at column `ids[i]` and `-K` elsewhere.
    pub fn encode(ids: &[TokenId], vocab: usize, k: T) -> Result<Self> {
        let mut data = vec![-k; ids.len() * vocab];
        for (i, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Index {
                    index: id,
                    bound: vocab,
                });
            }
            data[i * vocab + id] = k;
        }
        Ok(Self {
            logits: Tensor::new(vec![ids.len(), vocab], data)?,
        })
    }

    /// Per-row argmax, lowest index on ties.
    pub fn decode(&self) -> Vec<TokenId> {
        self.logits.argmax_rows()
    }

    pub fn seq_len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn into_logits(self) -> Tensor<T> {
        self.logits
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.logits.row(i)
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        self.logits.row_mut(i)
    }

    /// Overwrites row `i` with the `±K` encoding of `id`.
    pub fn set_token(&mut self, i: usize, id: TokenId, k: T) -> Result<()> {
        let v = self.vocab_size();
        if id >= v {
            return Err(Error::Index { index: id, bound: v });
        }
        if i >= self.seq_len() {
            return Err(Error::Index {
                index: i,
                bound: self.seq_len(),
            });
        }
        for (j, x) in self.row_mut(i).iter_mut().enumerate() {
            *x = if j == id { k } else { -k };
        }
        Ok(())
    }

    /// True when every row is exactly one `+K` and `V - 1` entries of `-K`.
    pub fn is_one_hot(&self, k: T) -> bool {
        (0..self.seq_len()).all(|i| {
            let row = self.row(i);
            row.iter().filter(|&&v| v == k).count() == 1 && row.iter().all(|&v| v == k || v == -k)
        })
    }
}

fn noise_rows<T: Scalar, R: Rng + ?Sized>(
    x: &SimplexState<T>,
    plan: &TimestepPlan,
    sched: &NoiseSchedule<T>,
    rng: &mut R,
) -> Result<SimplexState<T>> {
    plan.validate(x.seq_len(), sched.t_max())?;
    let v = x.vocab_size();
    let k = sched.k();
    let mut out = x.clone();
    for (i, &t) in plan.as_slice().iter().enumerate() {
        let signal = sched.alpha_bar(t).sqrt();
        let noise = (T::one() - sched.alpha_bar(t)).sqrt() * k;
        let row = &mut out.logits.data_mut()[i * v..(i + 1) * v];
        // Draws are consumed for every row, frozen or not, so two runs that
        // differ only in their plans see the same noise stream.
        for entry in row.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            if t > 0 {
                *entry = signal * *entry + noise * T::lit(z);
            }
        }
    }
    Ok(out)
}

/// Row `i` becomes `sqrt(abar_{t_i}) x0_i + sqrt(1 - abar_{t_i}) z_i`, `z_i ~ N(0, K^2 I)`.
pub fn forward_noise<T: Scalar, R: Rng + ?Sized>(
    x0: &SimplexState<T>,
    plan: &TimestepPlan,
    sched: &NoiseSchedule<T>,
    rng: &mut R,
) -> Result<SimplexState<T>> {
    noise_rows(x0, plan, sched, rng)
}

/// Re-noises a projected state to each row's next local timestep. Same kernel
/// as [`forward_noise`]; kept separate because the caller's precondition
/// differs (`x_hat` is token-valued).
pub fn reverse_step<T: Scalar, R: Rng + ?Sized>(
    x_hat: &SimplexState<T>,
    next_plan: &TimestepPlan,
    sched: &NoiseSchedule<T>,
    rng: &mut R,
) -> Result<SimplexState<T>> {
    noise_rows(x_hat, next_plan, sched, rng)
}

/// Samples one token per row from the renormalized top-`p` nucleus of
/// `softmax(row)`. One uniform draw is consumed per row regardless of nucleus size.
pub fn sample_top_p<T: Scalar, R: Rng + ?Sized>(
    logits: &Tensor<T>,
    p: f64,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("top-p must lie in (0, 1], got {p}")));
    }
    if logits.rank() != 2 {
        return Err(Error::Shape("top-p projection needs an N x V matrix".into()));
    }
    let v = logits.cols();
    let mut probs = vec![0.0f64; v];
    let mut order: Vec<usize> = (0..v).collect();
    let mut ids = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        for (dst, &src) in probs.iter_mut().zip(logits.row(r)) {
            *dst = src.as_f64();
        }
        softmax_in_place(&mut probs);
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut mass = 0.0;
        let mut size = 0;
        for &j in &order {
            mass += probs[j];
            size += 1;
            if mass >= p {
                break;
            }
        }
        let u: f64 = rng.random::<f64>() * mass;
        let mut acc = 0.0;
        let mut pick = order[size - 1];
        for &j in &order[..size] {
            acc += probs[j];
            if u < acc {
                pick = j;
                break;
            }
        }
        ids.push(pick);
    }
    Ok(ids)
}

/// Top-`p` sample per row, mapped back to the `±K` simplex.
pub fn project_top_p<T: Scalar, R: Rng + ?Sized>(
    logits: &Tensor<T>,
    p: f64,
    k: T,
    rng: &mut R,
) -> Result<SimplexState<T>> {
    let ids = sample_top_p(logits, p, rng)?;
    SimplexState::encode(&ids, logits.cols(), k)
}

/// Deterministic projection: argmax of each row re-encoded as `±K`.
pub fn project_argmax<T: Scalar>(state: &SimplexState<T>, k: T) -> SimplexState<T> {
    let ids: Vec<TokenId> = (0..state.seq_len()).map(|i| argmax(state.row(i))).collect();
    SimplexState::encode(&ids, state.vocab_size(), k).expect("argmax ids are in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn cosine_normalized_and_decreasing() {
        let s = cosine_schedule::<f64>(50, 5.0).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        s.validate().unwrap();
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(cosine_schedule::<f64>(0, 5.0), Err(Error::Config(_))));
    }

    #[test]
    fn encode_example() {
        let s = SimplexState::<f64>::encode(&[2], 4, 5.0).unwrap();
        assert_eq!(s.logits().data(), &[-5.0, -5.0, 5.0, -5.0]);
        let s = SimplexState::<f64>::encode(&[0, 1], 2, 3.0).unwrap();
        assert_eq!(s.logits().data(), &[3.0, -3.0, -3.0, 3.0]);
        assert!(matches!(
            SimplexState::<f64>::encode(&[4], 4, 5.0),
            Err(Error::Index { index: 4, bound: 4 })
        ));
    }

    #[test]
    fn decode_rules() {
        let s = SimplexState::from_logits(Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 1.5, 0., 0., 0.]).unwrap()).unwrap();
        assert_eq!(s.decode(), vec![1, 0]);
    }

    #[test]
    fn zero_plan_is_identity() {
        let sched = cosine_schedule::<f64>(20, 5.0).unwrap();
        let x = SimplexState::encode(&[1, 3, 0], 4, 5.0).unwrap();
        let mut rng = seeded(1);
        let y = forward_noise(&x, &TimestepPlan::constant(3, 0), &sched, &mut rng).unwrap();
        assert_eq!(x, y);
        let y = reverse_step(&x, &TimestepPlan::constant(3, 0), &sched, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn mixed_plan_touches_only_noised_rows() {
        let sched = cosine_schedule::<f64>(20, 5.0).unwrap();
        let x = SimplexState::encode(&[1, 3], 4, 5.0).unwrap();
        let y = forward_noise(&x, &TimestepPlan::new(vec![0, 20]), &sched, &mut seeded(3)).unwrap();
        assert_eq!(x.row(0), y.row(0));
        assert_ne!(x.row(1), y.row(1));
    }

    #[test]
    fn plan_length_mismatch_is_rejected() {
        let sched = cosine_schedule::<f64>(20, 5.0).unwrap();
        let x = SimplexState::encode(&[1, 3], 4, 5.0).unwrap();
        assert!(forward_noise(&x, &TimestepPlan::new(vec![0]), &sched, &mut seeded(0)).is_err());
        assert!(forward_noise(&x, &TimestepPlan::new(vec![0, 21]), &sched, &mut seeded(0)).is_err());
    }

    #[test]
    fn top_p_config_errors() {
        let l = Tensor::<f64>::zeros(&[1, 4]);
        assert!(matches!(project_top_p(&l, 0.0, 5.0, &mut seeded(0)), Err(Error::Config(_))));
        assert!(matches!(project_top_p(&l, 1.5, 5.0, &mut seeded(0)), Err(Error::Config(_))));
    }

    #[test]
    fn greedy_limit() {
        let l = Tensor::<f64>::from_f64(&[2, 4], &[0.1, 2.0, 0.3, 1.9, 5.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = seeded(9);
        for _ in 0..100 {
            let s = project_top_p(&l, 1e-9, 5.0, &mut rng).unwrap();
            assert_eq!(s.decode(), vec![1, 0]);
            assert!(s.is_one_hot(5.0));
        }
    }

    #[test]
    fn schedule_document_roundtrip() {
        let s = cosine_schedule::<f64>(64, 5.0).unwrap();
        let back = NoiseSchedule::<f64>::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
        let mut doc = s.to_document();
        doc.alpha_bar[3] += 1e-3;
        assert!(NoiseSchedule::<f64>::from_document(&doc).is_err());
    }
}
