//! Token timestep allocation: the policies mapping a global timestep to per-token
//! local timesteps, the budgeted noise-allocation program, and the map from the
//! simplex schedule to the induced uniform-state discrete schedule.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::TimestepPlan;
use crate::error::{Error, Result};
use crate::rng::{seeded, RngStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA_SMOOTH: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Constant,
    Linear,
    BackwardLinear,
    Random,
    FixedZero,
    #[serde(rename = "fixed_T")]
    FixedT,
    Adaptive,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "constant" => Self::Constant,
            "linear" => Self::Linear,
            "backward_linear" => Self::BackwardLinear,
            "random" => Self::Random,
            "fixed_zero" => Self::FixedZero,
            "fixed_T" | "fixed_t" => Self::FixedT,
            "adaptive" => Self::Adaptive,
            other => return Err(Error::Config(format!("unknown schedule policy {other:?}"))),
        })
    }
}

/// Config form: `{kind, alpha_smooth?, seed?}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePolicy {
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_smooth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SchedulePolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            alpha_smooth: None,
            seed: None,
        }
    }

    pub fn adaptive(alpha_smooth: f64) -> Self {
        Self {
            kind: PolicyKind::Adaptive,
            alpha_smooth: Some(alpha_smooth),
            seed: None,
        }
    }

    pub fn random(seed: u64) -> Self {
        Self {
            kind: PolicyKind::Random,
            alpha_smooth: None,
            seed: Some(seed),
        }
    }

    pub fn smoothing(&self) -> f64 {
        self.alpha_smooth.unwrap_or(DEFAULT_ALPHA_SMOOTH)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.smoothing();
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("alpha_smooth must be in [0, 1], got {a}")));
        }
        Ok(())
    }

    pub fn needs_scores(&self) -> bool {
        self.kind == PolicyKind::Adaptive
    }
}

/// Per-token gradient magnitudes `g` and their min-max normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores {
    raw: Vec<f64>,
    normalized: Vec<f64>,
}

impl ImportanceScores {
    /// Normalizes `g` to `[0, 1]`. When all entries are equal the normalized
    /// scores are all 0.5.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::Domain("importance magnitudes must be finite and >= 0".into()));
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let normalized = if raw.is_empty() {
            Vec::new()
        } else if hi > lo {
            raw.iter().map(|g| (g - lo) / (hi - lo)).collect()
        } else {
            vec![0.5; raw.len()]
        };
        Ok(Self { raw, normalized })
    }

    /// Euclidean norm of each gradient row.
    pub fn from_gradients<T: Scalar>(grad: &Tensor<T>) -> Result<Self> {
        if grad.rank() != 2 {
            return Err(Error::Shape("importance needs an N x V gradient".into()));
        }
        let raw = (0..grad.rows())
            .map(|i| grad.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
            .collect();
        Self::new(raw)
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Indices of the `k` largest magnitudes, largest first; ties go to the lower index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.raw.len()).collect();
        idx.sort_by(|&a, &b| self.raw[b].total_cmp(&self.raw[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

/// Maps a global timestep `t` to a [`TimestepPlan`] of length `n`.
///
/// `rng` is only consumed by [`PolicyKind::Random`]. Every entry is clamped to
/// `[0, t_max]`.
pub fn allocate<R: Rng + ?Sized>(
    policy: &SchedulePolicy,
    t: usize,
    n: usize,
    t_max: usize,
    scores: Option<&ImportanceScores>,
    rng: &mut R,
) -> Result<TimestepPlan> {
    policy.validate()?;
    if t > t_max {
        return Err(Error::Contract(format!("global timestep {t} exceeds T = {t_max}")));
    }
    // i / (N - 1) is undefined for a single token; it gets the global timestep.
    let ramp = |i: usize| if n <= 1 { t } else { i * t / (n - 1) };
    let steps: Vec<usize> = match policy.kind {
        PolicyKind::Constant => vec![t; n],
        PolicyKind::Linear => (0..n).map(ramp).collect(),
        PolicyKind::BackwardLinear => (0..n).map(|i| ramp(n.saturating_sub(1) - i)).collect(),
        PolicyKind::Random => (0..n)
            .map(|_| if t >= 2 { rng.random_range(1..t) } else { t })
            .collect(),
        PolicyKind::FixedZero => vec![0; n],
        PolicyKind::FixedT => vec![t_max; n],
        PolicyKind::Adaptive => {
            let scores = scores.ok_or_else(|| {
                Error::Contract("adaptive allocation requires importance scores".into())
            })?;
            if scores.len() != n {
                return Err(Error::Contract(format!(
                    "{} importance scores for {n} tokens",
                    scores.len()
                )));
            }
            let a = policy.smoothing();
            let tf = t as f64;
            scores
                .normalized()
                .iter()
                .map(|g| (a * tf + (1.0 - a) * (1.0 - g) * tf).round() as usize)
                .collect()
        }
    };
    Ok(TimestepPlan::new(steps.into_iter().map(|s| s.min(t_max)).collect()))
}

/// A policy bundled with the private random stream it draws from.
#[derive(Clone, Debug)]
pub struct Allocator {
    policy: SchedulePolicy,
    rng: RngStream,
}

impl Allocator {
    pub fn new(policy: SchedulePolicy) -> Result<Self> {
        policy.validate()?;
        let rng = seeded(policy.seed.unwrap_or(0));
        Ok(Self { policy, rng })
    }

    pub fn policy(&self) -> &SchedulePolicy {
        &self.policy
    }

    pub fn plan(
        &mut self,
        t: usize,
        n: usize,
        t_max: usize,
        scores: Option<&ImportanceScores>,
    ) -> Result<TimestepPlan> {
        allocate(&self.policy, t, n, t_max, scores, &mut self.rng)
    }
}

/// `min sum_i b_i s_i  s.t.  sum_i s_i = budget,  lo <= s_i <= hi`.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationProblem<T> {
    pub weights: Vec<T>,
    pub budget: T,
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> AllocationProblem<T> {
    pub fn objective(&self, variances: &[T]) -> T {
        self.weights.iter().zip(variances).map(|(&b, &s)| b * s).sum()
    }

    pub fn uniform_split(&self) -> Vec<T> {
        let n = T::from_usize_lossy(self.weights.len());
        vec![self.budget / n; self.weights.len()]
    }

    fn check(&self) -> Result<()> {
        let n = T::from_usize_lossy(self.weights.len());
        if self.weights.is_empty() {
            return Err(Error::Config("allocation needs at least one token".into()));
        }
        if self.weights.iter().any(|b| !b.is_finite() || *b < T::zero()) {
            return Err(Error::Config("weights must be finite and >= 0".into()));
        }
        if !(self.lo <= self.hi) || self.lo < T::zero() {
            return Err(Error::Config(format!("invalid box [{}, {}]", self.lo, self.hi)));
        }
        let slack = T::epsilon() * T::lit(16.0) * (self.budget.abs() + T::one());
        if self.budget < n * self.lo - slack || self.budget > n * self.hi + slack {
            return Err(Error::Config(format!(
                "budget {} outside the feasible range [{}, {}]",
                self.budget,
                n * self.lo,
                n * self.hi
            )));
        }
        Ok(())
    }
}

/// Exact optimum of the budgeted program. Starting from the lower box edge,
/// the residual budget goes to the smallest weights first, filling each to the
/// upper edge; at most one coordinate ends strictly inside the box. Equal
/// weights are served in index order, and when all weights are equal the
/// uniform split (also optimal) is returned.
pub fn solve_budgeted_allocation<T: Scalar>(p: &AllocationProblem<T>) -> Result<Vec<T>> {
    p.check()?;
    let n = p.weights.len();
    let first = p.weights[0];
    if p.weights.iter().all(|&b| b == first) {
        return Ok(p.uniform_split());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        p.weights[a]
            .partial_cmp(&p.weights[b])
            .expect("finite weights")
            .then(a.cmp(&b))
    });
    let mut out = vec![p.lo; n];
    let mut residual = p.budget - T::from_usize_lossy(n) * p.lo;
    let width = p.hi - p.lo;
    for &i in &order {
        if residual <= T::zero() {
            break;
        }
        let add = if residual < width { residual } else { width };
        out[i] += add;
        residual -= add;
    }
    Ok(out)
}

/// One point of the simplex-to-discrete schedule map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DualityPoint {
    pub alpha_bar: f64,
    pub alpha_tilde: f64,
    pub alpha_disc: f64,
    /// Monte Carlo standard error of `alpha_disc` (0 at the exact endpoints).
    pub std_err: f64,
}

pub const DEFAULT_DUALITY_DRAWS: usize = 100_000;

/// `alpha_tilde = sqrt(4 abar / (1 + 3 abar))`. Independent of the simplex constant.
pub fn gaussian_correlation(alpha_bar: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::Domain(format!("alpha_bar must be in [0, 1], got {alpha_bar}")));
    }
    Ok((4.0 * alpha_bar / (1.0 + 3.0 * alpha_bar)).sqrt())
}

/// Induced uniform-state discrete schedule. `P(argmax w = y)` for
/// `w ~ N(alpha_tilde e_y, (1 - alpha_tilde^2) I_V)` is estimated by Monte
/// Carlo and inverted through the categorical marginal
/// `alpha_disc e_y + (1 - alpha_disc) / V`.
pub fn duality_schedule<R: Rng + ?Sized>(
    alpha_bar: f64,
    vocab: usize,
    draws: usize,
    rng: &mut R,
) -> Result<DualityPoint> {
    if vocab < 2 {
        return Err(Error::Domain(format!("vocabulary must have >= 2 entries, got {vocab}")));
    }
    if draws == 0 {
        return Err(Error::Config("duality needs at least one draw".into()));
    }
    let alpha_tilde = gaussian_correlation(alpha_bar)?;
    let exact = |alpha_disc| DualityPoint {
        alpha_bar,
        alpha_tilde,
        alpha_disc,
        std_err: 0.0,
    };
    // noiseless: argmax is y surely; isotropic: argmax is exactly uniform
    if alpha_tilde >= 1.0 {
        return Ok(exact(1.0));
    }
    if alpha_tilde == 0.0 {
        return Ok(exact(0.0));
    }
    let sd = (1.0 - alpha_tilde * alpha_tilde).sqrt();
    let mut hits = 0usize;
    for _ in 0..draws {
        let z0: f64 = StandardNormal.sample(rng);
        let target = alpha_tilde + sd * z0;
        let mut wins = true;
        for _ in 1..vocab {
            let z: f64 = StandardNormal.sample(rng);
            // ties have probability zero; strict comparison keeps index-0 preference moot
            if sd * z > target {
                wins = false;
            }
        }
        if wins {
            hits += 1;
        }
    }
    let p = hits as f64 / draws as f64;
    let uniform = 1.0 / vocab as f64;
    let scale = 1.0 - uniform;
    Ok(DualityPoint {
        alpha_bar,
        alpha_tilde,
        alpha_disc: (p - uniform) / scale,
        std_err: (p * (1.0 - p) / draws as f64).sqrt() / scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn plan(policy: &SchedulePolicy, t: usize, n: usize, scores: Option<&ImportanceScores>) -> Vec<usize> {
        allocate(policy, t, n, 1000, scores, &mut seeded(0)).unwrap().into_vec()
    }

    #[test]
    fn linear_example() {
        assert_eq!(plan(&SchedulePolicy::new(PolicyKind::Linear), 100, 5, None), vec![0, 25, 50, 75, 100]);
        assert_eq!(
            plan(&SchedulePolicy::new(PolicyKind::BackwardLinear), 100, 5, None),
            vec![100, 75, 50, 25, 0]
        );
    }

    #[test]
    fn adaptive_example() {
        let s = ImportanceScores::new(vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.normalized(), &[0.0, 1.0, 0.5]);
        assert_eq!(plan(&SchedulePolicy::adaptive(0.6), 100, 3, Some(&s)), vec![100, 60, 80]);
    }

    #[test]
    fn constant_at_zero() {
        assert_eq!(plan(&SchedulePolicy::new(PolicyKind::Constant), 0, 4, None), vec![0; 4]);
    }

    #[test]
    fn fixed_kinds() {
        assert_eq!(plan(&SchedulePolicy::new(PolicyKind::FixedZero), 40, 3, None), vec![0; 3]);
        assert_eq!(plan(&SchedulePolicy::new(PolicyKind::FixedT), 40, 3, None), vec![1000; 3]);
    }

    #[test]
    fn random_is_inside_open_interval() {
        let mut a = Allocator::new(SchedulePolicy::random(5)).unwrap();
        for _ in 0..50 {
            let p = a.plan(10, 16, 64, None).unwrap();
            assert!(p.as_slice().iter().all(|&t| (1..10).contains(&t)));
        }
    }

    #[test]
    fn singleton_convention() {
        assert_eq!(plan(&SchedulePolicy::new(PolicyKind::Linear), 37, 1, None), vec![37]);
        assert_eq!(plan(&SchedulePolicy::new(PolicyKind::BackwardLinear), 37, 1, None), vec![37]);
    }

    #[test]
    fn adaptive_without_scores_is_a_contract_error() {
        let r = allocate(&SchedulePolicy::adaptive(0.6), 10, 3, 64, None, &mut seeded(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn smoothing_out_of_range_rejected() {
        let r = allocate(&SchedulePolicy::adaptive(1.5), 10, 3, 64, None, &mut seeded(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn importance_examples() {
        let g = Tensor::<f64>::from_f64(&[2, 2], &[3.0, 4.0, 0.0, 0.0]).unwrap();
        let s = ImportanceScores::from_gradients(&g).unwrap();
        assert_eq!(s.raw(), &[5.0, 0.0]);
        assert_eq!(s.normalized(), &[1.0, 0.0]);
        let flat = ImportanceScores::new(vec![2.0; 4]).unwrap();
        assert_eq!(flat.normalized(), &[0.5; 4]);
    }

    #[test]
    fn budget_examples() {
        let p = AllocationProblem { weights: vec![2.0f64, 1.0], budget: 1.0, lo: 0.1, hi: 0.9 };
        let s = solve_budgeted_allocation(&p).unwrap();
        assert!((s[0] - 0.1).abs() < 1e-12 && (s[1] - 0.9).abs() < 1e-12);
        assert!((p.objective(&s) - 1.1).abs() < 1e-12);

        let p = AllocationProblem { weights: vec![3.0f64; 4], budget: 2.0, lo: 0.1, hi: 0.9 };
        let s = solve_budgeted_allocation(&p).unwrap();
        assert_eq!(s, vec![0.5; 4]);
        assert!((p.objective(&s) - 6.0).abs() < 1e-12);

        let p = AllocationProblem { weights: vec![1.0f64, 2.0], budget: 2.0, lo: 0.1, hi: 0.9 };
        assert!(matches!(solve_budgeted_allocation(&p), Err(Error::Config(_))));
    }

    #[test]
    fn duality_endpoints_and_domain() {
        let mut rng = seeded(1);
        let one = duality_schedule(1.0, 8, 10, &mut rng).unwrap();
        assert_eq!((one.alpha_tilde, one.alpha_disc), (1.0, 1.0));
        let zero = duality_schedule(0.0, 8, 10, &mut rng).unwrap();
        assert_eq!((zero.alpha_tilde, zero.alpha_disc), (0.0, 0.0));
        assert!(matches!(duality_schedule(1.2, 8, 10, &mut rng), Err(Error::Domain(_))));
        assert!(matches!(duality_schedule(0.5, 1, 10, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn policy_config_form() {
        let p: SchedulePolicy = serde_json::from_str(r#"{"kind":"adaptive","alpha_smooth":0.6}"#).unwrap();
        assert_eq!(p, SchedulePolicy::adaptive(0.6));
        let p: SchedulePolicy = serde_json::from_str(r#"{"kind":"fixed_T"}"#).unwrap();
        assert_eq!(p.kind, PolicyKind::FixedT);
        assert_eq!("backward_linear".parse::<PolicyKind>().unwrap(), PolicyKind::BackwardLinear);
    }
}
