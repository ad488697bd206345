use proptest::prelude::*;
use tta_core::guidance::{GenerationTrace, StepRecord};
use tta_core::metrics::{
    binned_correlation, confidence_drop, dist_n, fluctuation, key_token_change, kl_divergence, mean_fluctuation,
    mean_key_token_change, pearson, pinsker_bound, step_metrics,
};
use tta_core::rng::seeded;

/// Every distribution over `k` outcomes whose entries are multiples of `1/steps`.
fn grid_simplex(k: usize, steps: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, steps: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == k - 1 {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / steps as f64).collect());
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(k, left - c, steps, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, steps, steps, &mut Vec::new(), &mut out);
    out
}

#[test]
fn pinsker_lower_bound_holds_on_exhaustive_grid() {
    let mut checked = 0usize;
    for k in 2..=4 {
        let grid = grid_simplex(k, 20);
        for p in &grid {
            for q in &grid {
                let tv = (0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()).min(1.0);
                let kl = kl_divergence(p, q).unwrap();
                let bound = pinsker_bound(tv).unwrap();
                assert!(bound.kl_lower <= kl + 1e-12, "p={p:?} q={q:?}: {} > {kl}", bound.kl_lower);
                assert!(bound.tv_lower <= tv + 1e-15);
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 21 * 21 + 231 * 231 + 1771 * 1771);
}

#[test]
fn pinsker_rejects_out_of_range_rates() {
    assert!(pinsker_bound(1.01).is_err());
    assert!(pinsker_bound(-1.5).is_err());
    assert!(pinsker_bound(f64::NAN).is_err());
    assert_eq!(pinsker_bound(-0.5).unwrap().kl_lower, 0.5);
}

fn record(step: usize, tokens: Vec<usize>, key_tokens: Vec<usize>, conf: (f64, Option<f64>)) -> StepRecord {
    StepRecord {
        step,
        t_global: 3 - step,
        plan: vec![3 - step; tokens.len()],
        grad_norms: Vec::new(),
        tokens,
        key_tokens,
        conf_after_guidance: Some(conf.0),
        conf_before_next: conf.1,
        seed_digest: String::new(),
    }
}

#[test]
fn hand_built_trace_metrics() {
    let trace = GenerationTrace {
        records: vec![
            record(0, vec![1, 2, 3, 4], vec![0, 1], (0.9, Some(0.6))),
            record(1, vec![1, 5, 3, 6], vec![1, 2], (0.8, Some(0.75))),
            record(2, vec![1, 5, 7, 6], vec![2, 3], (0.7, None)),
        ],
    };
    trace.validate().unwrap();
    assert_eq!(mean_fluctuation(&trace, 1).unwrap(), 0.5);
    assert_eq!(mean_fluctuation(&trace, 2).unwrap(), 0.375);
    assert_eq!(key_token_change(&trace, 0, 2).unwrap(), 0.5);
    assert_eq!(key_token_change(&trace, 1, 2).unwrap(), 0.5);
    assert_eq!(mean_key_token_change(&trace, 2).unwrap(), 0.5);
    assert!((confidence_drop(&trace, 0).unwrap() - 0.3).abs() < 1e-15);
    assert!(confidence_drop(&trace, 2).is_err());
    let m = step_metrics(&trace, 2).unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].r_t, 0.5);
    assert_eq!(m[0].key_change_ratio, 0.5);
    assert!((m[0].conf_drop - 0.05).abs() < 1e-15);
    assert!(mean_fluctuation(&trace, 3).is_err());
    assert!(key_token_change(&trace, 0, 3).is_err());
}

#[test]
fn dist_n_examples() {
    assert_eq!(dist_n(&[vec![1, 2, 3, 1, 2, 3]], 3).unwrap(), 0.75);
    assert_eq!(dist_n(&[vec![4; 10]], 1).unwrap(), 0.1);
    assert_eq!(dist_n(&[vec![1, 2], vec![3, 4]], 2).unwrap(), 1.0);
    assert!(dist_n(&[vec![1, 2]], 3).is_err());
    assert!(dist_n(&[vec![1, 2]], 0).is_err());
}

#[test]
fn binned_correlation_of_a_line_is_one() {
    let x: Vec<f64> = (0..100).map(|i| (i * 37 % 100) as f64).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    assert!((binned_correlation(&x, &y, 10).unwrap() - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((binned_correlation(&x, &neg, 10).unwrap() + 1.0).abs() < 1e-12);
    assert!(binned_correlation(&x[..15], &y[..15], 10).is_err());
    assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn binned_correlation_is_centred_for_independent_series() {
    use rand::Rng;
    let mut rng = seeded(31);
    let runs = 200;
    let mut sum = 0.0;
    for _ in 0..runs {
        let x: Vec<f64> = (0..150).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..150).map(|_| rng.random::<f64>()).collect();
        sum += binned_correlation(&x, &y, 10).unwrap();
    }
    // per-run sd is about 1/3 for 10 bins, so the mean of 200 has sd about 0.024
    assert!((sum / runs as f64).abs() < 0.08, "{}", sum / runs as f64);
}

fn seq_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>)> {
    (1usize..20).prop_flat_map(|n| {
        (
            prop::collection::vec(0usize..6, n),
            prop::collection::vec(0usize..6, n),
            prop::collection::vec(0usize..6, n),
        )
    })
}

proptest! {
    #[test]
    fn fluctuation_is_a_normalized_metric((a, b, c) in seq_pair()) {
        let ab = fluctuation(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, fluctuation(&b, &a).unwrap());
        prop_assert_eq!(ab == 0.0, a == b);
        let (bc, ac) = (fluctuation(&b, &c).unwrap(), fluctuation(&a, &c).unwrap());
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn dist_n_is_a_ratio(samples in prop::collection::vec(prop::collection::vec(0usize..8, 3..12), 1..6), n in 1usize..4) {
        let d = dist_n(&samples, n).unwrap();
        prop_assert!(d > 0.0 && d <= 1.0);
        let doubled: Vec<Vec<usize>> = samples.iter().chain(&samples).cloned().collect();
        prop_assert!((dist_n(&doubled, n).unwrap() - d / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(w in prop::collection::vec(0.01f64..1.0, 2..6)) {
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / s).collect();
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        let q: Vec<f64> = vec![1.0 / p.len() as f64; p.len()];
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
    }
}
