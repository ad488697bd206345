use proptest::prelude::*;
use tta_core::diffusion::{
    cosine_schedule, forward_noise, project_argmax, sample_top_p, NoiseSchedule, SimplexState, TimestepPlan,
};
use tta_core::rng::seeded;
use tta_core::tensor::Tensor;

fn check_invariants<T: tta_core::Scalar>(s: &NoiseSchedule<T>) {
    assert!(s.alpha_bar(0) == T::one());
    for t in 1..=s.t_max() {
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar at {t}");
        assert!(s.alpha_bar(t) >= T::zero());
        if t >= 2 {
            assert!(s.injected_variance(t) > s.injected_variance(t - 1), "injected variance at {t}");
        }
    }
    s.validate().unwrap();
}

#[test]
fn cosine_schedule_invariants() {
    for t in [8, 50, 64, 1000] {
        check_invariants(&cosine_schedule::<f64>(t, 5.0).unwrap());
    }
    for t in [8, 50, 64] {
        check_invariants(&cosine_schedule::<f32>(t, 5.0).unwrap());
    }
}

#[test]
fn full_vocabulary_round_trips() {
    for v in [2, 7, 64, 300] {
        let ids: Vec<usize> = (0..v).collect();
        let x = SimplexState::<f64>::encode(&ids, v, 5.0).unwrap();
        assert!(x.is_one_hot(5.0));
        assert_eq!(x.decode(), ids);
        assert_eq!(project_argmax(&x, 5.0), x);
    }
    assert!(SimplexState::<f64>::encode(&[4], 4, 5.0).is_err());
}

#[test]
fn forward_noise_moments() {
    let sched = cosine_schedule::<f64>(64, 5.0).unwrap();
    let t = 24;
    let x0 = SimplexState::<f64>::encode(&[1, 0], 3, 5.0).unwrap();
    let plan = TimestepPlan::new(vec![t, 0]);
    let mut rng = seeded(12);
    let draws = 40_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let x = forward_noise(&x0, &plan, &sched, &mut rng).unwrap();
        assert_eq!(x.row(1), x0.row(1));
        let e = x.row(0)[1];
        s1 += e;
        s2 += e * e;
    }
    let mean = s1 / draws as f64;
    let var = s2 / draws as f64 - mean * mean;
    let ab = sched.alpha_bar(t);
    let want_var = (1.0 - ab) * 25.0;
    let se_mean = (want_var / draws as f64).sqrt();
    assert!((mean - ab.sqrt() * 5.0).abs() < 4.0 * se_mean, "mean {mean}");
    // the variance of a sample variance of normals is 2 sigma^4 / n
    let se_var = want_var * (2.0 / draws as f64).sqrt();
    assert!((var - want_var).abs() < 4.0 * se_var, "var {var} vs {want_var}");
}

#[test]
fn top_p_sampling_follows_the_nucleus() {
    let probs: [f64; 4] = [0.5, 0.3, 0.15, 0.05];
    let logits = Tensor::new(vec![1, 4], probs.iter().map(|p| p.ln()).collect()).unwrap();
    let mut rng = seeded(3);
    let draws = 60_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[sample_top_p(&logits, 0.9, &mut rng).unwrap()[0]] += 1;
    }
    // nucleus of p = 0.9 is {0, 1, 2} with mass 0.95
    assert_eq!(counts[3], 0);
    for j in 0..3 {
        let want = probs[j] / 0.95;
        let got = counts[j] as f64 / draws as f64;
        let se = (want * (1.0 - want) / draws as f64).sqrt();
        assert!((got - want).abs() < 4.0 * se, "token {j}: {got} vs {want}");
    }
    let greedy = sample_top_p(&logits, 1e-9, &mut rng).unwrap();
    assert_eq!(greedy, vec![0]);
}

proptest! {
    #[test]
    fn zero_plan_rows_are_bit_identical(ids in prop::collection::vec(0usize..9, 1..10), t in 1usize..=64, seed in any::<u64>()) {
        let sched = cosine_schedule::<f64>(64, 5.0).unwrap();
        let x0 = SimplexState::<f64>::encode(&ids, 9, 5.0).unwrap();
        let steps: Vec<usize> = (0..ids.len()).map(|i| if i % 2 == 0 { 0 } else { t }).collect();
        let x = forward_noise(&x0, &TimestepPlan::new(steps), &sched, &mut seeded(seed)).unwrap();
        for i in (0..ids.len()).step_by(2) {
            prop_assert!(x.row(i).iter().zip(x0.row(i)).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn decode_inverts_encode(ids in prop::collection::vec(0usize..64, 1..32)) {
        let x = SimplexState::<f32>::encode(&ids, 64, 5.0).unwrap();
        prop_assert_eq!(x.decode(), ids);
    }
}
