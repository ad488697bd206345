use rand::Rng;
use tta_core::autodiff::Tape;
use tta_core::data::{split, synthesize, CorpusSpec};
use tta_core::diffusion::{cosine_schedule, SimplexState, TimestepPlan};
use tta_core::models::train::{
    classifier_accuracy, denoising_accuracy, reduce_steps, train_classifier, train_denoiser, ReduceConfig,
    TrainConfig,
};
use tta_core::models::{Classifier, ClassifierConfig, Denoiser, DenoiserConfig, ReferenceLm};
use tta_core::rng::seeded;
use tta_core::tensor::Tensor;

fn tiny_config(positional: bool) -> DenoiserConfig {
    DenoiserConfig {
        vocab_size: 7,
        max_len: 5,
        d_model: 8,
        heads: 2,
        d_ff: 12,
        blocks: 2,
        time_features: 4,
        positional,
    }
}

/// Nudges every parameter away from its initial value so that zero-initialised
/// tensors (biases, relative offsets) take part in the check.
fn jitter(den: &mut Denoiser<f64>, seed: u64) {
    let mut rng = seeded(seed);
    for t in den.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let sched = cosine_schedule::<f64>(16, 5.0).unwrap();
    let mut den = Denoiser::new(tiny_config(true), sched, &mut seeded(8)).unwrap();
    jitter(&mut den, 9);
    let x = Tensor::randn(&[10, 7], 3.0, &mut seeded(10));
    let plan = vec![2, 5, 8, 11, 16, 1, 4, 7, 10, 13];
    let mut tape = Tape::new();
    let bound = den.params().bind(&mut tape);
    let out = den.forward(&mut tape, &bound, &x, &plan, 5).unwrap();
    let loss = tape.cross_entropy(out, &[0, 1, 2, 3, 4, 5, 6, 0, 1, 2]).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let g = den.params().collect_grads(&bound, &mut grads);
    for (name, t) in den.params().names().iter().zip(&g) {
        assert!(t.max_abs() > 0.0, "{name} got no gradient");
    }
}

#[test]
fn untrained_denoiser_gives_finite_logits_for_any_length() {
    let sched = cosine_schedule::<f64>(16, 5.0).unwrap();
    let den = Denoiser::new(tiny_config(true), sched, &mut seeded(0)).unwrap();
    for n in 1..=5 {
        let ids: Vec<usize> = (0..n).map(|i| i % 7).collect();
        let x = SimplexState::encode(&ids, 7, 5.0).unwrap();
        let out = den.denoise(&x, &TimestepPlan::constant(n, 9)).unwrap();
        assert_eq!(out.shape(), &[n, 7]);
        assert!(out.is_finite());
    }
    let x = SimplexState::encode(&[0; 6], 7, 5.0).unwrap();
    assert!(den.denoise(&x, &TimestepPlan::constant(6, 9)).is_err());
}

#[test]
fn permutation_equivariance_without_positions() {
    let sched = cosine_schedule::<f64>(16, 5.0).unwrap();
    let mut den = Denoiser::new(tiny_config(false), sched, &mut seeded(1)).unwrap();
    jitter(&mut den, 2);
    let x = Tensor::randn(&[5, 7], 3.0, &mut seeded(6));
    let plan = vec![1, 4, 9, 16, 0];
    let state = SimplexState::from_logits(x.clone()).unwrap();
    let out = den.denoise(&state, &TimestepPlan::new(plan.clone())).unwrap();

    let (a, b) = (1, 3);
    let mut xp = x.clone();
    xp.row_mut(a).copy_from_slice(x.row(b));
    xp.row_mut(b).copy_from_slice(x.row(a));
    let mut pp = plan.clone();
    pp.swap(a, b);
    let outp = den
        .denoise(&SimplexState::from_logits(xp).unwrap(), &TimestepPlan::new(pp))
        .unwrap();
    for i in 0..5 {
        let j = if i == a { b } else if i == b { a } else { i };
        for (u, v) in out.row(i).iter().zip(outp.row(j)) {
            assert!((u - v).abs() < 1e-10);
        }
    }
}

#[test]
fn classifier_is_pure_bounded_and_shift_invariant() {
    let cfg = ClassifierConfig { vocab_size: 9, ..Default::default() };
    let clf = Classifier::<f64>::new(cfg, &mut seeded(4)).unwrap();
    let x = Tensor::randn(&[6, 9], 4.0, &mut seeded(5));
    let s = SimplexState::from_logits(x.clone()).unwrap();
    let p = clf.classify(&s).unwrap();
    assert_eq!(p, clf.classify(&s).unwrap());
    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let mut shifted = x.clone();
    for i in 0..6 {
        let c = 3.7 * i as f64 - 8.0;
        shifted.row_mut(i).iter_mut().for_each(|v| *v += c);
    }
    let q = clf.classify(&SimplexState::from_logits(shifted).unwrap()).unwrap();
    for (a, b) in p.iter().zip(&q) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn classifier_input_gradient_matches_finite_differences() {
    let cfg = ClassifierConfig { vocab_size: 6, d_hidden: 5, ..Default::default() };
    let clf = Classifier::<f64>::new(cfg, &mut seeded(11)).unwrap();
    let x = Tensor::randn(&[4, 6], 2.0, &mut seeded(12));
    let s = SimplexState::from_logits(x.clone()).unwrap();
    let (_, g) = clf.log_prob_grad(&s, 1).unwrap();
    let h = 1e-5;
    for e in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[e] += h;
        let mut down = x.clone();
        down.data_mut()[e] -= h;
        let lp = |t: Tensor<f64>| clf.log_prob_grad(&SimplexState::from_logits(t).unwrap(), 1).unwrap().0;
        let numeric = (lp(up) - lp(down)) / (2.0 * h);
        let a = g.data()[e];
        assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4) < 1e-4);
    }
}

#[test]
fn zero_training_steps_is_a_no_op() {
    let sched = cosine_schedule::<f64>(16, 5.0).unwrap();
    let mut den = Denoiser::new(tiny_config(true), sched, &mut seeded(0)).unwrap();
    let before = den.clone();
    let data = vec![vec![1, 2, 3, 4, 5]; 3];
    let cfg = TrainConfig { steps: 0, ..Default::default() };
    let rep = train_denoiser(&mut den, &data, &cfg).unwrap();
    assert!(rep.losses.is_empty());
    assert_eq!(den, before);
}

#[test]
fn memorization_set_is_reproduced_at_plan_zero_and_loss_falls() {
    let spec = CorpusSpec { size: 200, ..Default::default() };
    let corpus = synthesize(&spec).unwrap();
    let seqs: Vec<Vec<usize>> = corpus.sequences().map(<[usize]>::to_vec).collect();
    let sched = cosine_schedule::<f64>(64, 5.0).unwrap();
    let cfg_m = DenoiserConfig { d_model: 16, d_ff: 32, blocks: 1, ..Default::default() };
    let mut den = Denoiser::new(cfg_m, sched, &mut seeded(1)).unwrap();
    let cfg = TrainConfig { steps: 1100, batch_size: 8, ..Default::default() };
    let rep = train_denoiser(&mut den, &seqs, &cfg).unwrap();
    assert!(den.params().is_finite());

    let (mut hit, mut total) = (0, 0);
    for s in &seqs {
        let x = SimplexState::encode(s, 64, 5.0).unwrap();
        let out = den.denoise(&x, &TimestepPlan::constant(16, 0)).unwrap();
        hit += out.argmax_rows().iter().zip(s).filter(|(a, b)| a == b).count();
        total += s.len();
    }
    assert!(hit as f64 / total as f64 >= 0.99, "{hit}/{total}");

    // 100-step window means, read every 200 steps, never rise by more than
    // two standard errors of the window mean (t is resampled every step)
    let window = |end: usize| {
        let w = &rep.losses[end - 100..end];
        let m = w.iter().sum::<f64>() / 100.0;
        let var = w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 99.0;
        (m, (var / 100.0).sqrt())
    };
    let marks: Vec<(f64, f64)> = (100..=rep.losses.len()).step_by(200).map(window).collect();
    for w in marks.windows(2) {
        let tol = 2.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt();
        assert!(w[1].0 <= w[0].0 + tol, "{marks:?}");
    }
    assert!(marks.last().unwrap().0 < marks[0].0, "{marks:?}");
}

#[test]
fn trained_models_beat_baselines_on_the_toy_corpus() {
    let corpus = synthesize(&CorpusSpec::default()).unwrap();
    let (train, test) = split(&corpus, 0.8, 1).unwrap();

    let mut clf = Classifier::<f64>::new(ClassifierConfig::default(), &mut seeded(2)).unwrap();
    let ccfg = TrainConfig { steps: 1500, ..Default::default() };
    train_classifier(&mut clf, &train.examples, 5.0, &ccfg).unwrap();
    let acc = classifier_accuracy(&clf, &test.examples, 5.0).unwrap();
    assert!(acc >= 0.95, "classifier held-out accuracy {acc}");

    let tr: Vec<Vec<usize>> = train.sequences().map(<[usize]>::to_vec).collect();
    let te: Vec<Vec<usize>> = test.sequences().take(256).map(<[usize]>::to_vec).collect();
    let sched = cosine_schedule::<f64>(64, 5.0).unwrap();
    let mut den = Denoiser::new(DenoiserConfig::default(), sched, &mut seeded(1)).unwrap();
    let dcfg = TrainConfig { steps: 800, ..Default::default() };
    train_denoiser(&mut den, &tr, &dcfg).unwrap();
    let acc = denoising_accuracy(&den, &te, 16, 3).unwrap();
    assert!(acc >= 10.0 / 64.0, "denoising accuracy at T/4: {acc}");
}

#[test]
fn reduction_with_unit_ratio_and_no_steps_is_identity() {
    let sched = cosine_schedule::<f64>(16, 5.0).unwrap();
    let teacher = Denoiser::new(tiny_config(true), sched, &mut seeded(0)).unwrap();
    let cfg = ReduceConfig { steps: 0, ..Default::default() };
    let (student, rep) = reduce_steps(&teacher, 1.0, 16, &[vec![1, 2, 3, 4, 5]], &cfg).unwrap();
    assert!(rep.losses.is_empty());
    assert_eq!(student.schedule().t_max(), teacher.schedule().t_max());
    assert_eq!(student.params(), teacher.params());
    assert_eq!(student.schedule(), teacher.schedule());

    let (half, _) = reduce_steps(&teacher, 0.5, 16, &[vec![1, 2, 3, 4, 5]], &cfg).unwrap();
    assert_eq!(half.schedule().t_max(), 8);
    assert!(reduce_steps(&teacher, 1.5, 16, &[vec![1, 2, 3, 4, 5]], &cfg).is_err());
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sched = cosine_schedule::<f64>(16, 5.0).unwrap();
    let den = Denoiser::new(tiny_config(true), sched, &mut seeded(0)).unwrap();
    let path = dir.path().join("den.ckpt");
    den.save(&path).unwrap();
    assert_eq!(Denoiser::<f64>::load(&path).unwrap(), den);
    assert_eq!(den.to_bytes().unwrap(), Denoiser::<f64>::from_bytes(&den.to_bytes().unwrap()).unwrap().to_bytes().unwrap());

    let clf = Classifier::<f64>::new(ClassifierConfig::default(), &mut seeded(1)).unwrap();
    let path = dir.path().join("clf.ckpt");
    clf.save(&path).unwrap();
    assert_eq!(Classifier::<f64>::load(&path).unwrap(), clf);
    assert!(Denoiser::<f64>::load(&path).is_err());

    let mut bytes = den.to_bytes().unwrap();
    bytes[0] ^= 1;
    assert!(Denoiser::<f64>::from_bytes(&bytes).is_err());
}

#[test]
fn reference_lm_orders_fluent_above_noise() {
    let corpus = synthesize(&CorpusSpec::default()).unwrap();
    let (train, _) = split(&corpus, 0.8, 1).unwrap();
    let lm = ReferenceLm::fit(train.sequences(), 64, 0.01).unwrap();
    let train_ppl = lm.mean_perplexity(train.sequences()).unwrap();

    let mut rng = seeded(21);
    let own: Vec<Vec<usize>> = (0..2000).map(|_| lm.sample(16, &mut rng)).collect();
    let own_ppl = lm.mean_perplexity(own.iter().map(Vec::as_slice)).unwrap();
    assert!((own_ppl / train_ppl - 1.0).abs() < 0.10, "self {own_ppl} vs train {train_ppl}");

    let noise: Vec<Vec<usize>> = (0..500).map(|_| (0..16).map(|_| rng.random_range(0..64)).collect()).collect();
    let noise_ppl = lm.mean_perplexity(noise.iter().map(Vec::as_slice)).unwrap();
    assert!(noise_ppl >= 2.0 * train_ppl, "noise {noise_ppl} vs train {train_ppl}");

    let greedy = lm.greedy(16);
    assert!(lm.perplexity(&greedy).unwrap() < train_ppl);
}
