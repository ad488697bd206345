//! Central-difference gradient checking for tape operations and whole models.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::diffusion::cosine_schedule;
use crate::models::{Denoiser, DenoiserConfig};
use crate::rng::seeded;
use crate::tensor::Tensor;

const H: f64 = 1e-5;

/// Relative error with a floor of `1e-4` on the denominator, so that entries
/// whose true derivative is zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Builds `loss = sum(f(inputs) * w)` for a random `w` derived from `seed` and
/// returns the worst relative error between the tape gradient of every input
/// element and its central difference.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let run = |xs: &[Tensor<f64>], w: Option<&Tensor<f64>>| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let w = match w {
            Some(w) => w.clone(),
            None => Tensor::randn(&shape, 1.0, &mut seeded(seed ^ 0xABCD)),
        };
        let wv = tape.leaf(w.clone());
        let prod = tape.mul(out, wv).expect("weight matches output shape");
        let loss = tape.sum(prod);
        (tape, vars, loss, w)
    };
    let value = |xs: &[Tensor<f64>], w: &Tensor<f64>| {
        let (tape, _, loss, _) = run(xs, Some(w));
        tape.value(loss).data()[0]
    };
    let (tape, vars, loss, w) = run(inputs, None);
    let grads = tape.backward(loss).expect("scalar loss");
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        for e in 0..x.len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + H;
            let up = value(&work, &w);
            work[k].data_mut()[e] = orig - H;
            let down = value(&work, &w);
            work[k].data_mut()[e] = orig;
            worst = worst.max(relative_error(analytic.data()[e], (up - down) / (2.0 * H)));
        }
    }
    worst
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// One random instance of an operation check: seed in, worst relative error out.
pub type OpCase = fn(u64) -> f64;

/// A check for every differentiable tape operation.
pub fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("matmul", |s| {
            let mut r = seeded(s);
            let (a, b) = (randn(&[3, 4], &mut r), randn(&[4, 2], &mut r));
            max_relative_error(&[a, b], s, |t, v| t.matmul(v[0], v[1]).unwrap())
        }),
        ("matmul_nt", |s| {
            let mut r = seeded(s);
            let (a, b) = (randn(&[3, 4], &mut r), randn(&[5, 4], &mut r));
            max_relative_error(&[a, b], s, |t, v| t.matmul_nt(v[0], v[1]).unwrap())
        }),
        ("add", |s| {
            let mut r = seeded(s);
            let (a, b) = (randn(&[3, 4], &mut r), randn(&[3, 4], &mut r));
            max_relative_error(&[a, b], s, |t, v| t.add(v[0], v[1]).unwrap())
        }),
        ("add_bias", |s| {
            let mut r = seeded(s);
            let (a, b) = (randn(&[3, 4], &mut r), randn(&[4], &mut r));
            max_relative_error(&[a, b], s, |t, v| t.add_bias(v[0], v[1]).unwrap())
        }),
        ("mul", |s| {
            let mut r = seeded(s);
            let (a, b) = (randn(&[2, 5], &mut r), randn(&[2, 5], &mut r));
            max_relative_error(&[a, b], s, |t, v| t.mul(v[0], v[1]).unwrap())
        }),
        ("scalar_scale", |s| {
            let a = randn(&[2, 5], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| t.scalar_scale(v[0], -1.7))
        }),
        ("scale_rows", |s| {
            let a = randn(&[3, 4], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| t.scale_rows(v[0], vec![0.5, -2.0, 3.0]).unwrap())
        }),
        ("relu", |s| {
            // keep inputs away from the kink so central differences are valid
            let a = randn(&[4, 5], &mut seeded(s)).map(|v| if v.abs() < 1e-3 { v + 0.1 } else { v });
            max_relative_error(&[a], s, |t, v| t.relu(v[0]))
        }),
        ("layer_norm", |s| {
            let mut r = seeded(s);
            let (x, g, b) = (randn(&[3, 6], &mut r), randn(&[6], &mut r), randn(&[6], &mut r));
            max_relative_error(&[x, g, b], s, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())
        }),
        ("softmax", |s| {
            let a = randn(&[2, 5], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| t.softmax(v[0]))
        }),
        ("log_softmax", |s| {
            let a = randn(&[2, 5], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| t.log_softmax(v[0]))
        }),
        ("cross_entropy", |s| {
            let mut r = seeded(s);
            let a = randn(&[4, 6], &mut r);
            let y: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
            max_relative_error(&[a], s, move |t, v| t.cross_entropy(v[0], &y).unwrap())
        }),
        ("weighted_cross_entropy", |s| {
            let mut r = seeded(s);
            let a = randn(&[4, 6], &mut r);
            let y: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
            max_relative_error(&[a], s, move |t, v| {
                t.weighted_cross_entropy(v[0], &y, &[1.0, 0.0, 2.0, 0.5]).unwrap()
            })
        }),
        ("embedding_lookup", |s| {
            let a = randn(&[5, 3], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| t.embedding_lookup(v[0], &[4, 0, 4, 2]).unwrap())
        }),
        ("gather_rows", |s| {
            let a = randn(&[5, 3], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| t.gather_rows(v[0], &[1, 1, 3]).unwrap())
        }),
        ("transpose", |s| {
            let a = randn(&[3, 4], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| t.transpose(v[0]).unwrap())
        }),
        ("reshape", |s| {
            let a = randn(&[3, 4], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| {
                let r = t.reshape(v[0], &[6, 2]).unwrap();
                t.slice_rows(r, 1, 4).unwrap()
            })
        }),
        ("slice_rows", |s| {
            let a = randn(&[5, 3], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| t.slice_rows(v[0], 1, 3).unwrap())
        }),
        ("slice_cols", |s| {
            let a = randn(&[3, 5], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| t.slice_cols(v[0], 2, 2).unwrap())
        }),
        ("concat_rows", |s| {
            let mut r = seeded(s);
            let (a, b) = (randn(&[2, 3], &mut r), randn(&[1, 3], &mut r));
            max_relative_error(&[a, b], s, |t, v| t.concat_rows(&[v[0], v[1], v[0]]).unwrap())
        }),
        ("concat_cols", |s| {
            let mut r = seeded(s);
            let (a, b) = (randn(&[2, 3], &mut r), randn(&[2, 1], &mut r));
            max_relative_error(&[a, b], s, |t, v| t.concat_cols(&[v[1], v[0]]).unwrap())
        }),
        ("mean_row_groups", |s| {
            let a = randn(&[6, 3], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| t.mean_row_groups(v[0], 3).unwrap())
        }),
        ("sum", |s| {
            let a = randn(&[2, 3], &mut seeded(s));
            max_relative_error(&[a], s, |t, v| t.sum(v[0]))
        }),
    ]
}

/// Worst relative error of the parameter gradient of a small two-block
/// denoiser, over every parameter scalar, on a mixed plan. Parameters are
/// jittered first so zero-initialised tensors take part.
pub fn denoiser_gradient_error(seed: u64) -> f64 {
    let cfg = DenoiserConfig {
        vocab_size: 7,
        max_len: 5,
        d_model: 8,
        heads: 2,
        d_ff: 12,
        blocks: 2,
        time_features: 4,
        positional: true,
    };
    let sched = cosine_schedule::<f64>(16, 5.0).expect("valid schedule");
    let mut den = Denoiser::new(cfg, sched, &mut seeded(seed)).expect("valid config");
    let mut rng = seeded(seed ^ 0x5EED);
    for t in den.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
    let x = Tensor::randn(&[5, 7], 3.0, &mut rng);
    let plan = vec![0, 3, 9, 16, 7];
    let w = Tensor::randn(&[5, 7], 1.0, &mut rng);

    let weighted = |den: &Denoiser<f64>| {
        let mut tape = Tape::new();
        let bound = den.params().bind(&mut tape);
        let out = den.forward(&mut tape, &bound, &x, &plan, 5).expect("forward");
        tape.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut tape = Tape::new();
    let bound = den.params().bind(&mut tape);
    let out = den.forward(&mut tape, &bound, &x, &plan, 5).expect("forward");
    let wv = tape.leaf(w.clone());
    let prod = tape.mul(out, wv).expect("same shape");
    let loss = tape.sum(prod);
    let mut grads = tape.backward(loss).expect("scalar loss");
    let analytic = den.params().collect_grads(&bound, &mut grads);

    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = den.params().tensors()[p].data()[e];
            den.params_mut().tensors_mut()[p].data_mut()[e] = orig + H;
            let up = weighted(&den);
            den.params_mut().tensors_mut()[p].data_mut()[e] = orig - H;
            let down = weighted(&den);
            den.params_mut().tensors_mut()[p].data_mut()[e] = orig;
            worst = worst.max(relative_error(grad.data()[e], (up - down) / (2.0 * H)));
        }
    }
    worst
}
