use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saslab_core::numerics::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `f(inputs)` on a fresh tape and checks every input gradient
/// against central differences.
fn check<F>(inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap().data().to_vec();
        let mut flat = t.data().to_vec();
        let coords: Vec<usize> = (0..flat.len()).collect();
        let numeric = finite_diff_grad(
            |p| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            g.constant(Tensor::new(t.shape().to_vec(), p.to_vec()).unwrap())
                        } else {
                            g.constant(t.clone())
                        }
                    })
                    .collect();
                let out = build(&mut g, &vars);
                g.value(out).item().unwrap()
            },
            &mut flat,
            &coords,
            1e-5,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(
                relative_error(*a, *n, 1e-6) < 1e-5,
                "input {k}: analytic {a} vs numeric {n}"
            );
        }
    }
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![0.3, -1.0, 2.0]));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn dot_gradient_is_two_x() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn constant_has_no_gradient_and_unused_param_gets_zero() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let unused = g.param(Tensor::from_vec(vec![5.0]));
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(saslab_core::Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1e308, 1e308]));
    assert!(matches!(g.scale(x, 10.0), Err(saslab_core::Error::NonFinite(_))));
}

#[test]
fn finite_diff_of_square_and_constant() {
    let mut p = vec![1.0];
    let d = finite_diff_grad(|p| p[0] * p[0], &mut p, &[0], 1e-5);
    assert!((d[0] - 2.0).abs() < 1e-9);
    let d = finite_diff_grad(|_| 3.0, &mut p, &[0], 1e-5);
    assert!(d[0].abs() < 1e-9);
    assert_eq!(p, vec![1.0]);
}

#[test]
fn elementwise_and_broadcast_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let r = rand_tensor(&mut rng, &[4]);
    check(vec![a, b, r], |g, v| {
        let x = g.add(v[0], v[1]).unwrap();
        let x = g.mul(x, v[0]).unwrap();
        let x = g.add_row(x, v[2]).unwrap();
        let x = g.mul_row(x, v[2]).unwrap();
        let x = g.scale(x, -0.7).unwrap();
        g.sum(x).unwrap()
    });
}

#[test]
fn matmul_both_orientations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 5]);
    let b = rand_tensor(&mut rng, &[5, 2]);
    let c = rand_tensor(&mut rng, &[4, 2]);
    check(vec![a, b, c], |g, v| {
        let ab = g.matmul(v[0], v[1], false).unwrap();
        let abc = g.matmul(ab, v[2], true).unwrap();
        let sq = g.mul(abc, abc).unwrap();
        g.sum(sq).unwrap()
    });
}

#[test]
fn layer_norm_gelu_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[4, 6]);
    let w = rand_tensor(&mut rng, &[4, 6]);
    check(vec![x, w], |g, v| {
        let y = g.layer_norm(v[0]).unwrap();
        let y = g.gelu(y).unwrap();
        let y = g.softmax(y).unwrap();
        let y = g.mul(y, v[1]).unwrap();
        g.sum(y).unwrap()
    });
}

#[test]
fn gather_rows_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = rand_tensor(&mut rng, &[5, 3]);
    let proj = rand_tensor(&mut rng, &[3, 7]);
    check(vec![table, proj], |g, v| {
        let rows = g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap();
        let logits = g.matmul(rows, v[1], false).unwrap();
        g.cross_entropy(logits, &[1, 6, 0, 3]).unwrap()
    });
}

#[test]
fn attention_weights_and_mix_with_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layout = AttentionLayout { batch: 2, seq: 4, heads: 2 };
    let q = rand_tensor(&mut rng, &[8, 6]);
    let k = rand_tensor(&mut rng, &[8, 6]);
    let v = rand_tensor(&mut rng, &[8, 6]);
    let w = rand_tensor(&mut rng, &[8, 6]);
    let pw = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    check(vec![q, k, v, w, pw], move |g, x| {
        let p = g.attention_weights(x[0], x[1], layout, &[4, 3]).unwrap();
        let o = g.attention_mix(p, x[2], layout).unwrap();
        let o = g.mul(o, x[3]).unwrap();
        let pp = g.mul(p, x[4]).unwrap();
        let a = g.sum(o).unwrap();
        let b = g.sum(pp).unwrap();
        g.add(a, b).unwrap()
    });
}

#[test]
fn attention_rows_normalized_and_padding_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layout = AttentionLayout { batch: 2, seq: 5, heads: 2 };
    let mut g = Graph::new();
    let q = g.constant(rand_tensor(&mut rng, &[10, 4]));
    let k = g.constant(rand_tensor(&mut rng, &[10, 4]));
    let p = g.attention_weights(q, k, layout, &[5, 3]).unwrap();
    let data = g.value(p).data();
    for b in 0..2 {
        let len = [5, 3][b];
        for h in 0..2 {
            for i in 0..5 {
                let row = &data[((b * 2 + h) * 5 + i) * 5..][..5];
                let s: f64 = row.iter().sum();
                if i < len {
                    assert!((s - 1.0).abs() < 1e-12);
                    assert!(row[len..].iter().all(|&x| x == 0.0));
                } else {
                    assert_eq!(s, 0.0);
                }
            }
        }
    }
}

#[test]
fn stack_gather_rowmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    check(vec![a, b], |g, v| {
        let s = g.stack(&[v[0], v[1]]).unwrap();
        let picked = g.gather_elems(s, &[0, 7, 11, 3, 5, 9], vec![2, 3]).unwrap();
        let m = g.row_max(picked).unwrap();
        let m2 = g.mul(m, m).unwrap();
        g.sum(m2).unwrap()
    });
}

#[test]
fn row_max_tie_sends_gradient_to_first() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.1]).unwrap());
    let m = g.row_max(x).unwrap();
    let s = g.sum(m).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn warmup_starts_at_zero_and_decays_linearly() {
    let s = LrSchedule { peak: 1e-3, warmup_steps: 100, total_steps: 1100 };
    assert_eq!(s.lr_at(0), 0.0);
    assert!((s.lr_at(1) - 1e-5).abs() < 1e-18);
    assert!((s.lr_at(100) - 1e-3).abs() < 1e-18);
    assert!((s.lr_at(600) - 5e-4).abs() < 1e-15);
    assert_eq!(s.lr_at(1100), 0.0);
}

#[test]
fn adamw_identity_on_zero_gradient_without_decay() {
    let params0 = vec![Tensor::from_vec(vec![1.0, -2.0, 3.0]), Tensor::zeros(&[2, 2])];
    let mut params = params0.clone();
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        schedule: LrSchedule::constant(0.1),
        ..Default::default()
    };
    let mut state = OptimizerState::new(cfg, &params);
    let grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for _ in 0..5 {
        adamw_step(&mut params, &grads, &mut state).unwrap();
    }
    assert_eq!(params, params0);
    assert_eq!(state.step, 5);
}

#[test]
fn adamw_first_warmup_step_is_noop() {
    let mut params = vec![Tensor::from_vec(vec![1.0])];
    let cfg = AdamWConfig {
        schedule: LrSchedule { peak: 0.1, warmup_steps: 100, total_steps: 1000 },
        ..Default::default()
    };
    let mut state = OptimizerState::new(cfg, &params);
    let lr = adamw_step(&mut params, &[Tensor::from_vec(vec![3.0])], &mut state).unwrap();
    assert_eq!(lr, 0.0);
    assert_eq!(params[0].data(), &[1.0]);
}

#[test]
fn adamw_shape_mismatch() {
    let mut params = vec![Tensor::from_vec(vec![1.0, 2.0])];
    let mut state = OptimizerState::new(AdamWConfig::default(), &params);
    let err = adamw_step(&mut params, &[Tensor::from_vec(vec![1.0])], &mut state);
    assert!(matches!(err, Err(saslab_core::Error::ShapeMismatch(_))));
}

#[test]
fn adamw_descends_a_quadratic_after_warmup() {
    // f(x, y) = 3(x - 1)^2 + 0.5(y + 2)^2, minimum 0 at (1, -2)
    let loss = |p: &[f64]| 3.0 * (p[0] - 1.0).powi(2) + 0.5 * (p[1] + 2.0).powi(2);
    let mut params = vec![Tensor::from_vec(vec![-2.0, 2.0])];
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        schedule: LrSchedule { peak: 0.05, warmup_steps: 20, total_steps: 200 },
        ..Default::default()
    };
    let mut state = OptimizerState::new(cfg, &params);
    let mut history = Vec::new();
    for _ in 0..200 {
        let p = params[0].data().to_vec();
        history.push(loss(&p));
        let g = Tensor::from_vec(vec![6.0 * (p[0] - 1.0), p[1] + 2.0]);
        adamw_step(&mut params, &[g], &mut state).unwrap();
    }
    let after = &history[21..120];
    assert!(after.windows(2).all(|w| w[1] < w[0]), "loss not strictly decreasing after warmup");
    assert!(history[199] < 1e-2 * history[0]);
}

proptest! {
    #[test]
    fn composed_gradients_match_finite_differences(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        check(vec![x, w, b], |g, v| {
            let h = g.matmul(v[0], v[1], false).unwrap();
            let h = g.add_row(h, v[2]).unwrap();
            let h = g.layer_norm(h).unwrap();
            let h = g.gelu(h).unwrap();
            g.cross_entropy(h, &[0, 3, 1]).unwrap()
        });
    }

    #[test]
    fn tape_replay_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[4, 4]);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let h = g.matmul(v, v, true).unwrap();
            let h = g.softmax(h).unwrap();
            let s = g.sum(h).unwrap();
            let h2 = g.mul(h, h).unwrap();
            let s2 = g.sum(h2).unwrap();
            let l = g.add(s, s2).unwrap();
            let val = g.value(l).item().unwrap();
            (val, g.backward(l).unwrap().get(v).unwrap().clone())
        };
        prop_assert_eq!(run(&x), run(&x));
    }
}
