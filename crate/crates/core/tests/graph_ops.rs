//! Finite-difference checks of every differentiable graph op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zigan_core::graph::{BnIndices, Graph, Mode, Var};
use zigan_core::params::{NetId, ParamKind, ParamSet};
use zigan_core::tensor::{Shape, Tensor};

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Projects the op output on a fixed random direction and compares the tape
/// gradient of every input with central differences.
fn check<F>(name: &str, inputs: Vec<Tensor>, build: F)
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Tensor]| -> (Vec<f32>, Shape) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        (g.value(out).data().to_vec(), g.shape(out))
    };
    let (base, shape) = eval(&inputs);
    let dir: Vec<f64> = (0..base.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let project = |v: &[f32]| v.iter().zip(&dir).map(|(a, b)| *a as f64 * b).sum::<f64>();

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_tracked(t.clone())).collect();
    let out = build(&mut g, &vars);
    assert_eq!(g.shape(out), shape);
    let root = g.scalar_fn(&[out], project(g.value(out).data()), vec![dir.clone()]).unwrap();
    let grads = g.backward(root);

    let eps = 5e-3f32;
    for (k, x) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(vars[k]) {
            Some(t) => t.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; x.shape().len()],
        };
        let mut numeric = Vec::with_capacity(x.shape().len());
        for i in 0..x.shape().len() {
            let mut xs = inputs.clone();
            xs[k].data_mut()[i] += eps;
            let up = project(&eval(&xs).0);
            xs[k].data_mut()[i] -= 2.0 * eps;
            let down = project(&eval(&xs).0);
            numeric.push((up - down) / (2.0 * eps as f64));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-6);
        assert!(diff / scale < 1e-2, "{name} input {k}: relative error {}", diff / scale);
    }
}

#[test]
fn conv2d_strided_with_bias() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let inputs =
        vec![random(Shape::new(2, 3, 6, 6), &mut r), random(Shape::new(4, 3, 5, 5), &mut r), random(Shape::new(1, 4, 1, 1), &mut r)];
    check("conv2d", inputs, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 2).unwrap());
}

#[test]
fn conv2d_unit_stride() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![random(Shape::new(1, 2, 5, 5), &mut r), random(Shape::new(3, 2, 3, 3), &mut r)];
    check("conv2d s1", inputs, |g, v| g.conv2d(v[0], v[1], None, 1, 1).unwrap());
}

#[test]
fn conv_transpose_doubles() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let inputs =
        vec![random(Shape::new(2, 3, 3, 3), &mut r), random(Shape::new(3, 2, 5, 5), &mut r), random(Shape::new(1, 2, 1, 1), &mut r)];
    check("conv_transpose2d", inputs, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 2, 1).unwrap();
        assert_eq!(g.shape(y), Shape::new(2, 2, 6, 6));
        y
    });
}

#[test]
fn pointwise_ops() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x = random(Shape::new(2, 3, 3, 3), &mut r);
    check("leaky_relu", vec![x.clone()], |g, v| g.leaky_relu(v[0], 0.2));
    check("relu", vec![x.clone()], |g, v| g.relu(v[0]));
    check("tanh", vec![x.clone()], |g, v| g.tanh(v[0]));
    check("sigmoid", vec![x.clone()], |g, v| g.sigmoid(v[0]));
    check("scale", vec![x], |g, v| g.scale(v[0], -1.5));
}

#[test]
fn structural_ops() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let a = random(Shape::new(2, 2, 3, 3), &mut r);
    let b = random(Shape::new(2, 3, 3, 3), &mut r);
    let c = random(Shape::new(2, 2, 3, 3), &mut r);
    check("concat", vec![a.clone(), b], |g, v| g.concat(v[0], v[1]).unwrap());
    check("add", vec![a.clone(), c], |g, v| g.add(v[0], v[1]).unwrap());
    let w = random(Shape::new(1, 2, 1, 1), &mut r);
    check("channel_scale", vec![a.clone(), w.clone()], |g, v| g.channel_scale(v[0], v[1]).unwrap());
    check("global_avg_pool", vec![a.clone()], |g, v| g.global_avg_pool(v[0]));
    check("global_max_pool", vec![a.clone()], |g, v| g.global_max_pool(v[0]));
    check("channel_dot", vec![a, w], |g, v| {
        let p = g.global_avg_pool(v[0]);
        g.channel_dot(p, v[1]).unwrap()
    });
    let x = random(Shape::new(3, 4, 1, 1), &mut r);
    let lw = random(Shape::new(5, 4, 1, 1), &mut r);
    let lb = random(Shape::new(1, 5, 1, 1), &mut r);
    check("linear", vec![x, lw, lb], |g, v| g.linear(v[0], v[1], v[2]).unwrap());
}

#[test]
fn dropout_masks_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let x = random(Shape::new(2, 2, 3, 3), &mut r);
    let mut g = Graph::new().with_rng(ChaCha8Rng::seed_from_u64(7));
    let v = g.input_tracked(x.clone());
    let y = g.dropout(v, 0.5, Mode::Train);
    let out = g.value(y).clone();
    let ones = vec![1.0; out.data().len()];
    let root = g.scalar_fn(&[y], 0.0, vec![ones]).unwrap();
    let grads = g.backward(root);
    let gx = grads.wrt(v).unwrap();
    for ((o, i), d) in out.data().iter().zip(x.data()).zip(gx.data()) {
        if *o == 0.0 {
            assert_eq!(*d, 0.0);
        } else {
            assert!((o - 2.0 * i).abs() < 1e-6);
            assert_eq!(*d, 2.0);
        }
    }

    let mut g = Graph::new();
    let v = g.input(x.clone());
    let y = g.dropout(v, 0.5, Mode::Eval);
    assert_eq!(g.value(y), &x);
}

fn bn_set(c: usize, rng: &mut ChaCha8Rng) -> (ParamSet, BnIndices) {
    let mut s = ParamSet::new(NetId(40));
    let gamma = s.push("g", random(Shape::new(1, c, 1, 1), rng), ParamKind::Trainable, 1);
    let beta = s.push("b", random(Shape::new(1, c, 1, 1), rng), ParamKind::Trainable, 1);
    let running_mean = s.push("m", Tensor::zeros(Shape::new(1, c, 1, 1)), ParamKind::Buffer, 1);
    let running_var = s.push("v", Tensor::full(Shape::new(1, c, 1, 1), 1.0), ParamKind::Buffer, 1);
    (s, BnIndices { gamma, beta, running_mean, running_var })
}

#[test]
fn batch_norm_train_mode_input_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let (set, idx) = bn_set(3, &mut r);
    let set: &'static ParamSet = Box::leak(Box::new(set));
    let x = random(Shape::new(2, 3, 2, 2), &mut r);
    check("batch_norm", vec![x], |g, v| g.batch_norm(v[0], set, idx, Mode::Train).unwrap());
}

#[test]
fn batch_norm_parameter_gradients_and_stats() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let (set, idx) = bn_set(2, &mut r);
    let x = random(Shape::new(3, 2, 2, 2), &mut r);
    let dir: Vec<f64> = (0..x.data().len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = |set: &ParamSet| -> f64 {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = g.batch_norm(v, set, idx, Mode::Train).unwrap();
        g.value(y).data().iter().zip(&dir).map(|(a, b)| *a as f64 * b).sum()
    };
    let mut g = Graph::new();
    g.train_net(set.net());
    let v = g.input(x.clone());
    let y = g.batch_norm(v, &set, idx, Mode::Train).unwrap();
    let obs = g.take_bn_observations();
    assert_eq!(obs.len(), 1);
    // unbiased variance of channel 0
    let ch0: Vec<f64> = (0..3).flat_map(|n| (0..4).map(move |i| (n, i))).map(|(n, i)| x.data()[n * 8 + i] as f64).collect();
    let mean = ch0.iter().sum::<f64>() / 12.0;
    let var = ch0.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 11.0;
    assert!((obs[0].batch_mean[0] as f64 - mean).abs() < 1e-5);
    assert!((obs[0].batch_var[0] as f64 - var).abs() < 1e-5);
    let root = g.scalar_fn(&[y], 0.0, vec![dir.clone()]).unwrap();
    let grads = g.backward(root).into_params();
    for which in [idx.gamma, idx.beta] {
        let analytic = grads[&set.key(which)].data().to_vec();
        for c in 0..2 {
            let mut up = set.clone();
            up.tensor_mut(which).data_mut()[c] += 5e-3;
            let mut down = set.clone();
            down.tensor_mut(which).data_mut()[c] -= 5e-3;
            let fd = (loss(&up) - loss(&down)) / 1e-2;
            assert!((analytic[c] as f64 - fd).abs() < 1e-2 * fd.abs().max(1.0), "param {which} ch {c}: {} vs {fd}", analytic[c]);
        }
    }
    assert!(!grads.contains_key(&set.key(idx.running_mean)));
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let (mut set, idx) = bn_set(1, &mut r);
    set.tensor_mut(idx.gamma).data_mut()[0] = 2.0;
    set.tensor_mut(idx.beta).data_mut()[0] = 0.5;
    set.tensor_mut(idx.running_mean).data_mut()[0] = 1.0;
    set.tensor_mut(idx.running_var).data_mut()[0] = 4.0;
    let mut g = Graph::new();
    let v = g.input(Tensor::full(Shape::new(1, 1, 1, 2), 3.0));
    let y = g.batch_norm(v, &set, idx, Mode::Eval).unwrap();
    let expect = 2.0 * (3.0 - 1.0) / (4.0f32 + 1e-5).sqrt() + 0.5;
    for &o in g.value(y).data() {
        assert!((o - expect).abs() < 1e-6);
    }
    assert!(g.take_bn_observations().is_empty());
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut set = ParamSet::new(NetId(41));
    let w = set.push("w", random(Shape::new(2, 1, 3, 3), &mut r), ParamKind::Trainable, 1);
    let mut g = Graph::new();
    let x = g.input(random(Shape::new(1, 1, 4, 4), &mut r));
    let wv = g.param(&set, w);
    let y = g.conv2d(x, wv, None, 1, 1).unwrap();
    let n = g.value(y).data().len();
    let root = g.scalar_fn(&[y], 0.0, vec![vec![1.0; n]]).unwrap();
    assert!(g.backward(root).params().is_empty());
}
