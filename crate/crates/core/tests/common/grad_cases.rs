//! One randomized finite-difference case per differentiable building block.
//! Each case draws its shapes and values from `seed`.

use std::collections::BTreeMap;

use dir3d::landmark::LandmarkFrame;
use dir3d::layers::{
    dropout, fully_connected, register, BlockVariant, Lstm, Mode, ParamVars, ReductionBlock, ReductionVariant,
    ResidualBlock,
};
use dir3d::model::one_hot;
use dir3d::tensor::{Padding, PoolMode};
use dir3d::{ModelConfig, ModelParams, Network, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{fd_check, rand_tensor, random_landmarks, rng, uniform, FdOutcome};

type Build = dyn for<'t> Fn(&'t Tape<f64>, &ParamVars<'t, f64>) -> Var<'t, f64>;

/// Checks `sum(w ∘ build(inputs))` for a fixed random weighting `w`.
fn check(seed: u64, inputs: BTreeMap<String, Tensor<f64>>, per_tensor: Option<usize>, build: &Build) -> FdOutcome {
    let shape = {
        let tape = Tape::new();
        let vars = register(&tape, &inputs);
        build(&tape, &vars).shape()
    };
    let weights = rand_tensor(&shape, &mut rng(seed.wrapping_add(1)));
    let analytic = {
        let tape = Tape::new();
        let vars = register(&tape, &inputs);
        let out = build(&tape, &vars);
        let loss = out.mul(tape.constant(weights.clone())).unwrap().sum();
        tape.backward(loss).unwrap().named()
    };
    fd_check(&inputs, &analytic, per_tensor, seed, |p| {
        let tape = Tape::new();
        let vars = register(&tape, p);
        let out = build(&tape, &vars);
        out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    })
}

fn map(items: Vec<(&str, Tensor<f64>)>) -> BTreeMap<String, Tensor<f64>> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

pub fn elementwise(seed: u64) -> FdOutcome {
    let mut r = rng(seed);
    let (m, n) = (dims(&mut r, 2, 5), dims(&mut r, 2, 5));
    let inputs = map(vec![
        ("a", rand_tensor(&[m, n], &mut r)),
        ("b", rand_tensor(&[m, n], &mut r)),
        ("row", rand_tensor(&[n], &mut r)),
        ("col", rand_tensor(&[m, 1], &mut r)),
    ]);
    check(seed, inputs, None, &|_, v| {
        let s = v["a"].add(v["row"]).unwrap();
        let d = v["b"].sub(v["col"]).unwrap();
        s.mul(d).unwrap().mul(v["a"]).unwrap()
    })
}

pub fn matmul(seed: u64) -> FdOutcome {
    let mut r = rng(seed);
    let inputs = map(vec![("a", rand_tensor(&[5, 4], &mut r)), ("b", rand_tensor(&[4, 3], &mut r))]);
    check(seed, inputs, None, &|_, v| v["a"].matmul(v["b"]).unwrap())
}

pub fn dense(seed: u64) -> FdOutcome {
    let mut r = rng(seed);
    let (b, d, k) = (dims(&mut r, 1, 4), dims(&mut r, 2, 6), dims(&mut r, 2, 5));
    let inputs = map(vec![
        ("x", rand_tensor(&[b, d], &mut r)),
        ("w", rand_tensor(&[d, k], &mut r)),
        ("b", rand_tensor(&[k], &mut r)),
    ]);
    check(seed, inputs, None, &|_, v| fully_connected(v["x"], v["w"], v["b"]).unwrap())
}

pub fn softmax_cross_entropy(seed: u64) -> FdOutcome {
    let mut r = rng(seed);
    let (b, k) = (dims(&mut r, 1, 5), dims(&mut r, 2, 7));
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
    let onehot: Tensor<f64> = one_hot(&labels, k).unwrap();
    let inputs = map(vec![("logits", uniform(&[b, k], -3.0, 3.0, &mut r))]);
    check(seed, inputs, None, &move |_, v| v["logits"].softmax_cross_entropy(&onehot).unwrap())
}

pub fn activations(seed: u64) -> FdOutcome {
    let mut r = rng(seed);
    let inputs = map(vec![
        ("r", uniform(&[3, 4], -2.0, 2.0, &mut r)),
        ("s", uniform(&[3, 4], -4.0, 4.0, &mut r)),
        ("t", uniform(&[3, 4], -2.0, 2.0, &mut r)),
    ]);
    check(seed, inputs, None, &|_, v| {
        v["r"].relu().add(v["s"].sigmoid()).unwrap().add(v["t"].tanh()).unwrap()
    })
}

fn padding(r: &mut ChaCha8Rng) -> Padding {
    if r.random_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

pub fn conv3d(seed: u64) -> FdOutcome {
    let mut r = rng(seed);
    let kernel = [dims(&mut r, 1, 3), dims(&mut r, 1, 3), dims(&mut r, 1, 3)];
    let stride = [dims(&mut r, 1, 2), dims(&mut r, 1, 2), dims(&mut r, 1, 2)];
    let pad = padding(&mut r);
    let (b, cin, cout) = (dims(&mut r, 1, 2), dims(&mut r, 1, 3), dims(&mut r, 1, 3));
    let shape = [b, dims(&mut r, 3, 4), dims(&mut r, 3, 5), dims(&mut r, 3, 5), cin];
    let inputs = map(vec![
        ("x", rand_tensor(&shape, &mut r)),
        ("k", rand_tensor(&[kernel[0], kernel[1], kernel[2], cin, cout], &mut r)),
    ]);
    check(seed, inputs, None, &move |_, v| v["x"].conv3d(v["k"], stride, pad).unwrap())
}

pub fn pool3d(seed: u64, mode: PoolMode) -> FdOutcome {
    let mut r = rng(seed);
    let window = [dims(&mut r, 1, 2), dims(&mut r, 1, 3), dims(&mut r, 1, 3)];
    let stride = [dims(&mut r, 1, 2), dims(&mut r, 1, 2), dims(&mut r, 1, 2)];
    let pad = padding(&mut r);
    let shape = [dims(&mut r, 1, 2), dims(&mut r, 2, 4), dims(&mut r, 3, 5), dims(&mut r, 3, 5), dims(&mut r, 1, 2)];
    let inputs = map(vec![("x", rand_tensor(&shape, &mut r))]);
    check(seed, inputs, None, &move |_, v| v["x"].pool3d(window, stride, pad, mode).unwrap())
}

fn random_params(specs: Vec<dir3d::layers::ParamSpec>, r: &mut ChaCha8Rng) -> BTreeMap<String, Tensor<f64>> {
    specs
        .into_iter()
        .map(|s| (s.name, uniform(&s.shape, -0.5, 0.5, r)))
        .collect()
}

pub fn lstm_step(seed: u64) -> FdOutcome {
    let mut r = rng(seed);
    let (b, d, hidden) = (dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
    let lstm = Lstm {
        name: "lstm".into(),
        input: d,
        hidden,
    };
    let mut inputs = random_params(lstm.params(), &mut r);
    inputs.insert("x".into(), rand_tensor(&[b, d], &mut r));
    inputs.insert("h".into(), rand_tensor(&[b, hidden], &mut r));
    inputs.insert("c".into(), uniform(&[b, hidden], -2.0, 2.0, &mut r));
    check(seed, inputs, None, &move |t, v| {
        let s = lstm.step(v, v["x"], v["h"], v["c"]).unwrap();
        t.concat(&[s.h, s.c], 1).unwrap()
    })
}

pub fn lstm_sequence(seed: u64) -> FdOutcome {
    let mut r = rng(seed);
    let (b, steps, d, hidden) = (dims(&mut r, 1, 2), dims(&mut r, 1, 5), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
    let lstm = Lstm {
        name: "lstm".into(),
        input: d,
        hidden,
    };
    let mut inputs = random_params(lstm.params(), &mut r);
    inputs.insert("x".into(), rand_tensor(&[b, steps, d], &mut r));
    check(seed, inputs, None, &move |_, v| lstm.sequence(v, v["x"]).unwrap())
}

pub fn residual_block(seed: u64) -> FdOutcome {
    let mut r = rng(seed);
    let channels = dims(&mut r, 1, 3);
    let variant = [BlockVariant::A, BlockVariant::B, BlockVariant::C][r.random_range(0..3)];
    let widths: Vec<Vec<usize>> = match variant {
        BlockVariant::A => vec![vec![2], vec![1, 2], vec![2, 1, 2]],
        _ => vec![vec![2], vec![1, 2, 2]],
    };
    let refs: Vec<&[usize]> = widths.iter().map(Vec::as_slice).collect();
    let block = ResidualBlock::new("blk", variant, channels, &refs, r.random_range(0.2..1.0)).unwrap();
    let shape = [1, 3, dims(&mut r, 3, 4), dims(&mut r, 3, 4), channels];
    let mut inputs = random_params(block.params(), &mut r);
    inputs.insert("x".into(), rand_tensor(&shape, &mut r));
    inputs.insert("mask".into(), uniform(&[1, shape[1], shape[2], shape[3], 1], 0.0, 1.0, &mut r));
    check(seed, inputs, None, &move |_, v| block.forward(v, v["x"], v["mask"]).unwrap())
}

pub fn reduction_block(seed: u64) -> FdOutcome {
    let mut r = rng(seed);
    let cin = dims(&mut r, 1, 2);
    let (variant, widths): (_, Vec<Vec<usize>>) = if r.random_bool(0.5) {
        (ReductionVariant::A, vec![vec![2], vec![1, 1, 2]])
    } else {
        (ReductionVariant::B, vec![vec![1, 1], vec![1, 2], vec![1, 1, 1]])
    };
    let refs: Vec<&[usize]> = widths.iter().map(Vec::as_slice).collect();
    let block = ReductionBlock::new("red", variant, cin, &refs).unwrap();
    let shape = [1, 3, dims(&mut r, 5, 6), dims(&mut r, 5, 6), cin];
    let mut inputs = random_params(block.params(), &mut r);
    inputs.insert("x".into(), rand_tensor(&shape, &mut r));
    check(seed, inputs, None, &move |_, v| block.forward(v, v["x"]).unwrap())
}

pub fn dropout_fixed_mask(seed: u64) -> FdOutcome {
    let mut r = rng(seed);
    let inputs = map(vec![("x", rand_tensor(&[4, 6], &mut r))]);
    check(seed, inputs, None, &move |_, v| {
        dropout(v["x"], 0.3, Mode::Train, &mut rng(seed.wrapping_add(9))).unwrap()
    })
}

/// Full network loss. Parameters are the seeded initialisation plus a small
/// jitter, so no pre-activation sits exactly on a ReLU kink.
pub fn model(config: &ModelConfig, seed: u64, per_tensor: Option<usize>, batch: usize) -> FdOutcome {
    let net = Network::new(config.clone()).unwrap();
    let mut r = rng(seed);
    let init: ModelParams<f64> = net.init_params(seed);
    let params: BTreeMap<String, Tensor<f64>> = init
        .as_map()
        .iter()
        .map(|(k, v)| {
            let data = v.data().iter().map(|x| x + r.random_range(-0.05..0.05)).collect();
            (k.clone(), Tensor::new(v.shape(), data).unwrap())
        })
        .collect();
    let clips = uniform(&[batch, config.frames, config.height, config.width, config.channels], 0.0, 1.0, &mut r);
    let landmarks: Vec<Vec<LandmarkFrame>> = (0..batch)
        .map(|_| random_landmarks(config.frames, (config.height, config.width), &mut r))
        .collect();
    let refs: Vec<&[LandmarkFrame]> = landmarks.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..config.num_classes)).collect();
    let drop_rng = || rng(seed.wrapping_add(3));

    let p = ModelParams::from_map(params.clone());
    let (_, _, analytic) = net.loss_and_grads(&p, &clips, &labels, &refs, Mode::Train, &mut drop_rng()).unwrap();
    fd_check(&params, &analytic, per_tensor, seed, |q| {
        let q = ModelParams::from_map(q.clone());
        net.loss(&q, &clips, &labels, &refs, Mode::Train, &mut drop_rng()).unwrap()
    })
}
