//! Oracles shared by the integration tests and the acceptance runner.
//! Nothing here calls into the library's own checking code.

#![allow(dead_code)]

pub mod grad_cases;

use std::collections::BTreeMap;

use dir3d::landmark::{LandmarkFrame, NUM_LANDMARKS};
use dir3d::tensor::Padding;
use dir3d::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7e57)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, rng)
}

pub fn random_landmarks(frames: usize, size: (usize, usize), rng: &mut ChaCha8Rng) -> Vec<LandmarkFrame> {
    let (h, w) = size;
    (0..frames)
        .map(|_| {
            let pts = (0..NUM_LANDMARKS)
                .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
                .collect();
            LandmarkFrame::new(pts, size).unwrap()
        })
        .collect()
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Default)]
pub struct FdOutcome {
    pub checked: usize,
    /// Coordinates whose difference quotient moved between `h` and `h/2`,
    /// i.e. a slope discontinuity inside the probe interval.
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl FdOutcome {
    pub fn merge(&mut self, other: FdOutcome) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel < tol && self.skipped * 4 <= self.checked + self.skipped
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;

/// Central finite differences of `loss` with respect to every tensor in
/// `inputs`, or `per_tensor` sampled coordinates of each.
pub fn fd_check(
    inputs: &BTreeMap<String, Tensor<f64>>,
    analytic: &BTreeMap<String, Tensor<f64>>,
    per_tensor: Option<usize>,
    seed: u64,
    mut loss: impl FnMut(&BTreeMap<String, Tensor<f64>>) -> f64,
) -> FdOutcome {
    let mut pick = rng(seed.wrapping_add(77));
    let mut probe = inputs.clone();
    let mut out = FdOutcome::default();
    let h = FD_STEP;
    for (name, t) in inputs {
        let n = t.numel();
        let coords: Vec<usize> = match per_tensor {
            Some(m) if m < n => (0..m).map(|_| pick.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = t.data()[i];
            let mut at = |dx: f64| {
                probe.get_mut(name).unwrap().data_mut()[i] = x0 + dx;
                loss(&probe)
            };
            let agree = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(1e-3);
            let wide = (at(h) - at(-h)) / (2.0 * h);
            let narrow = (at(h / 2.0) - at(-h / 2.0)) / h;
            let numeric = if agree(wide, narrow) {
                Some(wide)
            } else {
                // A switch lies within h of x0. Fall back to second-order
                // one-sided differences; the side without the switch is
                // self-consistent across step sizes.
                let f0 = at(0.0);
                let mut side = |s: f64| {
                    let one = |st: f64, f1: f64, f2: f64| s * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * st);
                    let full = one(h, at(s * h), at(s * 2.0 * h));
                    let half = one(h / 2.0, at(s * h / 2.0), at(s * h));
                    agree(full, half).then_some(full)
                };
                match (side(1.0), side(-1.0)) {
                    (Some(p), Some(m)) => agree(p, m).then_some(0.5 * (p + m)),
                    (p, m) => p.or(m),
                }
            };
            probe.get_mut(name).unwrap().data_mut()[i] = x0;
            let Some(wide) = numeric else {
                out.skipped += 1;
                continue;
            };
            let a = analytic[name].data()[i];
            let rel = (a - wide).abs() / a.abs().max(wide.abs()).max(FD_FLOOR);
            out.checked += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{name}[{i}]: analytic {a:e}, numeric {wide:e}");
            }
        }
    }
    out
}

fn same_pad(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = (n + s - 1) / s;
    let need = ((out - 1) * s + k).saturating_sub(n);
    (out, need / 2)
}

fn axis(n: usize, k: usize, s: usize, p: Padding) -> (usize, usize) {
    match p {
        Padding::Valid => ((n - k) / s + 1, 0),
        Padding::Same => same_pad(n, k, s),
    }
}

/// Direct-loop 3D cross-correlation over `[B, T, H, W, Cin]` with a
/// `[kT, kH, kW, Cin, Cout]` kernel.
pub fn naive_conv3d(x: &Tensor<f64>, k: &Tensor<f64>, stride: [usize; 3], pad: Padding) -> Tensor<f64> {
    let xs = x.shape();
    let ks = k.shape();
    let (b, t, hh, ww, ci) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (kt, kh, kw, co) = (ks[0], ks[1], ks[2], ks[4]);
    let (ot, pt) = axis(t, kt, stride[0], pad);
    let (oh, ph) = axis(hh, kh, stride[1], pad);
    let (ow, pw) = axis(ww, kw, stride[2], pad);
    let xv = |n: usize, a: isize, y: isize, z: isize, c: usize| -> f64 {
        if a < 0 || y < 0 || z < 0 || a >= t as isize || y >= hh as isize || z >= ww as isize {
            return 0.0;
        }
        x.data()[(((n * t + a as usize) * hh + y as usize) * ww + z as usize) * ci + c]
    };
    let kv = |a: usize, y: usize, z: usize, c: usize, o: usize| k.data()[(((a * kh + y) * kw + z) * ci + c) * co + o];
    let mut out = Vec::with_capacity(b * ot * oh * ow * co);
    for n in 0..b {
        for a in 0..ot {
            for y in 0..oh {
                for z in 0..ow {
                    for o in 0..co {
                        let mut acc = 0.0;
                        for da in 0..kt {
                            for dy in 0..kh {
                                for dz in 0..kw {
                                    for c in 0..ci {
                                        let sa = (a * stride[0] + da) as isize - pt as isize;
                                        let sy = (y * stride[1] + dy) as isize - ph as isize;
                                        let sz = (z * stride[2] + dz) as isize - pw as isize;
                                        acc += xv(n, sa, sy, sz, c) * kv(da, dy, dz, c, o);
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, ot, oh, ow, co], out).unwrap()
}

/// Scalar momentum recurrence `v = m v + g + wd p; p = p - lr v`.
pub fn scalar_sgd(p0: f64, grads: &[f64], lr: f64, m: f64, wd: f64) -> Vec<f64> {
    let (mut p, mut v) = (p0, 0.0);
    grads
        .iter()
        .map(|g| {
            v = m * v + g + wd * p;
            p -= lr * v;
            p
        })
        .collect()
}

/// Weight of cell `(r, c)` computed from every landmark directly.
pub fn brute_force_weight(points: &[(usize, usize)], cell: (usize, usize), window: usize, slope: f64, background: f64) -> f64 {
    let half = (window / 2) as isize;
    let mut best: Option<f64> = None;
    for &(pr, pc) in points {
        let dr = cell.0 as isize - pr as isize;
        let dc = cell.1 as isize - pc as isize;
        if dr.abs() <= half && dc.abs() <= half {
            let w = (1.0 - slope * (dr.abs() + dc.abs()) as f64).max(0.0);
            best = Some(best.map_or(w, |b: f64| b.max(w)));
        }
    }
    best.unwrap_or(background)
}

/// One randomized convolution against [`naive_conv3d`]; returns the max
/// absolute difference and a description of the geometry.
pub fn conv_oracle_case(seed: u64) -> (f64, String) {
    use dir3d::Tape;
    let mut r = rng(seed.wrapping_add(1000));
    let kernel = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
    let stride = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
    let pad = if r.random_bool(0.5) { Padding::Same } else { Padding::Valid };
    let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=4));
    let shape = [
        r.random_range(1..=2),
        r.random_range(3..=6),
        r.random_range(3..=9),
        r.random_range(3..=9),
        cin,
    ];
    let x = rand_tensor(&shape, &mut r);
    let k = rand_tensor(&[kernel[0], kernel[1], kernel[2], cin, cout], &mut r);
    let tape = Tape::new();
    let y = tape.constant(x.clone()).conv3d(tape.constant(k.clone()), stride, pad).unwrap();
    let want = naive_conv3d(&x, &k, stride, pad);
    let got = y.value();
    let diff = if got.shape() == want.shape() { got.max_abs_diff(&want) } else { f64::INFINITY };
    (diff, format!("input {shape:?} kernel {kernel:?} stride {stride:?} {pad:?}"))
}

/// Checks one random landmark set against the weight-map properties:
/// brute-force agreement, range, unit peaks, and monotone decay around a
/// lone landmark.
pub fn mask_property_case(rows: usize, cols: usize, points: &[(usize, usize)]) -> Result<(), String> {
    use dir3d::landmark::{rasterize_weight_map, MaskParams};
    let params = MaskParams::default();
    let map = rasterize_weight_map(points, (rows, cols), &params).map_err(|e| e.to_string())?;
    for r in 0..rows {
        for c in 0..cols {
            let w = map.get(r, c);
            if !(0.0..=1.0).contains(&w) {
                return Err(format!("weight {w} at ({r}, {c}) outside [0, 1]"));
            }
            let want = brute_force_weight(points, (r, c), params.window, params.slope, params.background);
            if w != want {
                return Err(format!("({r}, {c}): {w} but direct evaluation gives {want}"));
            }
        }
    }
    if let Some(&p) = points.iter().find(|&&p| map.get(p.0, p.1) != 1.0) {
        return Err(format!("landmark cell {p:?} is not 1.0"));
    }
    let lone = points[0];
    let single = rasterize_weight_map(&[lone], (rows, cols), &params).map_err(|e| e.to_string())?;
    let half = (params.window / 2) as isize;
    let mut by_distance: Vec<(isize, f64)> = Vec::new();
    for dr in -half..=half {
        for dc in -half..=half {
            let (r, c) = (lone.0 as isize + dr, lone.1 as isize + dc);
            if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
                by_distance.push((dr.abs() + dc.abs(), single.get(r as usize, c as usize)));
            }
        }
    }
    by_distance.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
    if by_distance.windows(2).any(|w| w[1].1 > w[0].1) {
        return Err(format!("weights around {lone:?} increase with distance"));
    }
    Ok(())
}

fn spec_tensors(specs: Vec<dir3d::layers::ParamSpec>, r: &mut ChaCha8Rng) -> BTreeMap<String, Tensor<f64>> {
    specs.into_iter().map(|s| (s.name, rand_tensor(&s.shape, r))).collect()
}

/// Masked block with an all-ones mask versus the identity-shortcut block,
/// on one random parameter draw. True when bitwise equal.
pub fn degeneracy_case(seed: u64) -> bool {
    use dir3d::layers::{register, BlockVariant, ResidualBlock};
    use dir3d::Tape;
    let mut r = rng(seed.wrapping_add(2000));
    let variant = [BlockVariant::A, BlockVariant::B, BlockVariant::C][(seed % 3) as usize];
    let widths: Vec<Vec<usize>> = match variant {
        BlockVariant::A => vec![vec![3], vec![2, 3], vec![2, 3, 3]],
        _ => vec![vec![3], vec![2, 3, 3]],
    };
    let refs: Vec<&[usize]> = widths.iter().map(Vec::as_slice).collect();
    let channels = r.random_range(1..=4);
    let block = ResidualBlock::new("blk", variant, channels, &refs, r.random_range(0.1..1.0)).unwrap();
    let params = spec_tensors(block.params(), &mut r);
    let x = rand_tensor(&[2, 3, 5, 6, channels], &mut r);
    let tape = Tape::new();
    let vars = register(&tape, &params);
    let xv = tape.constant(x);
    let ones = tape.constant(Tensor::ones(&[2, 3, 5, 6, 1]));
    let masked = block.forward(&vars, xv, ones).unwrap().value();
    let plain = block.forward_plain(&vars, xv).unwrap().value();
    masked.bit_eq(&plain)
}

fn zero_lstm(input: usize, hidden: usize) -> (dir3d::layers::Lstm, BTreeMap<String, Tensor<f64>>) {
    let lstm = dir3d::layers::Lstm {
        name: "lstm".into(),
        input,
        hidden,
    };
    let params = lstm.params().into_iter().map(|s| (s.name, Tensor::zeros(&s.shape))).collect();
    (lstm, params)
}

/// Largest deviation of a zero-parameter LSTM step from gates 0.5,
/// `C = c/2`, `h = tanh(c/2)/2`.
pub fn lstm_zero_step_error(seed: u64) -> f64 {
    use dir3d::layers::register;
    use dir3d::Tape;
    let mut r = rng(seed.wrapping_add(3000));
    let (b, d, hidden) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..6));
    let (lstm, params) = zero_lstm(d, hidden);
    let c = uniform(&[b, hidden], -3.0, 3.0, &mut r);
    let tape = Tape::new();
    let vars = register(&tape, &params);
    let s = lstm
        .step(
            &vars,
            tape.constant(rand_tensor(&[b, d], &mut r)),
            tape.constant(rand_tensor(&[b, hidden], &mut r)),
            tape.constant(c.clone()),
        )
        .unwrap();
    let mut err: f64 = 0.0;
    for gate in [s.forget, s.input, s.output] {
        err = gate.value().data().iter().fold(err, |e, &g| e.max((g - 0.5).abs()));
    }
    err = s.candidate.value().data().iter().fold(err, |e, &g| e.max(g.abs()));
    for ((&ct, &ht), &c0) in s.c.value().data().iter().zip(s.h.value().data()).zip(c.data()) {
        err = err.max((ct - 0.5 * c0).abs()).max((ht - 0.5 * (0.5 * c0).tanh()).abs());
    }
    err
}

/// Largest drift of the cell state over 20 steps with `b_f = 50`, all other
/// parameters zero and zero input.
pub fn lstm_memory_error(seed: u64) -> f64 {
    use dir3d::layers::register;
    use dir3d::Tape;
    let mut r = rng(seed.wrapping_add(4000));
    let (b, d, hidden) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..6));
    let (lstm, mut params) = zero_lstm(d, hidden);
    params.insert("lstm.b_f".into(), Tensor::full(&[hidden], 50.0));
    let c0 = uniform(&[b, hidden], -3.0, 3.0, &mut r);
    let tape = Tape::new();
    let vars = register(&tape, &params);
    let x = tape.constant(Tensor::zeros(&[b, d]));
    let mut h = tape.constant(rand_tensor(&[b, hidden], &mut r));
    let mut c = tape.constant(c0.clone());
    let mut err: f64 = 0.0;
    for _ in 0..20 {
        let s = lstm.step(&vars, x, h, c).unwrap();
        (h, c) = (s.h, s.c);
        err = c.value().data().iter().zip(c0.data()).fold(err, |e, (a, b)| e.max((a - b).abs()));
    }
    err
}

/// Ten `sgd_step`s on a random tensor against [`scalar_sgd`] applied per
/// element, with lr 0.01, momentum 0.9 and weight decay 1e-4.
pub fn optimizer_recurrence_error(seed: u64) -> f64 {
    use dir3d::training::{sgd_step, OptimizerState, SgdConfig};
    use dir3d::ModelParams;
    let mut r = rng(seed.wrapping_add(5000));
    let n = r.random_range(1..8);
    let p0 = rand_tensor(&[n], &mut r);
    let grads: Vec<Tensor<f64>> = (0..10).map(|_| rand_tensor(&[n], &mut r)).collect();
    let hyper = SgdConfig {
        lr: 0.01,
        momentum: 0.9,
        weight_decay: 1e-4,
    };
    let mut params = ModelParams::from_map([("w".to_string(), p0.clone())].into());
    let mut state = OptimizerState::new(&params, hyper);
    let mut trajectory = Vec::new();
    for g in &grads {
        sgd_step(&mut params, &[("w".to_string(), g.clone())].into(), &mut state).unwrap();
        trajectory.push(params.get("w").unwrap().clone());
    }
    let mut err: f64 = 0.0;
    for i in 0..n {
        let gs: Vec<f64> = grads.iter().map(|g| g.data()[i]).collect();
        let want = scalar_sgd(p0.data()[i], &gs, 0.01, 0.9, 1e-4);
        for (t, w) in want.iter().enumerate() {
            err = err.max((trajectory[t].data()[i] - w).abs());
        }
    }
    err
}

/// Small 12×12 synthetic set for the tiny network.
pub fn tiny_samples(seed: u64) -> Vec<dir3d::data::SequenceSample> {
    use dir3d::data::{synth_dataset, SynthSpec};
    synth_dataset(&SynthSpec {
        videos_per_class: 2,
        subjects: 2,
        height: 12,
        width: 12,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

pub fn tiny_run_config(epochs: usize) -> dir3d::RunConfig {
    let mut config = dir3d::RunConfig::preset("tiny").unwrap();
    config.model.dropout = 0.3;
    config.train.batch_size = 4;
    config.train.epochs = epochs;
    config
}

/// Largest per-epoch loss difference between an uninterrupted 64-bit run
/// and one saved to disk after two epochs and resumed; also whether the
/// final parameters agree bitwise.
pub fn resume_gap(dir: &std::path::Path) -> (f64, bool) {
    use dir3d::training::{load_checkpoint, save_checkpoint, Trainer};
    let data = tiny_samples(1);
    let mut full = Trainer::<f64>::new(tiny_run_config(5), 17).unwrap();
    let straight: Vec<f64> = (0..5).map(|_| full.train_epoch(&data).unwrap().mean_loss).collect();

    let mut first = Trainer::<f64>::new(tiny_run_config(5), 17).unwrap();
    let mut resumed: Vec<f64> = (0..2).map(|_| first.train_epoch(&data).unwrap().mean_loss).collect();
    let path = dir.join("mid.ckpt");
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    drop(first);
    let mut second = Trainer::resume(tiny_run_config(5), load_checkpoint::<f64>(&path).unwrap()).unwrap();
    resumed.extend((0..3).map(|_| second.train_epoch(&data).unwrap().mean_loss));
    let gap = straight.iter().zip(&resumed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (gap, full.params.bit_eq(&second.params))
}

pub fn stub_sample(label: usize, subject: &str, database: &str) -> dir3d::data::SequenceSample {
    let frame = LandmarkFrame::new(vec![(0.0, 0.0); NUM_LANDMARKS], (1, 1)).unwrap();
    dir3d::data::SequenceSample::new(Tensor::zeros(&[10, 1, 1, 1]), vec![frame; 10], label, subject, database).unwrap()
}

/// Random subjects with random sample counts; checks every fold-plan
/// invariant and the sample split it induces.
pub fn fold_case(seed: u64) -> Result<(), String> {
    use dir3d::evaluation::make_subject_folds;
    use std::collections::BTreeSet;
    let mut r = rng(seed);
    let subjects = r.random_range(2..40);
    let k = r.random_range(2..=subjects.min(10));
    let samples: Vec<_> = (0..subjects)
        .flat_map(|s| (0..r.random_range(1..5)).map(move |_| s))
        .map(|s| stub_sample(0, &format!("subj{s}"), "db"))
        .collect();
    let plan = make_subject_folds(&samples, k, seed).map_err(|e| e.to_string())?;
    if plan.k() != k {
        return Err(format!("{} folds, asked for {k}", plan.k()));
    }
    let all: BTreeSet<String> = samples.iter().map(|s| s.subject_id.clone()).collect();
    let mut seen = BTreeSet::new();
    let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test_subjects.len()).collect();
    if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
        return Err(format!("unbalanced test groups {sizes:?}"));
    }
    for (i, fold) in plan.folds.iter().enumerate() {
        if !fold.train_subjects.is_disjoint(&fold.test_subjects) {
            return Err(format!("fold {i}: train and test share subjects"));
        }
        let union: BTreeSet<String> = fold.train_subjects.union(&fold.test_subjects).cloned().collect();
        if union != all {
            return Err(format!("fold {i}: subjects missing from both sides"));
        }
        for s in &fold.test_subjects {
            if !seen.insert(s.clone()) {
                return Err(format!("subject {s} tested in two folds"));
            }
        }
        let (train, test) = plan.split(i, &samples);
        if train.len() + test.len() != samples.len() {
            return Err(format!("fold {i}: split loses samples"));
        }
        let train_subj: BTreeSet<&str> = train.iter().map(|&j| samples[j].subject_id.as_str()).collect();
        if test.iter().any(|&j| train_subj.contains(samples[j].subject_id.as_str())) {
            return Err(format!("fold {i}: a subject's samples fall on both sides"));
        }
    }
    if seen != all {
        return Err("test groups do not cover every subject".into());
    }
    Ok(())
}

/// Random databases with partially shared label maps; checks train purity
/// and the name-based relabelling.
pub fn cross_database_case(seed: u64) -> Result<(), String> {
    use dir3d::data::Dataset;
    use dir3d::evaluation::cross_database_split;
    use rand::seq::SliceRandom;
    use std::collections::BTreeSet;
    let mut r = rng(seed);
    let pool = ["anger", "disgust", "fear", "happy", "sad", "surprise", "contempt"];
    let count = r.random_range(2..=4);
    let mut datasets = Vec::new();
    for d in 0..count {
        let mut names: Vec<&str> = pool.to_vec();
        names.shuffle(&mut r);
        names.truncate(r.random_range(1..=pool.len()));
        let labels: BTreeMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.to_string(), i)).collect();
        let samples = (0..r.random_range(1..12))
            .map(|i| stub_sample(r.random_range(0..names.len()), &format!("d{d}s{}", i % 3), &format!("db{d}")))
            .collect();
        datasets.push(Dataset { labels, samples });
    }
    let test_db = format!("db{}", r.random_range(0..count));
    let name_of = |ds: &Dataset, id: usize| ds.class_name(id).unwrap().to_string();
    let train_names: BTreeSet<String> = datasets
        .iter()
        .flat_map(|ds| ds.samples.iter().filter(|s| s.database_id != test_db).map(|s| name_of(ds, s.label)))
        .collect();
    let test_names: BTreeSet<String> = datasets
        .iter()
        .flat_map(|ds| ds.samples.iter().filter(|s| s.database_id == test_db).map(|s| name_of(ds, s.label)))
        .collect();
    let split = match cross_database_split(&datasets, &test_db) {
        Ok(s) => s,
        Err(_) if train_names.is_disjoint(&test_names) => return Ok(()),
        Err(e) => return Err(format!("unexpected error: {e}")),
    };
    if split.train.iter().any(|s| s.database_id == test_db) {
        return Err("training set contains a test-database sample".into());
    }
    if split.test.iter().any(|s| s.database_id != test_db) {
        return Err("test set contains a foreign sample".into());
    }
    if split.class_names.iter().cloned().collect::<BTreeSet<_>>() != train_names {
        return Err("class space differs from the training classes".into());
    }
    let excluded: BTreeSet<String> = test_names.difference(&train_names).cloned().collect();
    if split.excluded_classes.iter().cloned().collect::<BTreeSet<_>>() != excluded {
        return Err(format!("excluded {:?}, expected {excluded:?}", split.excluded_classes));
    }
    let kept = datasets
        .iter()
        .flat_map(|ds| ds.samples.iter().map(move |s| (ds, s)))
        .filter(|(ds, s)| s.database_id == test_db && !excluded.contains(&name_of(ds, s.label)));
    let originals: Vec<String> = kept.map(|(ds, s)| name_of(ds, s.label)).collect();
    let mapped: Vec<String> = split.test.iter().map(|s| split.class_names[s.label].clone()).collect();
    if originals != mapped {
        return Err("test labels not mapped by class name".into());
    }
    Ok(())
}

/// Random truth/prediction lists; checks count conservation and row
/// percentages.
pub fn confusion_case(seed: u64) -> Result<(), String> {
    use dir3d::evaluation::ConfusionMatrix;
    let mut r = rng(seed);
    let k = r.random_range(2..8);
    let n = r.random_range(0..60);
    let truths: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let m = ConfusionMatrix::new(&truths, &preds, k).map_err(|e| e.to_string())?;
    if m.total() != n || m.counts.iter().flatten().sum::<usize>() != n {
        return Err(format!("counts sum to {}, expected {n}", m.total()));
    }
    for c in 0..k {
        let row: usize = m.counts[c].iter().sum();
        let col: usize = m.counts.iter().map(|r| r[c]).sum();
        if row != truths.iter().filter(|&&t| t == c).count() || col != preds.iter().filter(|&&p| p == c).count() {
            return Err(format!("class {c}: marginals do not match the label lists"));
        }
    }
    let zero: Vec<usize> = (0..k).filter(|&c| m.counts[c].iter().sum::<usize>() == 0).collect();
    if m.zero_support_rows() != zero {
        return Err("zero-support rows not flagged".into());
    }
    for (c, row) in m.percentages().iter().enumerate() {
        let s: f64 = row.iter().sum();
        let want = if zero.contains(&c) { 0.0 } else { 100.0 };
        if (s - want).abs() > 1e-9 {
            return Err(format!("row {c} percentages sum to {s}"));
        }
    }
    Ok(())
}
