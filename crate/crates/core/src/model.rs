//! The full network: stem → block A (masked) → reduction A → block B
//! (masked) → reduction B → block C (unmasked) → average pool → dropout →
//! LSTM → dense → softmax.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{LstmInput, ModelConfig, StemKind};
use crate::error::{Error, Result};
use crate::landmark::{mask_for_feature_map, LandmarkFrame};
use crate::layers::{
    dropout, register, BlockVariant, ConvUnit, Dense, FeatureShape, Init, Lstm, Mode, ParamSpec, ParamVars,
    ReductionBlock, ReductionVariant, ResidualBlock,
};
use crate::tensor::{kernels, softmax_rows, Element, Padding, PoolMode, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
enum StemOp {
    Conv(ConvUnit),
    Pool {
        name: String,
        window: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
        mode: PoolMode,
    },
}

/// One row of a shape trace: stage name and its per-sample output shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub stage: String,
    pub shape: Vec<usize>,
}

/// Layer graph derived from a [`ModelConfig`]. Construction validates the
/// config by propagating shapes through every stage.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    stem: Vec<StemOp>,
    block_a: Vec<ResidualBlock>,
    reduction_a: ReductionBlock,
    block_b: Vec<ResidualBlock>,
    reduction_b: ReductionBlock,
    block_c: Vec<ResidualBlock>,
    lstm: Lstm,
    fc: Dense,
    trace: Vec<TraceRow>,
}

/// Every learnable tensor, keyed by hierarchical name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ModelParams<T> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ModelParams { tensors }
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn as_map_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Class ids and softmax probabilities for a batch.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub classes: Vec<usize>,
    pub probabilities: Tensor<T>,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let c = &config;
        if c.frames == 0 || c.height == 0 || c.width == 0 || c.channels == 0 {
            return Err(Error::config("input", "all input extents must be positive"));
        }
        if c.num_classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(Error::config("head.dropout", "rate must lie in [0, 1)"));
        }
        if c.lstm_hidden == 0 {
            return Err(Error::config("lstm.hidden", "must be positive"));
        }
        if c.mask.window % 2 == 0 {
            return Err(Error::config("mask.window", "must be odd"));
        }
        if c.block_a_repeats == 0 || c.block_b_repeats == 0 || c.block_c_repeats == 0 {
            return Err(Error::config("repeats", "each block stage needs at least one block"));
        }

        let mut trace = vec![TraceRow {
            stage: "input".into(),
            shape: vec![c.frames, c.height, c.width, c.channels],
        }];
        let mut shape: FeatureShape = [c.frames, c.height, c.width, c.channels];
        let mut record = |stage: &str, s: FeatureShape| {
            trace.push(TraceRow {
                stage: stage.to_string(),
                shape: s.to_vec(),
            })
        };

        let mut stem = Vec::new();
        for (i, layer) in c.stem.iter().enumerate() {
            let name = format!("stem.{i}");
            let op = match layer.kind {
                StemKind::Conv { out } => {
                    if out == 0 {
                        return Err(Error::config(&name, "width must be positive"));
                    }
                    let unit = ConvUnit::new(&name, layer.kernel, layer.stride, layer.padding, shape[3], out);
                    shape = unit.out_shape(shape)?;
                    StemOp::Conv(unit)
                }
                StemKind::Pool(mode) => {
                    for ax in 0..3 {
                        shape[ax] = kernels::axis_geometry(shape[ax], layer.kernel[ax], layer.stride[ax], layer.padding)
                            .ok_or_else(|| Error::config(&name, "pool window does not fit"))?
                            .0;
                    }
                    StemOp::Pool {
                        name: name.clone(),
                        window: layer.kernel,
                        stride: layer.stride,
                        padding: layer.padding,
                        mode,
                    }
                }
            };
            record(&name, shape);
            stem.push(op);
        }
        record("stem", shape);

        let scale = c.residual_scale;
        let blocks = |stage: &str,
                          variant: BlockVariant,
                          repeats: usize,
                          widths: &[&[usize]],
                          shape: &mut FeatureShape,
                          record: &mut dyn FnMut(&str, FeatureShape)|
         -> Result<Vec<ResidualBlock>> {
            (0..repeats)
                .map(|r| {
                    let name = format!("{stage}.{r}");
                    let blk = ResidualBlock::new(&name, variant, shape[3], widths, scale)?;
                    *shape = blk.out_shape(*shape)?;
                    record(&name, *shape);
                    Ok(blk)
                })
                .collect()
        };

        let block_a = blocks(
            "block_a",
            BlockVariant::A,
            c.block_a_repeats,
            &[&c.block_a_branch0, &c.block_a_branch1, &c.block_a_branch2],
            &mut shape,
            &mut record,
        )?;
        let reduction_a = ReductionBlock::new(
            "reduction_a",
            ReductionVariant::A,
            shape[3],
            &[&c.reduction_a_conv, &c.reduction_a_tower],
        )?;
        shape = reduction_a.out_shape(shape)?;
        record("reduction_a", shape);

        let block_b = blocks(
            "block_b",
            BlockVariant::B,
            c.block_b_repeats,
            &[&c.block_b_branch0, &c.block_b_branch1],
            &mut shape,
            &mut record,
        )?;
        let reduction_b = ReductionBlock::new(
            "reduction_b",
            ReductionVariant::B,
            shape[3],
            &[&c.reduction_b_tower0, &c.reduction_b_tower1, &c.reduction_b_tower2],
        )?;
        shape = reduction_b.out_shape(shape)?;
        record("reduction_b", shape);

        let block_c = blocks(
            "block_c",
            BlockVariant::C,
            c.block_c_repeats,
            &[&c.block_c_branch0, &c.block_c_branch1],
            &mut shape,
            &mut record,
        )?;

        for ax in 0..3 {
            shape[ax] = kernels::axis_geometry(shape[ax], c.head_pool[ax], c.head_pool[ax], Padding::Valid)
                .ok_or_else(|| Error::config("head.pool", format!("window {:?} does not fit {shape:?}", c.head_pool)))?
                .0;
        }
        record("avgpool", shape);

        let (steps, lstm_in) = match c.lstm_input {
            LstmInput::PerTimestep => (shape[0], shape[1] * shape[2] * shape[3]),
            LstmInput::WholeVolume => (1, shape.iter().product()),
        };
        trace.push(TraceRow {
            stage: "lstm.input".into(),
            shape: vec![steps, lstm_in],
        });
        trace.push(TraceRow {
            stage: "lstm".into(),
            shape: vec![c.lstm_hidden],
        });
        trace.push(TraceRow {
            stage: "fc".into(),
            shape: vec![c.num_classes],
        });

        Ok(Network {
            lstm: Lstm {
                name: "lstm".into(),
                input: lstm_in,
                hidden: c.lstm_hidden,
            },
            fc: Dense {
                name: "fc".into(),
                input: c.lstm_hidden,
                output: c.num_classes,
            },
            config,
            stem,
            block_a,
            reduction_a,
            block_b,
            reduction_b,
            block_c,
            trace,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Per-sample output shape of every stage, computed without running
    /// the network.
    pub fn shape_trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn stage_shape(&self, stage: &str) -> Option<&[usize]> {
        self.trace
            .iter()
            .find(|r| r.stage == stage)
            .map(|r| r.shape.as_slice())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for op in &self.stem {
            if let StemOp::Conv(u) = op {
                specs.extend(u.params());
            }
        }
        for b in self.block_a.iter().chain(&self.block_b).chain(&self.block_c) {
            specs.extend(b.params());
        }
        specs.extend(self.reduction_a.params());
        specs.extend(self.reduction_b.params());
        specs.extend(self.lstm.params());
        specs.extend(self.fc.params());
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Deterministic initialisation, visiting parameters in name order.
    pub fn init_params<T: Element>(&self, seed: u64) -> ModelParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .param_specs()
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        T::from_f64(match spec.init {
                            Init::HeTruncated { fan_in } => {
                                let std = (2.0 / fan_in as f64).sqrt();
                                loop {
                                    let z: f64 = StandardNormal.sample(&mut rng);
                                    if z.abs() <= 2.0 {
                                        break z * std;
                                    }
                                }
                            }
                            Init::Uniform { limit } => rng.random_range(-limit..=limit),
                            Init::Constant(v) => v,
                        })
                    })
                    .collect();
                let t = Tensor::new(&spec.shape, data).expect("spec shape");
                (spec.name, t)
            })
            .collect();
        ModelParams { tensors }
    }

    fn check_inputs<T: Element>(&self, clips: &Tensor<T>, landmarks: &[&[LandmarkFrame]]) -> Result<usize> {
        let c = &self.config;
        let s = clips.shape();
        let expected = [c.frames, c.height, c.width, c.channels];
        if s.len() != 5 || s[1..] != expected {
            let mut want = vec![s.first().copied().unwrap_or(1)];
            want.extend_from_slice(&expected);
            return Err(Error::dim("forward", s, &want));
        }
        let batch = s[0];
        if self.config.use_landmarks {
            if landmarks.len() != batch {
                return Err(Error::Data(format!(
                    "landmarks given for {} samples, batch has {batch}",
                    landmarks.len()
                )));
            }
            for (i, l) in landmarks.iter().enumerate() {
                if l.len() != c.frames {
                    return Err(Error::Data(format!(
                        "sample {i}: expected {} landmark frames, got {}",
                        c.frames,
                        l.len()
                    )));
                }
            }
        }
        Ok(batch)
    }

    fn batch_mask<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        landmarks: &[&[LandmarkFrame]],
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = x.shape();
        let feature = [s[1], s[2], s[3], s[4]];
        let masks = landmarks
            .iter()
            .map(|l| mask_for_feature_map::<T>(l, feature, &self.config.mask))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = masks.iter().collect();
        Ok(tape.constant(Tensor::stack(&refs)?))
    }

    /// Logits `[batch, K]` for `clips: [batch, T, H, W, C]`.
    pub fn forward<'t, T: Element, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape<T>,
        params: &ParamVars<'t, T>,
        clips: &Tensor<T>,
        landmarks: &[&[LandmarkFrame]],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var<'t, T>> {
        self.forward_traced(tape, params, clips, landmarks, mode, rng, &mut Vec::new())
    }

    /// As [`Network::forward`], also recording the executed shape of every
    /// stage in the same format as [`Network::shape_trace`].
    #[allow(clippy::too_many_arguments)]
    pub fn forward_traced<'t, T: Element, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape<T>,
        params: &ParamVars<'t, T>,
        clips: &Tensor<T>,
        landmarks: &[&[LandmarkFrame]],
        mode: Mode,
        rng: &mut R,
        trace: &mut Vec<TraceRow>,
    ) -> Result<Var<'t, T>> {
        let batch = self.check_inputs(clips, landmarks)?;
        let mut record = |stage: &str, v: &Var<'t, T>| {
            trace.push(TraceRow {
                stage: stage.to_string(),
                shape: v.shape()[1..].to_vec(),
            })
        };
        let mut x = tape.constant(clips.clone());
        record("input", &x);

        for op in &self.stem {
            x = match op {
                StemOp::Conv(u) => {
                    let y = u.forward(params, x)?;
                    record(&u.name, &y);
                    y
                }
                StemOp::Pool {
                    name,
                    window,
                    stride,
                    padding,
                    mode,
                } => {
                    let y = x.pool3d(*window, *stride, *padding, *mode)?;
                    record(name, &y);
                    y
                }
            };
        }
        record("stem", &x);

        let masked_stage = |x: Var<'t, T>, blocks: &[ResidualBlock], record: &mut dyn FnMut(&str, &Var<'t, T>)| {
            let mask = if self.config.use_landmarks {
                Some(self.batch_mask(tape, landmarks, x)?)
            } else {
                None
            };
            blocks.iter().try_fold(x, |h, b| {
                let y = match mask {
                    Some(m) => b.forward(params, h, m)?,
                    None => b.forward_plain(params, h)?,
                };
                record(&b.name, &y);
                Ok::<_, Error>(y)
            })
        };

        x = masked_stage(x, &self.block_a, &mut record)?;
        x = self.reduction_a.forward(params, x)?;
        record("reduction_a", &x);
        x = masked_stage(x, &self.block_b, &mut record)?;
        x = self.reduction_b.forward(params, x)?;
        record("reduction_b", &x);
        for b in &self.block_c {
            x = b.forward_plain(params, x)?;
            record(&b.name, &x);
        }

        let pool = self.config.head_pool;
        x = x.pool3d(pool, pool, Padding::Valid, PoolMode::Average)?;
        record("avgpool", &x);
        x = dropout(x, self.config.dropout, mode, rng)?;

        let s = x.shape();
        let seq_shape = match self.config.lstm_input {
            LstmInput::PerTimestep => [batch, s[1], s[2] * s[3] * s[4]],
            LstmInput::WholeVolume => [batch, 1, s[1..].iter().product()],
        };
        let seq = x.reshape(&seq_shape)?;
        record("lstm.input", &seq);
        let h = self.lstm.sequence(params, seq)?;
        record("lstm", &h);
        let logits = self.fc.forward(params, h)?;
        record("fc", &logits);
        Ok(logits)
    }

    /// Forward on a private tape, returning logits only.
    pub fn logits<T: Element, R: Rng + ?Sized>(
        &self,
        params: &ModelParams<T>,
        clips: &Tensor<T>,
        landmarks: &[&[LandmarkFrame]],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = register(&tape, params.as_map());
        let out = self.forward(&tape, &vars, clips, landmarks, mode, rng)?;
        Ok((*out.value()).clone())
    }

    /// Mean cross-entropy of a batch, forward only.
    pub fn loss<T: Element, R: Rng + ?Sized>(
        &self,
        params: &ModelParams<T>,
        clips: &Tensor<T>,
        labels: &[usize],
        landmarks: &[&[LandmarkFrame]],
        mode: Mode,
        rng: &mut R,
    ) -> Result<T> {
        let tape = Tape::new();
        let vars = register(&tape, params.as_map());
        let logits = self.forward(&tape, &vars, clips, landmarks, mode, rng)?;
        let onehot = one_hot(labels, self.config.num_classes)?;
        Ok(logits.softmax_cross_entropy(&onehot)?.value().item())
    }

    /// Mean cross-entropy, logits and per-parameter gradients for a batch.
    pub fn loss_and_grads<T: Element, R: Rng + ?Sized>(
        &self,
        params: &ModelParams<T>,
        clips: &Tensor<T>,
        labels: &[usize],
        landmarks: &[&[LandmarkFrame]],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(T, Tensor<T>, BTreeMap<String, Tensor<T>>)> {
        let tape = Tape::new();
        let vars = register(&tape, params.as_map());
        let logits = self.forward(&tape, &vars, clips, landmarks, mode, rng)?;
        let onehot = one_hot(labels, self.config.num_classes)?;
        let loss = logits.softmax_cross_entropy(&onehot)?;
        let grads = tape.backward(loss)?;
        Ok((loss.value().item(), (*logits.value()).clone(), grads.named()))
    }

    /// Eval-mode class prediction; ties go to the lowest class id.
    pub fn predict<T: Element>(
        &self,
        params: &ModelParams<T>,
        clips: &Tensor<T>,
        landmarks: &[&[LandmarkFrame]],
    ) -> Result<Prediction<T>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let logits = self.logits(params, clips, landmarks, Mode::Eval, &mut unused)?;
        Ok(predict_from_logits(&logits))
    }
}

pub fn predict_from_logits<T: Element>(logits: &Tensor<T>) -> Prediction<T> {
    let probabilities = softmax_rows(logits);
    let k = logits.shape()[1];
    let classes = logits.data().chunks(k).map(argmax).collect();
    Prediction {
        classes,
        probabilities,
    }
}

/// Index of the first maximum.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot<T: Element>(labels: &[usize], k: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len().max(1), k]);
    if labels.is_empty() {
        return Err(Error::contract("empty label batch"));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::contract(format!("label {l} out of range for {k} classes")));
        }
        t.data_mut()[i * k + l] = T::one();
    }
    Ok(t)
}

/// Renders a trace as an aligned text table.
pub fn format_trace(rows: &[TraceRow]) -> String {
    let width = rows.iter().map(|r| r.stage.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  output\n", "stage");
    for r in rows {
        let dims = r.shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
        let _ = writeln!(out, "{:<width$}  {dims}", r.stage);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 10.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
        let p = predict_from_logits(&Tensor::<f64>::from_f64(&[1, 4], &[1., 3., 3., 0.]).unwrap());
        assert_eq!(p.classes, vec![1]);
        assert!((p.probabilities.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn config_errors_name_the_stage() {
        let mut c = ModelConfig::toy();
        c.block_a_branch1 = vec![4];
        match Network::new(c) {
            Err(Error::Config { stage, .. }) => assert!(stage.starts_with("block_a.0.branch1"), "{stage}"),
            other => panic!("unexpected {other:?}"),
        }
        let mut c = ModelConfig::toy();
        c.height = 16;
        match Network::new(c) {
            Err(Error::Config { stage, .. }) => assert!(!stage.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
        let mut c = ModelConfig::toy();
        c.num_classes = 1;
        assert!(Network::new(c).is_err());
    }

    #[test]
    fn parameter_keys_depend_only_on_config() {
        let net = Network::new(ModelConfig::toy()).unwrap();
        let a: ModelParams<f32> = net.init_params(1);
        let b: ModelParams<f32> = net.init_params(2);
        assert!(a.as_map().keys().eq(b.as_map().keys()));
        assert!(!a.bit_eq(&b));
        assert!(a.bit_eq(&net.init_params(1)));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let net = Network::new(ModelConfig::tiny()).unwrap();
        let p: ModelParams<f64> = net.init_params(0);
        assert!(p.get("lstm.b_f").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("lstm.b_i").unwrap().data().iter().all(|&v| v == 0.0));
        let k = p.get("stem.0.kernel").unwrap();
        let bound = 2.0 * (2.0f64 / 27.0).sqrt();
        assert!(k.data().iter().all(|v| v.abs() <= bound));
    }
}
