//! Synchronous mini-batch SGD with momentum and weight decay, epoch loop,
//! metrics log and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, TrainConfig};
use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{argmax, ModelParams, Network};
use crate::tensor::{read_tensor_from, write_tensor_to, Element, Tensor};

/// RNG keyed by a tuple of integers, e.g. `(seed, purpose, epoch, index)`.
pub fn derived_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0001,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: BTreeMap<String, Tensor<T>>,
    pub hyper: SgdConfig,
    pub step: u64,
    /// Parameters exempt from weight decay.
    pub no_decay: BTreeSet<String>,
}

/// Bias vectors: `*.bias` and the LSTM `b_*` gates.
pub fn is_bias(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last == "bias" || last.starts_with("b_")
}

impl<T: Element> OptimizerState<T> {
    /// Zero velocity; every parameter decays.
    pub fn new(params: &ModelParams<T>, hyper: SgdConfig) -> Self {
        OptimizerState {
            velocity: params
                .as_map()
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
            hyper,
            step: 0,
            no_decay: BTreeSet::new(),
        }
    }

    /// As [`OptimizerState::new`] but biases are exempt from weight decay.
    pub fn for_model(params: &ModelParams<T>, hyper: SgdConfig) -> Self {
        let mut s = Self::new(params, hyper);
        s.no_decay = params.as_map().keys().filter(|k| is_bias(k)).cloned().collect();
        s
    }
}

fn key_mismatch<A, B>(what: &str, want: &BTreeMap<String, A>, have: &BTreeMap<String, B>) -> Option<Error> {
    let missing: Vec<&str> = want.keys().filter(|k| !have.contains_key(*k)).map(String::as_str).collect();
    let extra: Vec<&str> = have.keys().filter(|k| !want.contains_key(*k)).map(String::as_str).collect();
    if missing.is_empty() && extra.is_empty() {
        return None;
    }
    Some(Error::contract(format!(
        "{what} keys differ from parameters: missing {missing:?}, unexpected {extra:?}"
    )))
}

/// `v ← momentum·v + g + wd·p; p ← p − lr·v`, then `step += 1`.
pub fn sgd_step<T: Element>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if let Some(e) = key_mismatch("gradient", params.as_map(), grads) {
        return Err(e);
    }
    if let Some(e) = key_mismatch("velocity", params.as_map(), &state.velocity) {
        return Err(e);
    }
    let lr = T::from_f64(state.hyper.lr);
    let mu = T::from_f64(state.hyper.momentum);
    for (name, p) in params.as_map_mut() {
        let g = &grads[name];
        let v = state.velocity.get_mut(name).expect("checked");
        if g.shape() != p.shape() {
            return Err(Error::dim("sgd_step", p.shape(), g.shape()));
        }
        if v.shape() != p.shape() {
            return Err(Error::dim("sgd_step", p.shape(), v.shape()));
        }
        let wd = if state.no_decay.contains(name) {
            T::zero()
        } else {
            T::from_f64(state.hyper.weight_decay)
        };
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv = *pv - lr * *vv;
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean over batches of the batch-mean loss.
    pub mean_loss: f64,
    /// Running accuracy of the train-mode predictions.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

fn sample_input<T: Element>(s: &SequenceSample) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(s.clip.shape());
    s.clip.cast::<T>().reshape(&shape)
}

/// Eval-mode loss, accuracy and predictions, in sample order.
pub fn evaluate<T: Element>(net: &Network, params: &ModelParams<T>, samples: &[SequenceSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty sample set".into()));
    }
    let k = net.config().num_classes;
    let rows = samples
        .par_iter()
        .map(|s| {
            if s.label >= k {
                return Err(Error::Data(format!("label {} out of range for {k} classes", s.label)));
            }
            let logits = net.predict(params, &sample_input::<T>(s)?, &[&s.landmarks])?;
            let p = logits.probabilities.data()[s.label].to_f64().expect("finite");
            Ok((-p.max(f64::MIN_POSITIVE).ln(), logits.classes[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let correct = rows.iter().zip(samples).filter(|((_, p), s)| *p == s.label).count();
    Ok(Evaluation {
        mean_loss: rows.iter().map(|r| r.0).sum::<f64>() / n,
        accuracy: correct as f64 / n,
        predictions: rows.into_iter().map(|r| r.1).collect(),
    })
}

/// Appends `epoch,split,loss,accuracy` rows.
#[derive(Clone, Debug)]
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        fs::write(path, "epoch,split,loss,accuracy\n").map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { path: path.into() })
    }

    /// Reuses an existing log, writing the header only if the file is new.
    pub fn append_to(path: &Path) -> Result<Self> {
        if path.exists() {
            Ok(MetricsLog { path: path.into() })
        } else {
            Self::create(path)
        }
    }

    pub fn row(&self, epoch: usize, split: &str, loss: f64, accuracy: f64) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{epoch},{split},{loss},{accuracy}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Parameters with the best validation accuracy seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot<T> {
    pub epoch: usize,
    pub accuracy: f64,
    pub params: ModelParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub history: Vec<EpochMetrics>,
    /// Eval-mode training accuracy after the last epoch, when measured.
    pub train_accuracy: Option<f64>,
    pub stopped_early: bool,
}

/// Owns the parameters and optimizer state for one training run.
pub struct Trainer<T> {
    net: Network,
    config: RunConfig,
    pub params: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    seed: u64,
    epoch: usize,
    pub best: Option<BestSnapshot<T>>,
}

fn sgd_config(t: &TrainConfig) -> SgdConfig {
    SgdConfig {
        lr: t.lr,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
    }
}

impl<T: Element> Trainer<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: RunConfig, seed: u64) -> Result<Self> {
        if config.train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        let net = Network::new(config.model.clone())?;
        let params = net.init_params(seed);
        let optimizer = OptimizerState::for_model(&params, sgd_config(&config.train));
        Ok(Trainer {
            net,
            config,
            params,
            optimizer,
            seed,
            epoch: 0,
            best: None,
        })
    }

    /// Continues from a checkpoint. `config` may change training settings
    /// but its model section must hash to the checkpoint's.
    pub fn resume(config: RunConfig, ckpt: Checkpoint<T>) -> Result<Self> {
        let (want, have) = (config.model.hash(), ckpt.config.model.hash());
        if want != have {
            return Err(Error::Compatibility(format!(
                "checkpoint config hash {have:016x} does not match {want:016x}"
            )));
        }
        let net = Network::new(config.model.clone())?;
        let expected: BTreeSet<String> = net.param_specs().into_iter().map(|s| s.name).collect();
        let found: BTreeSet<String> = ckpt.params.as_map().keys().cloned().collect();
        if expected != found {
            return Err(Error::Compatibility("checkpoint parameter names differ from the model".into()));
        }
        Ok(Trainer {
            net,
            config,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            seed: ckpt.seed,
            epoch: ckpt.epoch,
            best: ckpt.best,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.config.train.lr_decay {
            Some((every, factor)) if every > 0 => self.config.train.lr * factor.powi((epoch / every) as i32),
            _ => self.config.train.lr,
        }
    }

    /// One shuffled pass. Each sample gets its own tape; gradients are
    /// averaged over the batch in sample order before the update.
    pub fn train_epoch(&mut self, data: &[SequenceSample]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let epoch = self.epoch as u64;
        self.optimizer.hyper = SgdConfig {
            lr: self.lr_at(self.epoch),
            ..sgd_config(&self.config.train)
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut derived_rng(&[self.seed, STREAM_SHUFFLE, epoch]));

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(self.config.train.batch_size).enumerate() {
            let start = b * self.config.train.batch_size;
            let net = &self.net;
            let params = &self.params;
            let seed = self.seed;
            let results = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let s = &data[i];
                    let mut rng = derived_rng(&[seed, STREAM_DROPOUT, epoch, (start + j) as u64]);
                    net.loss_and_grads(params, &sample_input::<T>(s)?, &[s.label], &[&s.landmarks], Mode::Train, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;

            let inv = T::from_f64(1.0 / chunk.len() as f64);
            let mut total: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for ((loss, logits, grads), &i) in results.into_iter().zip(chunk) {
                batch_loss += loss.to_f64().expect("finite");
                correct += usize::from(argmax(logits.data()) == data[i].label);
                for (name, g) in grads {
                    match total.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &v)| *a += v * inv),
                        None => {
                            total.insert(name, g.map(|v| v * inv));
                        }
                    }
                }
            }
            sgd_step(&mut self.params, &total, &mut self.optimizer)?;
            loss_sum += batch_loss / chunk.len() as f64;
            batches += 1;
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            mean_loss: loss_sum / batches as f64,
            accuracy: correct as f64 / data.len() as f64,
        })
    }

    /// Runs epochs up to `train.epochs`. With a validation set the best
    /// parameters by validation accuracy are kept in `self.best`. With
    /// `train.target_accuracy` set, stops once eval-mode accuracy on the
    /// training set reaches it.
    pub fn fit(
        &mut self,
        train: &[SequenceSample],
        validation: Option<&[SequenceSample]>,
        log: Option<&MetricsLog>,
    ) -> Result<FitSummary> {
        self.fit_with(train, validation, log, |_, _| Ok(()))
    }

    /// As [`Trainer::fit`], calling `on_epoch` after every epoch.
    pub fn fit_with(
        &mut self,
        train: &[SequenceSample],
        validation: Option<&[SequenceSample]>,
        log: Option<&MetricsLog>,
        mut on_epoch: impl FnMut(&Self, &EpochMetrics) -> Result<()>,
    ) -> Result<FitSummary> {
        let mut history = Vec::new();
        let mut train_accuracy = None;
        let mut stopped_early = false;
        while self.epoch < self.config.train.epochs {
            let m = self.train_epoch(train)?;
            if let Some(l) = log {
                l.row(m.epoch, "train", m.mean_loss, m.accuracy)?;
            }
            history.push(m);
            if let Some(val) = validation {
                let e = evaluate(&self.net, &self.params, val)?;
                if let Some(l) = log {
                    l.row(m.epoch, "val", e.mean_loss, e.accuracy)?;
                }
                if self.best.as_ref().is_none_or(|b| e.accuracy > b.accuracy) {
                    self.best = Some(BestSnapshot {
                        epoch: m.epoch,
                        accuracy: e.accuracy,
                        params: self.params.clone(),
                    });
                }
            }
            on_epoch(self, &m)?;
            if let Some(target) = self.config.train.target_accuracy {
                let e = evaluate(&self.net, &self.params, train)?;
                if let Some(l) = log {
                    l.row(m.epoch, "train_eval", e.mean_loss, e.accuracy)?;
                }
                train_accuracy = Some(e.accuracy);
                if e.accuracy >= target {
                    stopped_early = self.epoch < self.config.train.epochs;
                    break;
                }
            }
        }
        Ok(FitSummary {
            history,
            train_accuracy,
            stopped_early,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            seed: self.seed,
            epoch: self.epoch,
            best: self.best.clone(),
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"DIR3DCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Initialisation scheme, echoed into every checkpoint header.
pub const INIT_DESCRIPTION: &str =
    "conv/fc: normal(0, sqrt(2/fan_in)) truncated at 2 std; lstm matrices: uniform(+-sqrt(1/hidden)); b_f = 1; other biases 0";

/// Everything needed to continue a run bit-for-bit. Dropout and shuffle
/// streams are derived from `(seed, epoch, position)`, so the seed and
/// epoch counter are the whole RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub params: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    pub seed: u64,
    pub epoch: usize,
    pub best: Option<BestSnapshot<T>>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.model.hash().to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        put_str(&mut out, INIT_DESCRIPTION);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let h = self.optimizer.hyper;
        for v in [h.lr, h.momentum, h.weight_decay] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.optimizer.no_decay.len() as u32).to_le_bytes());
        for name in &self.optimizer.no_decay {
            put_str(&mut out, name);
        }
        match &self.best {
            Some(b) => {
                out.push(1);
                out.extend_from_slice(&(b.epoch as u64).to_le_bytes());
                out.extend_from_slice(&b.accuracy.to_le_bytes());
            }
            None => out.push(0),
        }

        let mut records: Vec<(String, &Tensor<T>)> = Vec::new();
        records.extend(self.params.as_map().iter().map(|(k, v)| (format!("param/{k}"), v)));
        records.extend(self.optimizer.velocity.iter().map(|(k, v)| (format!("velocity/{k}"), v)));
        if let Some(b) = &self.best {
            records.extend(b.params.as_map().iter().map(|(k, v)| (format!("best/{k}"), v)));
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            put_str(&mut out, &name);
            write_tensor_to(&mut out, t);
        }
        out
    }

    /// Parses a checkpoint; `origin` labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, origin };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let hash = r.u64()?;
        let config = RunConfig::parse(&r.string()?).map_err(|e| Error::format(origin, format!("embedded config: {e}")))?;
        if config.model.hash() != hash {
            return Err(Error::format(origin, "config hash does not match embedded config"));
        }
        let _init = r.string()?;
        let seed = r.u64()?;
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let hyper = SgdConfig {
            lr: r.f64()?,
            momentum: r.f64()?,
            weight_decay: r.f64()?,
        };
        let no_decay = (0..r.u32()?).map(|_| r.string()).collect::<Result<BTreeSet<_>>>()?;
        let best_meta = match r.take(1)?[0] {
            0 => None,
            1 => Some((r.u64()? as usize, r.f64()?)),
            b => return Err(Error::format(origin, format!("bad best-snapshot flag {b}"))),
        };

        let mut params = BTreeMap::new();
        let mut velocity = BTreeMap::new();
        let mut best = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let t = read_tensor_from::<T>(&mut r.bytes, origin)?;
            let (dest, key) = if let Some(k) = name.strip_prefix("param/") {
                (&mut params, k)
            } else if let Some(k) = name.strip_prefix("velocity/") {
                (&mut velocity, k)
            } else if let Some(k) = name.strip_prefix("best/") {
                (&mut best, k)
            } else {
                return Err(Error::format(origin, format!("unknown record {name:?}")));
            };
            dest.insert(key.to_string(), t);
        }
        if !r.bytes.is_empty() {
            return Err(Error::format(origin, "trailing bytes after checkpoint"));
        }
        if key_mismatch("velocity", &params, &velocity).is_some() {
            return Err(Error::format(origin, "velocity records do not match parameters"));
        }
        let best = match best_meta {
            Some((epoch, accuracy)) => {
                if key_mismatch("best", &params, &best).is_some() {
                    return Err(Error::format(origin, "best-snapshot records do not match parameters"));
                }
                Some(BestSnapshot {
                    epoch,
                    accuracy,
                    params: ModelParams::from_map(best),
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            config,
            params: ModelParams::from_map(params),
            optimizer: OptimizerState {
                velocity,
                hyper,
                step,
                no_decay,
            },
            seed,
            epoch,
            best,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.origin, "non-utf8 string"))
    }
}

pub fn save_checkpoint<T: Element>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
