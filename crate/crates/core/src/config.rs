//! Model and training configuration, read from flat `key = value` text.
//!
//! Keys are dotted paths (`block_a.branch1 = 32,32`); `#` starts a comment.
//! Missing keys fall back to the reference preset, so a file only needs to
//! list what it changes. Stem layers are written as
//! `stem.N = conv 3x3x3 1x2x2 valid 32` or `stem.N = maxpool 3x3x3 1x2x2 same`,
//! and listing any stem layer replaces the whole stem.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::landmark::MaskParams;
use crate::tensor::{Padding, PoolMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StemKind {
    Conv { out: usize },
    Pool(PoolMode),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemLayer {
    pub kind: StemKind,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: Padding,
}

/// How the pooled feature volume is handed to the LSTM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LstmInput {
    /// One step per remaining time step, each the flattened `H×W×C` map.
    PerTimestep,
    /// The whole volume flattened into a single step.
    WholeVolume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stem: Vec<StemLayer>,

    pub block_a_repeats: usize,
    pub block_a_branch0: Vec<usize>,
    pub block_a_branch1: Vec<usize>,
    pub block_a_branch2: Vec<usize>,
    pub reduction_a_conv: Vec<usize>,
    pub reduction_a_tower: Vec<usize>,

    pub block_b_repeats: usize,
    pub block_b_branch0: Vec<usize>,
    pub block_b_branch1: Vec<usize>,
    pub reduction_b_tower0: Vec<usize>,
    pub reduction_b_tower1: Vec<usize>,
    pub reduction_b_tower2: Vec<usize>,

    pub block_c_repeats: usize,
    pub block_c_branch0: Vec<usize>,
    pub block_c_branch1: Vec<usize>,

    /// Average-pool window (and stride) applied after the last block.
    pub head_pool: [usize; 3],
    pub dropout: f64,
    pub lstm_hidden: usize,
    pub lstm_input: LstmInput,
    pub num_classes: usize,
    /// Multiplier on the inception branch output before the residual sum.
    pub residual_scale: f64,
    /// When false every residual block uses the plain identity shortcut.
    pub use_landmarks: bool,
    pub mask: MaskParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop early once eval-mode accuracy on the training set reaches this.
    pub target_accuracy: Option<f64>,
    /// Multiply the learning rate by `.1` every `.0` epochs.
    pub lr_decay: Option<(usize, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0001,
            batch_size: 8,
            epochs: 200,
            target_accuracy: None,
            lr_decay: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn conv(kernel: [usize; 3], stride: [usize; 3], padding: Padding, out: usize) -> StemLayer {
    StemLayer {
        kind: StemKind::Conv { out },
        kernel,
        stride,
        padding,
    }
}

fn maxpool(kernel: [usize; 3], stride: [usize; 3], padding: Padding) -> StemLayer {
    StemLayer {
        kind: StemKind::Pool(PoolMode::Max),
        kernel,
        stride,
        padding,
    }
}

impl ModelConfig {
    /// Full-size network: 10×299×299×3 input, 38/18/8 grids, LSTM(200).
    pub fn reference() -> Self {
        use Padding::{Same, Valid};
        ModelConfig {
            frames: 10,
            height: 299,
            width: 299,
            channels: 3,
            stem: vec![
                conv([3, 3, 3], [1, 2, 2], Valid, 32),
                conv([3, 3, 3], [1, 1, 1], Same, 32),
                conv([3, 3, 3], [1, 1, 1], Same, 64),
                maxpool([3, 3, 3], [1, 2, 2], Same),
                conv([1, 1, 1], [1, 1, 1], Same, 80),
                conv([3, 3, 3], [1, 1, 1], Same, 192),
                conv([3, 3, 3], [1, 2, 2], Same, 256),
            ],
            block_a_repeats: 1,
            block_a_branch0: vec![32],
            block_a_branch1: vec![32, 32],
            block_a_branch2: vec![32, 32, 32],
            reduction_a_conv: vec![384],
            reduction_a_tower: vec![192, 192, 256],
            block_b_repeats: 1,
            block_b_branch0: vec![128],
            block_b_branch1: vec![128, 128, 128],
            reduction_b_tower0: vec![256, 384],
            reduction_b_tower1: vec![256, 256],
            reduction_b_tower2: vec![256, 256, 256],
            block_c_repeats: 1,
            block_c_branch0: vec![192],
            block_c_branch1: vec![192, 192, 192],
            head_pool: [1, 8, 8],
            dropout: 0.2,
            lstm_hidden: 200,
            lstm_input: LstmInput::PerTimestep,
            num_classes: 7,
            residual_scale: 1.0,
            use_landmarks: true,
            mask: MaskParams::default(),
        }
    }

    /// Desk-scale network on 10×64×64×1 clips used by tests and examples.
    pub fn toy() -> Self {
        use Padding::{Same, Valid};
        ModelConfig {
            frames: 10,
            height: 64,
            width: 64,
            channels: 1,
            stem: vec![
                conv([3, 3, 3], [1, 2, 2], Valid, 8),
                maxpool([1, 3, 3], [1, 2, 2], Same),
                conv([1, 1, 1], [1, 1, 1], Same, 12),
            ],
            block_a_repeats: 1,
            block_a_branch0: vec![4],
            block_a_branch1: vec![4, 4],
            block_a_branch2: vec![4, 4, 4],
            reduction_a_conv: vec![8],
            reduction_a_tower: vec![4, 4, 8],
            block_b_repeats: 1,
            block_b_branch0: vec![8],
            block_b_branch1: vec![8, 8, 8],
            reduction_b_tower0: vec![8, 8],
            reduction_b_tower1: vec![8, 8],
            reduction_b_tower2: vec![8, 8, 8],
            block_c_repeats: 1,
            block_c_branch0: vec![8],
            block_c_branch1: vec![8, 8, 8],
            head_pool: [1, 3, 3],
            dropout: 0.2,
            lstm_hidden: 32,
            lstm_input: LstmInput::PerTimestep,
            num_classes: 3,
            residual_scale: 0.2,
            use_landmarks: true,
            mask: MaskParams::default(),
        }
    }

    /// Smallest useful network, for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        use Padding::{Same, Valid};
        ModelConfig {
            frames: 10,
            height: 12,
            width: 12,
            channels: 1,
            stem: vec![
                conv([3, 3, 3], [1, 1, 1], Valid, 2),
                maxpool([1, 2, 2], [1, 1, 1], Same),
            ],
            block_a_repeats: 1,
            block_a_branch0: vec![1],
            block_a_branch1: vec![1, 1],
            block_a_branch2: vec![1, 1, 1],
            reduction_a_conv: vec![2],
            reduction_a_tower: vec![1, 1, 2],
            block_b_repeats: 1,
            block_b_branch0: vec![1],
            block_b_branch1: vec![1, 1, 1],
            reduction_b_tower0: vec![1, 1],
            reduction_b_tower1: vec![1, 1],
            reduction_b_tower2: vec![1, 1, 1],
            block_c_repeats: 1,
            block_c_branch0: vec![1],
            block_c_branch1: vec![1, 1, 1],
            head_pool: [1, 1, 1],
            dropout: 0.0,
            lstm_hidden: 3,
            lstm_input: LstmInput::PerTimestep,
            num_classes: 3,
            residual_scale: 1.0,
            use_landmarks: true,
            mask: MaskParams {
                window: 3,
                ..MaskParams::default()
            },
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "reference" => Some(Self::reference()),
            "toy" => Some(Self::toy()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Stable 64-bit digest of the canonical text form.
    pub fn hash(&self) -> u64 {
        let mut text = String::new();
        self.write_keys(&mut text);
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn write_keys(&self, out: &mut String) {
        let list = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("input.frames", self.frames.to_string());
        kv("input.height", self.height.to_string());
        kv("input.width", self.width.to_string());
        kv("input.channels", self.channels.to_string());
        for (i, layer) in self.stem.iter().enumerate() {
            kv(&format!("stem.{i}"), format_stem(layer));
        }
        kv("block_a.repeats", self.block_a_repeats.to_string());
        kv("block_a.branch0", list(&self.block_a_branch0));
        kv("block_a.branch1", list(&self.block_a_branch1));
        kv("block_a.branch2", list(&self.block_a_branch2));
        kv("reduction_a.conv", list(&self.reduction_a_conv));
        kv("reduction_a.tower", list(&self.reduction_a_tower));
        kv("block_b.repeats", self.block_b_repeats.to_string());
        kv("block_b.branch0", list(&self.block_b_branch0));
        kv("block_b.branch1", list(&self.block_b_branch1));
        kv("reduction_b.tower0", list(&self.reduction_b_tower0));
        kv("reduction_b.tower1", list(&self.reduction_b_tower1));
        kv("reduction_b.tower2", list(&self.reduction_b_tower2));
        kv("block_c.repeats", self.block_c_repeats.to_string());
        kv("block_c.branch0", list(&self.block_c_branch0));
        kv("block_c.branch1", list(&self.block_c_branch1));
        kv("head.pool", dims(self.head_pool));
        kv("head.dropout", self.dropout.to_string());
        kv("lstm.hidden", self.lstm_hidden.to_string());
        kv(
            "lstm.input",
            match self.lstm_input {
                LstmInput::PerTimestep => "per_timestep",
                LstmInput::WholeVolume => "whole_volume",
            }
            .to_string(),
        );
        kv("classes", self.num_classes.to_string());
        kv("residual.scale", self.residual_scale.to_string());
        kv("mask.enabled", self.use_landmarks.to_string());
        kv("mask.window", self.mask.window.to_string());
        kv("mask.slope", self.mask.slope.to_string());
        kv("mask.background", self.mask.background.to_string());
    }
}

fn dims(d: [usize; 3]) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

fn format_stem(l: &StemLayer) -> String {
    let pad = match l.padding {
        Padding::Valid => "valid",
        Padding::Same => "same",
    };
    match l.kind {
        StemKind::Conv { out } => format!("conv {} {} {pad} {out}", dims(l.kernel), dims(l.stride)),
        StemKind::Pool(mode) => {
            let kind = match mode {
                PoolMode::Max => "maxpool",
                PoolMode::Average => "avgpool",
            };
            format!("{kind} {} {} {pad}", dims(l.kernel), dims(l.stride))
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        ModelConfig::preset(name).map(|model| RunConfig {
            model,
            train: TrainConfig::default(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.model.write_keys(&mut out);
        let t = &self.train;
        let _ = writeln!(out, "train.lr = {}", t.lr);
        let _ = writeln!(out, "train.momentum = {}", t.momentum);
        let _ = writeln!(out, "train.weight_decay = {}", t.weight_decay);
        let _ = writeln!(out, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(out, "train.epochs = {}", t.epochs);
        if let Some(a) = t.target_accuracy {
            let _ = writeln!(out, "train.target_accuracy = {a}");
        }
        if let Some((every, factor)) = t.lr_decay {
            let _ = writeln!(out, "train.lr_decay_every = {every}");
            let _ = writeln!(out, "train.lr_decay_factor = {factor}");
        }
        out
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses config text on top of the preset named by an optional
    /// `preset = ...` line (reference when absent).
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), "expected `key = value`")
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        let base = entries.remove("preset").unwrap_or_else(|| "reference".into());
        let mut cfg = RunConfig::preset(&base)
            .ok_or_else(|| Error::config("preset", format!("unknown preset `{base}`")))?;

        let stem_keys: Vec<String> = entries
            .keys()
            .filter(|k| k.starts_with("stem."))
            .cloned()
            .collect();
        if !stem_keys.is_empty() {
            let mut layers = Vec::new();
            for i in 0..stem_keys.len() {
                let key = format!("stem.{i}");
                let v = entries
                    .remove(&key)
                    .ok_or_else(|| Error::config(&key, "stem layers must be numbered from 0 without gaps"))?;
                layers.push(parse_stem(&key, &v)?);
            }
            cfg.model.stem = layers;
        }

        for (key, value) in entries {
            cfg.apply(&key, &value)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "input.frames" => m.frames = num(key, v)?,
            "input.height" => m.height = num(key, v)?,
            "input.width" => m.width = num(key, v)?,
            "input.channels" => m.channels = num(key, v)?,
            "block_a.repeats" => m.block_a_repeats = num(key, v)?,
            "block_a.branch0" => m.block_a_branch0 = list(key, v)?,
            "block_a.branch1" => m.block_a_branch1 = list(key, v)?,
            "block_a.branch2" => m.block_a_branch2 = list(key, v)?,
            "reduction_a.conv" => m.reduction_a_conv = list(key, v)?,
            "reduction_a.tower" => m.reduction_a_tower = list(key, v)?,
            "block_b.repeats" => m.block_b_repeats = num(key, v)?,
            "block_b.branch0" => m.block_b_branch0 = list(key, v)?,
            "block_b.branch1" => m.block_b_branch1 = list(key, v)?,
            "reduction_b.tower0" => m.reduction_b_tower0 = list(key, v)?,
            "reduction_b.tower1" => m.reduction_b_tower1 = list(key, v)?,
            "reduction_b.tower2" => m.reduction_b_tower2 = list(key, v)?,
            "block_c.repeats" => m.block_c_repeats = num(key, v)?,
            "block_c.branch0" => m.block_c_branch0 = list(key, v)?,
            "block_c.branch1" => m.block_c_branch1 = list(key, v)?,
            "head.pool" => m.head_pool = parse_dims(key, v)?,
            "head.dropout" => m.dropout = num(key, v)?,
            "lstm.hidden" => m.lstm_hidden = num(key, v)?,
            "lstm.input" => {
                m.lstm_input = match v {
                    "per_timestep" => LstmInput::PerTimestep,
                    "whole_volume" => LstmInput::WholeVolume,
                    _ => return Err(Error::config(key, format!("unknown mode `{v}`"))),
                }
            }
            "classes" => m.num_classes = num(key, v)?,
            "residual.scale" => m.residual_scale = num(key, v)?,
            "mask.enabled" => m.use_landmarks = num(key, v)?,
            "mask.window" => m.mask.window = num(key, v)?,
            "mask.slope" => m.mask.slope = num(key, v)?,
            "mask.background" => m.mask.background = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.target_accuracy" => t.target_accuracy = Some(num(key, v)?),
            "train.lr_decay_every" => {
                let every = num(key, v)?;
                let factor = t.lr_decay.map_or(0.1, |d| d.1);
                t.lr_decay = (every > 0).then_some((every, factor));
            }
            "train.lr_decay_factor" => {
                let factor = num(key, v)?;
                t.lr_decay = t.lr_decay.map(|(every, _)| (every, factor));
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }
}

fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn parse_dims(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split('x')
        .map(|p| num(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::config(key, format!("expected TxHxW, got `{v}`")))
}

fn parse_stem(key: &str, v: &str) -> Result<StemLayer> {
    let words: Vec<&str> = v.split_whitespace().collect();
    let padding = |w: &str| match w {
        "valid" => Ok(Padding::Valid),
        "same" => Ok(Padding::Same),
        _ => Err(Error::config(key, format!("unknown padding `{w}`"))),
    };
    match words.as_slice() {
        ["conv", k, s, p, out] => Ok(conv(parse_dims(key, k)?, parse_dims(key, s)?, padding(p)?, num(key, out)?)),
        [pool @ ("maxpool" | "avgpool"), k, s, p] => Ok(StemLayer {
            kind: StemKind::Pool(if *pool == "maxpool" {
                PoolMode::Max
            } else {
                PoolMode::Average
            }),
            kernel: parse_dims(key, k)?,
            stride: parse_dims(key, s)?,
            padding: padding(p)?,
        }),
        _ => Err(Error::config(key, format!("cannot parse stem layer `{v}`"))),
    }
}
