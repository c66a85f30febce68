//! Composite building blocks: convolution units, masked-shortcut residual
//! blocks, reduction blocks, LSTM, dropout and the dense head.
//!
//! Every block knows the names and shapes of its parameters, can propagate
//! a `[T, H, W, C]` feature shape symbolically, and can run itself on a
//! [`Tape`] given the registered parameter variables.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Padding, PoolMode, Tape, Tensor, Var};

/// Per-sample feature shape `[T, H, W, C]`.
pub type FeatureShape = [usize; 4];

/// Parameter variables registered on one tape, by hierarchical name.
pub type ParamVars<'t, T> = BTreeMap<String, Var<'t, T>>;

fn lookup<'t, T: Element>(params: &ParamVars<'t, T>, name: &str) -> Result<Var<'t, T>> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<'t, T: Element>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How a parameter should be initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal (±2σ) with σ = sqrt(2 / fan_in).
    HeTruncated { fan_in: usize },
    Uniform { limit: f64 },
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// 3D convolution with bias and optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: Padding,
    pub cin: usize,
    pub cout: usize,
    pub activation: Activation,
}

impl ConvUnit {
    pub fn new(
        name: impl Into<String>,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
        cin: usize,
        cout: usize,
    ) -> Self {
        ConvUnit {
            name: name.into(),
            kernel,
            stride,
            padding,
            cin,
            cout,
            activation: Activation::Relu,
        }
    }

    pub fn linear(mut self) -> Self {
        self.activation = Activation::Identity;
        self
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        let [kt, kh, kw] = self.kernel;
        vec![
            ParamSpec {
                name: format!("{}.kernel", self.name),
                shape: vec![kt, kh, kw, self.cin, self.cout],
                init: Init::HeTruncated {
                    fan_in: kt * kh * kw * self.cin,
                },
            },
            ParamSpec {
                name: format!("{}.bias", self.name),
                shape: vec![self.cout],
                init: Init::Constant(0.0),
            },
        ]
    }

    pub fn out_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        if input[3] != self.cin {
            return Err(Error::config(
                &self.name,
                format!("expects {} input channels, got {}", self.cin, input[3]),
            ));
        }
        let mut out = [0, 0, 0, self.cout];
        for ax in 0..3 {
            out[ax] = kernels::axis_geometry(input[ax], self.kernel[ax], self.stride[ax], self.padding)
                .ok_or_else(|| {
                    Error::config(
                        &self.name,
                        format!("kernel {:?} does not fit input {:?}", self.kernel, input),
                    )
                })?
                .0;
        }
        Ok(out)
    }

    pub fn forward<'t, T: Element>(&self, params: &ParamVars<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let k = lookup(params, &format!("{}.kernel", self.name))?;
        let b = lookup(params, &format!("{}.bias", self.name))?;
        let y = x.conv3d(k, self.stride, self.padding)?.add(b)?;
        Ok(self.activation.apply(y))
    }
}

/// Builds a chain of convolution units named `{prefix}.{i}` from kernel
/// templates and widths.
fn conv_chain(
    prefix: &str,
    cin: usize,
    templates: &[([usize; 3], [usize; 3], Padding)],
    widths: &[usize],
) -> Result<Vec<ConvUnit>> {
    if templates.len() != widths.len() {
        return Err(Error::config(
            prefix,
            format!("expects {} widths, got {}", templates.len(), widths.len()),
        ));
    }
    if let Some(i) = widths.iter().position(|&w| w == 0) {
        return Err(Error::config(format!("{prefix}.{i}"), "width must be positive"));
    }
    let mut c = cin;
    Ok(templates
        .iter()
        .zip(widths)
        .enumerate()
        .map(|(i, (&(k, s, p), &w))| {
            let unit = ConvUnit::new(format!("{prefix}.{i}"), k, s, p, c, w);
            c = w;
            unit
        })
        .collect())
}

fn chain_out(chain: &[ConvUnit], input: FeatureShape) -> Result<FeatureShape> {
    chain.iter().try_fold(input, |s, u| u.out_shape(s))
}

fn chain_forward<'t, T: Element>(
    chain: &[ConvUnit],
    params: &ParamVars<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    chain.iter().try_fold(x, |h, u| u.forward(params, h))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockVariant {
    A,
    B,
    C,
}

const ONE: [usize; 3] = [1, 1, 1];
const SAME: Padding = Padding::Same;

impl BlockVariant {
    /// Kernel templates of each inception branch. 2D kernels are lifted to
    /// 3D with temporal extent 3 for 3×3 kernels; in factorised 1×n / n×1
    /// pairs the first factor carries the temporal extent.
    fn branch_templates(self) -> Vec<Vec<([usize; 3], [usize; 3], Padding)>> {
        match self {
            BlockVariant::A => vec![
                vec![(ONE, ONE, SAME)],
                vec![(ONE, ONE, SAME), ([3, 3, 3], ONE, SAME)],
                vec![(ONE, ONE, SAME), ([3, 3, 3], ONE, SAME), ([3, 3, 3], ONE, SAME)],
            ],
            BlockVariant::B => vec![
                vec![(ONE, ONE, SAME)],
                vec![(ONE, ONE, SAME), ([3, 1, 7], ONE, SAME), ([1, 7, 1], ONE, SAME)],
            ],
            BlockVariant::C => vec![
                vec![(ONE, ONE, SAME)],
                vec![(ONE, ONE, SAME), ([3, 1, 3], ONE, SAME), ([1, 3, 1], ONE, SAME)],
            ],
        }
    }
}

/// Inception-ResNet block with a Hadamard-weighted shortcut:
/// `out = f(mask ∘ x + scale · proj(concat(branches(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub name: String,
    pub channels: usize,
    pub branches: Vec<Vec<ConvUnit>>,
    /// Linear 1×1×1 projection back to `channels`.
    pub projection: ConvUnit,
    pub scale: f64,
    pub activation: Activation,
}

impl ResidualBlock {
    pub fn new(
        name: impl Into<String>,
        variant: BlockVariant,
        channels: usize,
        widths: &[&[usize]],
        scale: f64,
    ) -> Result<Self> {
        let name = name.into();
        let templates = variant.branch_templates();
        if widths.len() != templates.len() {
            return Err(Error::config(&name, "wrong number of branches"));
        }
        let branches = templates
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (t, w))| conv_chain(&format!("{name}.branch{i}"), channels, t, w))
            .collect::<Result<Vec<_>>>()?;
        let concat: usize = branches.iter().map(|b| b.last().expect("non-empty").cout).sum();
        let projection = ConvUnit::new(format!("{name}.proj"), ONE, ONE, SAME, concat, channels).linear();
        Ok(ResidualBlock {
            name,
            channels,
            branches,
            projection,
            scale,
            activation: Activation::Relu,
        })
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        self.branches
            .iter()
            .flatten()
            .chain(std::iter::once(&self.projection))
            .flat_map(ConvUnit::params)
            .collect()
    }

    pub fn out_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        let mut concat = 0;
        for b in &self.branches {
            let s = chain_out(b, input)?;
            if s[..3] != input[..3] {
                return Err(Error::config(&self.name, "branch changes the feature extent"));
            }
            concat += s[3];
        }
        let out = self.projection.out_shape([input[0], input[1], input[2], concat])?;
        if out != input {
            return Err(Error::config(&self.name, "residual sum shape mismatch"));
        }
        Ok(out)
    }

    /// Residual branch `scale · F(x)`.
    fn residual<'t, T: Element>(&self, params: &ParamVars<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let outs = self
            .branches
            .iter()
            .map(|b| chain_forward(b, params, x))
            .collect::<Result<Vec<_>>>()?;
        let last_axis = x.shape().len() - 1;
        let cat = x.tape().concat(&outs, last_axis)?;
        let f = self.projection.forward(params, cat)?;
        Ok(if self.scale == 1.0 {
            f
        } else {
            f.scale(T::from_f64(self.scale))
        })
    }

    /// Masked shortcut. `mask` must match `x` in every extent but channels,
    /// which must be 1.
    pub fn forward<'t, T: Element>(
        &self,
        params: &ParamVars<'t, T>,
        x: Var<'t, T>,
        mask: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (xs, ms) = (x.shape(), mask.shape());
        let rank = xs.len();
        if ms.len() != rank || ms[..rank - 1] != xs[..rank - 1] || ms[rank - 1] != 1 {
            return Err(Error::dim("landmark_residual_block", &xs, &ms));
        }
        let shortcut = x.mul(mask)?;
        let y = shortcut.add(self.residual(params, x)?)?;
        Ok(self.activation.apply(y))
    }

    /// Identity shortcut `f(x + F(x))`.
    pub fn forward_plain<'t, T: Element>(&self, params: &ParamVars<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.add(self.residual(params, x)?)?;
        Ok(self.activation.apply(y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReductionVariant {
    A,
    B,
}

const REDUCE: [usize; 3] = [1, 2, 2];

/// Strided max-pool branch concatenated with strided convolution towers.
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionBlock {
    pub name: String,
    pub pool_window: [usize; 3],
    pub towers: Vec<Vec<ConvUnit>>,
}

impl ReductionBlock {
    pub fn new(name: impl Into<String>, variant: ReductionVariant, cin: usize, widths: &[&[usize]]) -> Result<Self> {
        let name = name.into();
        let valid = Padding::Valid;
        let down = ([3, 3, 3], REDUCE, valid);
        let templates: Vec<Vec<_>> = match variant {
            ReductionVariant::A => vec![
                vec![down],
                vec![(ONE, ONE, SAME), ([3, 3, 3], ONE, SAME), down],
            ],
            ReductionVariant::B => vec![
                vec![(ONE, ONE, SAME), down],
                vec![(ONE, ONE, SAME), down],
                vec![(ONE, ONE, SAME), ([3, 3, 3], ONE, SAME), down],
            ],
        };
        if widths.len() != templates.len() {
            return Err(Error::config(&name, "wrong number of towers"));
        }
        let towers = templates
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (t, w))| conv_chain(&format!("{name}.tower{i}"), cin, t, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReductionBlock {
            name,
            pool_window: [3, 3, 3],
            towers,
        })
    }

    pub fn params(&self) -> Vec<ParamSpec> {
        self.towers.iter().flatten().flat_map(ConvUnit::params).collect()
    }

    pub fn out_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        let mut out = [0; 4];
        for ax in 0..3 {
            out[ax] = kernels::axis_geometry(input[ax], self.pool_window[ax], REDUCE[ax], Padding::Valid)
                .ok_or_else(|| Error::config(&self.name, format!("input {input:?} too small to reduce")))?
                .0;
        }
        out[3] = input[3];
        for t in &self.towers {
            let s = chain_out(t, input)?;
            if s[..3] != out[..3] {
                return Err(Error::config(&self.name, "tower extent differs from pool branch"));
            }
            out[3] += s[3];
        }
        Ok(out)
    }

    pub fn forward<'t, T: Element>(&self, params: &ParamVars<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut parts = vec![x.pool3d(self.pool_window, REDUCE, Padding::Valid, PoolMode::Max)?];
        for t in &self.towers {
            parts.push(chain_forward(t, params, x)?);
        }
        let last_axis = x.shape().len() - 1;
        x.tape().concat(&parts, last_axis)
    }
}

/// Single-layer LSTM over the concatenation `[h_{t-1}, x_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

pub const LSTM_GATES: [&str; 4] = ["f", "i", "o", "c"];

/// Gate activations of one LSTM step, kept for inspection.
pub struct LstmStep<'t, T: Element> {
    pub h: Var<'t, T>,
    pub c: Var<'t, T>,
    pub forget: Var<'t, T>,
    pub input: Var<'t, T>,
    pub output: Var<'t, T>,
    pub candidate: Var<'t, T>,
}

impl Lstm {
    pub fn params(&self) -> Vec<ParamSpec> {
        let limit = (1.0 / self.hidden as f64).sqrt();
        let mut out = Vec::new();
        for g in LSTM_GATES {
            out.push(ParamSpec {
                name: format!("{}.w_{g}", self.name),
                shape: vec![self.hidden, self.hidden + self.input],
                init: Init::Uniform { limit },
            });
            out.push(ParamSpec {
                name: format!("{}.b_{g}", self.name),
                shape: vec![self.hidden],
                init: Init::Constant(if g == "f" { 1.0 } else { 0.0 }),
            });
        }
        out
    }

    /// One step on `x_t: [batch, input]`, `h, c: [batch, hidden]`.
    pub fn step<'t, T: Element>(
        &self,
        params: &ParamVars<'t, T>,
        x_t: Var<'t, T>,
        h_prev: Var<'t, T>,
        c_prev: Var<'t, T>,
    ) -> Result<LstmStep<'t, T>> {
        let (xs, hs, cs) = (x_t.shape(), h_prev.shape(), c_prev.shape());
        if xs.len() != 2 || xs[1] != self.input || hs != [xs[0], self.hidden] || cs != hs {
            return Err(Error::dim("lstm_cell_step", &xs, &hs));
        }
        let z = x_t.tape().concat(&[h_prev, x_t], 1)?;
        let affine = |g: &str| -> Result<Var<'t, T>> {
            let w = lookup(params, &format!("{}.w_{g}", self.name))?;
            let b = lookup(params, &format!("{}.b_{g}", self.name))?;
            z.matmul(w.transpose()?)?.add(b)
        };
        let forget = affine("f")?.sigmoid();
        let input = affine("i")?.sigmoid();
        let output = affine("o")?.sigmoid();
        let candidate = affine("c")?.tanh();
        let c = forget.mul(c_prev)?.add(input.mul(candidate)?)?;
        let h = output.mul(c.tanh())?;
        Ok(LstmStep {
            h,
            c,
            forget,
            input,
            output,
            candidate,
        })
    }

    /// Folds [`Lstm::step`] over `x: [batch, T, input]` from zero state and
    /// returns the final hidden state.
    pub fn sequence<'t, T: Element>(&self, params: &ParamVars<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.input {
            return Err(Error::dim("lstm_sequence", &s, &[self.input]));
        }
        if s[1] == 0 {
            return Err(Error::contract("lstm_sequence needs at least one step"));
        }
        let tape = x.tape();
        let mut h = tape.constant(Tensor::zeros(&[s[0], self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[s[0], self.hidden]));
        for t in 0..s[1] {
            let step = self.step(params, x.select(1, t)?, h, c)?;
            h = step.h;
            c = step.c;
        }
        Ok(h)
    }
}

/// Affine map `x · W + b` with `W: [input, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn params(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: format!("{}.weight", self.name),
                shape: vec![self.input, self.output],
                init: Init::HeTruncated { fan_in: self.input },
            },
            ParamSpec {
                name: format!("{}.bias", self.name),
                shape: vec![self.output],
                init: Init::Constant(0.0),
            },
        ]
    }

    pub fn forward<'t, T: Element>(&self, params: &ParamVars<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = lookup(params, &format!("{}.weight", self.name))?;
        let b = lookup(params, &format!("{}.bias", self.name))?;
        fully_connected(x, w, b)
    }
}

pub fn fully_connected<'t, T: Element>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (ws, bs) = (w.shape(), b.shape());
    if bs.len() != 1 || ws.len() != 2 || ws[1] != bs[0] {
        return Err(Error::dim("fully_connected", &ws, &bs));
    }
    x.matmul(w)?.add(b)
}

/// Inverted dropout: in training, zero each element with probability `rate`
/// and scale survivors by `1 / (1 - rate)`; identity in evaluation.
pub fn dropout<'t, T: Element, R: Rng + ?Sized>(
    x: Var<'t, T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'t, T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mask = x.tape().constant(Tensor::new(&shape, mask)?);
    x.mul(mask)
}

/// Registers every tensor of `values` as a named parameter on `tape`.
pub fn register<'t, T: Element>(tape: &'t Tape<T>, values: &BTreeMap<String, Tensor<T>>) -> ParamVars<'t, T> {
    values
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(k, v.clone())))
        .collect()
}
