use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{self, Padding, PoolMode, WindowGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv3d {
        input: usize,
        kernel: usize,
        geom: WindowGeom,
    },
    Pool3d {
        input: usize,
        geom: WindowGeom,
        mode: PoolMode,
        aux: Vec<usize>,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Scale(usize, T),
    Sum(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Select {
        input: usize,
        axis: usize,
        index: usize,
    },
    SoftmaxXent {
        logits: usize,
        labels: Tensor<T>,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

/// Records operations in creation order; since an op can only consume
/// already-recorded values, creation order is a topological order.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(String, usize)>>,
}

/// A tensor living on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A leaf whose gradient is not reported by [`Gradients::named`].
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    /// A named trainable leaf.
    pub fn param(&self, name: &str, value: Tensor<T>) -> Var<'_, T> {
        let v = self.push(value, Op::Leaf);
        self.params.borrow_mut().push((name.to_string(), v.id));
        v
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?
            .value();
        let shape0 = first.shape().to_vec();
        if axis >= shape0.len() {
            return Err(Error::dim("concat", &shape0, &[axis]));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut out_shape = shape0.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == shape0.len()
                && s.iter()
                    .zip(&shape0)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &shape0, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = shape0[..axis].iter().product();
        let chunks: Vec<usize> = values
            .iter()
            .map(|v| v.shape()[axis..].iter().product())
            .collect();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (v, &c) in values.iter().zip(&chunks) {
                data.extend_from_slice(&v.data()[o * c..(o + 1) * c]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            let mut contributions: Vec<(usize, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sa = val(*a).shape();
                    let mut gb = kernels::reduce_to(g.data(), sa, val(*b).shape(), None);
                    if matches!(node.op, Op::Sub(..)) {
                        gb = gb.map(|v| -v);
                    }
                    contributions.push((*b, gb));
                    contributions.push((*a, g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let gb = kernels::reduce_to(g.data(), va.shape(), vb.shape(), Some(va.data()));
                    let ga = kernels::broadcast_binary(&g, vb, |x, y| x * y)?;
                    contributions.push((*a, ga));
                    contributions.push((*b, gb));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = kernels::matmul(&g, &kernels::transpose(vb)?)?;
                    let gb = kernels::matmul(&kernels::transpose(va)?, &g)?;
                    contributions.push((*a, ga));
                    contributions.push((*b, gb));
                }
                Op::Transpose(a) => contributions.push((*a, kernels::transpose(&g)?)),
                Op::Conv3d {
                    input,
                    kernel,
                    geom,
                } => {
                    let (gx, gk) = kernels::conv3d_backward(val(*input), val(*kernel), geom, &g);
                    contributions.push((*input, gx));
                    contributions.push((*kernel, gk));
                }
                Op::Pool3d {
                    input,
                    geom,
                    mode,
                    aux,
                } => {
                    let gx = kernels::pool3d_backward(val(*input).shape(), geom, *mode, aux, &g);
                    contributions.push((*input, gx));
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                        .collect();
                    contributions.push((*a, Tensor::new(g.shape(), data)?));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    contributions.push((*a, Tensor::new(g.shape(), data)?));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect();
                    contributions.push((*a, Tensor::new(g.shape(), data)?));
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    contributions.push((*a, g.map(|v| v * s)));
                }
                Op::Sum(a) => {
                    contributions.push((*a, Tensor::full(val(*a).shape(), g.item())));
                }
                Op::Reshape(a) => contributions.push((*a, g.reshape(val(*a).shape())?)),
                Op::Concat { inputs, axis } => {
                    let out_shape = node.value.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let total: usize = out_shape[*axis..].iter().product();
                    let mut offset = 0;
                    for &inp in inputs {
                        let s = val(inp).shape();
                        let c: usize = s[*axis..].iter().product();
                        let mut part = Vec::with_capacity(outer * c);
                        for o in 0..outer {
                            let start = o * total + offset;
                            part.extend_from_slice(&g.data()[start..start + c]);
                        }
                        offset += c;
                        contributions.push((inp, Tensor::new(s, part)?));
                    }
                }
                Op::Select { input, axis, index } => {
                    let s = val(*input).shape();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[*axis + 1..].iter().product();
                    let n = s[*axis];
                    let mut gx = Tensor::zeros(s);
                    let gxd = gx.data_mut();
                    for o in 0..outer {
                        let dst = (o * n + index) * inner;
                        gxd[dst..dst + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                    contributions.push((*input, gx));
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let batch = T::from_f64(probs.shape()[0] as f64);
                    let scale = g.item() / batch;
                    let data = probs
                        .data()
                        .iter()
                        .zip(labels.data())
                        .map(|(&p, &y)| (p - y) * scale)
                        .collect();
                    contributions.push((*logits, Tensor::new(probs.shape(), data)?));
                }
            }
            for (target, contrib) in contributions {
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, &c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.borrow().clone(),
        })
    }
}

/// Result of [`Tape::backward`]. Leaves that the loss does not depend on
/// report zero gradients.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, usize)>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.by_id(var.id)
    }

    fn by_id(&self, id: usize) -> Tensor<T> {
        self.grads[id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }

    /// Gradients of every [`Tape::param`] leaf, keyed by name.
    pub fn named(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, id)| (name.clone(), self.by_id(*id)))
            .collect()
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn binary(self, other: Var<'t, T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        kernels::broadcast_binary(&self.value(), &other.value(), f)
    }

    /// Elementwise sum; `other` may broadcast over singleton extents.
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        let out = self.binary(other, |a, b| a + b)?;
        Ok(self.tape.push(out, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        let out = self.binary(other, |a, b| a - b)?;
        Ok(self.tape.push(out, Op::Sub(self.id, other.id)))
    }

    /// Hadamard product; `other` may broadcast over singleton extents.
    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        let out = self.binary(other, |a, b| a * b)?;
        Ok(self.tape.push(out, Op::Mul(self.id, other.id)))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        let out = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Self> {
        let out = kernels::transpose(&self.value())?;
        Ok(self.tape.push(out, Op::Transpose(self.id)))
    }

    /// Cross-correlation of `[B,T,H,W,Cin]` (or unbatched `[T,H,W,Cin]`)
    /// with a `[kT,kH,kW,Cin,Cout]` kernel.
    pub fn conv3d(self, kernel: Var<'t, T>, stride: [usize; 3], padding: Padding) -> Result<Self> {
        let shape = self.shape();
        if shape.len() == 4 {
            let mut batched = vec![1];
            batched.extend_from_slice(&shape);
            let y = self.reshape(&batched)?.conv3d(kernel, stride, padding)?;
            let ys = y.shape();
            return y.reshape(&ys[1..]);
        }
        let x = self.value();
        let k = kernel.value();
        let geom = kernels::conv3d_geometry(x.shape(), k.shape(), stride, padding)?;
        let out = kernels::conv3d_forward(&x, &k, &geom);
        Ok(self.tape.push(
            out,
            Op::Conv3d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
        ))
    }

    pub fn pool3d(
        self,
        window: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
        mode: PoolMode,
    ) -> Result<Self> {
        let shape = self.shape();
        if shape.len() == 4 {
            let mut batched = vec![1];
            batched.extend_from_slice(&shape);
            let y = self.reshape(&batched)?.pool3d(window, stride, padding, mode)?;
            let ys = y.shape();
            return y.reshape(&ys[1..]);
        }
        let x = self.value();
        let geom = WindowGeom::new("pool3d", x.shape(), window, stride, padding)?;
        let (out, aux) = kernels::pool3d_forward(&x, &geom, mode);
        Ok(self.tape.push(
            out,
            Op::Pool3d {
                input: self.id,
                geom,
                mode,
                aux,
            },
        ))
    }

    /// Subgradient 0 at the origin.
    pub fn relu(self) -> Self {
        let out = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.push(out, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Self {
        let out = self.value().map(sigmoid);
        self.tape.push(out, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Self {
        let out = self.value().map(|v| v.tanh());
        self.tape.push(out, Op::Tanh(self.id))
    }

    pub fn scale(self, s: T) -> Self {
        let out = self.value().map(|v| v * s);
        self.tape.push(out, Op::Scale(self.id, s))
    }

    pub fn sum(self) -> Self {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    /// Drops `axis`, keeping slice `index`.
    pub fn select(self, axis: usize, index: usize) -> Result<Self> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || index >= s[axis] {
            return Err(Error::dim("select", s, &[axis, index]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let src = (o * n + index) * inner;
            data.extend_from_slice(&x.data()[src..src + inner]);
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Select {
                input: self.id,
                axis,
                index,
            },
        ))
    }

    /// Mean categorical cross-entropy of row-wise softmax against one-hot
    /// `labels`, both `[batch, K]`.
    pub fn softmax_cross_entropy(self, labels: &Tensor<T>) -> Result<Self> {
        let logits = self.value();
        if logits.rank() != 2 || logits.shape() != labels.shape() {
            return Err(Error::dim("softmax_cross_entropy", logits.shape(), labels.shape()));
        }
        let k = logits.shape()[1];
        for row in labels.data().chunks(k) {
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || zeros != k - 1 {
                return Err(Error::contract("labels must be one-hot rows"));
            }
        }
        let probs = softmax_rows(&logits);
        let batch = logits.shape()[0];
        let mut loss = T::zero();
        for (lrow, yrow) in logits.data().chunks(k).zip(labels.data().chunks(k)) {
            let m = lrow.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + lrow.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            let target = yrow.iter().position(|&v| v == T::one()).expect("one-hot");
            loss += lse - lrow[target];
        }
        let out = Tensor::scalar(loss / T::from_f64(batch as f64));
        Ok(self.tape.push(
            out,
            Op::SoftmaxXent {
                logits: self.id,
                labels: labels.clone(),
                probs,
            },
        ))
    }
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Row-wise softmax of a `[rows, K]` tensor with max subtraction.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.shape().last().expect("rank >= 1");
    let mut data = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        data.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(logits.shape(), data).expect("same shape")
}
