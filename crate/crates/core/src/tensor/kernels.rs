//! Tape-free numeric kernels: broadcasting, matrix product, 3D convolution
//! and 3D pooling, each with its backward counterpart.
//!
//! Nothing here allocates gradient state; [`super::Tape`] wires these into
//! the reverse pass.

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    /// Output extent `ceil(n / stride)`; total padding split evenly with the
    /// odd cell on the trailing side.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    /// Mean over the in-bounds cells of each window (padding is not counted).
    Average,
}

/// Output extent and leading pad for one spatial or temporal axis.
pub fn axis_geometry(n: usize, k: usize, s: usize, padding: Padding) -> Option<(usize, usize)> {
    if k == 0 || s == 0 {
        return None;
    }
    match padding {
        Padding::Valid => (k <= n).then(|| ((n - k) / s + 1, 0)),
        Padding::Same => {
            let out = n.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(n);
            Some((out, total / 2))
        }
    }
}

/// Resolved geometry of a windowed op over `[B, T, H, W, C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeom {
    pub batch: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub before: [usize; 3],
}

impl WindowGeom {
    pub fn new(
        op: &'static str,
        in_shape: &[usize],
        window: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        if in_shape.len() != 5 {
            return Err(Error::dim(op, in_shape, &window));
        }
        let mut output = [0; 3];
        let mut before = [0; 3];
        for ax in 0..3 {
            let (o, b) = axis_geometry(in_shape[ax + 1], window[ax], stride[ax], padding)
                .ok_or_else(|| Error::dim(op, in_shape, &window))?;
            output[ax] = o;
            before[ax] = b;
        }
        Ok(WindowGeom {
            batch: in_shape[0],
            input: [in_shape[1], in_shape[2], in_shape[3]],
            output,
            window,
            stride,
            before,
        })
    }

    /// Input coordinate along `ax` for output index `o` and window offset `k`,
    /// or `None` when it falls into padding.
    #[inline]
    fn source(&self, ax: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[ax] + k).checked_sub(self.before[ax])?;
        (pos < self.input[ax]).then_some(pos)
    }

    pub fn out_shape(&self, channels: usize) -> Vec<usize> {
        vec![
            self.batch,
            self.output[0],
            self.output[1],
            self.output[2],
            channels,
        ]
    }
}

// ---------------------------------------------------------------------------
// Broadcasting

/// How `b` maps onto the elements of `a` under right-aligned singleton
/// broadcasting.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// `b` repeats as a contiguous block of `len` elements.
    Tile { len: usize },
    /// Every element of `b` covers `rep` consecutive elements of `a`.
    Repeat { rep: usize },
    General { strides: Vec<usize> },
}

pub(crate) fn broadcast_plan(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b.len() > a.len() {
        return Err(Error::dim("broadcast", a, b));
    }
    let mut padded = vec![1; a.len() - b.len()];
    padded.extend_from_slice(b);
    for (&ea, &eb) in a.iter().zip(&padded) {
        if eb != ea && eb != 1 {
            return Err(Error::dim("broadcast", a, b));
        }
    }
    let b_numel: usize = b.iter().product();
    let first_full = padded.iter().position(|&e| e != 1).unwrap_or(a.len());
    if padded[first_full..] == a[first_full..] {
        return Ok(Broadcast::Tile { len: b_numel });
    }
    let last_full = padded.iter().rposition(|&e| e != 1).map_or(0, |p| p + 1);
    if padded[..last_full] == a[..last_full] {
        return Ok(Broadcast::Repeat {
            rep: a[last_full..].iter().product(),
        });
    }
    let mut strides = vec![0; a.len()];
    let mut acc = 1;
    for ax in (0..a.len()).rev() {
        if padded[ax] != 1 {
            strides[ax] = acc;
            acc *= padded[ax];
        }
    }
    Ok(Broadcast::General { strides })
}

/// Index of `b` for every flat index of `a`.
pub(crate) fn broadcast_indices(a: &[usize], plan: &Broadcast) -> Vec<usize> {
    let n: usize = a.iter().product();
    match plan {
        Broadcast::Same => (0..n).collect(),
        Broadcast::Tile { len } => (0..n).map(|i| i % len).collect(),
        Broadcast::Repeat { rep } => (0..n).map(|i| i / rep).collect(),
        Broadcast::General { strides } => {
            let mut out = Vec::with_capacity(n);
            let mut idx = vec![0usize; a.len()];
            let mut off = 0usize;
            for _ in 0..n {
                out.push(off);
                for ax in (0..a.len()).rev() {
                    idx[ax] += 1;
                    off += strides[ax];
                    if idx[ax] < a[ax] {
                        break;
                    }
                    off -= strides[ax] * idx[ax];
                    idx[ax] = 0;
                }
            }
            out
        }
    }
}

pub fn broadcast_binary<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let plan = broadcast_plan(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data = match plan {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Tile { len } => ad
            .chunks(len)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect::<Vec<_>>(),
        Broadcast::Repeat { rep } => ad
            .chunks(rep)
            .zip(bd)
            .flat_map(|(chunk, &y)| chunk.iter().map(move |&x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect(),
        ref general => broadcast_indices(a.shape(), general)
            .into_iter()
            .zip(ad)
            .map(|(ib, &x)| f(x, bd[ib]))
            .collect(),
    };
    Tensor::new(a.shape(), data)
}

/// Sum-reduces a gradient shaped like `a` down to `b_shape`.
pub(crate) fn reduce_to<T: Element>(
    grad: &[T],
    a_shape: &[usize],
    b_shape: &[usize],
    weight: Option<&[T]>,
) -> Tensor<T> {
    let plan = broadcast_plan(a_shape, b_shape).expect("validated in forward");
    let mut out = Tensor::zeros(b_shape);
    let od = out.data_mut();
    let w = |i: usize| weight.map_or(T::one(), |w| w[i]);
    match plan {
        Broadcast::Same => {
            for (i, (o, &g)) in od.iter_mut().zip(grad).enumerate() {
                *o = g * w(i);
            }
        }
        Broadcast::Tile { len } => {
            for (i, &g) in grad.iter().enumerate() {
                od[i % len] += g * w(i);
            }
        }
        Broadcast::Repeat { rep } => {
            for (i, &g) in grad.iter().enumerate() {
                od[i / rep] += g * w(i);
            }
        }
        ref general => {
            for (i, ib) in broadcast_indices(a_shape, general).into_iter().enumerate() {
                od[ib] += grad[i] * w(i);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Matrix product

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::dim("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::dim("transpose", s, &[2]));
    }
    let (m, n) = (s[0], s[1]);
    let d = a.data();
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(d[i * n + j]);
        }
    }
    Tensor::new(&[n, m], out)
}

// ---------------------------------------------------------------------------
// 3D convolution (cross-correlation)

pub fn conv3d_geometry(
    in_shape: &[usize],
    kernel_shape: &[usize],
    stride: [usize; 3],
    padding: Padding,
) -> Result<WindowGeom> {
    if kernel_shape.len() != 5 || in_shape.len() != 5 || kernel_shape[3] != in_shape[4] {
        return Err(Error::dim("conv3d", in_shape, kernel_shape));
    }
    WindowGeom::new(
        "conv3d",
        in_shape,
        [kernel_shape[0], kernel_shape[1], kernel_shape[2]],
        stride,
        padding,
    )
    .map_err(|_| Error::dim("conv3d", in_shape, kernel_shape))
}

/// Visits every (output cell, kernel tap, input cell) triple of a windowed op.
/// Offsets are in cells, i.e. still to be multiplied by the channel count.
#[inline]
fn for_each_tap(g: &WindowGeom, mut f: impl FnMut(usize, usize, usize)) {
    let [ot, oh, ow] = g.output;
    let [kt, kh, kw] = g.window;
    let [it, ih, iw] = g.input;
    for b in 0..g.batch {
        for t in 0..ot {
            for h in 0..oh {
                for w in 0..ow {
                    let out_cell = ((b * ot + t) * oh + h) * ow + w;
                    for dt in 0..kt {
                        let Some(st) = g.source(0, t, dt) else { continue };
                        for dh in 0..kh {
                            let Some(sh) = g.source(1, h, dh) else { continue };
                            for dw in 0..kw {
                                let Some(sw) = g.source(2, w, dw) else { continue };
                                let in_cell = ((b * it + st) * ih + sh) * iw + sw;
                                let tap = (dt * kh + dh) * kw + dw;
                                f(out_cell, tap, in_cell);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &WindowGeom,
) -> Tensor<T> {
    let cin = input.shape()[4];
    let cout = kernel.shape()[4];
    let mut out = Tensor::zeros(&geom.out_shape(cout));
    let (x, k) = (input.data(), kernel.data());
    let od = out.data_mut();
    for_each_tap(geom, |oc, tap, ic| {
        let xs = &x[ic * cin..(ic + 1) * cin];
        let ks = &k[tap * cin * cout..(tap + 1) * cin * cout];
        let os = &mut od[oc * cout..(oc + 1) * cout];
        for (ci, &xv) in xs.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            for (o, &kv) in os.iter_mut().zip(&ks[ci * cout..(ci + 1) * cout]) {
                *o += xv * kv;
            }
        }
    });
    out
}

/// Returns `(d input, d kernel)`.
pub fn conv3d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &WindowGeom,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let cin = input.shape()[4];
    let cout = kernel.shape()[4];
    let mut gx = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let (x, k, gy) = (input.data(), kernel.data(), grad_out.data());
    let (gxd, gkd) = (gx.data_mut(), gk.data_mut());
    for_each_tap(geom, |oc, tap, ic| {
        let dy = &gy[oc * cout..(oc + 1) * cout];
        let xs = &x[ic * cin..(ic + 1) * cin];
        let base = tap * cin * cout;
        for ci in 0..cin {
            let krow = &k[base + ci * cout..base + (ci + 1) * cout];
            let mut acc = T::zero();
            for (&kv, &d) in krow.iter().zip(dy) {
                acc += kv * d;
            }
            gxd[ic * cin + ci] += acc;
            let xv = xs[ci];
            if xv != T::zero() {
                let grow = &mut gkd[base + ci * cout..base + (ci + 1) * cout];
                for (g, &d) in grow.iter_mut().zip(dy) {
                    *g += xv * d;
                }
            }
        }
    });
    (gx, gk)
}

// ---------------------------------------------------------------------------
// 3D pooling

/// Pooled output plus, for max pooling, the flat input index of each
/// output's winner (first maximum in scan order).
pub fn pool3d_forward<T: Element>(
    input: &Tensor<T>,
    geom: &WindowGeom,
    mode: PoolMode,
) -> (Tensor<T>, Vec<usize>) {
    let c = input.shape()[4];
    let out_cells = geom.batch * geom.output.iter().product::<usize>();
    let x = input.data();
    let mut out = vec![T::zero(); out_cells * c];
    match mode {
        PoolMode::Max => {
            let mut arg = vec![usize::MAX; out_cells * c];
            for_each_tap(geom, |oc, _, ic| {
                for ch in 0..c {
                    let (o, i) = (oc * c + ch, ic * c + ch);
                    if arg[o] == usize::MAX || x[i] > out[o] {
                        out[o] = x[i];
                        arg[o] = i;
                    }
                }
            });
            (Tensor::new(&geom.out_shape(c), out).expect("shape"), arg)
        }
        PoolMode::Average => {
            let mut count = vec![0usize; out_cells];
            for_each_tap(geom, |oc, _, ic| {
                count[oc] += 1;
                for ch in 0..c {
                    out[oc * c + ch] += x[ic * c + ch];
                }
            });
            for (oc, &n) in count.iter().enumerate() {
                let inv = T::one() / T::from_f64(n as f64);
                for v in &mut out[oc * c..(oc + 1) * c] {
                    *v *= inv;
                }
            }
            (Tensor::new(&geom.out_shape(c), out).expect("shape"), count)
        }
    }
}

/// `aux` is the argmax table (max) or per-cell tap counts (average)
/// returned by [`pool3d_forward`].
pub fn pool3d_backward<T: Element>(
    in_shape: &[usize],
    geom: &WindowGeom,
    mode: PoolMode,
    aux: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let c = in_shape[4];
    let mut gx = Tensor::zeros(in_shape);
    let gxd = gx.data_mut();
    let gy = grad_out.data();
    match mode {
        PoolMode::Max => {
            for (o, &i) in aux.iter().enumerate() {
                gxd[i] += gy[o];
            }
        }
        PoolMode::Average => {
            for_each_tap(geom, |oc, _, ic| {
                let inv = T::one() / T::from_f64(aux[oc] as f64);
                for ch in 0..c {
                    gxd[ic * c + ch] += gy[oc * c + ch] * inv;
                }
            });
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        assert_eq!(axis_geometry(149, 3, 2, Padding::Same), Some((75, 1)));
        assert_eq!(axis_geometry(75, 3, 2, Padding::Same), Some((38, 1)));
        // even total: one before, one after; odd total: extra after
        assert_eq!(axis_geometry(10, 3, 1, Padding::Same), Some((10, 1)));
        assert_eq!(axis_geometry(10, 4, 1, Padding::Same), Some((10, 1)));
        assert_eq!(axis_geometry(299, 3, 2, Padding::Valid), Some((149, 0)));
        assert_eq!(axis_geometry(2, 3, 1, Padding::Valid), None);
    }

    #[test]
    fn broadcast_plans() {
        assert!(matches!(
            broadcast_plan(&[2, 3], &[3]).unwrap(),
            Broadcast::Tile { len: 3 }
        ));
        assert!(matches!(
            broadcast_plan(&[2, 4, 3], &[2, 4, 1]).unwrap(),
            Broadcast::Repeat { rep: 3 }
        ));
        assert!(matches!(
            broadcast_plan(&[2, 4, 3], &[2, 1, 3]).unwrap(),
            Broadcast::General { .. }
        ));
        assert!(broadcast_plan(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn general_broadcast_indices_match_definition() {
        let a = [2, 3, 4];
        let plan = broadcast_plan(&a, &[2, 1, 4]).unwrap();
        let idx = broadcast_indices(&a, &plan);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(idx[(i * 3 + j) * 4 + k], i * 4 + k);
                }
            }
        }
    }

    #[test]
    fn max_pool_first_index_tie_break() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2, 1], &[5., 5., 1., 5.]).unwrap();
        let g = WindowGeom::new("pool", x.shape(), [1, 2, 2], [1, 1, 1], Padding::Valid).unwrap();
        let (y, arg) = pool3d_forward(&x, &g, PoolMode::Max);
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg, vec![0]);
    }
}
