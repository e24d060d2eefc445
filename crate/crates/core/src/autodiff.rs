//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every forward op appends a node holding its value and, when any input
//! requires a gradient, a closure mapping the output gradient to input
//! gradients. [`Tape::backward`] replays the tape in reverse.

use std::sync::Arc;

use crate::error::{Result, SimvaError};
use crate::tensor::{increment, split_at_axis, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps `(grad of output, parent values, output value)` to one optional
/// gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + Send>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Sentinel in gather index tables meaning "emit zero" (used for padding).
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not
    /// influence the loss through differentiable ops.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as fixed input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(SimvaError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = backward(g, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            // Interior gradients are no longer needed once propagated.
            if !node.parents.is_empty() {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    // ----------------------------------------------------------------
    // Elementwise binary ops with right-aligned broadcasting.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shapes(va.shape(), vb.shape())?;
        let value = broadcast_apply(va, vb, &out_shape, |x, y| x + y);
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|g, p, _| vec![Some(reduce_to(g, p[0].shape())), Some(reduce_to(g, p[1].shape()))]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shapes(va.shape(), vb.shape())?;
        let value = broadcast_apply(va, vb, &out_shape, |x, y| x - y);
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|g, p, _| {
                vec![
                    Some(reduce_to(g, p[0].shape())),
                    Some(reduce_to(&g.map(|x| -x), p[1].shape())),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shapes(va.shape(), vb.shape())?;
        let value = broadcast_apply(va, vb, &out_shape, |x, y| x * y);
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|g, p, _| {
                let ga = broadcast_apply(g, p[1], g.shape(), |g, y| g * y);
                let gb = broadcast_apply(g, p[0], g.shape(), |g, x| g * x);
                vec![Some(reduce_to(&ga, p[0].shape())), Some(reduce_to(&gb, p[1].shape()))]
            }),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shapes(va.shape(), vb.shape())?;
        let value = broadcast_apply(va, vb, &out_shape, |x, y| x / y);
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|g, p, out| {
                let t = broadcast_apply(g, p[1], g.shape(), |g, y| g / y);
                let gb = t.zip_map(out, |t, o| -t * o);
                vec![Some(reduce_to(&t, p[0].shape())), Some(reduce_to(&gb, p[1].shape()))]
            }),
        ))
    }

    // ----------------------------------------------------------------
    // Elementwise unary ops.

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + 'static,
    ) -> Var {
        let value = self.value(a).map(f);
        self.push(
            value,
            vec![a],
            Box::new(move |g, p, out| {
                let x = p[0].data();
                let y = out.data();
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * df(x[i], y[i]))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const K: f64 = 0.044_715;
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()),
            |x, _| {
                let th = (C * (x + K * x * x * x)).tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * K * x * x)
            },
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn powf(&mut self, a: Var, e: f64) -> Var {
        self.unary(a, move |x| x.powf(e), move |x, _| e * x.powf(e - 1.0))
    }

    // ----------------------------------------------------------------
    // Shape ops.

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(
            value,
            vec![a],
            Box::new(|g, p, _| {
                vec![Some(g.clone().reshape(p[0].shape().to_vec()).expect("same size"))]
            }),
        ))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut seen = vec![false; v.ndim()];
        if axes.len() != v.ndim() || axes.iter().any(|&x| x >= seen.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(SimvaError::shape(format!(
                "invalid permutation {:?} for rank {}",
                axes,
                v.ndim()
            )));
        }
        let value = v.permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &x) in axes.iter().enumerate() {
            inverse[x] = i;
        }
        Ok(self.push(value, vec![a], Box::new(move |g, _, _| vec![Some(g.permute(&inverse))])))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.ndim() || start + len > v.shape()[axis] {
            return Err(SimvaError::shape(format!(
                "narrow {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let value = v.narrow(axis, start, len);
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g, p, _| {
                let shape = p[0].shape();
                let (outer, n, inner) = split_at_axis(shape, axis);
                let mut out = Tensor::zeros(shape.to_vec());
                let od = out.data_mut();
                let gd = g.data();
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    od[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                vec![Some(out)]
            }),
        ))
    }

    /// `out.flat[i] = a.flat[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<u32>>, out_shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let n: usize = out_shape.iter().product();
        if index.len() != n {
            return Err(SimvaError::shape(format!(
                "gather index has {} entries for output shape {:?}",
                index.len(),
                out_shape
            )));
        }
        let src = v.data();
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i as usize >= src.len()) {
            return Err(SimvaError::shape(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        let value = Tensor::new(out_shape.to_vec(), data)?;
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g, p, _| {
                let mut out = Tensor::zeros(p[0].shape().to_vec());
                let od = out.data_mut();
                for (&i, &gv) in index.iter().zip(g.data()) {
                    if i != GATHER_ZERO {
                        od[i as usize] += gv;
                    }
                }
                vec![Some(out)]
            }),
        ))
    }

    // ----------------------------------------------------------------
    // Reductions.

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.ndim() {
            return Err(SimvaError::shape(format!("axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, n, inner) = split_at_axis(v.shape(), axis);
        let src = v.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut out = Tensor::zeros(p[0].shape().to_vec());
                let od = out.data_mut();
                for o in 0..outer {
                    for k in 0..n {
                        od[(o * n + k) * inner..(o * n + k + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(out)]
            }),
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            vec![a],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape().to_vec(), g.item()))]),
        )
    }

    // ----------------------------------------------------------------
    // Linear algebra.

    /// `a[..., k] @ w[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (va, vw) = (self.value(a), self.value(w));
        let k = *va.shape().last().unwrap_or(&0);
        if vw.ndim() != 2 || vw.shape()[0] != k {
            return Err(SimvaError::shape(format!(
                "matmul {:?} @ {:?}: inner dimensions differ",
                va.shape(),
                vw.shape()
            )));
        }
        let n = vw.shape()[1];
        let m = va.len() / k.max(1);
        let mut out_shape = va.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 1") = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), (k, 1), vw.data(), (n, 1), &mut out);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            vec![a, w],
            Box::new(move |g, p, _| {
                let (a, w) = (p[0], p[1]);
                let mut ga = vec![0.0; m * k];
                // dA = dC W^T
                gemm(m, n, k, g.data(), (n, 1), w.data(), (1, n), &mut ga);
                let mut gw = vec![0.0; k * n];
                // dW = A^T dC
                gemm(k, m, n, a.data(), (1, k), g.data(), (n, 1), &mut gw);
                vec![
                    Some(Tensor::new(a.shape().to_vec(), ga).expect("shape")),
                    Some(Tensor::new(w.shape().to_vec(), gw).expect("shape")),
                ]
            }),
        ))
    }

    /// Batched `a[B, n, k] @ b[B, k, m]`, or `a @ b^T` with `b[B, m, k]`
    /// when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 3 || vb.ndim() != 3 || va.shape()[0] != vb.shape()[0] {
            return Err(SimvaError::shape(format!(
                "bmm needs matching rank-3 batches, got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (bs, n, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (kb, m) = if transpose_b {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        if kb != k {
            return Err(SimvaError::shape(format!(
                "bmm inner dimensions differ: {:?} and {:?} (transpose_b={transpose_b})",
                va.shape(),
                vb.shape()
            )));
        }
        // Strides of b viewed as [k, m].
        let b_strides = if transpose_b { (1, k) } else { (m, 1) };
        let mut out = vec![0.0; bs * n * m];
        for i in 0..bs {
            gemm(
                n,
                k,
                m,
                &va.data()[i * n * k..(i + 1) * n * k],
                (k, 1),
                &vb.data()[i * k * m..(i + 1) * k * m],
                b_strides,
                &mut out[i * n * m..(i + 1) * n * m],
            );
        }
        let value = Tensor::new(vec![bs, n, m], out)?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0].data(), p[1].data());
                let gd = g.data();
                let mut ga = vec![0.0; bs * n * k];
                let mut gb = vec![0.0; bs * k * m];
                for i in 0..bs {
                    let gi = &gd[i * n * m..(i + 1) * n * m];
                    let ai = &a[i * n * k..(i + 1) * n * k];
                    let bi = &b[i * k * m..(i + 1) * k * m];
                    // dA[n,k] = dC[n,m] B^T where B is the [k,m] view.
                    let bt = (b_strides.1, b_strides.0);
                    gemm(n, m, k, gi, (m, 1), bi, bt, &mut ga[i * n * k..(i + 1) * n * k]);
                    if transpose_b {
                        // b stored [m,k]: dB = dC^T A.
                        gemm(m, n, k, gi, (1, m), ai, (k, 1), &mut gb[i * k * m..(i + 1) * k * m]);
                    } else {
                        // b stored [k,m]: dB = A^T dC.
                        gemm(k, n, m, ai, (1, k), gi, (m, 1), &mut gb[i * k * m..(i + 1) * k * m]);
                    }
                }
                vec![
                    Some(Tensor::new(p[0].shape().to_vec(), ga).expect("shape")),
                    Some(Tensor::new(p[1].shape().to_vec(), gb).expect("shape")),
                ]
            }),
        ))
    }

    // ----------------------------------------------------------------
    // Normalized exponentials.

    /// Softmax over the last axis. `-inf` logits get exactly zero weight.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data).expect("shape");
        self.push(
            value,
            vec![a],
            Box::new(move |g, _, out| {
                let mut gi = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.data().chunks(n).zip(out.data().chunks(n)).zip(gi.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (g - dot);
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), gi).expect("shape"))]
            }),
        )
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = *v.shape().last().unwrap_or(&1);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data).expect("shape");
        self.push(
            value,
            vec![a],
            Box::new(move |g, _, out| {
                let mut gi = vec![0.0; g.len()];
                for ((gr, lr), dr) in g.data().chunks(n).zip(out.data().chunks(n)).zip(gi.chunks_mut(n)) {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, g), l) in dr.iter_mut().zip(gr).zip(lr) {
                        *d = g - l.exp() * gsum;
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), gi).expect("shape"))]
            }),
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c[m,n] = a[m,k] · b[k,n]` with `(row, col)` element strides for `a`
/// and `b`; `c` is contiguous row-major and overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    let a_max = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
    let b_max = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(a_max < a.len() && b_max < b.len(), "gemm operand out of bounds");
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(SimvaError::shape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned against `out` with zeros on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

fn is_suffix(shape: &[usize], out: &[usize]) -> bool {
    let stripped: &[usize] = {
        let lead = shape.iter().take_while(|&&d| d == 1).count();
        &shape[lead..]
    };
    out.ends_with(stripped)
}

pub(crate) fn broadcast_apply(a: &Tensor, b: &Tensor, out: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    let n: usize = out.iter().product();
    let data: Vec<f64> = if a.shape() == out && b.shape() == out {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if a.len() == n && is_suffix(b.shape(), out) && a.shape() == out {
        let nb = bd.len();
        ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect()
    } else if b.len() == n && is_suffix(a.shape(), out) && b.shape() == out {
        let na = ad.len();
        bd.iter().enumerate().map(|(i, &y)| f(ad[i % na], y)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), out);
        let sb = broadcast_strides(b.shape(), out);
        let mut idx = vec![0usize; out.len()];
        let (mut oa, mut ob) = (0usize, 0usize);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(ad[oa], bd[ob]));
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                oa += sa[ax];
                ob += sb[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                oa -= sa[ax] * out[ax];
                ob -= sb[ax] * out[ax];
                idx[ax] = 0;
            }
        }
        data
    };
    Tensor::new(out.to_vec(), data).expect("broadcast shape")
}

/// Sum `g` down to `shape` (the inverse of broadcasting).
pub(crate) fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape.to_vec());
    let od = out.data_mut();
    let gd = g.data();
    if od.len() == 1 {
        od[0] = g.sum();
    } else if is_suffix(shape, g.shape()) {
        let n = od.len();
        for (i, &x) in gd.iter().enumerate() {
            od[i % n] += x;
        }
    } else {
        let s = broadcast_strides(shape, g.shape());
        let mut idx = vec![0usize; g.ndim()];
        for &x in gd {
            let off: usize = idx.iter().zip(&s).map(|(i, s)| i * s).sum();
            od[off] += x;
            increment(&mut idx, g.shape());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor) {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let y = build(&mut tape, v);
        let l = tape.sum_all(y);
        let g = tape.backward(l).unwrap();
        let analytic = g.get(v).unwrap().clone();
        let eps = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.param(xp);
                let y = build(&mut t, v);
                t.value(y).sum()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + a.abs()),
                "component {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn unary_gradients() {
        let x = ramp(&[3, 4]);
        fd_check(|t, v| t.tanh(v), x.clone());
        fd_check(|t, v| t.gelu(v), x.clone());
        fd_check(|t, v| t.silu(v), x.clone());
        fd_check(|t, v| t.softplus(v), x.clone());
        fd_check(|t, v| t.sigmoid(v), x.clone());
        fd_check(|t, v| t.exp(v), x.clone());
        fd_check(
            |t, v| {
                let s = t.square(v);
                let s = t.add_scalar(s, 0.5);
                t.powf(s, -0.5)
            },
            x,
        );
    }

    #[test]
    fn broadcast_binary_gradients() {
        let x = ramp(&[2, 3, 4]);
        let b = ramp(&[3, 1]).map(|v| v + 2.0);
        for op in 0..4 {
            let b = b.clone();
            fd_check(
                move |t, v| {
                    let c = t.param(b.clone());
                    let w = t.square(v);
                    match op {
                        0 => t.add(w, c).unwrap(),
                        1 => t.sub(c, w).unwrap(),
                        2 => t.mul(c, w).unwrap(),
                        _ => t.div(w, c).unwrap(),
                    }
                },
                x.clone(),
            );
        }
    }

    #[test]
    fn broadcast_gradient_reaches_small_operand() {
        let mut tape = Tape::new();
        let a = tape.constant(ramp(&[2, 3, 4]));
        let b = tape.param(ramp(&[3, 1]));
        let y = tape.mul(a, b).unwrap();
        let l = tape.sum_all(y);
        let g = tape.backward(l).unwrap();
        let gb = g.get(b).unwrap();
        let av = tape.value(a);
        for j in 0..3 {
            let expect: f64 = (0..2).flat_map(|i| (0..4).map(move |k| (i, k))).map(|(i, k)| av.at(&[i, j, k])).sum();
            assert!((gb.at(&[j, 0]) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_and_bmm_gradients() {
        let w = ramp(&[4, 3]);
        fd_check(
            move |t, v| {
                let w = t.param(w.clone());
                let y = t.matmul(v, w).unwrap();
                t.square(y)
            },
            ramp(&[2, 5, 4]),
        );
        let other = ramp(&[2, 3, 4]);
        for tb in [false, true] {
            let o = other.clone();
            fd_check(
                move |t, v| {
                    let b = t.param(if tb { o.clone() } else { o.clone().reshape([2, 4, 3]).unwrap() });
                    let y = t.bmm(v, b, tb).unwrap();
                    t.square(y)
                },
                ramp(&[2, 5, 4]),
            );
        }
        // And the gradient w.r.t. the second operand.
        let a = ramp(&[2, 5, 4]);
        fd_check(
            move |t, v| {
                let a = t.param(a.clone());
                let y = t.bmm(a, v, true).unwrap();
                t.square(y)
            },
            ramp(&[2, 3, 4]),
        );
    }

    #[test]
    fn shape_op_gradients() {
        let idx: Arc<Vec<u32>> = Arc::new(vec![3, GATHER_ZERO, 0, 3, 5, 1]);
        fd_check(
            move |t, v| {
                let g = t.gather(v, idx.clone(), &[2, 3]).unwrap();
                t.square(g)
            },
            ramp(&[6]),
        );
        fd_check(
            |t, v| {
                let p = t.permute(v, &[2, 0, 1]).unwrap();
                let n = t.narrow(p, 0, 1, 2).unwrap();
                let s = t.sum_axis(n, 1, false).unwrap();
                t.square(s)
            },
            ramp(&[2, 3, 4]),
        );
    }

    #[test]
    fn softmax_gradients_and_masking() {
        fd_check(
            |t, v| {
                let s = t.softmax_last(v);
                t.square(s)
            },
            ramp(&[3, 4]),
        );
        fd_check(
            |t, v| {
                let s = t.log_softmax_last(v);
                t.square(s)
            },
            ramp(&[3, 4]),
        );
        let mut tape = Tape::new();
        let x = tape.param(ramp(&[1, 3]));
        let mask = tape.constant(Tensor::new([1, 3], vec![0.0, f64::NEG_INFINITY, 0.0]).unwrap());
        let y = tape.add(x, mask).unwrap();
        let s = tape.softmax_last(y);
        assert_eq!(tape.value(s).data()[1], 0.0);
        let sq = tape.square(s);
        let l = tape.sum_all(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data()[1], 0.0);
    }
}
