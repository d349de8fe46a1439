use std::sync::Arc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::mask::AttentionMask;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    MaskedSoftmax(Var, Arc<AttentionMask>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Values are appended in evaluation order, so every input of a node has a
/// smaller index than the node itself and a single reverse sweep visits each
/// operation once. A tape belongs to one thread; independent forward passes
/// use independent tapes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (n, m) if n == m => a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        (_, 1) => {
            let s = b.item();
            a.data().iter().map(|x| f(*x, s)).collect()
        }
        _ => {
            let s = a.item();
            b.data().iter().map(|y| f(s, *y)).collect()
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(Tensor::new(tensor.shape(), tensor.data().to_vec()).unwrap().with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Tape::backward`] call, for tracked leaves.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// a · bᵀ without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = binary_shape("add", self.value(a), self.value(b))?;
        let data = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = binary_shape("sub", self.value(a), self.value(b))?;
        let data = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = binary_shape("mul", self.value(a), self.value(b))?;
        let data = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * s).collect()).unwrap();
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// x[m×k] · w[k×n] + b[n]
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims2("linear", x)?;
        let (k2, n) = self.dims2("linear", w)?;
        if k != k2 {
            return Err(Error::dim("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [n] {
                return Err(Error::dim("linear bias", bias.shape(), &[n]));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias.data());
            }
        }
        kernels::gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = *xt.shape().last().unwrap_or(&1);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", xt.shape(), self.shape(gain)));
        }
        let rows = xt.len() / d;
        let mut out = vec![0.0; xt.len()];
        let mut xhat = vec![0.0; xt.len()];
        let mut rstd = vec![0.0; rows];
        kernels::layer_norm(
            xt.data(),
            self.value(gain).data(),
            self.value(bias).data(),
            d,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let out = Tensor::new(xt.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| kernels::gelu(*v)).collect()).unwrap();
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &Arc<AttentionMask>) -> Result<Var> {
        let out = super::ops::rowwise_masked_softmax(self.value(x), mask)?;
        Ok(self.push(out, Op::MaskedSoftmax(x, Arc::clone(mask)), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(&[m, len], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.dims2("concat_cols", *p)?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(*p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", x)?;
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", &[m, n], &[start, len]));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(&[len, n], out)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2("concat_rows", parts[0])?.1;
        let mut m = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = self.dims2("concat_rows", *p)?;
            if c != n {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(*p)));
            }
            m += r;
            out.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::dim("reshape", t.shape(), shape));
        }
        let out = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Replays the tape in reverse from a scalar `loss`, storing gradients on
    /// every tracked leaf. Leaves not reached receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(gy);
                continue;
            }
            backprop(&self.nodes, node, &gy, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(g);
}

/// Gradient contribution of an elementwise-or-scalar operand.
fn reduce_into(g: &mut [f64], contrib: impl Iterator<Item = f64>) {
    if g.len() == 1 {
        g[0] += contrib.sum::<f64>();
    } else {
        for (gi, c) in g.iter_mut().zip(contrib) {
            *gi += c;
        }
    }
}

fn backprop(nodes: &[Node], node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).shape()[1];
            accumulate(nodes, grads, *a, |g| {
                kernels::gemm_nt(gy, val(*b).data(), g, m, n, k);
            });
            accumulate(nodes, grads, *b, |g| {
                kernels::gemm_tn(val(*a).data(), gy, g, m, k, n);
            });
        }
        Op::MatMulNT(a, b) => {
            // C = A Bᵀ: dA = dC B, dB = dCᵀ A
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).shape()[0];
            accumulate(nodes, grads, *a, |g| {
                kernels::gemm_nn(gy, val(*b).data(), g, m, n, k);
            });
            accumulate(nodes, grads, *b, |g| {
                kernels::gemm_tn(gy, val(*a).data(), g, m, n, k);
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |g| reduce_into(g, gy.iter().copied()));
            accumulate(nodes, grads, *b, |g| reduce_into(g, gy.iter().copied()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |g| reduce_into(g, gy.iter().copied()));
            accumulate(nodes, grads, *b, |g| reduce_into(g, gy.iter().map(|v| -v)));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let other = |t: &Tensor, idx: usize| if t.len() == 1 { t.item() } else { t.data()[idx] };
            accumulate(nodes, grads, *a, |g| {
                reduce_into(g, gy.iter().enumerate().map(|(i, d)| d * other(tb, i)))
            });
            accumulate(nodes, grads, *b, |g| {
                reduce_into(g, gy.iter().enumerate().map(|(i, d)| d * other(ta, i)))
            });
        }
        Op::Scale(a, s) => {
            accumulate(nodes, grads, *a, |g| reduce_into(g, gy.iter().map(|d| d * s)));
        }
        Op::Linear { x, w, b } => {
            let (m, k) = val(*x).dims2().unwrap();
            let n = val(*w).shape()[1];
            accumulate(nodes, grads, *x, |g| {
                kernels::gemm_nt(gy, val(*w).data(), g, m, n, k);
            });
            accumulate(nodes, grads, *w, |g| {
                kernels::gemm_tn(val(*x).data(), gy, g, m, k, n);
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |g| {
                    for row in gy.chunks(n) {
                        for (gi, d) in g.iter_mut().zip(row) {
                            *gi += d;
                        }
                    }
                });
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gvals = val(*gain).data();
            let d = gvals.len();
            accumulate(nodes, grads, *x, |g| {
                for (r, ((gx, dy), h)) in g
                    .chunks_mut(d)
                    .zip(gy.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = dy[j] * gvals[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = dy[j] * gvals[j];
                        gx[j] += rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
            });
            accumulate(nodes, grads, *gain, |g| {
                for (dy, h) in gy.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        g[j] += dy[j] * h[j];
                    }
                }
            });
            accumulate(nodes, grads, *bias, |g| {
                for dy in gy.chunks(d) {
                    for (gi, v) in g.iter_mut().zip(dy) {
                        *gi += v;
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xs = val(*x).data();
            accumulate(nodes, grads, *x, |g| {
                for ((gi, d), xv) in g.iter_mut().zip(gy).zip(xs) {
                    *gi += d * kernels::gelu_grad(*xv);
                }
            });
        }
        Op::MaskedSoftmax(x, mask) => {
            let p = node.value.data();
            accumulate(nodes, grads, *x, |g| {
                kernels::masked_softmax_backward(p, gy, g, mask.cols());
            });
        }
        Op::SliceCols { x, start } => {
            let n = val(*x).shape()[1];
            let len = node.value.shape()[1];
            accumulate(nodes, grads, *x, |g| {
                for (grow, drow) in g.chunks_mut(n).zip(gy.chunks(len)) {
                    for (gi, d) in grow[*start..start + len].iter_mut().zip(drow) {
                        *gi += d;
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let n = node.value.shape()[1];
            let mut offset = 0;
            for p in parts {
                let w = val(*p).shape()[1];
                accumulate(nodes, grads, *p, |g| {
                    for (grow, drow) in g.chunks_mut(w).zip(gy.chunks(n)) {
                        for (gi, d) in grow.iter_mut().zip(&drow[offset..offset + w]) {
                            *gi += d;
                        }
                    }
                });
                offset += w;
            }
        }
        Op::SliceRows { x, start } => {
            let n = val(*x).shape()[1];
            accumulate(nodes, grads, *x, |g| {
                for (gi, d) in g[start * n..start * n + gy.len()].iter_mut().zip(gy) {
                    *gi += d;
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).len();
                accumulate(nodes, grads, *p, |g| {
                    for (gi, d) in g.iter_mut().zip(&gy[offset..offset + len]) {
                        *gi += d;
                    }
                });
                offset += len;
            }
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |g| {
                for (gi, d) in g.iter_mut().zip(gy) {
                    *gi += d;
                }
            });
        }
        Op::Sum(x) => {
            let d = gy[0];
            accumulate(nodes, grads, *x, |g| {
                for gi in g.iter_mut() {
                    *gi += d;
                }
            });
        }
    }
}
