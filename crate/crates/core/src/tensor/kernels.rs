//! Slice-level numeric kernels shared by the tape and the eager ops.

use crate::mask::AttentionMask;

pub(crate) const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// out[m x n] += a[m x k] * b[k x n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] * b[n x k]^T
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// out[m x n] += a[k x m]^T * b[k x n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax restricted to the mask's support. Masked entries are
/// written as exact zeros. Returns the first row without support, if any.
pub(crate) fn masked_softmax(
    logits: &[f64],
    mask: &AttentionMask,
    out: &mut [f64],
) -> Result<(), usize> {
    let cols = mask.cols();
    for i in 0..mask.rows() {
        let bits = mask.row(i);
        let x = &logits[i * cols..(i + 1) * cols];
        let y = &mut out[i * cols..(i + 1) * cols];
        if mask.row_support()[i] == 0 {
            return Err(i);
        }
        let mut max = f64::NEG_INFINITY;
        for (v, b) in x.iter().zip(bits) {
            // NaN propagates into the whole row
            if *b && (*v > max || v.is_nan()) {
                max = *v;
                if v.is_nan() {
                    break;
                }
            }
        }
        let mut sum = 0.0;
        for ((o, v), b) in y.iter_mut().zip(x).zip(bits) {
            if *b {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            } else {
                *o = 0.0;
            }
        }
        let inv = 1.0 / sum;
        for (o, b) in y.iter_mut().zip(bits) {
            if *b {
                *o *= inv;
            }
        }
    }
    Ok(())
}

/// dx = p * (dy - sum(p * dy)) per row; masked entries have p = 0.
pub(crate) fn masked_softmax_backward(p: &[f64], dy: &[f64], dx: &mut [f64], cols: usize) {
    for ((prow, gyrow), gxrow) in p
        .chunks(cols)
        .zip(dy.chunks(cols))
        .zip(dx.chunks_mut(cols))
    {
        let dot: f64 = prow.iter().zip(gyrow).map(|(a, b)| a * b).sum();
        for ((gx, pv), gy) in gxrow.iter_mut().zip(prow).zip(gyrow) {
            *gx += pv * (gy - dot);
        }
    }
}

/// Layer norm over rows of width `d`. Writes normalized values `xhat` and
/// per-row reciprocal deviations alongside the affine output.
pub(crate) fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    d: usize,
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
    for (r, ((xr, yr), hr)) in x
        .chunks(d)
        .zip(out.chunks_mut(d))
        .zip(xhat.chunks_mut(d))
        .enumerate()
    {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            hr[j] = h;
            yr[j] = h * gain[j] + bias[j];
        }
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}
