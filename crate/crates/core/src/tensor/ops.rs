//! Eager versions of the tape primitives.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::mask::AttentionMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2().map_err(|_| Error::dim("matmul", a.shape(), b.shape()))?;
    let (k2, n) = b.dims2().map_err(|_| Error::dim("matmul", a.shape(), b.shape()))?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

/// Pointwise add or multiply. Shapes must match unless one side is rank 0.
pub fn elementwise(a: &Tensor, b: &Tensor, op: Elementwise) -> Result<Tensor> {
    let f = match op {
        Elementwise::Add => |x: f64, y: f64| x + y,
        Elementwise::Mul => |x: f64, y: f64| x * y,
    };
    let (shape, data): (&[usize], Vec<f64>) = if a.shape() == b.shape() {
        (a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
    } else if b.is_scalar() {
        (a.shape(), a.data().iter().map(|x| f(*x, b.item())).collect())
    } else if a.is_scalar() {
        (b.shape(), b.data().iter().map(|y| f(a.item(), *y)).collect())
    } else {
        return Err(Error::dim("elementwise", a.shape(), b.shape()));
    };
    Tensor::new(shape, data)
}

/// Softmax over each row restricted to the positions where `mask` is set.
/// Masked positions are exactly zero. The row maximum is taken over unmasked
/// entries only.
pub fn rowwise_masked_softmax(logits: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let (r, c) = logits.dims2()?;
    if [r, c] != mask.shape() {
        return Err(Error::dim("rowwise_masked_softmax", logits.shape(), &mask.shape()));
    }
    let mut out = vec![0.0; r * c];
    kernels::masked_softmax(logits.data(), mask, &mut out).map_err(|row| Error::DegenerateRow { row })?;
    Tensor::new(&[r, c], out)
}

/// Normalizes over the last axis (epsilon 1e-5) then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().unwrap_or(&1);
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; x.len() / d];
    kernels::layer_norm(x.data(), gain.data(), bias.data(), d, &mut out, &mut xhat, &mut rstd);
    Tensor::new(x.shape(), out)
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|v| kernels::gelu(*v)).collect()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = t(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        // 1*3 + 2*4
        assert_eq!(matmul(&t(&[&[1.0, 2.0]]), &t(&[&[3.0], &[4.0]])).unwrap().data(), &[11.0]);
        let z = matmul(&Tensor::zeros(&[2, 3]), &t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn masked_softmax_examples() {
        // exp(k) / (e + e^2 + e^3) evaluated by hand
        let e = |x: f64| x.exp();
        let z = e(1.0) + e(2.0) + e(3.0);
        let logits = t(&[&[1.0, 2.0, 3.0]]);
        let full = rowwise_masked_softmax(&logits, &AttentionMask::all_ones(1, 3)).unwrap();
        assert!(close(full.data(), &[e(1.0) / z, e(2.0) / z, e(3.0) / z], 1e-15));
        assert!(close(full.data(), &[0.09003, 0.24473, 0.66524], 1e-4));

        let mask = AttentionMask::from_values(1, 3, &[1, 0, 1]).unwrap();
        let part = rowwise_masked_softmax(&logits, &mask).unwrap();
        assert!(close(part.data(), &[0.11920, 0.0, 0.88080], 1e-4));
        assert_eq!(part.data()[1].to_bits(), 0);

        let single = rowwise_masked_softmax(&t(&[&[-42.0]]), &AttentionMask::all_ones(1, 1)).unwrap();
        assert_eq!(single.data(), &[1.0]);
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let mask = AttentionMask::from_values(2, 2, &[1, 0, 0, 0]).unwrap();
        let err = rowwise_masked_softmax(&Tensor::zeros(&[2, 2]), &mask).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn huge_masked_logit_does_not_underflow_live_entries() {
        let mask = AttentionMask::from_values(1, 3, &[1, 1, 0]).unwrap();
        let out = rowwise_masked_softmax(&t(&[&[0.0, 0.0, 1e6]]), &mask).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let m = Tensor::vector(vec![1.0, 0.0, 1.0]);
        assert_eq!(elementwise(&a, &m, Elementwise::Mul).unwrap().data(), &[1.0, 0.0, 3.0]);
        let s = elementwise(&Tensor::vector(vec![1.0, 2.0]), &Tensor::vector(vec![3.0, 4.0]), Elementwise::Add);
        assert_eq!(s.unwrap().data(), &[4.0, 6.0]);
        assert_eq!(elementwise(&a, &Tensor::ones(&[3]), Elementwise::Mul).unwrap(), a);
        assert_eq!(elementwise(&a, &Tensor::scalar(2.0), Elementwise::Mul).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert!(elementwise(&a, &Tensor::ones(&[2]), Elementwise::Add).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::ones(&[2]);
        let zeros = Tensor::zeros(&[2]);
        let c = layer_norm(&Tensor::full(&[3, 2], 7.0), &ones, &zeros).unwrap();
        assert_eq!(c, Tensor::zeros(&[3, 2]));
        // mean 2, variance 1: (x - 2) / sqrt(1 + 1e-5)
        let y = layer_norm(&Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap(), &ones, &zeros).unwrap();
        assert!(close(y.data(), &[-1.0, 1.0], 1e-4));
        let b = Tensor::vector(vec![0.5, -2.0]);
        let y = layer_norm(&Tensor::new(&[2, 2], vec![1.0, 9.0, -3.0, 4.0]).unwrap(), &zeros, &b).unwrap();
        assert_eq!(y.data(), &[0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![3.0, -1.0, 2.0]).with_requires_grad(true));
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[2.0, 4.0]);
        assert_eq!(tape.value(p).grad().unwrap(), &[2.0, 4.0]);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(a) + sum(3a)
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 1.0]).with_requires_grad(true));
        let b = tape.scale(a, 3.0);
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4.0, 4.0]);
    }

    proptest! {
        #[test]
        fn masked_softmax_rows_normalize(
            rows in 1usize..6,
            cols in 1usize..8,
            seed in any::<u64>(),
            shift in -50.0f64..50.0,
        ) {
            let n = rows * cols;
            let logits: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(31) as f64) * 1e-7 + i as f64 * 1.7).sin() * 8.0).collect();
            let mut bits: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            for r in 0..rows { bits[r * cols + (seed as usize + r) % cols] = true; }
            let mask = AttentionMask::from_bits(rows, cols, bits).unwrap();
            let x = Tensor::new(&[rows, cols], logits.clone()).unwrap();
            let y = rowwise_masked_softmax(&x, &mask).unwrap();
            for r in 0..rows {
                let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            for (v, b) in y.data().iter().zip(mask.bits()) {
                if !b { prop_assert_eq!(v.to_bits(), 0u64); }
            }
            let shifted = Tensor::new(&[rows, cols], logits.iter().map(|v| v + shift).collect()).unwrap();
            let ys = rowwise_masked_softmax(&shifted, &mask).unwrap();
            prop_assert!(ys.max_abs_diff(&y) < 1e-9);
        }
    }

    #[test]
    fn tape_masked_softmax_matches_eager() {
        let mask = Arc::new(AttentionMask::from_values(2, 3, &[1, 0, 1, 1, 1, 1]).unwrap());
        let x = t(&[&[0.3, 9.0, -1.0], &[2.0, 0.0, 1.0]]);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.masked_softmax(v, &mask).unwrap();
        assert_eq!(tape.value(y), &rowwise_masked_softmax(&x, &mask).unwrap());
    }
}
