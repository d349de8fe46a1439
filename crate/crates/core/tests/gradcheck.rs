mod common;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spt::attention::{encoder_block_on, AttentionLayerParams, LayerVars};
use spt::{AttentionMask, Tape, Tensor, Var};

use common::{central_diff, rel_err};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Projects the op output onto fixed random weights so every output entry
/// contributes to the scalar.
fn scalar_of(tape: &mut Tape, out: Var, probe: &Tensor) -> Var {
    let p = tape.constant(probe.clone().reshape(tape.shape(out)).unwrap());
    let prod = tape.mul(out, p).unwrap();
    tape.sum(prod)
}

fn check<F>(name: &str, inputs: Vec<Tensor>, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let probe = random(&mut rng, &[probe_shape.iter().product()]);
    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let s = scalar_of(&mut tape, out, &probe);
        tape.value(s).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars);
    let s = scalar_of(&mut tape, out, &probe);
    tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        let mut flat = inputs[k].data().to_vec();
        for i in 0..flat.len() {
            let numeric = central_diff(&mut flat, i, H, |x| {
                let mut ins = inputs.clone();
                ins[k] = Tensor::new(inputs[k].shape(), x.to_vec()).unwrap();
                eval(&ins)
            });
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
    worst
}

#[test]
fn matmul_family() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    check("matmul", vec![random(&mut r, &[3, 4]), random(&mut r, &[4, 2])], |t, v| t.matmul(v[0], v[1]).unwrap());
    check("matmul_nt", vec![random(&mut r, &[3, 4]), random(&mut r, &[5, 4])], |t, v| {
        t.matmul_nt(v[0], v[1]).unwrap()
    });
    check(
        "linear",
        vec![random(&mut r, &[3, 4]), random(&mut r, &[4, 2]), random(&mut r, &[2])],
        |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap(),
    );
}

#[test]
fn elementwise_family() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random(&mut r, &[2, 3]), random(&mut r, &[2, 3]));
    check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check("mul scalar", vec![a.clone(), Tensor::scalar(0.7)], |t, v| t.mul(v[0], v[1]).unwrap());
    check("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.5));
    check("sum", vec![a.clone()], |t, v| t.sum(v[0]));
    check("gelu", vec![random(&mut r, &[4, 5])], |t, v| t.gelu(v[0]));
    check("reshape", vec![a], |t, v| t.reshape(v[0], &[3, 2]).unwrap());
}

#[test]
fn layer_norm() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    check(
        "layer_norm",
        vec![random(&mut r, &[3, 6]), random(&mut r, &[6]), random(&mut r, &[6])],
        |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
    );
}

#[test]
fn masked_softmax() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let bits: Vec<bool> = (0..25).map(|i| i % 5 == i / 5 || r.gen_bool(0.5)).collect();
    let mask = Arc::new(AttentionMask::from_bits(5, 5, bits).unwrap());
    check("masked_softmax", vec![random(&mut r, &[5, 5])], move |t, v| t.masked_softmax(v[0], &mask).unwrap());
}

#[test]
fn slicing_and_concatenation() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut r, &[4, 6]);
    check("slice_cols", vec![a.clone()], |t, v| t.slice_cols(v[0], 2, 3).unwrap());
    check("slice_rows", vec![a.clone()], |t, v| t.slice_rows(v[0], 1, 2).unwrap());
    check("concat_cols", vec![a.clone(), random(&mut r, &[4, 2])], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap());
    check("concat_rows", vec![a, random(&mut r, &[1, 6])], |t, v| t.concat_rows(&[v[1], v[0]]).unwrap());
}

#[test]
fn fan_out_accumulates() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    check("fan-out", vec![random(&mut r, &[3, 3])], |t, v| {
        let a = t.matmul(v[0], v[0]).unwrap();
        let b = t.gelu(v[0]);
        t.mul(a, b).unwrap()
    });
}

#[test]
fn encoder_block_under_sparse_mask() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let layer = AttentionLayerParams::init(&mut r, 8, 2, 3).unwrap();
    let n = 6;
    let bits: Vec<bool> = (0..n * n).map(|i| i % n == i / n || r.gen_bool(0.4)).collect();
    let mask = Arc::new(AttentionMask::from_bits(n, n, bits).unwrap());
    let x = random(&mut r, &[n, 8]);
    let mut inputs = vec![x];
    inputs.extend(layer.tensors().iter().map(|(_, t)| (*t).clone()));
    let heads = layer.heads;
    check("encoder block", inputs, move |t, v| {
        let lv = LayerVars {
            heads,
            norm1_gain: v[1],
            norm1_bias: v[2],
            qkv: v[3],
            out_weight: v[4],
            out_bias: v[5],
            norm2_gain: v[6],
            norm2_bias: v[7],
            ff1_weight: v[8],
            ff1_bias: v[9],
            ff2_weight: v[10],
            ff2_bias: v[11],
        };
        encoder_block_on(t, v[0], &mask, &lv, false).unwrap().0
    });
}
