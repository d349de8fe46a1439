//! Masked multi-head self-attention and the pre-norm encoder block.
//!
//! Per head, logits `q·kᵀ / sqrt(d_head)` are normalized by a softmax whose
//! domain is restricted to the mask's support. One mask is shared by every
//! head. The block is `x + mmsa(norm(x))` followed by
//! `· + ff(norm(·))` with a GELU feed-forward of width `mlp_ratio · d`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams {
    pub heads: usize,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    /// `d × 3d`; columns are `[Q | K | V]`, each split evenly across heads.
    pub qkv: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    pub ff1_weight: Tensor,
    pub ff1_bias: Tensor,
    pub ff2_weight: Tensor,
    pub ff2_bias: Tensor,
}

/// Parameters of one layer registered on a tape.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub heads: usize,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub qkv: Var,
    pub out_weight: Var,
    pub out_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
    pub ff1_weight: Var,
    pub ff1_bias: Var,
    pub ff2_weight: Var,
    pub ff2_bias: Var,
}

pub(crate) fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_tensor(rng, &[fan_in, fan_out], std)
}

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive deviation");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

impl AttentionLayerParams {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "embedding dimension {dim} is not divisible by {heads} heads"
            )));
        }
        let hidden = dim * mlp_ratio;
        Ok(AttentionLayerParams {
            heads,
            norm1_gain: Tensor::ones(&[dim]),
            norm1_bias: Tensor::zeros(&[dim]),
            qkv: xavier(rng, dim, 3 * dim),
            out_weight: xavier(rng, dim, dim),
            out_bias: Tensor::zeros(&[dim]),
            norm2_gain: Tensor::ones(&[dim]),
            norm2_bias: Tensor::zeros(&[dim]),
            ff1_weight: xavier(rng, dim, hidden),
            ff1_bias: Tensor::zeros(&[hidden]),
            ff2_weight: xavier(rng, hidden, dim),
            ff2_bias: Tensor::zeros(&[dim]),
        })
    }

    pub fn dim(&self) -> usize {
        self.norm1_gain.len()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// Named tensors in a fixed order; names are relative to the layer.
    pub fn tensors(&self) -> [(&'static str, &Tensor); 11] {
        [
            ("norm1_gain", &self.norm1_gain),
            ("norm1_bias", &self.norm1_bias),
            ("qkv", &self.qkv),
            ("out_weight", &self.out_weight),
            ("out_bias", &self.out_bias),
            ("norm2_gain", &self.norm2_gain),
            ("norm2_bias", &self.norm2_bias),
            ("ff1_weight", &self.ff1_weight),
            ("ff1_bias", &self.ff1_bias),
            ("ff2_weight", &self.ff2_weight),
            ("ff2_bias", &self.ff2_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 11] {
        [
            ("norm1_gain", &mut self.norm1_gain),
            ("norm1_bias", &mut self.norm1_bias),
            ("qkv", &mut self.qkv),
            ("out_weight", &mut self.out_weight),
            ("out_bias", &mut self.out_bias),
            ("norm2_gain", &mut self.norm2_gain),
            ("norm2_bias", &mut self.norm2_bias),
            ("ff1_weight", &mut self.ff1_weight),
            ("ff1_bias", &mut self.ff1_bias),
            ("ff2_weight", &mut self.ff2_weight),
            ("ff2_bias", &mut self.ff2_bias),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("{d} not divisible by {} heads", self.heads)));
        }
        let hidden = self.ff1_bias.len();
        let expect: [(&str, &Tensor, Vec<usize>); 11] = [
            ("norm1_gain", &self.norm1_gain, vec![d]),
            ("norm1_bias", &self.norm1_bias, vec![d]),
            ("qkv", &self.qkv, vec![d, 3 * d]),
            ("out_weight", &self.out_weight, vec![d, d]),
            ("out_bias", &self.out_bias, vec![d]),
            ("norm2_gain", &self.norm2_gain, vec![d]),
            ("norm2_bias", &self.norm2_bias, vec![d]),
            ("ff1_weight", &self.ff1_weight, vec![d, hidden]),
            ("ff1_bias", &self.ff1_bias, vec![hidden]),
            ("ff2_weight", &self.ff2_weight, vec![hidden, d]),
            ("ff2_bias", &self.ff2_bias, vec![d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> LayerVars {
        self.bind_as(tape, true)
    }

    /// Registers the layer on `tape`, tracking gradients only when `trainable`.
    pub fn bind_as(&self, tape: &mut Tape, trainable: bool) -> LayerVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        LayerVars {
            heads: self.heads,
            norm1_gain: reg(&self.norm1_gain),
            norm1_bias: reg(&self.norm1_bias),
            qkv: reg(&self.qkv),
            out_weight: reg(&self.out_weight),
            out_bias: reg(&self.out_bias),
            norm2_gain: reg(&self.norm2_gain),
            norm2_bias: reg(&self.norm2_bias),
            ff1_weight: reg(&self.ff1_weight),
            ff1_bias: reg(&self.ff1_bias),
            ff2_weight: reg(&self.ff2_weight),
            ff2_bias: reg(&self.ff2_bias),
        }
    }
}

impl LayerVars {
    pub fn vars(&self) -> [Var; 11] {
        [
            self.norm1_gain,
            self.norm1_bias,
            self.qkv,
            self.out_weight,
            self.out_bias,
            self.norm2_gain,
            self.norm2_bias,
            self.ff1_weight,
            self.ff1_bias,
            self.ff2_weight,
            self.ff2_bias,
        ]
    }
}

/// Post-softmax attention of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `heads × n × n`
    pub per_head: Tensor,
    /// `n × n`, mean over heads.
    pub head_average: Tensor,
}

impl AttentionRecord {
    pub fn from_heads(maps: &[&Tensor]) -> Result<Self> {
        let n = maps[0].shape()[0];
        let heads = maps.len();
        let mut per_head = Vec::with_capacity(heads * n * n);
        let mut sum = vec![0.0; n * n];
        for m in maps {
            per_head.extend_from_slice(m.data());
            for (s, v) in sum.iter_mut().zip(m.data()) {
                *s += v;
            }
        }
        let avg = sum.into_iter().map(|s| s / heads as f64).collect();
        Ok(AttentionRecord {
            per_head: Tensor::new(&[heads, n, n], per_head)?,
            head_average: Tensor::new(&[n, n], avg)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.per_head.shape()[0]
    }

    /// Head-averaged attention restricted to rows and columns `offset..`.
    pub fn trailing_block(&self, offset: usize) -> Result<Tensor> {
        let n = self.head_average.shape()[0];
        if offset >= n {
            return Err(Error::dim("AttentionRecord::trailing_block", &[n], &[offset]));
        }
        let m = n - offset;
        let mut out = Vec::with_capacity(m * m);
        for i in offset..n {
            out.extend_from_slice(&self.head_average.data()[i * n + offset..(i + 1) * n]);
        }
        Tensor::new(&[m, m], out)
    }
}

/// Splits `x · U_qkv` into per-head query, key and value blocks, each `n × d_head`.
pub fn project_qkv_on(
    tape: &mut Tape,
    x: Var,
    layer: &LayerVars,
) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
    let qkv = tape.matmul(x, layer.qkv)?;
    let d = tape.shape(layer.qkv)[0];
    let dh = d / layer.heads;
    let mut q = Vec::with_capacity(layer.heads);
    let mut k = Vec::with_capacity(layer.heads);
    let mut v = Vec::with_capacity(layer.heads);
    for h in 0..layer.heads {
        q.push(tape.slice_cols(qkv, h * dh, dh)?);
        k.push(tape.slice_cols(qkv, d + h * dh, dh)?);
        v.push(tape.slice_cols(qkv, 2 * d + h * dh, dh)?);
    }
    Ok((q, k, v))
}

pub fn mmsa_on(
    tape: &mut Tape,
    x: Var,
    mask: &Arc<AttentionMask>,
    layer: &LayerVars,
    retain: bool,
) -> Result<(Var, Option<AttentionRecord>)> {
    let n = tape.shape(x)[0];
    if mask.shape() != [n, n] {
        return Err(Error::dim("mmsa mask", &[n, n], &mask.shape()));
    }
    mask.ensure_support()?;
    let (q, k, v) = project_qkv_on(tape, x, layer)?;
    let dh = tape.shape(q[0])[1];
    let inv_scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(layer.heads);
    let mut probs = Vec::with_capacity(layer.heads);
    for h in 0..layer.heads {
        let logits = tape.matmul_nt(q[h], k[h])?;
        let logits = tape.scale(logits, inv_scale);
        let p = tape.masked_softmax(logits, mask)?;
        probs.push(p);
        outs.push(tape.matmul(p, v[h])?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let out = tape.linear(merged, layer.out_weight, Some(layer.out_bias))?;
    let record = if retain {
        let maps: Vec<&Tensor> = probs.iter().map(|p| tape.value(*p)).collect();
        Some(AttentionRecord::from_heads(&maps)?)
    } else {
        None
    };
    Ok((out, record))
}

pub fn encoder_block_on(
    tape: &mut Tape,
    x: Var,
    mask: &Arc<AttentionMask>,
    layer: &LayerVars,
    retain: bool,
) -> Result<(Var, Option<AttentionRecord>)> {
    let h = tape.layer_norm(x, layer.norm1_gain, layer.norm1_bias)?;
    let (attn, record) = mmsa_on(tape, h, mask, layer, retain)?;
    let x = tape.add(x, attn)?;
    let h = tape.layer_norm(x, layer.norm2_gain, layer.norm2_bias)?;
    let h = tape.linear(h, layer.ff1_weight, Some(layer.ff1_bias))?;
    let h = tape.gelu(h);
    let h = tape.linear(h, layer.ff2_weight, Some(layer.ff2_bias))?;
    let out = tape.add(x, h)?;
    Ok((out, record))
}

fn check_input(x: &Tensor, params: &AttentionLayerParams) -> Result<()> {
    params.validate()?;
    match x.shape() {
        [_, d] if *d == params.dim() => Ok(()),
        other => Err(Error::dim("attention input", other, &[0, params.dim()])),
    }
}

/// Eager projection; each output is `heads × n × d_head`.
pub fn project_qkv(x: &Tensor, params: &AttentionLayerParams) -> Result<(Tensor, Tensor, Tensor)> {
    check_input(x, params)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let lv = params.bind(&mut tape);
    let (q, k, v) = project_qkv_on(&mut tape, xv, &lv)?;
    let stack = |vars: &[Var]| -> Result<Tensor> {
        let (n, dh) = tape.value(vars[0]).dims2()?;
        let data = vars.iter().flat_map(|v| tape.value(*v).data().iter().copied()).collect();
        Tensor::new(&[vars.len(), n, dh], data)
    };
    Ok((stack(&q)?, stack(&k)?, stack(&v)?))
}

/// Eager masked multi-head self-attention. The record is always retained.
pub fn mmsa(
    x: &Tensor,
    mask: &AttentionMask,
    params: &AttentionLayerParams,
) -> Result<(Tensor, AttentionRecord)> {
    check_input(x, params)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let lv = params.bind(&mut tape);
    let (out, record) = mmsa_on(&mut tape, xv, &Arc::new(mask.clone()), &lv, true)?;
    Ok((tape.value(out).clone(), record.expect("retained")))
}

pub fn encoder_block(
    x: &Tensor,
    mask: &AttentionMask,
    params: &AttentionLayerParams,
) -> Result<(Tensor, AttentionRecord)> {
    check_input(x, params)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let lv = params.bind(&mut tape);
    let (out, record) = encoder_block_on(&mut tape, xv, &Arc::new(mask.clone()), &lv, true)?;
    Ok((tape.value(out).clone(), record.expect("retained")))
}
