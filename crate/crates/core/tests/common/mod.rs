#![allow(dead_code)]

use spt::attention::AttentionLayerParams;
use spt::model::{ModelConfig, PoseModelParams};
use spt::Tensor;

/// Row-major matrix on plain vectors.
#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor) -> Mat {
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            s => panic!("not a matrix: {s:?}"),
        };
        Mat { rows, cols, v: t.data().to_vec() }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.v[r * self.cols + c]
    }

    pub fn mul(&self, o: &Mat) -> Mat {
        assert_eq!(self.cols, o.rows);
        let mut v = vec![0.0; self.rows * o.cols];
        for i in 0..self.rows {
            for j in 0..o.cols {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.at(i, k) * o.at(k, j);
                }
                v[i * o.cols + j] = s;
            }
        }
        Mat { rows: self.rows, cols: o.cols, v }
    }

    pub fn add_row(&self, b: &Mat) -> Mat {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.v[i * self.cols + j] += b.v[j];
            }
        }
        out
    }

    pub fn plus(&self, o: &Mat) -> Mat {
        Mat { rows: self.rows, cols: self.cols, v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect() }
    }

    pub fn cols_range(&self, start: usize, len: usize) -> Mat {
        let mut v = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            v.extend_from_slice(&self.v[i * self.cols + start..i * self.cols + start + len]);
        }
        Mat { rows: self.rows, cols: len, v }
    }
}

pub fn layer_norm(x: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = &x.v[i * x.cols..(i + 1) * x.cols];
        let mean: f64 = row.iter().sum::<f64>() / x.cols as f64;
        let var: f64 = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / x.cols as f64;
        for j in 0..x.cols {
            out.v[i * x.cols + j] = (row[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j];
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Plain softmax attention over all pairs, no mask at all.
pub fn dense_block(x: &Mat, p: &AttentionLayerParams) -> Mat {
    let d = x.cols;
    let dh = d / p.heads;
    let h = layer_norm(x, &p.norm1_gain, &p.norm1_bias);
    let qkv = h.mul(&Mat::from_tensor(&p.qkv));
    let mut merged = Mat { rows: x.rows, cols: d, v: vec![0.0; x.rows * d] };
    for head in 0..p.heads {
        let q = qkv.cols_range(head * dh, dh);
        let k = qkv.cols_range(d + head * dh, dh);
        let v = qkv.cols_range(2 * d + head * dh, dh);
        for i in 0..x.rows {
            let scores: Vec<f64> = (0..x.rows)
                .map(|j| (0..dh).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                merged.v[i * d + head * dh + c] = (0..x.rows).map(|j| e[j] / z * v.at(j, c)).sum();
            }
        }
    }
    let attn = merged.mul(&Mat::from_tensor(&p.out_weight)).add_row(&Mat::from_tensor(&p.out_bias));
    let x = x.plus(&attn);
    let h = layer_norm(&x, &p.norm2_gain, &p.norm2_bias);
    let mut f = h.mul(&Mat::from_tensor(&p.ff1_weight)).add_row(&Mat::from_tensor(&p.ff1_bias));
    f.v.iter_mut().for_each(|a| *a = gelu(*a));
    let f = f.mul(&Mat::from_tensor(&p.ff2_weight)).add_row(&Mat::from_tensor(&p.ff2_bias));
    x.plus(&f)
}

/// Unpruned pose forward: every token attends to every token in both stacks.
/// Returns `joints × (heatmap_h · heatmap_w)`.
pub fn dense_forward(image: &Tensor, params: &PoseModelParams, config: &ModelConfig) -> Mat {
    assert_eq!(config.stem_stride, 1, "reference covers stride 1 only");
    let (c, h, w) = (config.channels, config.image_h, config.image_w);
    let (ph, pw) = (config.patch_h, config.patch_w);
    let mut patches = Vec::new();
    for gy in 0..h / ph {
        for gx in 0..w / pw {
            for ch in 0..c {
                for dy in 0..ph {
                    for dx in 0..pw {
                        patches.push(image.data()[(ch * h + gy * ph + dy) * w + gx * pw + dx]);
                    }
                }
            }
        }
    }
    let np = (h / ph) * (w / pw);
    let patches = Mat { rows: np, cols: c * ph * pw, v: patches };
    let visual = patches
        .mul(&Mat::from_tensor(&params.patch_projection))
        .plus(&Mat::from_tensor(params.positional.as_ref().expect("learned encoding")));
    let kp = Mat::from_tensor(&params.keypoint_tokens);
    let mut x = Mat { rows: kp.rows + np, cols: kp.cols, v: [kp.v.clone(), visual.v].concat() };
    for layer in &params.encoder {
        x = dense_block(&x, layer);
    }
    let j = config.joint_count;
    let mut k = Mat { rows: j, cols: x.cols, v: x.v[..j * x.cols].to_vec() };
    for layer in &params.graph {
        k = dense_block(&k, layer);
    }
    let hd = &params.head;
    let y = layer_norm(&k, &hd.norm_gain, &hd.norm_bias);
    let mut y = y.mul(&Mat::from_tensor(&hd.hidden_weight)).add_row(&Mat::from_tensor(&hd.hidden_bias));
    y.v.iter_mut().for_each(|a| *a = gelu(*a));
    y.mul(&Mat::from_tensor(&hd.out_weight)).add_row(&Mat::from_tensor(&hd.out_bias))
}

/// `|a - n| / max(|a| + |n|, floor)`
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Central difference of `f` at `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let keep = x[i];
    x[i] = keep + h;
    let up = f(x);
    x[i] = keep - h;
    let down = f(x);
    x[i] = keep;
    (up - down) / (2.0 * h)
}
