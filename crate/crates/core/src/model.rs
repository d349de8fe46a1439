//! The full network: patch tokens, keypoint tokens, the pruned encoder, the
//! joint-masked graph stack and the heatmap head.
//!
//! Token order is `[keypoints, patches]`. Keypoint rows and columns of the
//! encoder mask are always dense; only the patch-to-patch block is pruned.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{encoder_block_on, normal_tensor, xavier, AttentionLayerParams, AttentionRecord, LayerVars};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::parallel::{map_indexed, Execution};
use crate::pruning::{apply_schedule, sparsity_report, AttentionGeometry, MaskState, PruneSchedule, SparsityStats};
use crate::skeleton::JointMask;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalEncoding {
    #[default]
    Learned,
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    /// Average-pool factor applied before patching, standing in for a backbone stride.
    pub stem_stride: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub graph_layers: usize,
    pub joint_count: usize,
    pub heatmap_h: usize,
    pub heatmap_w: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    #[serde(default)]
    pub positional: PositionalEncoding,
    pub schedule: PruneSchedule,
}

impl Default for ModelConfig {
    /// Full-size model: 12 encoder layers, 8 graph layers, width 192, 8 heads,
    /// 256×256 input with 64×64 heatmaps.
    fn default() -> Self {
        ModelConfig {
            image_h: 256,
            image_w: 256,
            channels: 3,
            stem_stride: 4,
            patch_h: 4,
            patch_w: 4,
            embed_dim: 192,
            heads: 8,
            encoder_layers: 12,
            graph_layers: 8,
            joint_count: 16,
            heatmap_h: 64,
            heatmap_w: 64,
            mlp_ratio: 3,
            head_hidden: 512,
            positional: PositionalEncoding::Learned,
            schedule: PruneSchedule::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and laptop runs.
    pub fn toy() -> Self {
        ModelConfig {
            image_h: 32,
            image_w: 32,
            channels: 1,
            stem_stride: 1,
            patch_h: 4,
            patch_w: 4,
            embed_dim: 16,
            heads: 2,
            encoder_layers: 3,
            graph_layers: 2,
            joint_count: 5,
            heatmap_h: 16,
            heatmap_w: 16,
            mlp_ratio: 3,
            head_hidden: 32,
            positional: PositionalEncoding::Learned,
            schedule: PruneSchedule {
                update_layers: vec![1, 2],
                akr: 0.6,
                ..PruneSchedule::default()
            },
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_h / self.stem_stride.max(1) / self.patch_h.max(1),
            self.image_w / self.stem_stride.max(1) / self.patch_w.max(1),
        )
    }

    pub fn visual_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn tokens(&self) -> usize {
        self.joint_count + self.visual_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_h * self.patch_w
    }

    pub fn heatmap_len(&self) -> usize {
        self.heatmap_h * self.heatmap_w
    }

    pub fn geometry(&self) -> AttentionGeometry {
        AttentionGeometry {
            encoder_layers: self.encoder_layers,
            keypoint_tokens: self.joint_count,
            visual_tokens: self.visual_tokens(),
            embed_dim: self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("stem_stride", self.stem_stride),
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("joint_count", self.joint_count),
            ("heatmap_h", self.heatmap_h),
            ("heatmap_w", self.heatmap_w),
            ("mlp_ratio", self.mlp_ratio),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let (sh, sw) = (self.image_h / self.stem_stride, self.image_w / self.stem_stride);
        if self.image_h % self.stem_stride != 0 || self.image_w % self.stem_stride != 0 {
            return Err(Error::Config(format!(
                "stem stride {} does not divide {}x{}",
                self.stem_stride, self.image_h, self.image_w
            )));
        }
        if sh % self.patch_h != 0 || sw % self.patch_w != 0 {
            return Err(Error::Config(format!(
                "patch {}x{} does not divide the {sh}x{sw} grid",
                self.patch_h, self.patch_w
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.positional == PositionalEncoding::Sinusoidal && self.embed_dim % 4 != 0 {
            return Err(Error::Config("sinusoidal encoding needs embed_dim divisible by 4".into()));
        }
        self.schedule.validate(self.encoder_layers)
    }
}

/// Fixed 2-D sine/cosine table: the first half of each row encodes the
/// patch row, the second half the patch column.
pub fn sinusoidal_encoding(grid_h: usize, grid_w: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for pos in [r as f64, c as f64] {
                for k in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    data.push((pos * freq).sin());
                }
                for k in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    data.push((pos * freq).cos());
                }
            }
        }
    }
    Tensor::new(&[grid_h * grid_w, dim], data).unwrap()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseModelParams {
    /// `patch_dim × d`
    pub patch_projection: Tensor,
    /// `n_patches × d`; absent with fixed sinusoidal encoding.
    pub positional: Option<Tensor>,
    /// `joints × d`
    pub keypoint_tokens: Tensor,
    pub encoder: Vec<AttentionLayerParams>,
    pub graph: Vec<AttentionLayerParams>,
    pub head: HeadParams,
}

const KEYPOINT_INIT_STD: f64 = 0.02;

impl PoseModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let patch_projection = xavier(&mut rng, config.patch_dim(), d);
        let positional = match config.positional {
            PositionalEncoding::Learned => {
                Some(normal_tensor(&mut rng, &[config.visual_tokens(), d], KEYPOINT_INIT_STD))
            }
            PositionalEncoding::Sinusoidal => None,
        };
        let keypoint_tokens = normal_tensor(&mut rng, &[config.joint_count, d], KEYPOINT_INIT_STD);
        let encoder = (0..config.encoder_layers)
            .map(|_| AttentionLayerParams::init(&mut rng, d, config.heads, config.mlp_ratio))
            .collect::<Result<_>>()?;
        let graph = (0..config.graph_layers)
            .map(|_| AttentionLayerParams::init(&mut rng, d, config.heads, config.mlp_ratio))
            .collect::<Result<_>>()?;
        let head = HeadParams {
            norm_gain: Tensor::ones(&[d]),
            norm_bias: Tensor::zeros(&[d]),
            hidden_weight: xavier(&mut rng, d, config.head_hidden),
            hidden_bias: Tensor::zeros(&[config.head_hidden]),
            out_weight: xavier(&mut rng, config.head_hidden, config.heatmap_len()),
            out_bias: Tensor::zeros(&[config.heatmap_len()]),
        };
        Ok(PoseModelParams {
            patch_projection,
            positional,
            keypoint_tokens,
            encoder,
            graph,
            head,
        })
    }

    /// Every tensor with a stable dotted name, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("patch_projection".into(), &self.patch_projection)];
        if let Some(p) = &self.positional {
            out.push(("positional_encoding".into(), p));
        }
        out.push(("keypoint_tokens".into(), &self.keypoint_tokens));
        for (stack, layers) in [("encoder", &self.encoder), ("graph", &self.graph)] {
            for (i, layer) in layers.iter().enumerate() {
                for (name, t) in layer.tensors() {
                    out.push((format!("{stack}.{i}.{name}"), t));
                }
            }
        }
        let h = &self.head;
        out.extend([
            ("head.norm_gain".to_string(), &h.norm_gain),
            ("head.norm_bias".to_string(), &h.norm_bias),
            ("head.hidden_weight".to_string(), &h.hidden_weight),
            ("head.hidden_bias".to_string(), &h.hidden_bias),
            ("head.out_weight".to_string(), &h.out_weight),
            ("head.out_bias".to_string(), &h.out_bias),
        ]);
        out
    }

    /// Mutable view in the same order as [`PoseModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.patch_projection];
        if let Some(p) = &mut self.positional {
            out.push(p);
        }
        out.push(&mut self.keypoint_tokens);
        for layer in self.encoder.iter_mut().chain(self.graph.iter_mut()) {
            out.extend(layer.tensors_mut().into_iter().map(|(_, t)| t));
        }
        let h = &mut self.head;
        out.extend([
            &mut h.norm_gain,
            &mut h.norm_bias,
            &mut h.hidden_weight,
            &mut h.hidden_bias,
            &mut h.out_weight,
            &mut h.out_bias,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor shape against `config`.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let template = PoseModelParams::init(config, 0)?;
        let mine = self.named_tensors();
        let want = template.named_tensors();
        if mine.len() != want.len() {
            return Err(Error::Incompatible(format!(
                "{} parameter tensors, configuration needs {}",
                mine.len(),
                want.len()
            )));
        }
        for ((name, t), (wname, w)) in mine.iter().zip(&want) {
            if name != wname || t.shape() != w.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} {:?} does not match {wname} {:?}",
                    t.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        let patch_projection = reg(&self.patch_projection);
        let positional = self.positional.as_ref().map(&mut reg);
        let keypoint_tokens = reg(&self.keypoint_tokens);
        let encoder = self.encoder.iter().map(|l| l.bind_as(tape, trainable)).collect();
        let graph = self.graph.iter().map(|l| l.bind_as(tape, trainable)).collect();
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        let h = &self.head;
        let head = HeadVars {
            norm_gain: reg(&h.norm_gain),
            norm_bias: reg(&h.norm_bias),
            hidden_weight: reg(&h.hidden_weight),
            hidden_bias: reg(&h.hidden_bias),
            out_weight: reg(&h.out_weight),
            out_bias: reg(&h.out_bias),
        };
        ModelVars {
            patch_projection,
            positional,
            keypoint_tokens,
            encoder,
            graph,
            head,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub patch_projection: Var,
    pub positional: Option<Var>,
    pub keypoint_tokens: Var,
    pub encoder: Vec<LayerVars>,
    pub graph: Vec<LayerVars>,
    pub head: HeadVars,
}

impl ModelVars {
    /// Vars in the order of [`PoseModelParams::named_tensors`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.patch_projection];
        out.extend(self.positional);
        out.push(self.keypoint_tokens);
        for layer in self.encoder.iter().chain(&self.graph) {
            out.extend(layer.vars());
        }
        let h = &self.head;
        out.extend([h.norm_gain, h.norm_bias, h.hidden_weight, h.hidden_bias, h.out_weight, h.out_bias]);
        out
    }
}

/// Average-pools by the stem stride and cuts non-overlapping patches in
/// row-major patch order. Each row is `channel, patch row, patch column`
/// flattened.
pub fn patchify(image: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let expect = [config.channels, config.image_h, config.image_w];
    if image.shape() != expect {
        return Err(Error::Config(format!(
            "image shape {:?} does not match configured {:?}",
            image.shape(),
            expect
        )));
    }
    let s = config.stem_stride;
    let (h, w) = (config.image_h / s, config.image_w / s);
    let src = image.data();
    let pooled: Vec<f64> = if s == 1 {
        src.to_vec()
    } else {
        let mut out = vec![0.0; config.channels * h * w];
        let inv = 1.0 / (s * s) as f64;
        for c in 0..config.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..s {
                        let row = (c * config.image_h + y * s + dy) * config.image_w + x * s;
                        acc += src[row..row + s].iter().sum::<f64>();
                    }
                    out[(c * h + y) * w + x] = acc * inv;
                }
            }
        }
        out
    };
    let (ph, pw) = (config.patch_h, config.patch_w);
    let (gh, gw) = config.grid();
    let mut patches = Vec::with_capacity(gh * gw * config.patch_dim());
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..config.channels {
                for dy in 0..ph {
                    let start = (c * h + gy * ph + dy) * w + gx * pw;
                    patches.extend_from_slice(&pooled[start..start + pw]);
                }
            }
        }
    }
    Tensor::new(&[gh * gw, config.patch_dim()], patches)
}

fn embed_on(tape: &mut Tape, vars: &ModelVars, image: &Tensor, config: &ModelConfig) -> Result<Var> {
    let patches = tape.constant(patchify(image, config)?);
    let projected = tape.matmul(patches, vars.patch_projection)?;
    let pos = match vars.positional {
        Some(p) => p,
        None => {
            let (gh, gw) = config.grid();
            tape.constant(sinusoidal_encoding(gh, gw, config.embed_dim))
        }
    };
    tape.add(projected, pos)
}

/// Visual tokens `patches · W + E`.
pub fn patchify_embed(image: &Tensor, params: &PoseModelParams, config: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let v = embed_on(&mut tape, &vars, image, config)?;
    Ok(tape.value(v).clone())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Keep the attention maps of every layer, not just the update layers.
    pub retain_records: bool,
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub mask_state: MaskState,
    pub sparsity: SparsityStats,
    /// Visual-block mask after each update.
    pub stage_masks: Vec<AttentionMask>,
    /// `(layer, record)` for encoder layers, when retained.
    pub encoder_records: Vec<(usize, AttentionRecord)>,
    pub graph_records: Vec<(usize, AttentionRecord)>,
}

/// Records the whole forward pass; returns heatmap logits `joints × (h·w)`.
pub fn forward_on(
    tape: &mut Tape,
    vars: &ModelVars,
    image: &Tensor,
    config: &ModelConfig,
    joint_mask: &JointMask,
    options: ForwardOptions,
) -> Result<(Var, Diagnostics)> {
    let j = config.joint_count;
    if joint_mask.joints() != j {
        return Err(Error::Config(format!(
            "joint mask covers {} joints, model has {j}",
            joint_mask.joints()
        )));
    }
    let visual = embed_on(tape, vars, image, config)?;
    let mut x = tape.concat_rows(&[vars.keypoint_tokens, visual])?;

    let total = config.tokens();
    let schedule = &config.schedule;
    let mut state = MaskState::new(config.visual_tokens());
    let mut mask = Arc::new(AttentionMask::all_ones(total, total));
    let mut stage_masks = Vec::new();
    let mut encoder_records = Vec::new();
    for (i, layer) in vars.encoder.iter().enumerate() {
        let index = i + 1;
        let retain = options.retain_records || schedule.is_update_layer(index);
        let (out, record) = encoder_block_on(tape, x, &mask, layer, retain)?;
        if apply_schedule(index, record.as_ref(), &mut state, schedule, j)? {
            mask = Arc::new(AttentionMask::with_trailing_block(total, j, &state.current)?);
            stage_masks.push(state.current.clone());
        }
        if options.retain_records {
            encoder_records.push((index, record.expect("retained")));
        }
        x = out;
    }

    let mut k = tape.slice_rows(x, 0, j)?;
    let graph_mask = Arc::new(joint_mask.as_mask().clone());
    let mut graph_records = Vec::new();
    for (i, layer) in vars.graph.iter().enumerate() {
        let (out, record) = encoder_block_on(tape, k, &graph_mask, layer, options.retain_records)?;
        if let Some(r) = record {
            graph_records.push((i + 1, r));
        }
        k = out;
    }

    let h = &vars.head;
    let y = tape.layer_norm(k, h.norm_gain, h.norm_bias)?;
    let y = tape.linear(y, h.hidden_weight, Some(h.hidden_bias))?;
    let y = tape.gelu(y);
    let heatmaps = tape.linear(y, h.out_weight, Some(h.out_bias))?;

    let sparsity = sparsity_report(&state, config.geometry());
    Ok((
        heatmaps,
        Diagnostics {
            mask_state: state,
            sparsity,
            stage_masks,
            encoder_records,
            graph_records,
        },
    ))
}

/// Gradient-free forward pass; heatmaps are `joints × h × w`.
pub fn forward(
    image: &Tensor,
    params: &PoseModelParams,
    config: &ModelConfig,
    joint_mask: &JointMask,
    options: ForwardOptions,
) -> Result<(Tensor, Diagnostics)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let (out, diag) = forward_on(&mut tape, &vars, image, config, joint_mask, options)?;
    let heatmaps = tape
        .value(out)
        .clone()
        .reshape(&[config.joint_count, config.heatmap_h, config.heatmap_w])?;
    Ok((heatmaps, diag))
}

/// Heatmaps for many images, in input order.
pub fn forward_batch(
    images: &[&Tensor],
    params: &PoseModelParams,
    config: &ModelConfig,
    joint_mask: &JointMask,
    exec: Execution,
) -> Result<Vec<Tensor>> {
    map_indexed(exec, images.len(), |i| {
        forward(images[i], params, config, joint_mask, ForwardOptions::default()).map(|(h, _)| h)
    })
    .into_iter()
    .collect()
}

fn visibility_weights(visible: &[bool], plane: usize) -> (Tensor, usize) {
    let count = visible.iter().filter(|v| **v).count();
    let data = visible
        .iter()
        .flat_map(|v| std::iter::repeat_n(if *v { 1.0 } else { 0.0 }, plane))
        .collect();
    (Tensor::new(&[visible.len(), plane], data).unwrap(), count)
}

/// Mean squared error over the pixels of visible joints.
pub fn loss_mse_on(tape: &mut Tape, pred: Var, target: &Tensor, visible: &[bool]) -> Result<Var> {
    let (j, plane) = match tape.shape(pred) {
        [j, p] => (*j, *p),
        other => return Err(Error::dim("loss_mse", other, target.shape())),
    };
    if target.len() != j * plane || visible.len() != j {
        return Err(Error::dim("loss_mse", &[j, plane], target.shape()));
    }
    let (weights, count) = visibility_weights(visible, plane);
    let target = tape.constant(target.clone().reshape(&[j, plane])?);
    let weights = tape.constant(weights);
    let diff = tape.sub(pred, target)?;
    let masked = tape.mul(diff, weights)?;
    let sq = tape.mul(masked, masked)?;
    let total = tape.sum(sq);
    let denom = (count * plane) as f64;
    Ok(tape.scale(total, if count == 0 { 0.0 } else { 1.0 / denom }))
}

pub fn loss_mse(pred: &Tensor, target: &Tensor, visible: &[bool]) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape().first() != Some(&visible.len()) {
        return Err(Error::dim("loss_mse", pred.shape(), target.shape()));
    }
    let plane = pred.len() / visible.len();
    let count = visible.iter().filter(|v| **v).count();
    if count == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (j, vis) in visible.iter().enumerate() {
        if *vis {
            for k in j * plane..(j + 1) * plane {
                let d = pred.data()[k] - target.data()[k];
                acc += d * d;
            }
        }
    }
    Ok(acc / (count * plane) as f64)
}

/// Loss and parameter gradients for one sample, gradients in
/// [`PoseModelParams::named_tensors`] order.
pub fn sample_gradients(
    sample: &Sample,
    params: &PoseModelParams,
    config: &ModelConfig,
    joint_mask: &JointMask,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let (pred, _) = forward_on(&mut tape, &vars, &sample.image, config, joint_mask, ForwardOptions::default())?;
    let loss = loss_mse_on(&mut tape, pred, &sample.target, sample.visible())?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = vars
        .ordered()
        .into_iter()
        .map(|v| tape.grad(v).expect("trainable leaf").to_vec())
        .collect();
    Ok((value, grads))
}

/// Mean loss and mean gradients over a batch. `step` only labels errors.
pub fn batch_gradients(
    batch: &[&Sample],
    params: &PoseModelParams,
    config: &ModelConfig,
    joint_mask: &JointMask,
    exec: Execution,
    step: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let results = map_indexed(exec, batch.len(), |i| sample_gradients(batch[i], params, config, joint_mask));
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<Vec<Vec<f64>>> = None;
    for (i, r) in results.into_iter().enumerate() {
        let (l, g) = r?;
        if !l.is_finite() || g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step, sample: i, loss: l });
        }
        loss += l * scale;
        match &mut total {
            None => total = Some(g.into_iter().map(|v| v.into_iter().map(|x| x * scale).collect()).collect()),
            Some(acc) => {
                for (a, gv) in acc.iter_mut().zip(g) {
                    for (x, y) in a.iter_mut().zip(gv) {
                        *x += y * scale;
                    }
                }
            }
        }
    }
    Ok((loss, total.expect("non-empty batch")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut PoseModelParams, grads: &[Vec<f64>]) {
        let tensors = params.tensors_mut();
        assert_eq!(tensors.len(), grads.len(), "gradient count mismatch");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((t, g), m), v) in tensors.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((p, gi), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// One gradient computation and one optimizer update; returns the batch loss.
pub fn train_step(
    batch: &[&Sample],
    params: &mut PoseModelParams,
    config: &ModelConfig,
    joint_mask: &JointMask,
    optimizer: &mut Adam,
    exec: Execution,
) -> Result<f64> {
    let step = optimizer.steps() as usize;
    let (loss, grads) = batch_gradients(batch, params, config, joint_mask, exec, step)?;
    optimizer.update(params, &grads);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

/// Minibatch order: a fresh seeded permutation per pass over the data.
pub struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        BatchOrder {
            rng,
            order: (0..len).collect(),
            cursor: len,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Runs `train.steps` optimizer steps from `params`, calling `on_step` after
/// each one.
pub fn fit(
    params: &mut PoseModelParams,
    config: &ModelConfig,
    joint_mask: &JointMask,
    samples: &[Sample],
    train: &TrainConfig,
    exec: Execution,
    mut on_step: impl FnMut(StepRecord),
) -> Result<()> {
    if train.steps > 0 && samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order = BatchOrder::new(samples.len(), train.seed);
    let mut optimizer = Adam::new(AdamConfig {
        learning_rate: train.learning_rate,
        ..AdamConfig::default()
    });
    for step in 0..train.steps {
        let batch: Vec<&Sample> = order.next_batch(train.batch_size).into_iter().map(|i| &samples[i]).collect();
        let loss = train_step(&batch, params, config, joint_mask, &mut optimizer, exec)?;
        on_step(StepRecord { step: step + 1, loss });
    }
    Ok(())
}
