//! Top-K attention pruning over the patch-to-patch block.
//!
//! The mask starts all-ones. At each scheduled layer the head-averaged
//! attention of that layer ranks every row's surviving columns and only the
//! top `K` stay. The new mask is used from the following layer on, so the
//! update layer itself still runs under the previous mask. Supports only
//! shrink: columns dropped at one stage never come back.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::tensor::Tensor;

/// How `K` is derived for a row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KMode {
    /// `K = max(1, round(akr · support))` of the row's current support.
    #[default]
    SupportRelative,
    /// `K = max(1, round(akr · n))`, capped at the current support.
    NRelative,
}

impl std::str::FromStr for KMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "support-relative" => Ok(KMode::SupportRelative),
            "n-relative" => Ok(KMode::NRelative),
            other => Err(Error::Config(format!("unknown k mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    /// 1-indexed encoder layers, strictly increasing.
    pub update_layers: Vec<usize>,
    /// Attention-keep ratio in (0, 1].
    pub akr: f64,
    #[serde(default)]
    pub k_mode: KMode,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            update_layers: vec![3, 6, 9],
            akr: 0.6,
            k_mode: KMode::SupportRelative,
        }
    }
}

fn check_akr(akr: f64) -> Result<()> {
    if akr > 0.0 && akr <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("attention-keep ratio {akr} outside (0, 1]")))
    }
}

impl PruneSchedule {
    pub fn new(update_layers: Vec<usize>, akr: f64) -> Result<Self> {
        let s = PruneSchedule {
            update_layers,
            akr,
            k_mode: KMode::SupportRelative,
        };
        s.validate(usize::MAX)?;
        Ok(s)
    }

    pub fn with_k_mode(mut self, mode: KMode) -> Self {
        self.k_mode = mode;
        self
    }

    pub fn validate(&self, encoder_layers: usize) -> Result<()> {
        check_akr(self.akr)?;
        if self.update_layers.first() == Some(&0) {
            return Err(Error::Config("update layers are 1-indexed".into()));
        }
        if self.update_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "update layers {:?} are not strictly increasing",
                self.update_layers
            )));
        }
        if let Some(last) = self.update_layers.last() {
            if *last > encoder_layers {
                return Err(Error::Config(format!(
                    "update layer {last} exceeds encoder depth {encoder_layers}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_update_layer(&self, layer: usize) -> bool {
        self.update_layers.binary_search(&layer).is_ok()
    }

    /// Number of updates that have taken effect by the time `layer` runs.
    pub fn stage_at(&self, layer: usize) -> usize {
        self.update_layers.iter().filter(|u| **u < layer).count()
    }
}

/// Evolving visual-block mask of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    pub current: AttentionMask,
    pub stage: usize,
    /// Total support after each stage; entry 0 is the initial all-ones mask.
    pub history: Vec<usize>,
    /// Encoder layer at which each update was applied.
    pub update_layers: Vec<usize>,
}

impl MaskState {
    pub fn new(visual_tokens: usize) -> Self {
        MaskState {
            current: AttentionMask::all_ones(visual_tokens, visual_tokens),
            stage: 0,
            history: vec![visual_tokens * visual_tokens],
            update_layers: Vec::new(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.current.rows()
    }
}

fn row_keep_count(support: usize, n: usize, akr: f64, mode: KMode) -> usize {
    // f64::round rounds half away from zero
    let k = match mode {
        KMode::SupportRelative => (akr * support as f64).round() as usize,
        KMode::NRelative => (akr * n as f64).round() as usize,
    };
    k.max(1).min(support)
}

/// Keeps, per row, the `K` largest scores among the columns `prev` allows.
/// Ties go to the lower column index.
pub fn topk_row_mask(
    scores: &Tensor,
    prev: &AttentionMask,
    akr: f64,
    mode: KMode,
) -> Result<AttentionMask> {
    check_akr(akr)?;
    let (r, c) = scores.dims2()?;
    if [r, c] != prev.shape() {
        return Err(Error::dim("topk_row_mask", scores.shape(), &prev.shape()));
    }
    prev.ensure_support()?;
    let mut bits = vec![false; r * c];
    let mut candidates: Vec<usize> = Vec::with_capacity(c);
    for i in 0..r {
        let row = &scores.data()[i * c..(i + 1) * c];
        candidates.clear();
        candidates.extend((0..c).filter(|j| prev.get(i, *j)));
        let k = row_keep_count(candidates.len(), c, akr, mode);
        if k < candidates.len() {
            candidates.sort_by(|a, b| row[*b].total_cmp(&row[*a]).then(a.cmp(b)));
            candidates.truncate(k);
        }
        for j in &candidates {
            bits[i * c + j] = true;
        }
    }
    AttentionMask::from_bits(r, c, bits)
}

/// Applies an update if `layer` is scheduled. `visual_offset` is the index of
/// the first visual token in the record (the keypoint token count). Returns
/// whether the mask changed stage.
pub fn apply_schedule(
    layer: usize,
    record: Option<&AttentionRecord>,
    state: &mut MaskState,
    schedule: &PruneSchedule,
    visual_offset: usize,
) -> Result<bool> {
    if layer == 0 {
        return Err(Error::Contract("layer indices are 1-based".into()));
    }
    if !schedule.is_update_layer(layer) {
        return Ok(false);
    }
    let record = record.ok_or_else(|| {
        Error::Contract(format!("attention record not retained at update layer {layer}"))
    })?;
    let scores = record.trailing_block(visual_offset)?;
    let next = topk_row_mask(&scores, &state.current, schedule.akr, schedule.k_mode)?;
    state.history.push(next.total_support());
    state.current = next;
    state.stage += 1;
    state.update_layers.push(layer);
    Ok(true)
}

/// Token counts the sparsity accounting needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub encoder_layers: usize,
    pub keypoint_tokens: usize,
    pub visual_tokens: usize,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub stages: usize,
    /// Visual-block density per stage, starting with the initial mask.
    pub per_stage_density: Vec<f64>,
    /// Mean over encoder layers of the visual-block density in effect.
    pub layer_weighted_density: f64,
    /// Encoder attention multiply-accumulates relative to fully dense attention.
    pub mac_ratio: f64,
    pub attention_macs: u64,
    pub dense_attention_macs: u64,
}

/// Densities and predicted attention cost of a completed pass.
///
/// Per encoder layer the attention cost is `2 · d · nnz` multiply-accumulates
/// (scores plus weighted values), where `nnz` counts the allowed pairs of the
/// full token mask. Keypoint rows and columns are always dense.
pub fn sparsity_report(state: &MaskState, geometry: AttentionGeometry) -> SparsityStats {
    let n = geometry.visual_tokens;
    let total = geometry.keypoint_tokens + n;
    let n2 = (n * n) as f64;
    let per_stage_density: Vec<f64> = state.history.iter().map(|s| *s as f64 / n2).collect();
    let layers = geometry.encoder_layers.max(1);
    let mut density_sum = 0.0;
    let mut macs: u64 = 0;
    for layer in 1..=geometry.encoder_layers {
        let stage = state.update_layers.iter().filter(|u| **u < layer).count();
        density_sum += per_stage_density[stage];
        let nnz = (total * total - n * n + state.history[stage]) as u64;
        macs += 2 * geometry.embed_dim as u64 * nnz;
    }
    let dense = 2 * geometry.embed_dim as u64 * (total * total) as u64 * geometry.encoder_layers as u64;
    SparsityStats {
        stages: state.stage,
        per_stage_density,
        layer_weighted_density: density_sum / layers as f64,
        mac_ratio: if dense == 0 { 1.0 } else { macs as f64 / dense as f64 },
        attention_macs: macs,
        dense_attention_macs: dense,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_from(avg: Tensor) -> AttentionRecord {
        AttentionRecord::from_heads(&[&avg]).unwrap()
    }

    fn uniform_record(n: usize) -> AttentionRecord {
        record_from(Tensor::full(&[n, n], 1.0 / n as f64))
    }

    #[test]
    fn keeps_top_two_of_ordered_row() {
        let scores = Tensor::new(&[1, 4], vec![0.5, 0.3, 0.15, 0.05]).unwrap();
        let m = topk_row_mask(&scores, &AttentionMask::all_ones(1, 4), 0.5, KMode::SupportRelative).unwrap();
        assert_eq!(m.row(0), &[true, true, false, false]);
    }

    #[test]
    fn keep_all_returns_previous_mask() {
        let prev = AttentionMask::from_values(2, 3, &[1, 0, 1, 0, 1, 1]).unwrap();
        let scores = Tensor::new(&[2, 3], vec![0.1, 0.7, 0.2, 0.3, 0.3, 0.4]).unwrap();
        assert_eq!(topk_row_mask(&scores, &prev, 1.0, KMode::SupportRelative).unwrap(), prev);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        // round(0.34 * 3) = round(1.02) = 1; both candidates enumerated: {0} wins over {1}
        let scores = Tensor::new(&[1, 3], vec![0.4, 0.4, 0.2]).unwrap();
        let m = topk_row_mask(&scores, &AttentionMask::all_ones(1, 3), 0.34, KMode::SupportRelative).unwrap();
        assert_eq!(m.row(0), &[true, false, false]);
    }

    #[test]
    fn akr_out_of_range_is_config_error() {
        let s = Tensor::ones(&[1, 1]);
        for akr in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                topk_row_mask(&s, &AttentionMask::all_ones(1, 1), akr, KMode::SupportRelative),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn selection_stays_inside_previous_support() {
        let prev = AttentionMask::from_values(1, 4, &[0, 1, 0, 1]).unwrap();
        let scores = Tensor::new(&[1, 4], vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let m = topk_row_mask(&scores, &prev, 0.5, KMode::SupportRelative).unwrap();
        assert_eq!(m.row(0), &[false, false, false, true]);
    }

    #[test]
    fn non_update_layer_is_a_no_op() {
        let schedule = PruneSchedule::default();
        let mut state = MaskState::new(4);
        let before = state.clone();
        assert!(!apply_schedule(2, None, &mut state, &schedule, 0).unwrap());
        assert_eq!(state, before);
    }

    #[test]
    fn missing_record_at_update_layer_is_contract_error() {
        let mut state = MaskState::new(4);
        let err = apply_schedule(3, None, &mut state, &PruneSchedule::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn single_update_keeps_six_of_ten() {
        let mut state = MaskState::new(10);
        apply_schedule(3, Some(&uniform_record(10)), &mut state, &PruneSchedule::default(), 0).unwrap();
        assert!(state.current.row_support().iter().all(|s| *s == 6));
        assert_eq!(state.stage, 1);
    }

    #[test]
    fn iterated_rounding_over_three_updates() {
        // 100 -> round(60.0) = 60 -> round(36.0) = 36 -> round(21.6) = 22
        let schedule = PruneSchedule::default();
        let mut state = MaskState::new(100);
        let mut supports = Vec::new();
        for layer in 1..=12 {
            apply_schedule(layer, Some(&uniform_record(100)), &mut state, &schedule, 0).unwrap();
            if schedule.is_update_layer(layer) {
                supports.push(state.current.row_support()[0]);
            }
        }
        assert_eq!(supports, vec![60, 36, 22]);
    }

    #[test]
    fn offset_selects_visual_block() {
        // 1 keypoint token + 2 visual tokens; visual row 0 prefers column 1
        let avg = Tensor::new(&[3, 3], vec![0.3, 0.3, 0.4, 0.5, 0.1, 0.4, 0.2, 0.5, 0.3]).unwrap();
        let mut state = MaskState::new(2);
        let schedule = PruneSchedule::new(vec![1], 0.5).unwrap();
        apply_schedule(1, Some(&record_from(avg)), &mut state, &schedule, 1).unwrap();
        assert_eq!(state.current.row(0), &[false, true]);
        assert_eq!(state.current.row(1), &[true, false]);
    }

    #[test]
    fn n_relative_mode_makes_later_updates_vacuous() {
        let schedule = PruneSchedule::default().with_k_mode(KMode::NRelative);
        let mut state = MaskState::new(10);
        for layer in 1..=12 {
            apply_schedule(layer, Some(&uniform_record(10)), &mut state, &schedule, 0).unwrap();
        }
        assert_eq!(state.history, vec![100, 60, 60, 60]);
    }

    #[test]
    fn schedule_validation() {
        assert!(PruneSchedule::new(vec![3, 3], 0.5).is_err());
        assert!(PruneSchedule::new(vec![0, 2], 0.5).is_err());
        assert!(PruneSchedule::new(vec![3, 6], 0.0).is_err());
        assert!(PruneSchedule::default().validate(8).is_err());
        assert!(PruneSchedule::default().validate(12).is_ok());
        assert_eq!(PruneSchedule::default().stage_at(3), 0);
        assert_eq!(PruneSchedule::default().stage_at(4), 1);
    }

    #[test]
    fn report_examples() {
        let geometry = |layers, n| AttentionGeometry {
            encoder_layers: layers,
            keypoint_tokens: 0,
            visual_tokens: n,
            embed_dim: 8,
        };

        let mut dense = MaskState::new(6);
        let keep_all = PruneSchedule::new(vec![1, 2], 1.0).unwrap();
        for layer in 1..=3 {
            apply_schedule(layer, Some(&uniform_record(6)), &mut dense, &keep_all, 0).unwrap();
        }
        let stats = sparsity_report(&dense, geometry(3, 6));
        assert!(stats.per_stage_density.iter().all(|d| *d == 1.0));
        assert_eq!(stats.mac_ratio, 1.0);

        let mut half = MaskState::new(6);
        let s = PruneSchedule::new(vec![1], 0.5).unwrap();
        apply_schedule(1, Some(&uniform_record(6)), &mut half, &s, 0).unwrap();
        assert_eq!(sparsity_report(&half, geometry(2, 6)).per_stage_density, vec![1.0, 0.5]);

        let schedule = PruneSchedule::default();
        let mut state = MaskState::new(100);
        for layer in 1..=12 {
            apply_schedule(layer, Some(&uniform_record(100)), &mut state, &schedule, 0).unwrap();
        }
        let stats = sparsity_report(&state, geometry(12, 100));
        // (3 * 1.0 + 3 * 0.60 + 3 * 0.36 + 3 * 0.22) / 12
        assert!((stats.layer_weighted_density - 0.545).abs() < 1e-12);
        assert!((stats.mac_ratio - 0.545).abs() < 1e-12);
    }
}
