//! Heatmap decoding, PCKh and the keep-ratio ablation sweep.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Annotation, Sample};
use crate::error::{Error, Result};
use crate::model::{fit, forward, ForwardOptions, ModelConfig, PoseModelParams, TrainConfig};
use crate::parallel::{map_indexed, Execution};
use crate::pruning::{sparsity_report, MaskState, SparsityStats};
use crate::skeleton::JointMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decoder {
    /// Argmax plus a quarter-pixel step toward the larger neighbor.
    #[default]
    Refined,
    Argmax,
}

impl FromStr for Decoder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "refined" => Ok(Decoder::Refined),
            "argmax" => Ok(Decoder::Argmax),
            other => Err(Error::Config(format!("unknown decoder {other:?} (refined, argmax)"))),
        }
    }
}

/// Decodes one `h × w` map into input-image pixel coordinates `(x, y)`.
pub fn decode_heatmap(map: &[f64], h: usize, w: usize, image_h: usize, image_w: usize, decoder: Decoder) -> [f64; 2] {
    assert!(h * w == map.len() && !map.is_empty(), "heatmap extent mismatch");
    let mut best = 0;
    for (i, v) in map.iter().enumerate() {
        if *v > map[best] {
            best = i;
        }
    }
    let (r, c) = (best / w, best % w);
    let (mut x, mut y) = (c as f64, r as f64);
    if decoder == Decoder::Refined {
        if c > 0 && c + 1 < w {
            x += 0.25 * quarter_sign(map[best + 1] - map[best - 1]);
        }
        if r > 0 && r + 1 < h {
            y += 0.25 * quarter_sign(map[best + w] - map[best - w]);
        }
    }
    [x * image_w as f64 / w as f64, y * image_h as f64 / h as f64]
}

fn quarter_sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Decodes every joint of a `J × h × w` stack.
pub fn decode_heatmaps(maps: &Tensor, image_h: usize, image_w: usize, decoder: Decoder) -> Result<Vec<[f64; 2]>> {
    let [j, h, w] = match maps.shape() {
        [j, h, w] => [*j, *h, *w],
        other => return Err(Error::dim("decode_heatmaps", other, &[0, 0, 0])),
    };
    Ok((0..j)
        .map(|k| decode_heatmap(&maps.data()[k * h * w..(k + 1) * h * w], h, w, image_h, image_w, decoder))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub alpha: f64,
    /// `None` for joints never visible in the evaluated set.
    pub per_joint: Vec<Option<f64>>,
    /// Mean over joints that have a rate.
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckhReport {
    pub joint_names: Vec<String>,
    pub samples: usize,
    pub visible_counts: Vec<usize>,
    pub thresholds: Vec<ThresholdResult>,
}

/// Correct-keypoint rates at each `alpha`. A joint is correct when visible
/// and within `alpha * head_size` (inclusive) of the truth; invisible joints
/// count toward neither numerator nor denominator.
pub fn pckh(preds: &[Vec<[f64; 2]>], anns: &[Annotation], alphas: &[f64], joint_names: &[String]) -> Result<PckhReport> {
    if preds.len() != anns.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} annotations",
            preds.len(),
            anns.len()
        )));
    }
    if anns.is_empty() {
        return Err(Error::Contract("cannot compute PCKh over an empty set".into()));
    }
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::Config("PCKh thresholds must be positive".into()));
    }
    let j = joint_names.len();
    for (i, (p, a)) in preds.iter().zip(anns).enumerate() {
        if p.len() != j || a.joints.len() != j || a.visible.len() != j {
            return Err(Error::Contract(format!("sample {i} does not have {j} joints")));
        }
    }
    let mut visible_counts = vec![0usize; j];
    for a in anns {
        for (k, v) in a.visible.iter().enumerate() {
            visible_counts[k] += *v as usize;
        }
    }
    let thresholds = alphas
        .iter()
        .map(|&alpha| {
            let mut hits = vec![0usize; j];
            for (p, a) in preds.iter().zip(anns) {
                let limit = alpha * a.head_size;
                for k in 0..j {
                    if a.visible[k] {
                        let d = (p[k][0] - a.joints[k][0]).hypot(p[k][1] - a.joints[k][1]);
                        if d <= limit {
                            hits[k] += 1;
                        }
                    }
                }
            }
            let per_joint: Vec<Option<f64>> = hits
                .iter()
                .zip(&visible_counts)
                .map(|(h, n)| (*n > 0).then(|| *h as f64 / *n as f64))
                .collect();
            let rated: Vec<f64> = per_joint.iter().flatten().copied().collect();
            let mean = if rated.is_empty() { 0.0 } else { rated.iter().sum::<f64>() / rated.len() as f64 };
            ThresholdResult { alpha, per_joint, mean }
        })
        .collect();
    Ok(PckhReport {
        joint_names: joint_names.to_vec(),
        samples: anns.len(),
        visible_counts,
        thresholds,
    })
}

impl PckhReport {
    pub fn at(&self, alpha: f64) -> Option<&ThresholdResult> {
        self.thresholds.iter().find(|t| t.alpha == alpha)
    }

    pub fn mean_at(&self, alpha: f64) -> Option<f64> {
        self.at(alpha).map(|t| t.mean)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-joint columns at the first threshold, then one mean column per
    /// threshold.
    pub fn columns(&self) -> Vec<String> {
        let mut cols = self.joint_names.clone();
        for (i, t) in self.thresholds.iter().enumerate() {
            cols.push(if i == 0 { "Mean".into() } else { format!("Mean@{}", t.alpha) });
        }
        cols
    }

    /// Percentages for [`PckhReport::columns`].
    pub fn cells(&self) -> Vec<String> {
        let mut cells: Vec<String> = self.thresholds[0]
            .per_joint
            .iter()
            .map(|r| r.map_or("-".into(), |v| format!("{:.1}", v * 100.0)))
            .collect();
        for (i, t) in self.thresholds.iter().enumerate() {
            cells.push(if i == 0 { format!("{:.1}", t.mean * 100.0) } else { format!("{:.2}", t.mean * 100.0) });
        }
        cells
    }

    pub fn to_table(&self, label: &str) -> String {
        render_table(&["Method".to_string()].into_iter().chain(self.columns()).collect::<Vec<_>>(), &[
            std::iter::once(label.to_string()).chain(self.cells()).collect(),
        ])
    }
}

/// Left-aligned first column, right-aligned rest.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "  {c:>w$}");
            }
        }
        out.push('\n');
    };
    line(&mut out, header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule);
    for row in rows {
        line(&mut out, row);
    }
    out
}

/// Predicted coordinates for every sample, in order.
pub fn predict(
    images: &[&Tensor],
    params: &PoseModelParams,
    config: &ModelConfig,
    joint_mask: &JointMask,
    decoder: Decoder,
    exec: Execution,
) -> Result<Vec<Vec<[f64; 2]>>> {
    map_indexed(exec, images.len(), |i| {
        let (maps, _) = forward(images[i], params, config, joint_mask, ForwardOptions::default())?;
        decode_heatmaps(&maps, config.image_h, config.image_w, decoder)
    })
    .into_iter()
    .collect()
}

pub fn evaluate(
    samples: &[Sample],
    params: &PoseModelParams,
    config: &ModelConfig,
    joint_mask: &JointMask,
    alphas: &[f64],
    joint_names: &[String],
    decoder: Decoder,
    exec: Execution,
) -> Result<PckhReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let preds = predict(&images, params, config, joint_mask, decoder, exec)?;
    let anns: Vec<Annotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    pckh(&preds, &anns, alphas, joint_names)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub akr: f64,
    pub report: PckhReport,
    pub sparsity: SparsityStats,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_table(&self) -> String {
        let Some(first) = self.rows.first() else {
            return String::new();
        };
        let mut header = vec!["Method".to_string()];
        header.extend(first.report.columns());
        header.extend(["Density".to_string(), "MACs".to_string()]);
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![format!("AKR = {:?}", r.akr)];
                row.extend(r.report.cells());
                row.push(format!("{:.4}", r.sparsity.layer_weighted_density));
                row.push(format!("{:.4}", r.sparsity.mac_ratio));
                row
            })
            .collect();
        render_table(&header, &rows)
    }
}

#[derive(Clone, Debug)]
pub struct SweepSetup<'a> {
    pub base: &'a ModelConfig,
    pub joint_mask: &'a JointMask,
    pub joint_names: &'a [String],
    pub train: &'a [Sample],
    pub test: &'a [Sample],
    pub budget: &'a TrainConfig,
    pub alphas: &'a [f64],
    pub decoder: Decoder,
    /// Seed for parameter initialization; identical across rows.
    pub init_seed: u64,
    /// Runs whole configurations concurrently instead of one after another.
    pub parallel_runs: bool,
    /// Per-batch execution inside each run.
    pub exec: Execution,
}

/// Trains one identically seeded model per keep ratio and evaluates it.
pub fn ablation_sweep(akrs: &[f64], setup: &SweepSetup<'_>) -> Result<SweepTable> {
    if akrs.is_empty() {
        return Err(Error::Config("keep-ratio list is empty".into()));
    }
    for a in akrs {
        if !(*a > 0.0 && *a <= 1.0) {
            return Err(Error::Config(format!("keep ratio {a} is outside (0, 1]")));
        }
    }
    let run = |i: usize| -> Result<SweepRow> {
        let mut config = setup.base.clone();
        config.schedule.akr = akrs[i];
        let mut params = PoseModelParams::init(&config, setup.init_seed)?;
        let mut last = None;
        fit(&mut params, &config, setup.joint_mask, setup.train, setup.budget, setup.exec, |r| {
            last = Some(r.loss)
        })?;
        let report = evaluate(
            setup.test,
            &params,
            &config,
            setup.joint_mask,
            setup.alphas,
            setup.joint_names,
            setup.decoder,
            setup.exec,
        )?;
        let sparsity = run_sparsity(setup.test, &params, &config, setup.joint_mask)?;
        Ok(SweepRow {
            akr: akrs[i],
            report,
            sparsity,
            final_loss: last,
        })
    };
    let outer = if setup.parallel_runs { Execution::Parallel } else { Execution::Sequential };
    let rows = map_indexed(outer, akrs.len(), run).into_iter().collect::<Result<_>>()?;
    Ok(SweepTable { rows })
}

/// Sparsity of the first evaluation sample. Supports depend only on the
/// schedule, so every sample reports the same numbers.
fn run_sparsity(
    samples: &[Sample],
    params: &PoseModelParams,
    config: &ModelConfig,
    joint_mask: &JointMask,
) -> Result<SparsityStats> {
    match samples.first() {
        Some(s) => Ok(forward(&s.image, params, config, joint_mask, ForwardOptions::default())?.1.sparsity),
        None => Ok(sparsity_report(&MaskState::new(config.visual_tokens()), config.geometry())),
    }
}
