//! Desk-scale pose data: a deterministic stick-figure generator, the
//! annotation file format, PGM images and Gaussian target heatmaps.
//!
//! Randomness comes from ChaCha8 seeded with the scene seed, one stream per
//! sample index, so any sample can be regenerated on its own and the output
//! is the same on every platform.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::SkeletonSpec;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Path(String),
    Synthetic { seed: u64, index: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: ImageRef,
    /// `(x, y)` pixel coordinates, one per joint.
    pub joints: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    /// PCKh normalization length in pixels.
    pub head_size: f64,
}

impl Annotation {
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Checks the record; `bounds` is `(width, height)` when known.
    pub fn validate(&self, bounds: Option<(usize, usize)>) -> std::result::Result<(), String> {
        if self.visible.len() != self.joints.len() {
            return Err(format!(
                "{} joints but {} visibility flags",
                self.joints.len(),
                self.visible.len()
            ));
        }
        if !(self.head_size.is_finite() && self.head_size > 0.0) {
            return Err(format!("head_size must be positive, got {}", self.head_size));
        }
        for (j, ([x, y], vis)) in self.joints.iter().zip(&self.visible).enumerate() {
            if !(x.is_finite() && y.is_finite()) {
                return Err(format!("joint {j} has non-finite coordinates"));
            }
            if let (true, Some((w, h))) = (*vis, bounds) {
                if *x < 0.0 || *y < 0.0 || *x >= w as f64 || *y >= h as f64 {
                    return Err(format!("visible joint {j} at ({x}, {y}) lies outside {w}x{h}"));
                }
            }
        }
        Ok(())
    }
}

fn validate_all(anns: &[Annotation], bounds: Option<(usize, usize)>) -> Result<()> {
    let errors: Vec<String> = anns
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.validate(bounds).err().map(|e| format!("record {i}: {e}")))
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errors))
    }
}

pub fn parse_annotations(text: &str, context: &str) -> Result<Vec<Annotation>> {
    let anns: Vec<Annotation> = serde_json::from_str(text).map_err(|e| Error::json(context, e))?;
    validate_all(&anns, None)?;
    Ok(anns)
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, &path.display().to_string())
}

pub fn annotations_to_json(anns: &[Annotation]) -> String {
    let mut s = serde_json::to_string_pretty(anns).expect("annotations serialize");
    s.push('\n');
    s
}

pub fn save_annotations(path: &Path, anns: &[Annotation]) -> Result<()> {
    fs::write(path, annotations_to_json(anns)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub seed: u64,
    pub joint_count: usize,
    pub limb_thickness: f64,
    pub blob_sigma: f64,
    pub image_h: usize,
    pub image_w: usize,
    /// Per-joint and whole-figure displacement bound, in pixels.
    pub jitter: u32,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            seed: 0,
            joint_count: 5,
            limb_thickness: 1.0,
            blob_sigma: 1.0,
            image_h: 32,
            image_w: 32,
            jitter: 2,
        }
    }
}

/// Normalized template pose plus the joints that span the head segment.
struct Template {
    points: &'static [[f64; 2]],
    head_top: usize,
    neck: usize,
}

const MPII_TEMPLATE: Template = Template {
    points: &[
        [0.40, 0.95],
        [0.41, 0.78],
        [0.42, 0.60],
        [0.58, 0.60],
        [0.59, 0.78],
        [0.60, 0.95],
        [0.50, 0.60],
        [0.50, 0.30],
        [0.50, 0.24],
        [0.50, 0.08],
        [0.22, 0.55],
        [0.28, 0.42],
        [0.38, 0.30],
        [0.62, 0.30],
        [0.72, 0.42],
        [0.78, 0.55],
    ],
    head_top: 9,
    neck: 8,
};

const TOY5_TEMPLATE: Template = Template {
    points: &[[0.50, 0.15], [0.50, 0.38], [0.78, 0.55], [0.22, 0.55], [0.50, 0.78]],
    head_top: 0,
    neck: 1,
};

impl SyntheticSceneConfig {
    fn template(&self) -> Result<&'static Template> {
        match self.joint_count {
            16 => Ok(&MPII_TEMPLATE),
            5 => Ok(&TOY5_TEMPLATE),
            j => Err(Error::Config(format!(
                "no synthetic template for {j} joints (supported: 5, 16)"
            ))),
        }
    }

    pub fn skeleton(&self) -> Result<SkeletonSpec> {
        SkeletonSpec::builtin(self.joint_count)
            .ok_or_else(|| Error::Config(format!("no built-in skeleton for {} joints", self.joint_count)))
    }

    pub fn validate(&self) -> Result<()> {
        self.template()?;
        if self.image_h < 4 || self.image_w < 4 {
            return Err(Error::Config("synthetic images must be at least 4x4".into()));
        }
        if !(self.blob_sigma > 0.0) || !(self.limb_thickness >= 0.0) {
            return Err(Error::Config("blob_sigma must be positive and limb_thickness non-negative".into()));
        }
        Ok(())
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

const LIMB_INTENSITY: f64 = 0.5;

/// Renders limbs as flat segments and joints as unit-peak Gaussian blobs
/// onto a single-channel `1 × h × w` image.
pub fn render_figure(
    joints: &[[f64; 2]],
    edges: &[[usize; 2]],
    h: usize,
    w: usize,
    limb_thickness: f64,
    blob_sigma: f64,
) -> Tensor {
    let mut img = vec![0.0f64; h * w];
    let half = limb_thickness / 2.0;
    if limb_thickness > 0.0 {
        for [a, b] in edges {
            let (pa, pb) = (joints[*a], joints[*b]);
            let x0 = (pa[0].min(pb[0]) - half).floor().max(0.0) as usize;
            let x1 = ((pa[0].max(pb[0]) + half).ceil() as usize).min(w - 1);
            let y0 = (pa[1].min(pb[1]) - half).floor().max(0.0) as usize;
            let y1 = ((pa[1].max(pb[1]) + half).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if segment_distance([x as f64, y as f64], pa, pb) <= half {
                        let v = &mut img[y * w + x];
                        *v = (*v).max(LIMB_INTENSITY);
                    }
                }
            }
        }
    }
    let reach = (4.0 * blob_sigma).ceil();
    let denom = 2.0 * blob_sigma * blob_sigma;
    for [jx, jy] in joints {
        let x0 = (jx - reach).max(0.0) as usize;
        let x1 = ((jx + reach) as usize).min(w - 1);
        let y0 = (jy - reach).max(0.0) as usize;
        let y1 = ((jy + reach) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f64 - jx).powi(2) + (y as f64 - jy).powi(2);
                let v = &mut img[y * w + x];
                *v = (*v).max((-d2 / denom).exp());
            }
        }
    }
    Tensor::new(&[1, h, w], img).unwrap()
}

/// Regenerates sample `index` of a scene.
pub fn synthetic_sample(config: &SyntheticSceneConfig, index: u64) -> Result<(Tensor, Annotation)> {
    config.validate()?;
    let template = config.template()?;
    let skeleton = config.skeleton()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let a = config.jitter as i64;
    let mut offset = || if a == 0 { 0 } else { rng.gen_range(-a..=a) };
    let shift = [offset(), offset()];
    let (w, h) = (config.image_w, config.image_h);
    let joints: Vec<[f64; 2]> = template
        .points
        .iter()
        .map(|[nx, ny]| {
            let x = (nx * (w - 1) as f64).round() as i64 + shift[0] + offset();
            let y = (ny * (h - 1) as f64).round() as i64 + shift[1] + offset();
            [x.clamp(0, w as i64 - 1) as f64, y.clamp(0, h as i64 - 1) as f64]
        })
        .collect();
    let (top, neck) = (joints[template.head_top], joints[template.neck]);
    let head_size = ((top[0] - neck[0]).powi(2) + (top[1] - neck[1]).powi(2)).sqrt().max(1.0);
    let image = render_figure(&joints, &skeleton.edges, h, w, config.limb_thickness, config.blob_sigma);
    let ann = Annotation {
        image: ImageRef::Synthetic {
            seed: config.seed,
            index,
        },
        visible: vec![true; joints.len()],
        joints,
        head_size,
    };
    Ok((image, ann))
}

pub fn generate_synthetic(config: &SyntheticSceneConfig, count: usize) -> Result<Vec<(Tensor, Annotation)>> {
    (0..count as u64).map(|i| synthetic_sample(config, i)).collect()
}

/// Unnormalized Gaussian per visible joint, peak 1 at the joint position
/// scaled to heatmap resolution. Invisible joints give all-zero maps.
pub fn render_target_heatmaps(
    ann: &Annotation,
    image_h: usize,
    image_w: usize,
    heatmap_h: usize,
    heatmap_w: usize,
    sigma: f64,
) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let (sx, sy) = (heatmap_w as f64 / image_w as f64, heatmap_h as f64 / image_h as f64);
    let denom = 2.0 * sigma * sigma;
    let plane = heatmap_h * heatmap_w;
    let mut data = vec![0.0; ann.joint_count() * plane];
    for (j, ([x, y], vis)) in ann.joints.iter().zip(&ann.visible).enumerate() {
        if !vis {
            continue;
        }
        let (cx, cy) = (x * sx, y * sy);
        for r in 0..heatmap_h {
            for c in 0..heatmap_w {
                let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                data[j * plane + r * heatmap_w + c] = (-d2 / denom).exp();
            }
        }
    }
    Tensor::new(&[ann.joint_count(), heatmap_h, heatmap_w], data)
}

/// A training or evaluation example with its rendered target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub annotation: Annotation,
    pub target: Tensor,
}

impl Sample {
    pub fn visible(&self) -> &[bool] {
        &self.annotation.visible
    }
}

pub fn build_samples(
    pairs: Vec<(Tensor, Annotation)>,
    heatmap_h: usize,
    heatmap_w: usize,
    sigma: f64,
) -> Result<Vec<Sample>> {
    pairs
        .into_iter()
        .map(|(image, annotation)| {
            let (h, w) = (image.shape()[1], image.shape()[2]);
            let target = render_target_heatmaps(&annotation, h, w, heatmap_h, heatmap_w, sigma)?;
            Ok(Sample {
                image,
                annotation,
                target,
            })
        })
        .collect()
}

/// Binary PGM (P5) of channel 0, 8 bits per pixel. Values are clamped to
/// [0, 1] unless `normalize` rescales min..max onto that range first.
pub fn write_pgm(image: &Tensor, normalize: bool, comment: Option<&str>) -> Vec<u8> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        [_, h, w] => (*h, *w),
        other => panic!("write_pgm needs a 2-D or 3-D tensor, got {other:?}"),
    };
    let plane = &image.data()[..h * w];
    let (lo, hi) = if normalize {
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    } else {
        (0.0, 1.0)
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = b"P5\n".to_vec();
    if let Some(c) = comment {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    out.extend(plane.iter().map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Reads a binary PGM (P5, maxval ≤ 255) into a `1 × h × w` tensor in [0, 1].
pub fn read_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("missing P5 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval is supported"));
    }
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    let data = pixels.iter().map(|p| *p as f64 / maxval as f64).collect();
    Tensor::new(&[1, h, w], data)
}

pub fn read_pgm_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pgm(&bytes)
}
