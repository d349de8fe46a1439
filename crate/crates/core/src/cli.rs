//! The `spt` command line: gen-data, train, eval, masks and sweep.
//!
//! Every command starts from a [`RunConfig`] (a JSON file or the built-in
//! default), applies flag overrides, and writes the merged configuration next
//! to its outputs so the run can be repeated exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    build_samples, load_annotations, read_pgm_file, save_annotations, synthetic_sample, write_pgm, Annotation,
    ImageRef, Sample, SyntheticSceneConfig,
};
use crate::digest::{json_digest, Hasher};
use crate::error::{Error, Result};
use crate::evaluation::{ablation_sweep, evaluate, Decoder, PckhReport, SweepSetup};
use crate::model::{fit, forward, ForwardOptions, ModelConfig, PoseModelParams, TrainConfig};
use crate::parallel::{configure_threads, Execution};
use crate::pruning::KMode;
use crate::skeleton::{compile_joint_mask, JointMask, SkeletonSpec};
use crate::tensor::Tensor;

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const DEFAULT_SWEEP: [f64; 6] = [0.2, 0.5, 0.6, 0.7, 0.8, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Train on indices `0..train_count`, test on the next `test_count`.
    Synthetic {
        scene: SyntheticSceneConfig,
        train_count: usize,
        test_count: usize,
    },
    /// Annotation files; relative image paths resolve against the file's directory.
    Annotations {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Skeleton JSON; the built-in skeleton for the joint count when absent.
    #[serde(default)]
    pub skeleton: Option<PathBuf>,
    pub data: DataSource,
    pub training: TrainConfig,
    /// Target Gaussian deviation in heatmap pixels.
    pub target_sigma: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::toy();
        let scene = SyntheticSceneConfig {
            joint_count: model.joint_count,
            image_h: model.image_h,
            image_w: model.image_w,
            ..SyntheticSceneConfig::default()
        };
        RunConfig {
            model,
            skeleton: None,
            data: DataSource::Synthetic {
                scene,
                train_count: 512,
                test_count: 128,
            },
            training: TrainConfig::default(),
            target_sigma: 1.0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes") + "\n"
    }

    /// Digest of everything that determines results; the output location
    /// is left out.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        json_digest(&c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.target_sigma > 0.0) {
            return Err(Error::Config("target_sigma must be positive".into()));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.training.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if let DataSource::Synthetic { scene, .. } = &self.data {
            scene.validate()?;
            let m = &self.model;
            if (scene.joint_count, scene.image_h, scene.image_w) != (m.joint_count, m.image_h, m.image_w)
                || m.channels != 1
            {
                return Err(Error::Config(format!(
                    "synthetic scene ({} joints, {}x{}, 1 channel) does not match the model ({} joints, {}x{}, {} channels)",
                    scene.joint_count, scene.image_h, scene.image_w, m.joint_count, m.image_h, m.image_w, m.channels
                )));
            }
        }
        Ok(())
    }

    pub fn skeleton_spec(&self) -> Result<SkeletonSpec> {
        let spec = match &self.skeleton {
            Some(p) => SkeletonSpec::load(p)?,
            None => SkeletonSpec::builtin(self.model.joint_count).ok_or_else(|| {
                Error::Config(format!(
                    "no built-in skeleton for {} joints; set \"skeleton\"",
                    self.model.joint_count
                ))
            })?,
        };
        if spec.joint_count != self.model.joint_count {
            return Err(Error::Config(format!(
                "skeleton has {} joints, model has {}",
                spec.joint_count, self.model.joint_count
            )));
        }
        Ok(spec)
    }

    fn samples(&self, pairs: Vec<(Tensor, Annotation)>) -> Result<Vec<Sample>> {
        build_samples(pairs, self.model.heatmap_h, self.model.heatmap_w, self.target_sigma)
    }

    pub fn train_samples(&self) -> Result<Vec<Sample>> {
        match &self.data {
            DataSource::Synthetic { scene, train_count, .. } => {
                self.samples(synthetic_range(scene, 0, *train_count)?)
            }
            DataSource::Annotations { train, .. } => self.samples(load_dataset(train, &self.model)?),
        }
    }

    pub fn test_samples(&self) -> Result<Vec<Sample>> {
        match &self.data {
            DataSource::Synthetic {
                scene,
                train_count,
                test_count,
            } => self.samples(synthetic_range(scene, *train_count as u64, *test_count)?),
            DataSource::Annotations { test: Some(test), .. } => self.samples(load_dataset(test, &self.model)?),
            DataSource::Annotations { test: None, train } => self.samples(load_dataset(train, &self.model)?),
        }
    }
}

fn synthetic_range(scene: &SyntheticSceneConfig, start: u64, count: usize) -> Result<Vec<(Tensor, Annotation)>> {
    (start..start + count as u64).map(|i| synthetic_sample(scene, i)).collect()
}

/// Loads an annotation file and its images, checking extents against the model.
pub fn load_dataset(path: &Path, model: &ModelConfig) -> Result<Vec<(Tensor, Annotation)>> {
    let anns = load_annotations(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(anns.len());
    for (i, ann) in anns.into_iter().enumerate() {
        let image = match &ann.image {
            ImageRef::Path(p) => read_pgm_file(&base.join(p))?,
            ImageRef::Synthetic { seed, index } => {
                let scene = SyntheticSceneConfig {
                    seed: *seed,
                    joint_count: model.joint_count,
                    image_h: model.image_h,
                    image_w: model.image_w,
                    ..SyntheticSceneConfig::default()
                };
                synthetic_sample(&scene, *index)?.0
            }
        };
        if image.shape() != [model.channels, model.image_h, model.image_w] {
            return Err(Error::Validation(vec![format!(
                "record {i}: image shape {:?} does not match the model input {:?}",
                image.shape(),
                [model.channels, model.image_h, model.image_w]
            )]));
        }
        if ann.joint_count() != model.joint_count {
            return Err(Error::Validation(vec![format!(
                "record {i}: {} joints, model has {}",
                ann.joint_count(),
                model.joint_count
            )]));
        }
        if let Err(m) = ann.validate(Some((model.image_w, model.image_h))) {
            return Err(Error::Validation(vec![format!("record {i}: {m}")]));
        }
        out.push((image, ann));
    }
    Ok(out)
}

#[derive(Parser, Debug)]
#[command(name = "spt", version, about = "Sparse pose transformer: data, training, evaluation, mask inspection")]
pub struct Cli {
    /// Run batches on one thread even when built with parallel support.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic PGM images and an annotation file.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint, log and sparsity report.
    Train(TrainArgs),
    /// Evaluate a checkpoint with PCKh.
    Eval(EvalArgs),
    /// Export pruning masks, attention maps and heatmaps for one image.
    Masks(MasksArgs),
    /// Train and evaluate one model per attention keep ratio.
    Sweep(SweepArgs),
    /// Print the default run configuration.
    DefaultConfig,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Run configuration JSON; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Attention keep ratio in (0, 1].
    #[arg(long)]
    pub akr: Option<f64>,
    #[arg(long, value_parser = parse_k_mode)]
    pub k_mode: Option<KMode>,
    /// Comma-separated 1-based encoder layers where masks are updated.
    #[arg(long, value_delimiter = ',')]
    pub update_layers: Option<Vec<usize>>,
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    /// Train on an annotation file instead of synthetic data.
    #[arg(long)]
    pub train_annotations: Option<PathBuf>,
    #[arg(long)]
    pub test_annotations: Option<PathBuf>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
}

fn parse_k_mode(s: &str) -> std::result::Result<KMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_decoder(s: &str) -> std::result::Result<Decoder, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Overrides {
    /// File (or default) configuration with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.out {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            c.training.seed = v;
            if let DataSource::Synthetic { scene, .. } = &mut c.data {
                scene.seed = v;
            }
        }
        if let Some(v) = self.steps {
            c.training.steps = v;
        }
        if let Some(v) = self.batch_size {
            c.training.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.training.learning_rate = v;
        }
        if let Some(v) = self.akr {
            c.model.schedule.akr = v;
        }
        if let Some(v) = self.k_mode {
            c.model.schedule.k_mode = v;
        }
        if let Some(v) = &self.update_layers {
            c.model.schedule.update_layers = v.clone();
        }
        if let Some(v) = &self.skeleton {
            c.skeleton = Some(v.clone());
        }
        if let Some(train) = &self.train_annotations {
            c.data = DataSource::Annotations {
                train: train.clone(),
                test: self.test_annotations.clone(),
            };
        } else if let Some(test) = &self.test_annotations {
            match &mut c.data {
                DataSource::Annotations { test: t, .. } => *t = Some(test.clone()),
                DataSource::Synthetic { .. } => {
                    return Err(Error::Config("--test-annotations needs annotation training data".into()))
                }
            }
        }
        if let DataSource::Synthetic {
            train_count, test_count, ..
        } = &mut c.data
        {
            if let Some(v) = self.train_count {
                *train_count = v;
            }
            if let Some(v) = self.test_count {
                *test_count = v;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub joints: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub jitter: Option<u32>,
    /// First sample index.
    #[arg(long, default_value_t = 0)]
    pub start: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotation file to evaluate on; the run's test split when absent.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.1])]
    pub thresholds: Vec<f64>,
    #[arg(long, value_parser = parse_decoder, default_value = "refined")]
    pub decoder: Decoder,
    /// Report directory; the checkpoint's run directory when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MasksArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PGM image; the first test sample of the run when absent.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep ratio for this pass only.
    #[arg(long)]
    pub akr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Keep ratios; 1.0 is always added as the dense baseline.
    #[arg(long = "akrs", value_delimiter = ',', default_values_t = DEFAULT_SWEEP)]
    pub akrs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.1])]
    pub thresholds: Vec<f64>,
    #[arg(long, value_parser = parse_decoder, default_value = "refined")]
    pub decoder: Decoder,
    /// Train configurations concurrently.
    #[arg(long)]
    pub parallel_runs: bool,
}

/// Parses arguments and runs one command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let threads = std::env::var("SPT_THREADS").ok().and_then(|v| v.parse().ok());
    configure_threads(threads);
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a).map(|d| println!("dataset digest: {d}")),
        Command::Train(a) => cmd_train(&a.overrides.resolve()?, exec).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, exec).map(|r| print!("{}", r.to_table("checkpoint"))),
        Command::Masks(a) => cmd_masks(&a),
        Command::Sweep(a) => {
            let config = a.overrides.resolve()?;
            cmd_sweep(&config, &a.akrs, &a.thresholds, a.decoder, a.parallel_runs, exec).map(|t| print!("{t}"))
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_json());
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `images/NNNNN.pgm` and `annotations.json`; returns the dataset digest.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<String> {
    let mut scene = SyntheticSceneConfig {
        seed: args.seed,
        joint_count: args.joints,
        image_h: args.size,
        image_w: args.size,
        ..SyntheticSceneConfig::default()
    };
    if let Some(j) = args.jitter {
        scene.jitter = j;
    }
    scene.validate()?;
    let config_digest = json_digest(&scene);
    let comment = format!("config {config_digest}");
    let mut hasher = Hasher::new();
    let mut anns = Vec::with_capacity(args.count);
    for index in args.start..args.start + args.count as u64 {
        let (image, mut ann) = synthetic_sample(&scene, index)?;
        let name = format!("images/{index:05}.pgm");
        let bytes = write_pgm(&image, false, Some(&comment));
        hasher.update(name.as_bytes());
        hasher.update(&bytes);
        write_file(&args.out.join(&name), &bytes)?;
        ann.image = ImageRef::Path(name);
        anns.push(ann);
    }
    let ann_path = args.out.join("annotations.json");
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    save_annotations(&ann_path, &anns)?;
    let ann_bytes = fs::read(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    hasher.update(&ann_bytes);
    let digest = hasher.finish();
    write_file(
        &args.out.join("dataset.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "config_digest": config_digest,
            "scene": scene,
            "start": args.start,
            "count": args.count,
            "dataset_digest": digest,
        }))
        .expect("serializes")
            + "\n",
    )?;
    Ok(digest)
}

#[derive(Serialize)]
struct LogLine {
    step: usize,
    loss: f64,
    wall_ms: u64,
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    config_digest: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn tagged_json<T: Serialize>(digest: &str, body: &T) -> String {
    serde_json::to_string_pretty(&Tagged {
        config_digest: digest,
        body,
    })
    .expect("serializes")
        + "\n"
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: PoseModelParams,
    pub final_loss: Option<f64>,
}

/// Writes `run_config.json`, `checkpoint/`, `train_log.jsonl` and
/// `sparsity.json` under the run's output directory.
pub fn cmd_train(config: &RunConfig, exec: Execution) -> Result<TrainOutcome> {
    config.validate()?;
    let out = &config.output_dir;
    let digest = config.digest();
    write_file(&out.join(RUN_CONFIG_FILE), config.to_json())?;
    let joint_mask = compile_joint_mask(&config.skeleton_spec()?)?;
    let samples = config.train_samples()?;
    let mut params = PoseModelParams::init(&config.model, config.training.seed)?;

    let log_path = out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let start = Instant::now();
    let mut io_error = None;
    let mut final_loss = None;
    fit(&mut params, &config.model, &joint_mask, &samples, &config.training, exec, |r| {
        final_loss = Some(r.loss);
        let line = LogLine {
            step: r.step,
            loss: r.loss,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if io_error.is_none() {
            if let Err(e) = writeln!(log, "{}", serde_json::to_string(&line).expect("serializes")) {
                io_error = Some(e);
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(Error::io(&log_path, e));
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let ckpt = out.join("checkpoint");
    checkpoint::save(&ckpt, &params, &config.model, &digest)?;
    let reloaded = checkpoint::load_for(&ckpt, &config.model)?;
    if reloaded != params {
        return Err(Error::Format(format!("{}: checkpoint does not read back", ckpt.display())));
    }

    let probe = samples.first().map(|s| s.image.clone()).unwrap_or_else(|| {
        Tensor::zeros(&[config.model.channels, config.model.image_h, config.model.image_w])
    });
    let (_, diag) = forward(&probe, &params, &config.model, &joint_mask, ForwardOptions::default())?;
    write_file(&out.join("sparsity.json"), tagged_json(&digest, &diag.sparsity))?;
    Ok(TrainOutcome { params, final_loss })
}

/// Locates the run configuration stored beside a checkpoint directory.
pub fn run_config_for_checkpoint(checkpoint: &Path) -> Result<RunConfig> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let path = dir.join(RUN_CONFIG_FILE);
    let mut config = if path.exists() {
        RunConfig::load(&path)?
    } else {
        RunConfig::default()
    };
    let manifest = checkpoint::read_manifest(checkpoint)?;
    if path.exists() && manifest.model != config.model {
        return Err(Error::Incompatible(format!(
            "{} does not describe the model stored in {}",
            path.display(),
            checkpoint.display()
        )));
    }
    config.model = manifest.model;
    config.output_dir = dir.to_path_buf();
    Ok(config)
}

/// Writes `pckh.json` and `pckh.txt`.
pub fn cmd_eval(args: &EvalArgs, exec: Execution) -> Result<PckhReport> {
    let config = run_config_for_checkpoint(&args.checkpoint)?;
    let params = checkpoint::load_for(&args.checkpoint, &config.model)?;
    let spec = config.skeleton_spec()?;
    let joint_mask = compile_joint_mask(&spec)?;
    let samples = match &args.annotations {
        Some(p) => config.samples(load_dataset(p, &config.model)?)?,
        None => config.test_samples()?,
    };
    if samples.is_empty() {
        return Err(Error::Contract("evaluation dataset is empty".into()));
    }
    let report = evaluate(
        &samples,
        &params,
        &config.model,
        &joint_mask,
        &args.thresholds,
        &spec.names,
        args.decoder,
        exec,
    )?;
    let out = args.out.clone().unwrap_or_else(|| config.output_dir.clone());
    let digest = config.digest();
    write_file(&out.join("pckh.json"), tagged_json(&digest, &report))?;
    write_file(
        &out.join("pckh.txt"),
        format!("# config {digest}\n{}", report.to_table("checkpoint")),
    )?;
    Ok(report)
}

fn stage_comment(digest: &str, what: &str) -> String {
    format!("config {digest}\n{what}")
}

/// One diagnostic pass: visual masks per stage, the joint mask, head-averaged
/// attention per layer and min-max normalized heatmaps.
pub fn cmd_masks(args: &MasksArgs) -> Result<()> {
    let mut config = run_config_for_checkpoint(&args.checkpoint)?;
    let params = checkpoint::load_for(&args.checkpoint, &config.model)?;
    if let Some(a) = args.akr {
        config.model.schedule.akr = a;
        config.model.validate()?;
    }
    let digest = config.digest();
    let joint_mask = compile_joint_mask(&config.skeleton_spec()?)?;
    let image = match &args.image {
        Some(p) => read_pgm_file(p)?,
        None => config
            .test_samples()?
            .into_iter()
            .next()
            .map(|s| s.image)
            .ok_or_else(|| Error::Contract("run has no test samples; pass --image".into()))?,
    };
    let expect = [config.model.channels, config.model.image_h, config.model.image_w];
    if image.shape() != expect {
        return Err(Error::Config(format!("image shape {:?}, model expects {expect:?}", image.shape())));
    }
    let opts = ForwardOptions { retain_records: true };
    let (heatmaps, diag) = forward(&image, &params, &config.model, &joint_mask, opts)?;
    let out = &args.out;
    for (s, mask) in diag.stage_masks.iter().enumerate() {
        let layer = diag.mask_state.update_layers[s];
        let comment = stage_comment(&digest, &format!("stage {} after encoder layer {layer}", s + 1));
        write_file(&out.join(format!("stage_{:02}.pbm", s + 1)), mask.to_pbm(Some(&comment)))?;
    }
    write_file(
        &out.join("joint_mask.pbm"),
        joint_mask.as_mask().to_pbm(Some(&stage_comment(&digest, "joint mask"))),
    )?;
    for (layer, rec) in &diag.encoder_records {
        let body = format!("# config {digest}\n{}", rec.head_average.to_csv());
        write_file(&out.join(format!("attention_encoder_{layer:02}.csv")), body)?;
    }
    for (layer, rec) in &diag.graph_records {
        let body = format!("# config {digest}\n{}", rec.head_average.to_csv());
        write_file(&out.join(format!("attention_graph_{layer:02}.csv")), body)?;
    }
    let plane = config.model.heatmap_len();
    for j in 0..config.model.joint_count {
        let map = Tensor::new(
            &[config.model.heatmap_h, config.model.heatmap_w],
            heatmaps.data()[j * plane..(j + 1) * plane].to_vec(),
        )?;
        let comment = format!("config {digest}");
        write_file(&out.join(format!("heatmap_{j:02}.pgm")), write_pgm(&map, true, Some(&comment)))?;
    }
    write_file(
        &out.join("masks.json"),
        tagged_json(
            &digest,
            &serde_json::json!({
                "akr": config.model.schedule.akr,
                "update_layers": diag.mask_state.update_layers,
                "history": diag.mask_state.history,
                "row_supports": diag.stage_masks.iter().map(|m| m.row_support().to_vec()).collect::<Vec<_>>(),
                "sparsity": diag.sparsity,
            }),
        ),
    )?;
    Ok(())
}

/// Keep ratios with the dense baseline appended when missing.
pub fn sweep_akrs(akrs: &[f64]) -> Vec<f64> {
    let mut out = akrs.to_vec();
    if !out.contains(&1.0) {
        out.push(1.0);
    }
    out
}

/// Writes `sweep.json`, `sweep.txt` and `akr_<value>.json` per row; returns
/// the text table.
pub fn cmd_sweep(
    config: &RunConfig,
    akrs: &[f64],
    thresholds: &[f64],
    decoder: Decoder,
    parallel_runs: bool,
    exec: Execution,
) -> Result<String> {
    config.validate()?;
    let out = &config.output_dir;
    let digest = config.digest();
    write_file(&out.join(RUN_CONFIG_FILE), config.to_json())?;
    let spec = config.skeleton_spec()?;
    let joint_mask: JointMask = compile_joint_mask(&spec)?;
    let train = config.train_samples()?;
    let test = config.test_samples()?;
    let akrs = sweep_akrs(akrs);
    let setup = SweepSetup {
        base: &config.model,
        joint_mask: &joint_mask,
        joint_names: &spec.names,
        train: &train,
        test: &test,
        budget: &config.training,
        alphas: thresholds,
        decoder,
        init_seed: config.training.seed,
        parallel_runs,
        exec,
    };
    let table = ablation_sweep(&akrs, &setup)?;
    for row in &table.rows {
        write_file(&out.join(format!("akr_{:?}.json", row.akr)), tagged_json(&digest, row))?;
    }
    write_file(&out.join("sweep.json"), tagged_json(&digest, &table))?;
    let text = format!("# config {digest}\n{}", table.to_table());
    write_file(&out.join("sweep.txt"), &text)?;
    Ok(text)
}
