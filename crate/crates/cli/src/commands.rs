//! Implementations of the subcommands: resolve the config, do the work under
//! `--out`, print a short summary, write the run manifest.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use dvis_core::discretize::{self, MeanShiftConfig};
use dvis_core::gradcheck;
use dvis_core::io::detections::{read_detections, rle_encode, write_detections, RleMask};
use dvis_core::io::manifest::{
    write_dataset_manifest, write_run_manifest, DatasetManifest, FileDatasetSource, RunManifest,
    SceneFiles,
};
use dvis_core::io::{pfm, pgm, ppm};
use dvis_core::metrics::{self, EvalImage, DEFAULT_CONTOUR_TOLERANCES, DEFAULT_IOU_THRESHOLDS};
use dvis_core::net::{read_checkpoint, write_checkpoint, Checkpoint, OptState};
use dvis_core::pipeline::{detections_to_predictions, infer_image};
use dvis_core::synth::{self, GeneratorSource, SceneConfig};
use dvis_core::trainer::{self, SceneSource, TrainConfig};
use dvis_core::verify::{collect_head_examples, train_head, HeadTrainConfig, VerifyConfig};

use crate::config;
use crate::{CliError, CommonArgs, DiscretizeArgs, EvalArgs, InferArgs, RenderArgs};

fn create_out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::data(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, json)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn run_manifest(
    command: &str,
    cfg: &impl Serialize,
    inputs: Vec<String>,
    outputs: Vec<String>,
    master_seed: u64,
) -> Result<RunManifest, CliError> {
    let config = serde_json::to_value(cfg)
        .map_err(|e| CliError::data(format!("cannot serialize config: {e}")))?;
    let timestamp_unix =
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    Ok(RunManifest {
        command: command.to_string(),
        config,
        inputs,
        outputs,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed,
        timestamp_unix,
    })
}

fn scene_image_name(index: usize) -> String {
    format!("scene_{index:06}.pfm")
}

fn scene_gt_name(index: usize) -> String {
    format!("scene_{index:06}.pgm")
}

fn scene_classes_name(index: usize) -> String {
    format!("scene_{index:06}.classes.json")
}

/// Detection/label-map files are numbered by dataset position, not by the
/// generator's scene index, so `eval` can pair them back up by position.
fn det_name(position: usize) -> String {
    format!("det_{position:06}.json")
}

fn f_map_name(position: usize) -> String {
    format!("f_{position:06}.pfm")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scene: SceneConfig,
    pub count: usize,
    pub start_index: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { scene: SceneConfig::default(), count: 16, start_index: 0 }
    }
}

pub fn synth(args: &CommonArgs) -> Result<(), CliError> {
    let cfg: SynthConfig = config::resolve(args.config.as_deref(), &args.set)?;
    if cfg.count == 0 {
        return Err(CliError::data("count must be at least 1"));
    }
    cfg.scene.validate()?;
    create_out_dir(&args.out)?;

    let mut files = Vec::with_capacity(cfg.count);
    let mut outputs = Vec::new();
    for k in 0..cfg.count {
        let index = cfg.start_index + k;
        let scene = synth::generate(&cfg.scene, index)?;
        let entry = SceneFiles {
            image: scene_image_name(index),
            gt: scene_gt_name(index),
            classes: scene_classes_name(index),
        };
        pfm::write_image(&args.out.join(&entry.image), &scene.image)?;
        pgm::write_gt_map(&args.out.join(&entry.gt), &scene.gt)?;
        outputs.extend([entry.image.clone(), entry.gt.clone(), entry.classes.clone()]);
        files.push(entry);
    }
    let manifest = DatasetManifest {
        count: cfg.count,
        start_index: cfg.start_index,
        scene: cfg.scene.clone(),
        files,
    };
    write_dataset_manifest(&args.out, &manifest)?;
    outputs.push("dataset_manifest.json".to_string());

    println!("wrote {} scenes to {}", cfg.count, args.out.display());
    let manifest = run_manifest("synth", &cfg, Vec::new(), outputs, cfg.scene.seed)?;
    write_run_manifest(&args.out, &manifest)?;
    Ok(())
}

/// Where training scenes come from: a directory produced by `synth` when
/// `dir` is set, otherwise scenes generated on the fly from `generate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub dir: Option<String>,
    pub generate: SceneConfig,
    pub count: usize,
    pub start_index: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { dir: None, generate: SceneConfig::default(), count: 200, start_index: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySection {
    /// Train the verification head on the final labeling net's candidates.
    pub enabled: bool,
    pub config: VerifyConfig,
    pub train: HeadTrainConfig,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            enabled: true,
            config: VerifyConfig::default(),
            train: HeadTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCliConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    /// Discretization used when collecting head-training candidates.
    pub mean_shift: MeanShiftConfig,
    pub verify: VerifySection,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        TrainCliConfig {
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
            mean_shift: MeanShiftConfig::default(),
            verify: VerifySection::default(),
        }
    }
}

pub fn train(args: &CommonArgs) -> Result<(), CliError> {
    let cfg: TrainCliConfig = config::resolve(args.config.as_deref(), &args.set)?;
    create_out_dir(&args.out)?;

    let mut inputs = Vec::new();
    let source: Box<dyn SceneSource> = match &cfg.dataset.dir {
        Some(dir) => {
            inputs.push(dir.clone());
            Box::new(FileDatasetSource::open(Path::new(dir))?)
        }
        None => Box::new(GeneratorSource {
            cfg: cfg.dataset.generate.clone(),
            count: cfg.dataset.count,
            start_index: cfg.dataset.start_index,
        }),
    };

    let outcome = trainer::train(&cfg.train, source.as_ref(), Some(&args.out))?;
    if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
        println!("step {:6}: total {:.6}", first.step, first.total);
        println!(
            "step {:6}: total {:.6} (binary {:.6}, pi {:.6}, ms {:.6}, quant {:.6})",
            last.step, last.total, last.binary, last.pi, last.ms, last.quant
        );
    }
    let mut outputs = vec!["checkpoint.ckpt".to_string(), "trace.csv".to_string()];

    if cfg.verify.enabled {
        let vcfg = cfg.verify.config.clone();
        vcfg.validate()?;
        let examples =
            collect_head_examples(&outcome.params, source.as_ref(), &cfg.mean_shift, &vcfg)?;
        let (head, stats) = train_head(&examples, &vcfg, &cfg.verify.train)?;
        let opt = OptState::new(
            &head,
            cfg.verify.train.learning_rate,
            cfg.verify.train.momentum,
            cfg.verify.train.weight_decay,
        )?;
        let ckpt = Checkpoint { params: head, opt, step: cfg.verify.train.epochs as u64 };
        write_checkpoint(&args.out.join("head.ckpt"), &ckpt)?;
        println!(
            "head: {} examples, epoch loss {:.6} -> {:.6}",
            stats.examples, stats.first_epoch_loss, stats.last_epoch_loss
        );
        outputs.push("head.ckpt".to_string());
    }

    let manifest = run_manifest("train", &cfg, inputs, outputs, cfg.train.master_seed)?;
    write_run_manifest(&args.out, &manifest)?;
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InferCliConfig {
    pub mean_shift: MeanShiftConfig,
    pub verify: VerifyConfig,
}

pub fn infer(args: &InferArgs) -> Result<(), CliError> {
    if args.image.is_some() == args.data.is_some() {
        return Err(CliError::usage("pass exactly one of --image or --data"));
    }
    let mut cfg: InferCliConfig = config::resolve(args.common.config.as_deref(), &args.common.set)?;
    let seg = read_checkpoint(&args.checkpoint)?;
    let head = read_checkpoint(&args.head)?;
    // the loaded head is authoritative for the head architecture; validation
    // still cross-checks it against the configured class count
    cfg.verify.head = head.params.cfg.clone();
    cfg.verify.validate()?;
    cfg.mean_shift.validate()?;
    create_out_dir(&args.common.out)?;

    let mut inputs = vec![
        args.checkpoint.display().to_string(),
        args.head.display().to_string(),
    ];
    let mut outputs = Vec::new();
    match (&args.image, &args.data) {
        // unreachable: exclusivity was checked before any file IO
        (Some(_), Some(_)) | (None, None) => {
            return Err(CliError::usage("pass exactly one of --image or --data"));
        }
        (Some(image_path), None) => {
            inputs.push(image_path.display().to_string());
            let image = pfm::read_image(image_path)?;
            let out =
                infer_image(&seg.params, &head.params, &image, &cfg.mean_shift, &cfg.verify)?;
            pfm::write_float_map(&args.common.out.join("f.pfm"), &out.f_upsampled)?;
            write_detections(&args.common.out.join("detections.json"), &out.accepted)?;
            outputs.extend(["f.pfm".to_string(), "detections.json".to_string()]);
            println!("{} candidates, {} accepted", out.candidates.len(), out.accepted.len());
        }
        (None, Some(data)) => {
            inputs.push(data.display().to_string());
            let source = FileDatasetSource::open(data)?;
            let mut candidates = 0usize;
            let mut accepted = 0usize;
            for i in 0..source.len() {
                let (image, _) = source.scene(i)?;
                let out =
                    infer_image(&seg.params, &head.params, &image, &cfg.mean_shift, &cfg.verify)?;
                let f_name = f_map_name(i);
                let d_name = det_name(i);
                pfm::write_float_map(&args.common.out.join(&f_name), &out.f_upsampled)?;
                write_detections(&args.common.out.join(&d_name), &out.accepted)?;
                outputs.extend([f_name, d_name]);
                candidates += out.candidates.len();
                accepted += out.accepted.len();
            }
            let n = source.len().max(1) as f64;
            println!(
                "{} scenes: {:.2} candidates/scene, {:.2} accepted/scene",
                source.len(),
                candidates as f64 / n,
                accepted as f64 / n
            );
        }
    }

    let manifest = run_manifest("infer", &cfg, inputs, outputs, 0)?;
    write_run_manifest(&args.common.out, &manifest)?;
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscretizeCliConfig {
    pub mean_shift: MeanShiftConfig,
}

#[derive(Debug, Serialize)]
struct CandidateRecord {
    mask: RleMask,
    mean_value: f64,
    bandwidth: f64,
}

#[derive(Debug, Serialize)]
struct CandidatesFile {
    candidates: Vec<CandidateRecord>,
}

pub fn discretize(args: &DiscretizeArgs) -> Result<(), CliError> {
    let cfg: DiscretizeCliConfig =
        config::resolve(args.common.config.as_deref(), &args.common.set)?;
    let f = pfm::read_float_map(&args.input)?;
    let candidates = discretize::discretize(&f, &cfg.mean_shift)?;
    create_out_dir(&args.common.out)?;

    let records: Vec<CandidateRecord> = candidates
        .iter()
        .map(|c| CandidateRecord {
            mask: rle_encode(&c.mask),
            mean_value: c.mean_value,
            bandwidth: c.bandwidth,
        })
        .collect();
    write_json(&args.common.out.join("candidates.json"), &CandidatesFile { candidates: records })?;
    println!("{} candidate segments", candidates.len());

    let manifest = run_manifest(
        "discretize",
        &cfg,
        vec![args.input.display().to_string()],
        vec!["candidates.json".to_string()],
        0,
    )?;
    write_run_manifest(&args.common.out, &manifest)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalCliConfig {
    pub class_count: usize,
    pub iou_thresholds: Vec<f64>,
    pub contour_tolerances: Vec<usize>,
}

impl Default for EvalCliConfig {
    fn default() -> Self {
        EvalCliConfig {
            class_count: 3,
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            contour_tolerances: DEFAULT_CONTOUR_TOLERANCES.to_vec(),
        }
    }
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg: EvalCliConfig = config::resolve(args.common.config.as_deref(), &args.common.set)?;
    let source = FileDatasetSource::open(&args.data)?;
    let mut images = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let dets = read_detections(&args.detections.join(det_name(i)))?;
        let (_, gt) = source.scene(i)?;
        images.push(EvalImage { predictions: detections_to_predictions(&dets), gt });
    }
    let report = metrics::evaluate(
        &images,
        cfg.class_count,
        &cfg.iou_thresholds,
        &cfg.contour_tolerances,
    )?;
    create_out_dir(&args.common.out)?;
    write_json(&args.common.out.join("eval.json"), &report)?;

    for block in &report.per_threshold {
        println!("mAP@{:.2} = {:.4}", block.iou_threshold, block.mean_ap);
    }
    println!("AP average = {:.4}", report.ap_average);
    for (tol, f1) in report.contour_tolerances.iter().zip(&report.contour_f1) {
        println!("contour F1@{tol} = {f1:.4}");
    }

    let manifest = run_manifest(
        "eval",
        &cfg,
        vec![args.data.display().to_string(), args.detections.display().to_string()],
        vec!["eval.json".to_string()],
        0,
    )?;
    write_run_manifest(&args.common.out, &manifest)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckCliConfig {
    pub seed: u64,
    /// Finite-difference points per loss term.
    pub points: usize,
}

impl Default for GradcheckCliConfig {
    fn default() -> Self {
        GradcheckCliConfig { seed: 0, points: 100 }
    }
}

pub fn gradcheck(args: &CommonArgs) -> Result<(), CliError> {
    let cfg: GradcheckCliConfig = config::resolve(args.config.as_deref(), &args.set)?;
    let report = gradcheck::run(cfg.seed, cfg.points)?;
    create_out_dir(&args.out)?;
    write_json(&args.out.join("gradcheck.json"), &report)?;
    for check in &report.checks {
        println!(
            "{:20} {:4} points, max rel err {:.3e} (tol {:.1e}): {}",
            check.name,
            check.points,
            check.max_rel_err,
            check.tolerance,
            if check.passed { "pass" } else { "FAIL" }
        );
    }

    let manifest = run_manifest(
        "gradcheck",
        &cfg,
        Vec::new(),
        vec!["gradcheck.json".to_string()],
        cfg.seed,
    )?;
    write_run_manifest(&args.out, &manifest)?;
    if !report.passed {
        return Err(dvis_core::Error::numeric("gradient audit failed").into());
    }
    Ok(())
}

pub fn render(args: &RenderArgs) -> Result<(), CliError> {
    // render takes no structured config; resolve anyway so --config/--set
    // traffic still lands in the manifest
    let cfg: serde_json::Value = config::resolve(args.common.config.as_deref(), &args.common.set)?;
    create_out_dir(&args.common.out)?;
    let out_path = args.common.out.join("render.ppm");
    let input = match (&args.input, &args.detections) {
        (Some(_), Some(_)) | (None, None) => {
            return Err(CliError::usage("pass exactly one of --input or --detections"));
        }
        (Some(path), None) => {
            let map = pfm::read_float_map(path)?;
            ppm::render_label_map(&map, &out_path)?;
            path
        }
        (None, Some(path)) => {
            let dets = read_detections(path)?;
            let (h, w) = dets
                .first()
                .map(|d| (d.mask.height(), d.mask.width()))
                .ok_or_else(|| CliError::data("no detections to size the canvas"))?;
            ppm::render_detections(&dets, h, w, &out_path)?;
            path
        }
    };
    println!("wrote {}", out_path.display());

    let manifest = run_manifest(
        "render",
        &cfg,
        vec![input.display().to_string()],
        vec!["render.ppm".to_string()],
        0,
    )?;
    write_run_manifest(&args.common.out, &manifest)?;
    Ok(())
}
