//! Candidate verification: crop a fixed-size block around each candidate
//! (image channels + f + mask), run a small conv head with global average
//! pooling, and produce per-candidate class probabilities and a predicted
//! IoU.  Low-scoring or reject-class candidates are filtered out.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discretize::{discretize, CandidateSegment, MeanShiftConfig};
use crate::error::{Error, Result};
use crate::grid::{bilinear_upsample, BinaryMask, GroundTruthMap, ImageGrid, RealLabelMap};
use crate::losses::huber;
use crate::metrics::mask_iou;
use crate::net::{self, LayerSpec, NetConfig, OptState, ParamSet, Tape, Volume};
use crate::trainer::SceneSource;

/// Index 0 of the classification output is the reject/background class;
/// semantic class c maps to index c + 1.
pub const REJECT_CLASS: usize = 0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub roi_size: usize,
    /// Number of semantic classes C; the head classifies into C+1 (reject
    /// first) and regresses one IoU value.
    pub class_count: usize,
    /// Weight of s_iou in the acceptance score.
    pub alpha: f64,
    pub accept_threshold: f64,
    pub head: NetConfig,
    /// Minimum IoU with the best ground-truth instance for a candidate to get
    /// that instance's class as its training target (below: reject).
    pub matching_iou_floor: f64,
}

/// All-stride-1 head: on a roi-sized block there is no room to downsample
/// cleanly, and global average pooling absorbs the spatial extent anyway.
pub fn default_head(class_count: usize, image_channels: usize, init_seed: u64) -> NetConfig {
    let inputs = image_channels + 2; // + f + mask
    NetConfig {
        layers: vec![
            LayerSpec::Conv { kernel: 3, in_channels: inputs, out_channels: 12, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv { kernel: 3, in_channels: 12, out_channels: 16, stride: 1 },
            LayerSpec::Relu,
            // final layer stays linear: these are logits / a raw IoU estimate
            LayerSpec::Conv { kernel: 3, in_channels: 16, out_channels: class_count + 2, stride: 1 },
        ],
        input_channels: inputs,
        init_seed,
    }
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            roi_size: 14,
            class_count: 3,
            alpha: 0.5,
            accept_threshold: 0.5,
            head: default_head(3, 3, 7),
            matching_iou_floor: 0.5,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.roi_size < 4 {
            return Err(Error::domain("roi size must be at least 4"));
        }
        if self.class_count < 1 {
            return Err(Error::domain("at least one semantic class required"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::domain("alpha must lie in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.matching_iou_floor) {
            return Err(Error::domain("matching IoU floor must lie in [0,1]"));
        }
        self.head.validate_chain()?;
        if self.head.out_channels() != self.class_count + 2 {
            return Err(Error::dimension(format!(
                "head must output {} channels (C+1 class logits + IoU), got {}",
                self.class_count + 2,
                self.head.out_channels()
            )));
        }
        Ok(())
    }
}

/// Scored candidate.  `class` indexes the C+1 classification output
/// (0 = reject); `s_cls` is that class's probability.
#[derive(Debug, Clone)]
pub struct Detection {
    pub mask: BinaryMask,
    pub class: usize,
    pub s_cls: f64,
    pub s_iou: f64,
    pub score: f64,
}

impl Detection {
    /// Semantic class (head index minus the reject slot); None when rejected.
    pub fn semantic_class(&self) -> Option<usize> {
        (self.class != REJECT_CLASS).then(|| self.class - 1)
    }
}

fn bilinear_at(plane: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let y0 = (sy.floor().max(0.0) as usize).min(h - 1);
    let x0 = (sx.floor().max(0.0) as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (sy - y0 as f64).clamp(0.0, 1.0);
    let fx = (sx - x0 as f64).clamp(0.0, 1.0);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Crop-and-resize the image channels, f and the candidate mask to a
/// roi×roi block: tight mask bounding box grown 10% per side, clipped, then
/// align-corners bilinear sampling.
pub fn extract_roi(
    image: &ImageGrid,
    f: &RealLabelMap,
    seg: &CandidateSegment,
    cfg: &VerifyConfig,
) -> Result<Volume> {
    if image.height() != f.height()
        || image.width() != f.width()
        || seg.mask.height() != image.height()
        || seg.mask.width() != image.width()
    {
        return Err(Error::dimension("image, f and mask dims must agree for roi extraction"));
    }
    let (y0, x0, y1, x1) = seg
        .mask
        .bounding_box()
        .ok_or_else(|| Error::empty_domain("cannot extract a roi from an empty mask"))?;
    let (h, w) = (image.height(), image.width());
    let pad_y = 0.1 * (y1 - y0 + 1) as f64;
    let pad_x = 0.1 * (x1 - x0 + 1) as f64;
    let lo_y = (y0 as f64 - pad_y).max(0.0);
    let hi_y = (y1 as f64 + pad_y).min(h as f64 - 1.0);
    let lo_x = (x0 as f64 - pad_x).max(0.0);
    let hi_x = (x1 as f64 + pad_x).min(w as f64 - 1.0);

    let n = cfg.roi_size;
    let mask_plane: Vec<f64> =
        seg.mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut block = Volume::zeros(image.channels() + 2, n, n);
    let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    for iy in 0..n {
        let sy = step(lo_y, hi_y, iy);
        for ix in 0..n {
            let sx = step(lo_x, hi_x, ix);
            for c in 0..image.channels() {
                block.data[(c * n + iy) * n + ix] = bilinear_at(image.plane(c), h, w, sy, sx);
            }
            block.data[((image.channels()) * n + iy) * n + ix] =
                bilinear_at(f.values(), h, w, sy, sx);
            block.data[((image.channels() + 1) * n + iy) * n + ix] =
                bilinear_at(&mask_plane, h, w, sy, sx);
        }
    }
    Ok(block)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Head forward pass up to the pooled logits (C+2 of them).
fn head_logits(head: &ParamSet, block: &Volume) -> Result<(Vec<f64>, Tape, usize)> {
    let (out, tape) = net::forward_volume(head, block)?;
    let spatial = out.height * out.width;
    let logits: Vec<f64> = (0..out.channels)
        .map(|c| out.plane(c).iter().sum::<f64>() / spatial as f64)
        .collect();
    Ok((logits, tape, spatial))
}

/// Class probabilities over C+1 (softmax, index 0 = reject) and the clamped
/// IoU estimate from the last channel.
pub fn verify_forward(head: &ParamSet, block: &Volume) -> Result<(Vec<f64>, f64)> {
    let (logits, _, _) = head_logits(head, block)?;
    let (class_logits, iou_logit) = logits.split_at(logits.len() - 1);
    Ok((softmax(class_logits), iou_logit[0].clamp(0.0, 1.0)))
}

/// Score every candidate; no filtering happens here.
pub fn score_candidates(
    head: &ParamSet,
    image: &ImageGrid,
    f: &RealLabelMap,
    candidates: &[CandidateSegment],
    cfg: &VerifyConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    candidates
        .iter()
        .map(|seg| {
            let block = extract_roi(image, f, seg, cfg)?;
            let (probs, s_iou) = verify_forward(head, &block)?;
            let class = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            let s_cls = probs[class];
            let score = cfg.alpha * s_iou + (1.0 - cfg.alpha) * s_cls;
            Ok(Detection { mask: seg.mask.clone(), class, s_cls, s_iou, score })
        })
        .collect()
}

/// Keep detections that clear the threshold and are not reject-class.
pub fn accept(detections: Vec<Detection>, cfg: &VerifyConfig) -> Vec<Detection> {
    detections
        .into_iter()
        .filter(|d| d.score >= cfg.accept_threshold && d.class != REJECT_CLASS)
        .collect()
}

/// Training targets per candidate: (class index into C+1, IoU with the best
/// ground-truth instance).  IoU ties go to the smallest instance id.
pub fn verify_train_targets(
    candidates: &[CandidateSegment],
    gt: &GroundTruthMap,
    cfg: &VerifyConfig,
) -> Result<Vec<(usize, f64)>> {
    let ids = gt.instance_ids();
    candidates
        .iter()
        .map(|seg| {
            let mut best_iou = 0.0;
            let mut best_id = None;
            for &id in &ids {
                let iou = mask_iou(&seg.mask, &gt.instance_mask(id))?;
                if iou > best_iou {
                    best_iou = iou;
                    best_id = Some(id);
                }
            }
            let class = match best_id {
                Some(id) if best_iou >= cfg.matching_iou_floor => {
                    gt.class_of(id).ok_or_else(|| {
                        Error::data(format!("instance id {id} has no class entry"))
                    })? + 1
                }
                _ => REJECT_CLASS,
            };
            Ok((class, best_iou))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub shuffle_seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            epochs: 12,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadExample {
    pub block: Volume,
    pub class_target: usize,
    pub iou_target: f64,
}

/// Run the trained segmentation net over every scene, discretize its output
/// at image resolution, and pair each candidate with its training targets.
pub fn collect_head_examples(
    seg_params: &ParamSet,
    source: &dyn SceneSource,
    ms: &MeanShiftConfig,
    cfg: &VerifyConfig,
) -> Result<Vec<HeadExample>> {
    cfg.validate()?;
    let factor = seg_params.cfg.downsample_factor()?;
    let mut examples = Vec::new();
    for i in 0..source.len() {
        let (image, gt) = source.scene(i)?;
        let (f, _) = net::forward(seg_params, &image)?;
        let f_up = bilinear_upsample(&f, factor);
        let candidates = discretize(&f_up, ms)?;
        let targets = verify_train_targets(&candidates, &gt, cfg)?;
        for (seg, (class_target, iou_target)) in candidates.iter().zip(targets) {
            examples.push(HeadExample {
                block: extract_roi(&image, &f_up, seg, cfg)?,
                class_target,
                iou_target,
            });
        }
    }
    Ok(examples)
}

/// Per-example joint loss: cross-entropy on the class logits plus a Huber
/// penalty (θ = 0.1) on the clamped IoU output.  Returns the loss and the
/// gradient w.r.t. the pooled logits.
fn head_loss_and_logit_grad(
    logits: &[f64],
    class_target: usize,
    iou_target: f64,
) -> Result<(f64, Vec<f64>)> {
    let (class_logits, iou_logit) = logits.split_at(logits.len() - 1);
    let probs = softmax(class_logits);
    let ce = -probs[class_target].max(1e-300).ln();
    let mut grad: Vec<f64> = probs;
    grad[class_target] -= 1.0;

    let z = iou_logit[0];
    let s = z.clamp(0.0, 1.0);
    let v = (s - iou_target).abs();
    let (hval, hgrad) = huber(v, 0.1)?;
    let pass = if (0.0..=1.0).contains(&z) { 1.0 } else { 0.0 };
    grad.push(hgrad * (s - iou_target).signum() * pass);
    Ok((ce + hval, grad))
}

#[derive(Debug, Clone, Copy)]
pub struct HeadTrainStats {
    pub examples: usize,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

/// SGD over the collected examples, one step per example, shuffled per epoch.
pub fn train_head(
    examples: &[HeadExample],
    cfg: &VerifyConfig,
    tc: &HeadTrainConfig,
) -> Result<(ParamSet, HeadTrainStats)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::empty_domain("no head-training examples were collected"));
    }
    if tc.epochs == 0 {
        return Err(Error::domain("head training requires at least one epoch"));
    }
    let mut params = net::init(&cfg.head)?;
    let mut opt = OptState::new(&params, tc.learning_rate, tc.momentum, tc.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.shuffle_seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut first = 0.0;
    let mut last = 0.0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let ex = &examples[i];
            let (logits, tape, spatial) = head_logits(&params, &ex.block)?;
            let (loss, logit_grad) =
                head_loss_and_logit_grad(&logits, ex.class_target, ex.iou_target)?;
            epoch_loss += loss;
            // pooled logits spread their gradient uniformly over the map
            let mut grad_out = Vec::with_capacity(logit_grad.len() * spatial);
            for &g in &logit_grad {
                grad_out.extend(std::iter::repeat(g / spatial as f64).take(spatial));
            }
            let grads = net::backward(&params, &tape, &grad_out)?;
            net::sgd_step(&mut params, &grads, &mut opt)?;
        }
        epoch_loss /= examples.len() as f64;
        if epoch == 0 {
            first = epoch_loss;
        }
        last = epoch_loss;
    }
    Ok((params, HeadTrainStats { examples: examples.len(), first_epoch_loss: first, last_epoch_loss: last }))
}
