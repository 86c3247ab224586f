//! Instance-level evaluation: mask IoU, VOC-style average precision over a
//! set of IoU thresholds, and a boundary F1 score with a pixel tolerance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, GroundTruthMap};

pub const DEFAULT_IOU_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
pub const DEFAULT_CONTOUR_TOLERANCES: [usize; 3] = [1, 5, 10];

/// A predicted instance with its semantic class and confidence.
#[derive(Debug, Clone)]
pub struct PredInstance {
    pub mask: BinaryMask,
    pub class: usize,
    pub score: f64,
}

/// Predictions and ground truth for one image.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub predictions: Vec<PredInstance>,
    pub gt: GroundTruthMap,
}

/// |a∩b| / |a∪b|, with 0 for two empty masks.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::dimension(format!(
            "mask dims {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// (mask, matched flag) per ground-truth instance of `class`, ascending id.
fn class_gts(gt: &GroundTruthMap, class: usize) -> Vec<BinaryMask> {
    gt.instance_ids()
        .into_iter()
        .filter(|&id| gt.class_of(id) == Some(class))
        .map(|id| gt.instance_mask(id))
        .collect()
}

/// Greedy matching of the ranked detections of one class: TP flag per
/// detection, in rank order.  Ranks sort by score descending, ties keeping
/// input order (image index, then detection index).
fn match_class(
    images: &[EvalImage],
    iou_threshold: f64,
    class: usize,
) -> Result<(Vec<bool>, usize)> {
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    for (ii, image) in images.iter().enumerate() {
        for (di, det) in image.predictions.iter().enumerate() {
            if det.class == class {
                ranked.push((ii, di, det.score));
            }
        }
    }
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());

    let mut gts: Vec<Vec<(BinaryMask, bool)>> = images
        .iter()
        .map(|im| class_gts(&im.gt, class).into_iter().map(|m| (m, false)).collect())
        .collect();
    let total_gt: usize = gts.iter().map(|g| g.len()).sum();

    let mut tp_flags = Vec::with_capacity(ranked.len());
    for &(ii, di, _) in &ranked {
        let det = &images[ii].predictions[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (mask, matched)) in gts[ii].iter().enumerate() {
            if *matched {
                continue;
            }
            let iou = mask_iou(&det.mask, mask)?;
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= iou_threshold => {
                gts[ii][gi].1 = true;
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }
    Ok((tp_flags, total_gt))
}

/// All-points interpolated AP for one class.  None when the class has no
/// ground-truth instances anywhere (undefined rather than zero).
pub fn average_precision(
    images: &[EvalImage],
    iou_threshold: f64,
    class: usize,
) -> Result<Option<f64>> {
    let (tp_flags, total_gt) = match_class(images, iou_threshold, class)?;
    if total_gt == 0 {
        return Ok(None);
    }
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }
    // precision envelope from the right, integrated over recall increments
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut next_recall = recalls.last().copied().unwrap_or(0.0);
    for k in (0..tp_flags.len()).rev() {
        envelope = envelope.max(precisions[k]);
        let prev_recall = if k == 0 { 0.0 } else { recalls[k - 1] };
        ap += (next_recall - prev_recall.min(next_recall)) * envelope;
        next_recall = prev_recall.min(next_recall);
    }
    Ok(Some(ap))
}

/// Boundary pixels of a mask: set pixels with a 4-neighbor outside the mask
/// (out-of-image counts as outside).
fn boundary_points(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if edge {
                points.push((y, x));
            }
        }
    }
    points
}

/// Exact Chebyshev distance to the nearest seed, by two chamfer passes with
/// the full 8-neighborhood at unit weight.
fn chebyshev_distance_map(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<u32> {
    const FAR: u32 = u32::MAX / 2;
    let mut d = vec![FAR; h * w];
    for &(y, x) in seeds {
        d[y * w + x] = 0;
    }
    for y in 0..h {
        for x in 0..w {
            let mut best = d[y * w + x];
            let mut relax = |yy: isize, xx: isize| {
                if yy >= 0 && xx >= 0 && (xx as usize) < w {
                    best = best.min(d[yy as usize * w + xx as usize] + 1);
                }
            };
            relax(y as isize, x as isize - 1);
            relax(y as isize - 1, x as isize - 1);
            relax(y as isize - 1, x as isize);
            relax(y as isize - 1, x as isize + 1);
            d[y * w + x] = best;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let mut best = d[y * w + x];
            let mut relax = |yy: usize, xx: usize| {
                if yy < h && xx < w {
                    best = best.min(d[yy * w + xx] + 1);
                }
            };
            relax(y, x + 1);
            relax(y + 1, x.wrapping_sub(1));
            relax(y + 1, x);
            relax(y + 1, x + 1);
            d[y * w + x] = best;
        }
    }
    d
}

/// Boundary F1 for one image: precision is the fraction of predicted
/// boundary points within `tolerance` (Chebyshev) of a same-class GT
/// boundary point, recall symmetric, F1 their harmonic mean.  Both sides
/// empty scores 1; exactly one side empty scores 0.
pub fn contour_f1(preds: &[PredInstance], gt: &GroundTruthMap, tolerance: usize) -> Result<f64> {
    let (h, w) = (gt.height(), gt.width());
    for p in preds {
        if p.mask.height() != h || p.mask.width() != w {
            return Err(Error::dimension("prediction mask dims differ from ground truth"));
        }
    }
    // per-class boundary point multisets
    let mut classes: Vec<usize> = gt.classes().values().copied().collect();
    classes.extend(preds.iter().map(|p| p.class));
    classes.sort_unstable();
    classes.dedup();

    let mut pred_total = 0usize;
    let mut pred_hit = 0usize;
    let mut gt_total = 0usize;
    let mut gt_hit = 0usize;
    for &class in &classes {
        let mut pred_points = Vec::new();
        for p in preds.iter().filter(|p| p.class == class) {
            pred_points.extend(boundary_points(&p.mask));
        }
        let mut gt_points = Vec::new();
        for id in gt.instance_ids() {
            if gt.class_of(id) == Some(class) {
                gt_points.extend(boundary_points(&gt.instance_mask(id)));
            }
        }
        pred_total += pred_points.len();
        gt_total += gt_points.len();
        if !pred_points.is_empty() && !gt_points.is_empty() {
            let to_gt = chebyshev_distance_map(h, w, &gt_points);
            pred_hit += pred_points
                .iter()
                .filter(|&&(y, x)| to_gt[y * w + x] <= tolerance as u32)
                .count();
            let to_pred = chebyshev_distance_map(h, w, &pred_points);
            gt_hit += gt_points
                .iter()
                .filter(|&&(y, x)| to_pred[y * w + x] <= tolerance as u32)
                .count();
        }
    }
    if pred_total == 0 && gt_total == 0 {
        return Ok(1.0);
    }
    if pred_total == 0 || gt_total == 0 {
        return Ok(0.0);
    }
    let precision = pred_hit as f64 / pred_total as f64;
    let recall = gt_hit as f64 / gt_total as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdBlock {
    pub iou_threshold: f64,
    /// One entry per class, `null` when the class has no GT instances.
    pub ap_per_class: Vec<Option<f64>>,
    /// Mean over the defined classes (0 if none are defined).
    pub mean_ap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub per_threshold: Vec<ThresholdBlock>,
    /// mean_ap averaged across thresholds.
    pub ap_average: f64,
    pub contour_tolerances: Vec<usize>,
    /// Mean per-image boundary F1, aligned with `contour_tolerances`.
    pub contour_f1: Vec<f64>,
}

pub fn evaluate(
    images: &[EvalImage],
    class_count: usize,
    iou_thresholds: &[f64],
    contour_tolerances: &[usize],
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::empty_domain("evaluation needs at least one image"));
    }
    let mut per_threshold = Vec::with_capacity(iou_thresholds.len());
    for &thr in iou_thresholds {
        let mut ap_per_class = Vec::with_capacity(class_count);
        for class in 0..class_count {
            ap_per_class.push(average_precision(images, thr, class)?);
        }
        let defined: Vec<f64> = ap_per_class.iter().flatten().copied().collect();
        let mean_ap = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        per_threshold.push(ThresholdBlock { iou_threshold: thr, ap_per_class, mean_ap });
    }
    let ap_average = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|b| b.mean_ap).sum::<f64>() / per_threshold.len() as f64
    };
    let mut f1 = Vec::with_capacity(contour_tolerances.len());
    for &tol in contour_tolerances {
        let mut sum = 0.0;
        for image in images {
            sum += contour_f1(&image.predictions, &image.gt, tol)?;
        }
        f1.push(sum / images.len() as f64);
    }
    Ok(EvalReport {
        iou_thresholds: iou_thresholds.to_vec(),
        per_threshold,
        ap_average,
        contour_tolerances: contour_tolerances.to_vec(),
        contour_f1: f1,
    })
}
