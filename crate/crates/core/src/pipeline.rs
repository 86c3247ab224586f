//! End-to-end inference: network forward pass, upsampling back to image
//! resolution, discretization into candidates, verification, acceptance —
//! plus evaluation of a trained model over a scene source.

use crate::discretize::{discretize, CandidateSegment, MeanShiftConfig};
use crate::error::Result;
use crate::grid::{bilinear_upsample, ImageGrid, RealLabelMap};
use crate::metrics::{self, EvalImage, EvalReport, PredInstance};
use crate::net::{self, ParamSet};
use crate::trainer::SceneSource;
use crate::verify::{accept, score_candidates, Detection, VerifyConfig};

#[derive(Debug)]
pub struct InferenceOutput {
    /// Raw network output at prediction resolution.
    pub f: RealLabelMap,
    /// f bilinearly upsampled to image resolution (identical to f at d = 1);
    /// discretization and verification run on this map.
    pub f_upsampled: RealLabelMap,
    pub candidates: Vec<CandidateSegment>,
    /// Every candidate, scored.
    pub detections: Vec<Detection>,
    /// The detections that passed the acceptance filter.
    pub accepted: Vec<Detection>,
}

pub fn infer_image(
    seg_params: &ParamSet,
    head_params: &ParamSet,
    image: &ImageGrid,
    ms: &MeanShiftConfig,
    vcfg: &VerifyConfig,
) -> Result<InferenceOutput> {
    let factor = seg_params.cfg.downsample_factor()?;
    let (f, _) = net::forward(seg_params, image)?;
    let f_upsampled = bilinear_upsample(&f, factor);
    let candidates = discretize(&f_upsampled, ms)?;
    let detections = score_candidates(head_params, image, &f_upsampled, &candidates, vcfg)?;
    let accepted = accept(detections.clone(), vcfg);
    Ok(InferenceOutput { f, f_upsampled, candidates, detections, accepted })
}

/// Accepted detections as metric inputs (head class index shifted back to
/// the semantic class).
pub fn detections_to_predictions(detections: &[Detection]) -> Vec<PredInstance> {
    detections
        .iter()
        .filter_map(|d| {
            d.semantic_class().map(|class| PredInstance {
                mask: d.mask.clone(),
                class,
                score: d.score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct SourceEvalStats {
    /// Mean candidates per image handed to verification.
    pub mean_candidates: f64,
    /// Mean ground-truth instances per image.
    pub mean_gt_instances: f64,
}

/// Run inference over every scene of a source and evaluate the accepted
/// detections against the ground truth.
pub fn evaluate_source(
    seg_params: &ParamSet,
    head_params: &ParamSet,
    source: &dyn SceneSource,
    ms: &MeanShiftConfig,
    vcfg: &VerifyConfig,
    iou_thresholds: &[f64],
    contour_tolerances: &[usize],
) -> Result<(EvalReport, SourceEvalStats)> {
    let mut images = Vec::with_capacity(source.len());
    let mut candidate_total = 0usize;
    let mut gt_total = 0usize;
    for i in 0..source.len() {
        let (image, gt) = source.scene(i)?;
        let out = infer_image(seg_params, head_params, &image, ms, vcfg)?;
        candidate_total += out.candidates.len();
        gt_total += gt.instance_ids().len();
        images.push(EvalImage { predictions: detections_to_predictions(&out.accepted), gt });
    }
    let report =
        metrics::evaluate(&images, vcfg.class_count, iou_thresholds, contour_tolerances)?;
    let n = source.len().max(1) as f64;
    let stats = SourceEvalStats {
        mean_candidates: candidate_total as f64 / n,
        mean_gt_instances: gt_total as f64 / n,
    };
    Ok((report, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerSpec, NetConfig};
    use crate::synth::{GeneratorSource, SceneConfig};
    use crate::verify::default_head;

    fn strided_net() -> NetConfig {
        NetConfig {
            layers: vec![
                LayerSpec::Conv { kernel: 3, in_channels: 3, out_channels: 6, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Conv { kernel: 3, in_channels: 6, out_channels: 1, stride: 1 },
            ],
            input_channels: 3,
            init_seed: 3,
        }
    }

    #[test]
    fn inference_upsamples_to_image_resolution() {
        let seg = net::init(&strided_net()).unwrap();
        let vcfg = VerifyConfig::default();
        let head = net::init(&vcfg.head).unwrap();
        let source = GeneratorSource {
            cfg: SceneConfig { height: 32, width: 32, ..SceneConfig::default() },
            count: 1,
            start_index: 0,
        };
        let (image, _) = source.scene(0).unwrap();
        let out = infer_image(
            &seg,
            &head,
            &image,
            &crate::discretize::MeanShiftConfig::default(),
            &vcfg,
        )
        .unwrap();
        assert_eq!(out.f.height(), 16);
        assert_eq!(out.f_upsampled.height(), 32);
        assert_eq!(out.f_upsampled.width(), 32);
        assert!(out.accepted.len() <= out.detections.len());
        assert_eq!(out.detections.len(), out.candidates.len());
    }

    #[test]
    fn source_evaluation_produces_bounded_scores() {
        let seg = net::init(&strided_net()).unwrap();
        let vcfg = VerifyConfig { head: default_head(3, 3, 11), ..VerifyConfig::default() };
        let head = net::init(&vcfg.head).unwrap();
        let source = GeneratorSource {
            cfg: SceneConfig { height: 32, width: 32, ..SceneConfig::default() },
            count: 2,
            start_index: 5,
        };
        let (report, stats) = evaluate_source(
            &seg,
            &head,
            &source,
            &crate::discretize::MeanShiftConfig::default(),
            &vcfg,
            &[0.5],
            &[1],
        )
        .unwrap();
        assert!(report.ap_average >= 0.0 && report.ap_average <= 1.0);
        assert!(report.contour_f1[0] >= 0.0 && report.contour_f1[0] <= 1.0);
        assert!(stats.mean_gt_instances >= 1.0);
        assert!(stats.mean_candidates >= 0.0);
    }
}
