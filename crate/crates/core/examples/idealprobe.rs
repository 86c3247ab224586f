//! Feeds ideal (canonical) label maps through discretization + verification
//! to check the downstream pipeline in isolation from the predictor.
use dvis_core::discretize::{discretize, MeanShiftConfig};
use dvis_core::grid::RealLabelMap;
use dvis_core::metrics::{self, EvalImage};
use dvis_core::pipeline::detections_to_predictions;
use dvis_core::synth::{generate, SceneConfig};
use dvis_core::verify::{
    accept, extract_roi, score_candidates, train_head, verify_train_targets,
    HeadExample, HeadTrainConfig, VerifyConfig,
};

fn canonical_f(gt: &dvis_core::grid::GroundTruthMap) -> RealLabelMap {
    let ids = gt.instance_ids();
    let mut level = std::collections::BTreeMap::new();
    for (k, &id) in ids.iter().enumerate() {
        level.insert(id, 2.0 + k as f64);
    }
    let values = gt
        .ids()
        .iter()
        .map(|&id| if id == 0 { 0.0 } else { level[&id] })
        .collect();
    RealLabelMap::new(gt.height(), gt.width(), values).unwrap()
}

fn main() {
    let cfg = SceneConfig::default();
    let ms = MeanShiftConfig::default();
    let vcfg = VerifyConfig::default();

    // candidate quality: best IoU per GT instance
    let mut iou_hist = [0usize; 5]; // <.5, .5-.7, .7-.9, .9-.99, >=.99
    let mut cand_total = 0;
    let mut gt_total = 0;
    for idx in 0..20 {
        let scene = generate(&cfg, idx).unwrap();
        let f = canonical_f(&scene.gt);
        let candidates = discretize(&f, &ms).unwrap();
        cand_total += candidates.len();
        for &id in &scene.gt.instance_ids() {
            gt_total += 1;
            let gt_mask = scene.gt.instance_mask(id);
            let best = candidates
                .iter()
                .map(|c| metrics::mask_iou(&c.mask, &gt_mask).unwrap())
                .fold(0.0, f64::max);
            let b = if best < 0.5 {
                0
            } else if best < 0.7 {
                1
            } else if best < 0.9 {
                2
            } else if best < 0.99 {
                3
            } else {
                4
            };
            iou_hist[b] += 1;
        }
    }
    println!("candidates {cand_total} vs gt {gt_total}; best-IoU hist {iou_hist:?}");

    // verification trained on ideal maps: does accept+score give high mAP?
    let mut examples: Vec<HeadExample> = Vec::new();
    for idx in 0..100 {
        let scene = generate(&cfg, idx).unwrap();
        let f = canonical_f(&scene.gt);
        let candidates = discretize(&f, &ms).unwrap();
        let targets = verify_train_targets(&candidates, &scene.gt, &vcfg).unwrap();
        for (seg, (class_target, iou_target)) in candidates.iter().zip(targets) {
            examples.push(HeadExample {
                block: extract_roi(&scene.image, &f, seg, &vcfg).unwrap(),
                class_target,
                iou_target,
            });
        }
    }
    let (head, stats) = train_head(&examples, &vcfg, &HeadTrainConfig::default()).unwrap();
    println!(
        "head: {} examples, loss {:.3} -> {:.3}",
        stats.examples, stats.first_epoch_loss, stats.last_epoch_loss
    );

    let mut images = Vec::new();
    let mut accepted_total = 0;
    for idx in 1000..1050 {
        let scene = generate(&cfg, idx).unwrap();
        let f = canonical_f(&scene.gt);
        let candidates = discretize(&f, &ms).unwrap();
        let dets = score_candidates(&head, &scene.image, &f, &candidates, &vcfg).unwrap();
        let acc = accept(dets, &vcfg);
        accepted_total += acc.len();
        images.push(EvalImage { predictions: detections_to_predictions(&acc), gt: scene.gt });
    }
    let report = metrics::evaluate(&images, vcfg.class_count, &[0.5, 0.7, 0.9], &[1]).unwrap();
    println!("accepted/img {:.2}", accepted_total as f64 / 50.0);
    for b in &report.per_threshold {
        println!("mAP@{:.2} = {:.4}", b.iou_threshold, b.mean_ap);
    }
}
