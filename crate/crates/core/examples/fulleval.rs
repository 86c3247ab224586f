//! Full pipeline evaluation of a predictor checkpoint: trains the verify
//! head on the training split, evaluates on a held-out split.
//! args: <checkpoint> <max_instances> [train_count] [held_count]
use dvis_core::discretize::MeanShiftConfig;
use dvis_core::synth::{GeneratorSource, SceneConfig};
use dvis_core::verify::{collect_head_examples, train_head, HeadTrainConfig, VerifyConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = dvis_core::net::read_checkpoint(std::path::Path::new(&args[1])).unwrap();
    let max_instances: usize = args[2].parse().unwrap();
    let train_count: usize = args.get(3).map_or(200, |s| s.parse().unwrap());
    let held_count: usize = args.get(4).map_or(50, |s| s.parse().unwrap());

    let scene_cfg = SceneConfig { max_instances, ..SceneConfig::default() };
    let train_src = GeneratorSource { cfg: scene_cfg.clone(), count: train_count, start_index: 0 };
    let held_src =
        GeneratorSource { cfg: scene_cfg, count: held_count, start_index: 1000 };

    let mut ms = MeanShiftConfig::default();
    if let Ok(bw) = std::env::var("BANDWIDTHS") {
        ms.bandwidths = bw.split(',').map(|t| t.parse().unwrap()).collect();
    }
    if let Ok(t) = std::env::var("TAU_BG") {
        ms.tau_bg = t.parse().unwrap();
    }
    if let Ok(m) = std::env::var("MIN_SEG") {
        ms.min_segment_pixels = m.parse().unwrap();
    }
    let mut vcfg = VerifyConfig::default();
    if let Ok(a) = std::env::var("ACCEPT_THRESH") {
        vcfg.accept_threshold = a.parse().unwrap();
    }
    let t0 = std::time::Instant::now();
    let examples = collect_head_examples(&ckpt.params, &train_src, &ms, &vcfg).unwrap();
    let (head, stats) = train_head(&examples, &vcfg, &HeadTrainConfig::default()).unwrap();
    println!(
        "head: {} examples, loss {:.3} -> {:.3} ({:.1}s)",
        stats.examples,
        stats.first_epoch_loss,
        stats.last_epoch_loss,
        t0.elapsed().as_secs_f64()
    );

    // candidate quality histogram before verification
    let mut iou_hist = [0usize; 5];
    let mut accepted_total = 0usize;
    for i in 0..held_src.count.min(25) {
        use dvis_core::trainer::SceneSource;
        let (image, gt) = held_src.scene(i).unwrap();
        let out = dvis_core::pipeline::infer_image(&ckpt.params, &head, &image, &ms, &vcfg)
            .unwrap();
        accepted_total += out.accepted.len();
        for &id in &gt.instance_ids() {
            let gt_mask = gt.instance_mask(id);
            let best = out
                .candidates
                .iter()
                .map(|c| dvis_core::metrics::mask_iou(&c.mask, &gt_mask).unwrap())
                .fold(0.0, f64::max);
            let b = if best < 0.5 { 0 } else if best < 0.7 { 1 } else if best < 0.9 { 2 }
                else if best < 0.99 { 3 } else { 4 };
            iou_hist[b] += 1;
        }
    }
    println!("best-IoU hist over 25 held scenes {iou_hist:?}, accepted/img {:.2}",
        accepted_total as f64 / 25.0);

    let t1 = std::time::Instant::now();
    let (report, src_stats) = dvis_core::pipeline::evaluate_source(
        &ckpt.params,
        &head,
        &held_src,
        &ms,
        &vcfg,
        &[0.5, 0.6, 0.7, 0.8, 0.9],
        &[1, 5, 10],
    )
    .unwrap();
    for block in &report.per_threshold {
        println!("mAP@{:.2} = {:.4}", block.iou_threshold, block.mean_ap);
    }
    println!(
        "candidates/img {:.2}, gt/img {:.2}, contour F1 {:?} ({:.1}s)",
        src_stats.mean_candidates,
        src_stats.mean_gt_instances,
        report.contour_f1,
        t1.elapsed().as_secs_f64()
    );
}
