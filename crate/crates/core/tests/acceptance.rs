//! The ten acceptance gates for the engine, run sequentially in one test so
//! the CPU-time budgets are honest on a single core.  Each gate prints one
//! `PASS`/`FAIL` line (visible with `cargo test --test acceptance --
//! --nocapture`); the test fails at the end if any gate failed.
//!
//! The heavier gates share artifacts: the end-to-end training run feeds the
//! learning, smoothness-ablation, occlusion and candidate-economy gates.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dvis_core::discretize::{mean_shift_1d, MeanShiftConfig};
use dvis_core::grid::{BinaryMask, GroundTruthMap, RealLabelMap};
use dvis_core::losses::{total_loss, LossConfig};
use dvis_core::metrics::{self, average_precision, EvalImage, PredInstance};
use dvis_core::net::ParamSet;
use dvis_core::pipeline::{evaluate_source, infer_image};
use dvis_core::sampling::{sample_pairs, SamplerConfig};
use dvis_core::synth::{generate, GeneratorSource, SceneConfig};
use dvis_core::trainer::{train, TrainConfig};
use dvis_core::verify::{collect_head_examples, train_head, HeadTrainConfig, VerifyConfig};

/// Loss weights for the end-to-end runs.  The library defaults (all 1) are
/// the faithful formulation; this training schedule needs a stronger pairwise
/// push and a weaker integer pull or the optimizer settles with every
/// instance on the same level (the weights are exposed for exactly this kind
/// of tuning).
const RUN_WEIGHT_PI: f64 = 4.0;
const RUN_WEIGHT_QUANT: f64 = 0.1;
const RUN_STEPS: usize = 10_000;
const OCCLUSION_RUN_STEPS: usize = 6_000;
const HELD_OUT_SCENES: usize = 50;
const TRAIN_SCENES: usize = 200;

fn run_train_config() -> TrainConfig {
    let mut tc = TrainConfig { steps: RUN_STEPS, log_interval: RUN_STEPS, ..TrainConfig::default() };
    tc.loss.weight_pi = RUN_WEIGHT_PI;
    tc.loss.weight_quant = RUN_WEIGHT_QUANT;
    tc
}

/// utime+stime of this process in seconds, so concurrent load cannot inflate
/// the budgeted gates; falls back to wall time off Linux.
fn cpu_seconds() -> Option<f64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    // fields 14 and 15 (1-based) after the parenthesized command name
    let rest = stat.rsplit(')').next()?;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let utime: f64 = fields.get(11)?.parse().ok()?;
    let stime: f64 = fields.get(12)?.parse().ok()?;
    Some((utime + stime) / 100.0)
}

struct CpuTimer {
    cpu_start: Option<f64>,
    wall_start: Instant,
}

impl CpuTimer {
    fn start() -> Self {
        CpuTimer { cpu_start: cpu_seconds(), wall_start: Instant::now() }
    }

    fn elapsed(&self) -> f64 {
        match (self.cpu_start, cpu_seconds()) {
            (Some(a), Some(b)) => b - a,
            _ => self.wall_start.elapsed().as_secs_f64(),
        }
    }
}

struct Gate {
    number: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn gate(results: &mut Vec<Gate>, number: usize, name: &'static str, passed: bool, detail: String) {
    println!("criterion {number:2} {} — {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    results.push(Gate { number, name, passed, detail });
}

// ---------------------------------------------------------------------------
// gate 1: gradient audit

fn check_gradients(results: &mut Vec<Gate>) {
    let timer = CpuTimer::start();
    let outcome = dvis_core::gradcheck::run(0, 100);
    let secs = timer.elapsed();
    match outcome {
        Ok(report) => {
            let worst = report
                .checks
                .iter()
                .map(|c| c.max_rel_err)
                .fold(0.0, f64::max);
            gate(
                results,
                1,
                "gradient audit",
                report.passed && secs < 60.0,
                format!("max rel err {worst:.2e}, {secs:.1}s"),
            );
        }
        Err(e) => gate(results, 1, "gradient audit", false, format!("error: {e}")),
    }
}

// ---------------------------------------------------------------------------
// gate 2: permutation invariance

/// Relabel instance ids by a random bijection (background stays 0).
fn permute_gt(gt: &GroundTruthMap, rng: &mut ChaCha8Rng) -> GroundTruthMap {
    let ids = gt.instance_ids();
    let mut shuffled = ids.clone();
    shuffled.shuffle(rng);
    let map: BTreeMap<u16, u16> = ids.iter().copied().zip(shuffled).collect();
    let new_ids = gt.ids().iter().map(|&id| if id == 0 { 0 } else { map[&id] }).collect();
    let classes = gt
        .classes()
        .iter()
        .map(|(&id, &class)| (map[&id], class))
        .collect();
    GroundTruthMap::new(gt.height(), gt.width(), new_ids, classes).unwrap()
}

fn check_permutation_invariance(results: &mut Vec<Gate>) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let sampler = SamplerConfig::default();
    let loss_cfg = LossConfig::default();
    let mut bijections_ok = true;

    for scene_idx in 0..5 {
        let scene = generate(&SceneConfig::default(), scene_idx).unwrap();
        let n = scene.gt.height() * scene.gt.width();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..3.5)).collect();
        let f = RealLabelMap::new(scene.gt.height(), scene.gt.width(), values).unwrap();
        let pairs = sample_pairs(&scene.gt, &sampler).unwrap();
        let reference = total_loss(&f, &scene.gt, &pairs, &loss_cfg).unwrap();

        for _ in 0..10 {
            let permuted = permute_gt(&scene.gt, &mut rng);
            let ppairs = sample_pairs(&permuted, &sampler).unwrap();
            let lvg = total_loss(&f, &permuted, &ppairs, &loss_cfg).unwrap();
            if lvg.value.to_bits() != reference.value.to_bits()
                || lvg
                    .grad
                    .iter()
                    .zip(&reference.grad)
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                bijections_ok = false;
            }
        }
    }

    // a relabeled scene stream must leave the whole training trace unchanged
    let mut tc = run_train_config();
    tc.steps = 200;
    let base = SceneConfig::default();
    let salted = SceneConfig { permutation_salt: 9, ..base.clone() };
    let src_a = GeneratorSource { cfg: base, count: 20, start_index: 0 };
    let src_b = GeneratorSource { cfg: salted, count: 20, start_index: 0 };
    let trace_ok = match (train(&tc, &src_a, None), train(&tc, &src_b, None)) {
        (Ok(a), Ok(b)) => a.trace == b.trace,
        _ => false,
    };

    gate(
        results,
        2,
        "permutation invariance",
        bijections_ok && trace_ok,
        format!("50 bijections bit-identical: {bijections_ok}, 200-step trace invariant: {trace_ok}"),
    );
}

// ---------------------------------------------------------------------------
// gate 3: zero-loss fixed point

fn canonical_map(gt: &GroundTruthMap, m1: f64, m2: f64) -> RealLabelMap {
    let mut level = BTreeMap::new();
    for (k, id) in gt.instance_ids().into_iter().enumerate() {
        level.insert(id, m1 + k as f64 * m2);
    }
    let values =
        gt.ids().iter().map(|&id| if id == 0 { 0.0 } else { level[&id] }).collect();
    RealLabelMap::new(gt.height(), gt.width(), values).unwrap()
}

fn check_zero_loss_fixed_point(results: &mut Vec<Gate>) {
    let cfg = LossConfig { weight_ms: 0.0, ..LossConfig::default() };
    let sampler = SamplerConfig::default();
    let mut worst: f64 = 0.0;
    for idx in 0..20 {
        let scene = generate(&SceneConfig::default(), idx).unwrap();
        let f = canonical_map(&scene.gt, cfg.m1, cfg.m2);
        let pairs = sample_pairs(&scene.gt, &sampler).unwrap();
        let lvg = total_loss(&f, &scene.gt, &pairs, &cfg).unwrap();
        worst = worst.max(lvg.value.abs());
    }
    gate(
        results,
        3,
        "zero-loss fixed point",
        worst <= 1e-12,
        format!("max |loss| over 20 canonical labelings: {worst:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// gate 4: clustering vs gap oracle

/// Split sorted values where neighbors are at least one bandwidth apart.
fn gap_partition(values: &[f64], bandwidth: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(g) if values[i] - values[*g.last().unwrap()] < bandwidth => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn normalized(mut groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort();
    groups
}

fn check_mean_shift_oracle(results: &mut Vec<Gate>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bw = 0.9;
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=6);
        let mut values = Vec::new();
        let mut center = rng.gen_range(0.0..2.0);
        for _ in 0..k {
            for _ in 0..rng.gen_range(1..=10) {
                values.push(center + rng.gen_range(-0.3..0.3) * bw);
            }
            center += bw * rng.gen_range(2.0..4.0);
        }
        values.truncate(64);
        let (assignment, modes) = mean_shift_1d(&values, bw, 1e-3, 100).unwrap();
        let mut got = vec![Vec::new(); modes.len()];
        for (i, &a) in assignment.iter().enumerate() {
            got[a].push(i);
        }
        if normalized(got) != normalized(gap_partition(&values, bw)) {
            mismatches += 1;
        }
    }
    gate(
        results,
        4,
        "mean-shift gap oracle",
        mismatches == 0,
        format!("{mismatches}/1000 mismatches"),
    );
}

// ---------------------------------------------------------------------------
// gate 5: AP vs exhaustive cut-point oracle

fn rect_mask(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    for y in y0..=y1 {
        for x in x0..=x1 {
            m.set(y, x, true);
        }
    }
    m
}

fn gt_from_masks(masks: &[(u16, BinaryMask)], h: usize, w: usize) -> GroundTruthMap {
    let mut ids = vec![0u16; h * w];
    for (id, mask) in masks {
        for (p, &b) in mask.bits().iter().enumerate() {
            if b {
                ids[p] = *id;
            }
        }
    }
    GroundTruthMap::from_ids(h, w, ids).unwrap()
}

/// Re-run greedy matching from scratch at every ranking prefix and integrate
/// the precision envelope over the distinct recall levels.
fn ap_cut_point_oracle(images: &[EvalImage], iou_threshold: f64, class: usize) -> Option<f64> {
    let mut ranking: Vec<(usize, usize)> = Vec::new();
    for (ii, im) in images.iter().enumerate() {
        for (di, det) in im.predictions.iter().enumerate() {
            if det.class == class {
                ranking.push((ii, di));
            }
        }
    }
    ranking.sort_by(|a, b| {
        let sa = images[a.0].predictions[a.1].score;
        let sb = images[b.0].predictions[b.1].score;
        sb.partial_cmp(&sa).unwrap()
    });
    let gts_of = |im: &EvalImage| -> Vec<BinaryMask> {
        im.gt
            .instance_ids()
            .into_iter()
            .filter(|&id| im.gt.class_of(id) == Some(class))
            .map(|id| im.gt.instance_mask(id))
            .collect()
    };
    let total_gt: usize = images.iter().map(|im| gts_of(im).len()).sum();
    if total_gt == 0 {
        return None;
    }
    let mut points = Vec::new();
    for k in 1..=ranking.len() {
        let mut gts: Vec<Vec<(BinaryMask, bool)>> = images
            .iter()
            .map(|im| gts_of(im).into_iter().map(|m| (m, false)).collect())
            .collect();
        let mut tp = 0usize;
        for &(ii, di) in &ranking[..k] {
            let det = &images[ii].predictions[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, (mask, matched)) in gts[ii].iter().enumerate() {
                if *matched {
                    continue;
                }
                let iou = metrics::mask_iou(&det.mask, mask).unwrap();
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, iou)) = best {
                if iou >= iou_threshold {
                    gts[ii][gi].1 = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / k as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    for (i, &r) in recalls.iter().enumerate() {
        if r > prev_recall {
            let best_precision = points[i..]
                .iter()
                .map(|p| p.1)
                .fold(0.0, f64::max);
            ap += (r - prev_recall) * best_precision;
            prev_recall = r;
        }
    }
    Some(ap)
}

fn check_ap_oracle(results: &mut Vec<Gate>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut undefined_mismatch = false;
    for _ in 0..500 {
        let n_gt = rng.gen_range(1..=4usize);
        let mut gt_masks = Vec::new();
        for g in 0..n_gt {
            let y = 3 * (g / 2);
            let x = 3 * (g % 2);
            gt_masks.push((g as u16 + 1, rect_mask(8, 8, y, x, y + 1, x + 1)));
        }
        let mut predictions = Vec::new();
        for _ in 0..rng.gen_range(0..=6usize) {
            let target = rng.gen_range(0..n_gt);
            let mask = if rng.gen_bool(0.6) {
                gt_masks[target].1.clone()
            } else {
                rect_mask(8, 8, 6, 6, 7, 7)
            };
            let score = rng.gen_range(0..5) as f64 / 5.0;
            predictions.push(PredInstance { mask, class: 0, score });
        }
        let images = [EvalImage { predictions, gt: gt_from_masks(&gt_masks, 8, 8) }];
        for thr in [0.5, 0.75] {
            let got = average_precision(&images, thr, 0).unwrap();
            let want = ap_cut_point_oracle(&images, thr, 0);
            match (got, want) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => undefined_mismatch = true,
            }
        }
    }
    gate(
        results,
        5,
        "AP cut-point oracle",
        worst <= 1e-12 && !undefined_mismatch,
        format!("max |Δ| {worst:.2e} over 500 cases"),
    );
}

// ---------------------------------------------------------------------------
// gates 6, 8, 9, 10 share the main end-to-end run

struct TrainedPipeline {
    params: ParamSet,
    head: ParamSet,
}

/// Train the predictor on the training split, then the verification head on
/// its candidates.
fn train_pipeline(
    tc: &TrainConfig,
    scene_cfg: &SceneConfig,
) -> dvis_core::error::Result<TrainedPipeline> {
    let train_src =
        GeneratorSource { cfg: scene_cfg.clone(), count: TRAIN_SCENES, start_index: 0 };
    let outcome = train(tc, &train_src, None)?;
    let ms = MeanShiftConfig::default();
    let vcfg = VerifyConfig::default();
    let examples = collect_head_examples(&outcome.params, &train_src, &ms, &vcfg)?;
    let (head, _) = train_head(&examples, &vcfg, &HeadTrainConfig::default())?;
    Ok(TrainedPipeline { params: outcome.params, head })
}

fn held_out_report(
    pipe: &TrainedPipeline,
    scene_cfg: &SceneConfig,
) -> dvis_core::error::Result<(metrics::EvalReport, dvis_core::pipeline::SourceEvalStats)> {
    let held = GeneratorSource {
        cfg: scene_cfg.clone(),
        count: HELD_OUT_SCENES,
        start_index: 1000,
    };
    evaluate_source(
        &pipe.params,
        &pipe.head,
        &held,
        &MeanShiftConfig::default(),
        &VerifyConfig::default(),
        &[0.5, 0.6, 0.7, 0.8, 0.9],
        &[1, 5, 10],
    )
}

fn mean_ap_at(report: &metrics::EvalReport, thr: f64) -> f64 {
    report
        .per_threshold
        .iter()
        .find(|b| (b.iou_threshold - thr).abs() < 1e-9)
        .map_or(0.0, |b| b.mean_ap)
}

/// 4-connected component count of a mask.
fn component_count(mask: &BinaryMask) -> usize {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut components = 0;
    for start in 0..h * w {
        if !mask.bits()[start] || seen[start] {
            continue;
        }
        components += 1;
        let mut queue = vec![start];
        seen[start] = true;
        while let Some(p) = queue.pop() {
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if mask.bits()[q] && !seen[q] {
                    seen[q] = true;
                    queue.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
    }
    components
}

fn check_end_to_end(results: &mut Vec<Gate>) {
    let timer = CpuTimer::start();
    let scene_cfg = SceneConfig::default();
    let tc = run_train_config();

    let pipe = match train_pipeline(&tc, &scene_cfg) {
        Ok(p) => p,
        Err(e) => {
            let detail = format!("training failed: {e}");
            gate(results, 6, "end-to-end learning", false, detail.clone());
            gate(results, 8, "smoothness ablation", false, detail.clone());
            gate(results, 9, "occlusion handling", false, detail.clone());
            gate(results, 10, "candidate economy", false, detail);
            return;
        }
    };
    let (report, stats) = match held_out_report(&pipe, &scene_cfg) {
        Ok(r) => r,
        Err(e) => {
            let detail = format!("evaluation failed: {e}");
            gate(results, 6, "end-to-end learning", false, detail.clone());
            gate(results, 8, "smoothness ablation", false, detail.clone());
            gate(results, 9, "occlusion handling", false, detail.clone());
            gate(results, 10, "candidate economy", false, detail);
            return;
        }
    };
    let secs = timer.elapsed();

    let map50 = mean_ap_at(&report, 0.5);
    let map70 = mean_ap_at(&report, 0.7);
    gate(
        results,
        6,
        "end-to-end learning",
        map50 >= 0.80 && map70 >= 0.60 && secs <= 30.0 * 60.0,
        format!("mAP@0.5 {map50:.3} (≥0.80), mAP@0.7 {map70:.3} (≥0.60), {:.1} cpu-min (≤30)", secs / 60.0),
    );

    // gate 8: rerun with the smoothness term disabled, compare contour F1@1
    let mut tc_no_ms = run_train_config();
    tc_no_ms.loss.weight_ms = 0.0;
    let no_ms = train_pipeline(&tc_no_ms, &scene_cfg)
        .and_then(|pipe| held_out_report(&pipe, &scene_cfg));
    match no_ms {
        Ok((report_no_ms, _)) => {
            let f1_ms = report.contour_f1[0];
            let f1_no_ms = report_no_ms.contour_f1[0];
            gate(
                results,
                8,
                "smoothness ablation",
                f1_ms >= f1_no_ms,
                format!("contour F1@1: with smoothing {f1_ms:.3} vs without {f1_no_ms:.3}"),
            );
        }
        Err(e) => gate(results, 8, "smoothness ablation", false, format!("ablation run failed: {e}")),
    }

    // gate 9: split instances on forced-occluder scenes must come back as a
    // single candidate covering both parts
    let occluded_cfg = SceneConfig { occluder_probability: 1.0, ..scene_cfg.clone() };
    let mut split_total = 0usize;
    let mut split_covered = 0usize;
    let mut occl_err = None;
    for idx in 2000..2000 + HELD_OUT_SCENES {
        let scene = match generate(&occluded_cfg, idx) {
            Ok(s) => s,
            Err(e) => {
                occl_err = Some(e);
                break;
            }
        };
        let out = match infer_image(
            &pipe.params,
            &pipe.head,
            &scene.image,
            &MeanShiftConfig::default(),
            &VerifyConfig::default(),
        ) {
            Ok(o) => o,
            Err(e) => {
                occl_err = Some(e);
                break;
            }
        };
        for &id in &scene.gt.instance_ids() {
            let mask = scene.gt.instance_mask(id);
            if component_count(&mask) < 2 {
                continue;
            }
            split_total += 1;
            let best = out
                .candidates
                .iter()
                .map(|c| metrics::mask_iou(&c.mask, &mask).unwrap())
                .fold(0.0, f64::max);
            if best >= 0.5 {
                split_covered += 1;
            }
        }
    }
    match occl_err {
        Some(e) => gate(results, 9, "occlusion handling", false, format!("error: {e}")),
        None => {
            let ratio =
                if split_total == 0 { 0.0 } else { split_covered as f64 / split_total as f64 };
            gate(
                results,
                9,
                "occlusion handling",
                split_total > 0 && ratio >= 0.9,
                format!("{split_covered}/{split_total} split instances covered ({ratio:.2})"),
            );
        }
    }

    // gate 10: candidates handed to verification stay economical
    gate(
        results,
        10,
        "candidate economy",
        stats.mean_candidates <= 2.0 * stats.mean_gt_instances,
        format!(
            "{:.2} candidates vs {:.2} GT instances per image",
            stats.mean_candidates, stats.mean_gt_instances
        ),
    );
}

// ---------------------------------------------------------------------------
// gate 7: window-size effect on occlusion-split scenes

fn check_window_effect(results: &mut Vec<Gate>) {
    let occluded_cfg =
        SceneConfig { occluder_probability: 1.0, ..SceneConfig::default() };
    let mut maps = Vec::new();
    for window in [33usize, 9] {
        let mut tc = run_train_config();
        tc.steps = OCCLUSION_RUN_STEPS;
        tc.log_interval = OCCLUSION_RUN_STEPS;
        tc.sampler.window = window;
        tc.sampler.center_radius = 4;
        tc.sampler.dilation = 4;
        let run = train_pipeline(&tc, &occluded_cfg)
            .and_then(|pipe| held_out_report(&pipe, &occluded_cfg));
        match run {
            Ok((report, _)) => maps.push(mean_ap_at(&report, 0.5)),
            Err(e) => {
                gate(results, 7, "window-size effect", false, format!("window {window} run failed: {e}"));
                return;
            }
        }
    }
    let (large, small) = (maps[0], maps[1]);
    gate(
        results,
        7,
        "window-size effect",
        large - small >= 0.05,
        format!("mAP@0.5 window 33: {large:.3} vs window 9: {small:.3}"),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut results = Vec::new();
    check_gradients(&mut results);
    check_permutation_invariance(&mut results);
    check_zero_loss_fixed_point(&mut results);
    check_mean_shift_oracle(&mut results);
    check_ap_oracle(&mut results);
    check_end_to_end(&mut results);
    check_window_effect(&mut results);

    results.sort_by_key(|g| g.number);
    println!("\n==== acceptance summary ====");
    for g in &results {
        println!(
            "criterion {:2} {} — {}: {}",
            g.number,
            if g.passed { "PASS" } else { "FAIL" },
            g.name,
            g.detail
        );
    }
    let failed: Vec<String> =
        results.iter().filter(|g| !g.passed).map(|g| format!("{} ({})", g.number, g.name)).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
