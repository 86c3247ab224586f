//! Measures inter-instance level separation for a trained predictor on
//! freshly generated scenes: per-instance interior mean ± std, the min
//! adjacent gap between sorted means (what 1-D mean shift has to work
//! with), and the background mean.
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt_path = &args[1];
    let ckpt = dvis_core::net::read_checkpoint(std::path::Path::new(ckpt_path)).unwrap();
    let mut min_gaps = Vec::new();
    let mut stds = Vec::new();
    for seed_off in 0..5u64 {
        let mut scene_cfg = dvis_core::synth::SceneConfig::default();
        scene_cfg.seed = 0;
        if let Some(mx) = args.get(2) {
            scene_cfg.max_instances = mx.parse().unwrap();
        }
        let scene = dvis_core::synth::generate(&scene_cfg, 9000 + seed_off as usize).unwrap();
        let factor = ckpt.params.cfg.downsample_factor().unwrap();
        let (raw, _) = dvis_core::net::forward(&ckpt.params, &scene.image).unwrap();
        let f = dvis_core::grid::bilinear_upsample(&raw, factor);
        let gt = &scene.gt;
        let (h, w) = (gt.height(), gt.width());
        let interior = |id: u16| -> Vec<f64> {
            let mut vals = Vec::new();
            for y in 2..h - 2 {
                for x in 2..w - 2 {
                    let mut all = true;
                    'scan: for dy in -2i64..=2 {
                        for dx in -2i64..=2 {
                            if gt.id((y as i64 + dy) as usize, (x as i64 + dx) as usize) != id {
                                all = false;
                                break 'scan;
                            }
                        }
                    }
                    if all {
                        vals.push(f.get(y, x));
                    }
                }
            }
            vals
        };
        let mut stats = Vec::new();
        for &id in &gt.instance_ids() {
            let vals = interior(id);
            if vals.len() < 4 {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            stats.push((mean, var.sqrt()));
        }
        let bg = interior(0);
        let bg_mean = bg.iter().sum::<f64>() / bg.len().max(1) as f64;
        stats.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let gap = stats
            .windows(2)
            .map(|w| w[1].0 - w[0].0)
            .fold(f64::INFINITY, f64::min);
        print!("  seed {}: bg {bg_mean:.2} |", 9000 + seed_off);
        for (m, s) in &stats {
            print!(" {m:.2}±{s:.2}");
        }
        println!(" | min gap {gap:.3}");
        if gap.is_finite() {
            min_gaps.push(gap);
        }
        stds.extend(stats.iter().map(|(_, s)| *s));
    }
    let avg = min_gaps.iter().sum::<f64>() / min_gaps.len() as f64;
    let avg_std = stds.iter().sum::<f64>() / stds.len() as f64;
    println!("avg min gap {avg:.3}, avg interior std {avg_std:.3}");
}
