//! Reports the composition of the stratified pair sample on default scenes.
fn main() {
    let scene_cfg = dvis_core::synth::SceneConfig::default();
    let sampler = dvis_core::sampling::SamplerConfig::default();
    let mut tot = [0usize; 4]; // bg-bg, bg-fg, same-inst, cross-inst
    for idx in 0..5usize {
        let scene = dvis_core::synth::generate(&scene_cfg, idx).unwrap();
        let pairs = dvis_core::sampling::sample_pairs(&scene.gt, &sampler).unwrap();
        for &((x1, y1), (x2, y2)) in &pairs.pairs {
            let a = scene.gt.id(y1 as usize, x1 as usize);
            let b = scene.gt.id(y2 as usize, x2 as usize);
            let k = match (a, b) {
                (0, 0) => 0,
                (0, _) | (_, 0) => 1,
                (x, y) if x == y => 2,
                _ => 3,
            };
            tot[k] += 1;
        }
    }
    let n: usize = tot.iter().sum();
    println!(
        "bg-bg {:.1}%  bg-fg {:.1}%  same {:.1}%  cross {:.1}%  ({n} pairs over 5 scenes)",
        100.0 * tot[0] as f64 / n as f64,
        100.0 * tot[1] as f64 / n as f64,
        100.0 * tot[2] as f64 / n as f64,
        100.0 * tot[3] as f64 / n as f64
    );
}
