//! PPM ("P6") renders for eyeballing results: real-valued maps through a
//! fixed perceptual colormap, detections as per-index hue overlays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::RealLabelMap;
use crate::synth::hsv_to_rgb;
use crate::verify::Detection;

/// 16 evenly spaced samples of the viridis colormap (dark purple → yellow).
const COLORMAP: [[u8; 3]; 16] = [
    [68, 1, 84],
    [72, 26, 108],
    [71, 47, 125],
    [65, 68, 135],
    [57, 86, 140],
    [49, 104, 142],
    [42, 120, 142],
    [35, 136, 142],
    [31, 152, 139],
    [34, 168, 132],
    [53, 183, 121],
    [84, 197, 104],
    [122, 209, 81],
    [165, 219, 54],
    [210, 226, 27],
    [253, 231, 37],
];

/// Colormap lookup with linear interpolation, t clamped to [0,1].
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let i = (t.floor() as usize).min(COLORMAP.len() - 2);
    let frac = t - i as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let v = COLORMAP[i][c] as f64 * (1.0 - frac) + COLORMAP[i + 1][c] as f64 * frac;
        rgb[c] = v.round() as u8;
    }
    rgb
}

pub fn write_ppm(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * height * width {
        return Err(Error::dimension(format!(
            "rgb buffer holds {} bytes, expected {}",
            rgb.len(),
            3 * height * width
        )));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes)?;
    Ok(())
}

/// Render a real map over [0, max(map)]; non-positive maps render flat.
pub fn render_label_map(map: &RealLabelMap, path: &Path) -> Result<()> {
    let max = map.values().iter().cloned().fold(0.0f64, f64::max);
    let mut rgb = Vec::with_capacity(3 * map.values().len());
    for &v in map.values() {
        let t = if max > 0.0 { v / max } else { 0.0 };
        rgb.extend_from_slice(&colormap(t));
    }
    write_ppm(path, map.height(), map.width(), &rgb)
}

/// Render detections as hue overlays on black, in list order (later
/// detections paint over earlier ones where masks overlap).
pub fn render_detections(
    detections: &[Detection],
    height: usize,
    width: usize,
    path: &Path,
) -> Result<()> {
    let mut rgb = vec![0u8; 3 * height * width];
    for (i, det) in detections.iter().enumerate() {
        if det.mask.height() != height || det.mask.width() != width {
            return Err(Error::dimension("detection mask dims differ from render size"));
        }
        // golden-ratio hue steps keep neighboring indices far apart
        let hue = (i as f64 * 0.618_033_988_749_895).fract();
        let color = hsv_to_rgb(hue, 0.75, 1.0);
        for (p, &bit) in det.mask.bits().iter().enumerate() {
            if bit {
                for c in 0..3 {
                    rgb[3 * p + c] = (color[c] * 255.0).round() as u8;
                }
            }
        }
    }
    write_ppm(path, height, width, &rgb)
}
