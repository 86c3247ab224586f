//! Detections as JSON with run-length-encoded masks: row-major runs,
//! alternating background/foreground, always starting with background.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BinaryMask;
use crate::verify::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleMask {
    /// [height, width]
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false; // runs start with background
    let mut run = 0usize;
    for &bit in mask.bits() {
        if bit == current {
            run += 1;
        } else {
            counts.push(run);
            current = bit;
            run = 1;
        }
    }
    counts.push(run);
    RleMask { size: [mask.height(), mask.width()], counts }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    let [h, w] = rle.size;
    let total: usize = rle.counts.iter().sum();
    if total != h * w {
        return Err(Error::data(format!(
            "run lengths sum to {total}, expected {}x{} = {}",
            h,
            w,
            h * w
        )));
    }
    let mut bits = Vec::with_capacity(h * w);
    let mut current = false;
    for &run in &rle.counts {
        bits.extend(std::iter::repeat(current).take(run));
        current = !current;
    }
    BinaryMask::new(h, w, bits)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    /// Head class index: 0 = reject, semantic class c is c + 1.
    pub class: usize,
    pub score: f64,
    pub s_cls: f64,
    pub s_iou: f64,
    pub mask: RleMask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub detections: Vec<DetectionRecord>,
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let records = detections
        .iter()
        .map(|d| DetectionRecord {
            class: d.class,
            score: d.score,
            s_cls: d.s_cls,
            s_iou: d.s_iou,
            mask: rle_encode(&d.mask),
        })
        .collect();
    let json = serde_json::to_string_pretty(&DetectionsFile { detections: records })
        .map_err(|e| Error::data(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file: DetectionsFile = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::data(format!("bad detections file {}: {e}", path.display())))?;
    file.detections
        .into_iter()
        .map(|r| {
            Ok(Detection {
                mask: rle_decode(&r.mask)?,
                class: r.class,
                s_cls: r.s_cls,
                s_iou: r.s_iou,
                score: r.score,
            })
        })
        .collect()
}
