//! Turn the continuous per-pixel labeling into candidate segments: threshold
//! away the background, cluster the remaining values with 1-D mean shift at
//! one or more bandwidths, and deduplicate near-identical masks across
//! bandwidths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, RealLabelMap};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MeanShiftConfig {
    /// Clustering runs once per bandwidth; duplicates are merged afterwards.
    pub bandwidths: Vec<f64>,
    /// Convergence threshold on the shift magnitude.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Pixels with f ≤ this are background and never clustered.
    pub tau_bg: f64,
    /// Candidates smaller than this many pixels are dropped.
    pub min_segment_pixels: usize,
    /// Masks from different bandwidths with IoU at or above this are
    /// duplicates; the larger-bandwidth one is kept.
    pub dedup_iou: f64,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        MeanShiftConfig {
            bandwidths: vec![0.9, 0.4],
            epsilon: 1e-3,
            max_iterations: 100,
            tau_bg: 1.0,
            min_segment_pixels: 20,
            dedup_iou: 0.95,
        }
    }
}

impl MeanShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::domain("bandwidths must be positive and non-empty"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::domain("mean-shift epsilon must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::domain("mean shift needs at least one iteration"));
        }
        if !(0.0..=1.0).contains(&self.dedup_iou) {
            return Err(Error::domain("dedup IoU must lie in [0,1]"));
        }
        Ok(())
    }
}

/// One clustered foreground region at a given bandwidth.  The mask may be
/// disconnected: parts of an occluded instance that landed on the same value
/// plateau stay one candidate.
#[derive(Debug, Clone)]
pub struct CandidateSegment {
    pub mask: BinaryMask,
    /// Mean of the f values inside the mask.
    pub mean_value: f64,
    /// Bandwidth this candidate came from.
    pub bandwidth: f64,
}

/// Flat-kernel 1-D mean shift.  Returns a cluster index per input value plus
/// the merged mode values, clusters sorted by ascending mode.
pub fn mean_shift_1d(
    values: &[f64],
    bandwidth: f64,
    epsilon: f64,
    max_iterations: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if !(bandwidth > 0.0) || !(epsilon > 0.0) || max_iterations == 0 {
        return Err(Error::domain("mean shift needs positive bandwidth, epsilon, iterations"));
    }
    if values.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("mean shift input contains non-finite values"));
    }

    // Sorted copy + prefix sums make each window mean a binary search.
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0.0);
    for &v in &sorted {
        prefix.push(prefix.last().unwrap() + v);
    }
    let window_mean = |m: f64| -> f64 {
        let lo = sorted.partition_point(|&v| v < m - bandwidth);
        let hi = sorted.partition_point(|&v| v <= m + bandwidth);
        (prefix[hi] - prefix[lo]) / (hi - lo) as f64
    };

    let converged: Vec<f64> = values
        .iter()
        .map(|&v| {
            let mut mode = v;
            for _ in 0..max_iterations {
                let next = window_mean(mode);
                let shift = (next - mode).abs();
                mode = next;
                if shift < epsilon {
                    break;
                }
            }
            mode
        })
        .collect();

    // Merge converged modes within bandwidth/2 (transitively, along the
    // sorted order), then label each value by its merged group.
    let mut order: Vec<usize> = (0..converged.len()).collect();
    order.sort_by(|&a, &b| converged[a].partial_cmp(&converged[b]).unwrap());
    let mut assignment = vec![0usize; converged.len()];
    let mut modes = Vec::new();
    let mut group_sum = 0.0;
    let mut group_n = 0usize;
    let mut prev = f64::NEG_INFINITY;
    for &i in &order {
        let m = converged[i];
        if group_n > 0 && m - prev > bandwidth / 2.0 {
            modes.push(group_sum / group_n as f64);
            group_sum = 0.0;
            group_n = 0;
        }
        assignment[i] = modes.len();
        group_sum += m;
        group_n += 1;
        prev = m;
    }
    modes.push(group_sum / group_n as f64);
    Ok((assignment, modes))
}

fn mask_iou_raw(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Full discretization: background threshold, per-bandwidth clustering,
/// minimum-size filter, cross-bandwidth deduplication.
pub fn discretize(f: &RealLabelMap, cfg: &MeanShiftConfig) -> Result<Vec<CandidateSegment>> {
    cfg.validate()?;
    let (h, w) = (f.height(), f.width());
    let fg_idx: Vec<usize> =
        (0..h * w).filter(|&p| f.values()[p] > cfg.tau_bg).collect();
    if fg_idx.is_empty() {
        return Ok(Vec::new());
    }
    let fg_values: Vec<f64> = fg_idx.iter().map(|&p| f.values()[p]).collect();

    let mut candidates: Vec<CandidateSegment> = Vec::new();
    for &bw in &cfg.bandwidths {
        let (assignment, modes) =
            mean_shift_1d(&fg_values, bw, cfg.epsilon, cfg.max_iterations)?;
        for cluster in 0..modes.len() {
            let members: Vec<usize> = fg_idx
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == cluster)
                .map(|(&p, _)| p)
                .collect();
            if members.len() < cfg.min_segment_pixels {
                continue;
            }
            let mut bits = vec![false; h * w];
            for &p in &members {
                bits[p] = true;
            }
            let mean_value =
                members.iter().map(|&p| f.values()[p]).sum::<f64>() / members.len() as f64;
            candidates.push(CandidateSegment {
                mask: BinaryMask::new(h, w, bits)?,
                mean_value,
                bandwidth: bw,
            });
        }
    }

    // Larger bandwidths win duplicates: process in descending-bandwidth order
    // and keep a candidate only if no kept mask is essentially the same.
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].bandwidth.partial_cmp(&candidates[a].bandwidth).unwrap());
    let mut kept: Vec<CandidateSegment> = Vec::new();
    for i in order {
        let cand = &candidates[i];
        if kept.iter().all(|k| mask_iou_raw(&k.mask, &cand.mask) < cfg.dedup_iou) {
            kept.push(cand.clone());
        }
    }
    Ok(kept)
}
