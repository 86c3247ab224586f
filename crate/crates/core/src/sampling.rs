//! Pixel-pair generation for the pairwise loss: a dense stratified pattern
//! (full near field plus a dilated far field) or uniform random rejection
//! sampling, both restricted to pairs touching the foreground.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{foreground_mask, GroundTruthMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Stratified,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Odd window diameter; pairs never span more than (window−1)/2 Chebyshev.
    pub window: usize,
    /// Radius of the densely sampled near field.
    pub center_radius: usize,
    /// Step of the sparse far-field lattice.
    pub dilation: usize,
    pub mode: SampleMode,
    /// Number of pairs drawn in random mode.
    pub random_pair_count: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            window: 129,
            center_radius: 8,
            dilation: 8,
            mode: SampleMode::Stratified,
            random_pair_count: 1000,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::domain(format!("window must be odd and ≥ 3, got {}", self.window)));
        }
        if self.center_radius == 0 || 2 * self.center_radius >= self.window {
            return Err(Error::domain(format!(
                "center_radius must satisfy 0 < c < window/2, got c={} window={}",
                self.center_radius, self.window
            )));
        }
        if self.dilation == 0 {
            return Err(Error::domain("dilation must be at least 1"));
        }
        Ok(())
    }
}

/// Unordered pixel pairs as ((x1,y1),(x2,y2)).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairList {
    pub pairs: Vec<((u32, u32), (u32, u32))>,
}

#[inline]
fn half_plane(dx: i32, dy: i32) -> bool {
    dx > 0 || (dx == 0 && dy > 0)
}

/// Deduplicated union of the 4-neighborhood, the dense Chebyshev ball of
/// radius center_radius, and the dilated lattice out to the window edge; only
/// one representative of each {o, −o} pair is emitted (the half-plane with
/// dx > 0 or (dx = 0, dy > 0)), and (0,0) never appears.  Sorted by (dx, dy).
pub fn stratified_offsets(cfg: &SamplerConfig) -> Result<Vec<(i32, i32)>> {
    cfg.validate()?;
    let reach = ((cfg.window - 1) / 2) as i32;
    let c = cfg.center_radius as i32;
    let r = cfg.dilation as i32;
    let mut set = std::collections::BTreeSet::new();
    for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
        if half_plane(dx, dy) {
            set.insert((dx, dy));
        }
    }
    for dx in -c..=c {
        for dy in -c..=c {
            if (dx, dy) != (0, 0) && half_plane(dx, dy) {
                set.insert((dx, dy));
            }
        }
    }
    let mut k = -reach / r * r;
    // walk lattice multiples of r inside [-reach, reach] on both axes
    let mut lattice = Vec::new();
    while k <= reach {
        lattice.push(k);
        k += r;
    }
    for &dx in &lattice {
        for &dy in &lattice {
            if (dx, dy) != (0, 0) && half_plane(dx, dy) {
                set.insert((dx, dy));
            }
        }
    }
    Ok(set.into_iter().collect())
}

/// Every in-bounds (anchor, anchor+offset) pair with at least one foreground
/// endpoint, anchors in row-major order, offsets in `stratified_offsets`
/// order.  Deterministic function of the foreground set and the config.
pub fn sample_pairs_stratified(gt: &GroundTruthMap, cfg: &SamplerConfig) -> Result<PairList> {
    let offsets = stratified_offsets(cfg)?;
    let fg = foreground_mask(gt);
    let (h, w) = (gt.height() as i32, gt.width() as i32);
    let mut pairs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let anchor_fg = fg.get(y as usize, x as usize);
            for &(dx, dy) in &offsets {
                let nx = x + dx;
                let ny = y + dy;
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                if anchor_fg || fg.get(ny as usize, nx as usize) {
                    pairs.push(((x as u32, y as u32), (nx as u32, ny as u32)));
                }
            }
        }
    }
    Ok(PairList { pairs })
}

/// Exactly `random_pair_count` uniform pairs with at least one foreground
/// endpoint and distinct endpoints, drawn by seeded rejection sampling
/// (capped at 100·count attempts).
pub fn sample_pairs_random(gt: &GroundTruthMap, cfg: &SamplerConfig) -> Result<PairList> {
    use rand::{Rng, SeedableRng};
    if cfg.random_pair_count == 0 {
        return Err(Error::domain("random_pair_count must be at least 1"));
    }
    let fg = foreground_mask(gt);
    if fg.count() == 0 {
        return Err(Error::empty_domain("no foreground pixels to sample pairs from"));
    }
    let (h, w) = (gt.height(), gt.width());
    let n = h * w;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(cfg.random_pair_count);
    let cap = 100 * cfg.random_pair_count;
    let mut attempts = 0usize;
    while pairs.len() < cfg.random_pair_count {
        attempts += 1;
        if attempts > cap {
            return Err(Error::domain(format!(
                "rejection sampling exceeded {cap} attempts ({} of {} pairs drawn)",
                pairs.len(),
                cfg.random_pair_count
            )));
        }
        let i1 = rng.gen_range(0..n);
        let i2 = rng.gen_range(0..n);
        if i1 == i2 || (!fg.bits()[i1] && !fg.bits()[i2]) {
            continue;
        }
        pairs.push((
            ((i1 % w) as u32, (i1 / w) as u32),
            ((i2 % w) as u32, (i2 / w) as u32),
        ));
    }
    Ok(PairList { pairs })
}

/// Dispatch on the configured mode.
pub fn sample_pairs(gt: &GroundTruthMap, cfg: &SamplerConfig) -> Result<PairList> {
    match cfg.mode {
        SampleMode::Stratified => sample_pairs_stratified(gt, cfg),
        SampleMode::Random => sample_pairs_random(gt, cfg),
    }
}
