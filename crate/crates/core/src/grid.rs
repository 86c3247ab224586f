//! Pixel-grid containers shared by the whole pipeline: multi-channel images,
//! real-valued label maps, integer ground-truth maps and binary masks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Multi-channel image stored as channel-major planes, each plane row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dimension("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::dimension(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("image contains non-finite values"));
        }
        Ok(ImageGrid { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageGrid { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, value: f64) {
        self.data[(channel * self.height + y) * self.width + x] = value;
    }

    /// One channel as a contiguous row-major slice.
    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Per-pixel real-valued prediction (the continuous labeling `f`).
#[derive(Debug, Clone, PartialEq)]
pub struct RealLabelMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl RealLabelMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dimension("label map dimensions must be positive"));
        }
        if values.len() != height * width {
            return Err(Error::dimension(format!(
                "label map data length {} does not match {}x{}",
                values.len(),
                height,
                width
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("label map contains non-finite values"));
        }
        Ok(RealLabelMap { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        RealLabelMap { height, width, values: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.values[y * self.width + x] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Integer instance ids per pixel (0 = background) plus a class per id.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMap {
    height: usize,
    width: usize,
    ids: Vec<u16>,
    classes: BTreeMap<u16, usize>,
}

impl GroundTruthMap {
    pub fn new(
        height: usize,
        width: usize,
        ids: Vec<u16>,
        classes: BTreeMap<u16, usize>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dimension("ground truth dimensions must be positive"));
        }
        if ids.len() != height * width {
            return Err(Error::dimension(format!(
                "ground truth data length {} does not match {}x{}",
                ids.len(),
                height,
                width
            )));
        }
        for &id in &ids {
            if id != 0 && !classes.contains_key(&id) {
                return Err(Error::data(format!("instance id {id} has no class entry")));
            }
        }
        Ok(GroundTruthMap { height, width, ids, classes })
    }

    /// Convenience constructor assigning class 0 to every instance id.
    pub fn from_ids(height: usize, width: usize, ids: Vec<u16>) -> Result<Self> {
        let classes = ids.iter().filter(|&&id| id != 0).map(|&id| (id, 0)).collect();
        GroundTruthMap::new(height, width, ids, classes)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn id(&self, y: usize, x: usize) -> u16 {
        self.ids[y * self.width + x]
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn classes(&self) -> &BTreeMap<u16, usize> {
        &self.classes
    }

    pub fn class_of(&self, id: u16) -> Option<usize> {
        self.classes.get(&id).copied()
    }

    /// Distinct positive ids actually present, ascending.
    pub fn instance_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.ids.iter().copied().filter(|&id| id != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn instance_mask(&self, id: u16) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.ids.iter().map(|&v| v == id && id != 0).collect(),
        }
    }
}

/// Plain binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dimension("mask dimensions must be positive"));
        }
        if bits.len() != height * width {
            return Err(Error::dimension(format!(
                "mask data length {} does not match {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight bounding box as (y0, x0, y1, x1), inclusive.  None when empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    any = true;
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
            }
        }
        any.then_some((y0, x0, y1, x1))
    }

    /// Upsample by an integer factor, each bit becoming a factor x factor block.
    pub fn upsample_nearest(&self, factor: usize) -> BinaryMask {
        assert!(factor >= 1);
        let (h, w) = (self.height * factor, self.width * factor);
        let mut bits = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                bits[y * w + x] = self.get(y / factor, x / factor);
            }
        }
        BinaryMask { height: h, width: w, bits }
    }
}

/// Downsample a ground-truth map by an integer factor, each output id taken
/// from the top-left pixel of its factor x factor block.
pub fn resize_nearest(gt: &GroundTruthMap, factor: usize) -> Result<GroundTruthMap> {
    if factor == 0 {
        return Err(Error::domain("resize factor must be at least 1"));
    }
    if gt.height % factor != 0 || gt.width % factor != 0 {
        return Err(Error::dimension(format!(
            "factor {} does not divide {}x{}",
            factor, gt.height, gt.width
        )));
    }
    let (h, w) = (gt.height / factor, gt.width / factor);
    let mut ids = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            ids.push(gt.id(y * factor, x * factor));
        }
    }
    GroundTruthMap::new(h, w, ids, gt.classes.clone())
}

/// Mask of pixels with a positive instance id.
pub fn foreground_mask(gt: &GroundTruthMap) -> BinaryMask {
    BinaryMask {
        height: gt.height,
        width: gt.width,
        bits: gt.ids.iter().map(|&id| id != 0).collect(),
    }
}

/// Upsample a real label map by an integer factor with bilinear interpolation,
/// pixel centers aligned (output center (Y+0.5)/factor-0.5 in input coords).
pub fn bilinear_upsample(map: &RealLabelMap, factor: usize) -> RealLabelMap {
    assert!(factor >= 1);
    if factor == 1 {
        return map.clone();
    }
    let (h, w) = (map.height * factor, map.width * factor);
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = ((y as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let y0 = (sy.floor() as usize).min(map.height - 1);
        let y1 = (y0 + 1).min(map.height - 1);
        let fy = sy - y0 as f64;
        for x in 0..w {
            let sx = ((x as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let x0 = (sx.floor() as usize).min(map.width - 1);
            let x1 = (x0 + 1).min(map.width - 1);
            let fx = sx - x0 as f64;
            let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
            let bot = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
            values.push(top * (1.0 - fy) + bot * fy);
        }
    }
    RealLabelMap { height: h, width: w, values }
}

/// 4-connected components of a mask, in first-encounter (row-major) order.
pub fn connected_components(mask: &BinaryMask) -> Vec<BinaryMask> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        let mut bits = vec![false; h * w];
        stack.push(start);
        seen[start] = true;
        while let Some(p) = stack.pop() {
            bits[p] = true;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.bits[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        components.push(BinaryMask { height: h, width: w, bits });
    }
    components
}
