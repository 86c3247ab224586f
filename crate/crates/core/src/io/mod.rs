//! File formats: PFM for real-valued maps and images, 16-bit PGM for ground
//! truth, PPM renders, JSON for detections and manifests.

pub mod detections;
pub mod manifest;
pub mod pfm;
pub mod pgm;
pub mod ppm;
