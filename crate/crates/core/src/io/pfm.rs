//! PFM (portable float map) reader/writer.  Grayscale "Pf" carries a
//! RealLabelMap, color "PF" a 3-channel ImageGrid.  Values are 32-bit floats;
//! the negative scale header marks little-endian, rows run bottom-to-top.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, RealLabelMap};

fn write_header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n-1.0\n").into_bytes()
}

/// Header tokens and the payload offset: magic, width, height, scale.
fn parse_header(bytes: &[u8]) -> Result<(String, usize, usize, f64, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0usize;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data("truncated PFM header"));
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::data("PFM header is not ASCII"))?
                .to_string(),
        );
    }
    // exactly one whitespace byte separates the scale from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::data("missing separator after PFM scale"));
    }
    pos += 1;
    let width: usize =
        tokens[1].parse().map_err(|_| Error::data(format!("bad PFM width {:?}", tokens[1])))?;
    let height: usize =
        tokens[2].parse().map_err(|_| Error::data(format!("bad PFM height {:?}", tokens[2])))?;
    let scale: f64 =
        tokens[3].parse().map_err(|_| Error::data(format!("bad PFM scale {:?}", tokens[3])))?;
    Ok((tokens[0].clone(), width, height, scale, pos))
}

fn check_payload(magic: &str, scale: f64, got: usize, want: usize) -> Result<()> {
    if scale >= 0.0 {
        return Err(Error::data("big-endian PFM (positive scale) is not supported"));
    }
    if got != want {
        return Err(Error::data(format!(
            "{magic} payload holds {got} bytes, expected {want}"
        )));
    }
    Ok(())
}

pub fn write_float_map(path: &Path, map: &RealLabelMap) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let mut bytes = write_header("Pf", w, h);
    for y in (0..h).rev() {
        for x in 0..w {
            bytes.extend_from_slice(&(map.get(y, x) as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_float_map(path: &Path) -> Result<RealLabelMap> {
    let bytes = fs::read(path)?;
    let (magic, w, h, scale, offset) = parse_header(&bytes)?;
    if magic != "Pf" {
        return Err(Error::data(format!("expected grayscale PFM magic \"Pf\", got {magic:?}")));
    }
    check_payload(&magic, scale, bytes.len() - offset, 4 * w * h)?;
    let mut values = vec![0.0f64; h * w];
    let mut cursor = offset;
    for y in (0..h).rev() {
        for x in 0..w {
            let raw: [u8; 4] = bytes[cursor..cursor + 4].try_into().unwrap();
            values[y * w + x] = f32::from_le_bytes(raw) as f64;
            cursor += 4;
        }
    }
    RealLabelMap::new(h, w, values)
}

pub fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::dimension("color PFM requires exactly 3 channels"));
    }
    let (h, w) = (image.height(), image.width());
    let mut bytes = write_header("PF", w, h);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                bytes.extend_from_slice(&(image.get(c, y, x) as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let bytes = fs::read(path)?;
    let (magic, w, h, scale, offset) = parse_header(&bytes)?;
    if magic != "PF" {
        return Err(Error::data(format!("expected color PFM magic \"PF\", got {magic:?}")));
    }
    check_payload(&magic, scale, bytes.len() - offset, 12 * w * h)?;
    let mut data = vec![0.0f64; 3 * h * w];
    let mut cursor = offset;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                let raw: [u8; 4] = bytes[cursor..cursor + 4].try_into().unwrap();
                data[(c * h + y) * w + x] = f32::from_le_bytes(raw) as f64;
                cursor += 4;
            }
        }
    }
    ImageGrid::new(h, w, 3, data)
}
