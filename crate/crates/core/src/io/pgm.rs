//! Ground-truth maps as 16-bit binary PGM ("P5", maxval 65535, big-endian
//! samples) with the id→class table in a JSON sidecar next to the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::GroundTruthMap;

pub fn classes_sidecar_path(pgm_path: &Path) -> PathBuf {
    pgm_path.with_extension("classes.json")
}

pub fn write_gt_map(path: &Path, gt: &GroundTruthMap) -> Result<()> {
    let (h, w) = (gt.height(), gt.width());
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &id in gt.ids() {
        bytes.extend_from_slice(&id.to_be_bytes());
    }
    fs::write(path, bytes)?;
    let json = serde_json::to_string_pretty(gt.classes())
        .map_err(|e| Error::data(e.to_string()))?;
    fs::write(classes_sidecar_path(path), json)?;
    Ok(())
}

/// Netpbm-style header tokenizer: whitespace-separated tokens, `#` comments
/// run to end of line.
fn parse_header(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0usize;
    while tokens.len() < count {
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data("truncated PGM header"));
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::data("PGM header is not ASCII"))?
                .to_string(),
        );
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::data("missing separator after PGM maxval"));
    }
    Ok((tokens, pos + 1))
}

pub fn read_gt_map(path: &Path) -> Result<GroundTruthMap> {
    let bytes = fs::read(path)?;
    let (tokens, offset) = parse_header(&bytes, 4)?;
    if tokens[0] != "P5" {
        return Err(Error::data(format!("expected PGM magic \"P5\", got {:?}", tokens[0])));
    }
    let w: usize =
        tokens[1].parse().map_err(|_| Error::data(format!("bad PGM width {:?}", tokens[1])))?;
    let h: usize =
        tokens[2].parse().map_err(|_| Error::data(format!("bad PGM height {:?}", tokens[2])))?;
    if tokens[3] != "65535" {
        return Err(Error::data(format!(
            "ground-truth PGM must have maxval 65535, got {:?}",
            tokens[3]
        )));
    }
    let want = 2 * w * h;
    if bytes.len() - offset != want {
        return Err(Error::data(format!(
            "PGM payload holds {} bytes, expected {want}",
            bytes.len() - offset
        )));
    }
    let ids: Vec<u16> = bytes[offset..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();

    let sidecar = classes_sidecar_path(path);
    let classes: BTreeMap<u16, usize> = if sidecar.exists() {
        serde_json::from_str(&fs::read_to_string(&sidecar)?)
            .map_err(|e| Error::data(format!("bad classes sidecar {}: {e}", sidecar.display())))?
    } else {
        return Err(Error::data(format!("missing classes sidecar {}", sidecar.display())));
    };
    GroundTruthMap::new(h, w, ids, classes)
}
