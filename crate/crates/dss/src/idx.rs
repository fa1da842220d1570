//! The big-endian IDX container used by the MNIST distribution.

use std::fs;
use std::path::Path;

use dss_core::{ImageTensor, Shape};

use crate::error::{DssError, Result};

const IMAGES_MAGIC: [u8; 4] = [0, 0, 8, 3];
const LABELS_MAGIC: [u8; 4] = [0, 0, 8, 1];

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DssError::io(path, e))
}

/// Checks the magic and returns the dimension sizes and the payload.
fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: [u8; 4]) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(DssError::format(path, format!("file is {} bytes, too short for an IDX magic", bytes.len())));
    }
    if bytes[..4] != magic {
        return Err(DssError::format(
            path,
            format!("bad IDX magic {}, expected {}", hex::encode(&bytes[..4]), hex::encode(magic)),
        ));
    }
    let dims = magic[3] as usize;
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(DssError::format(path, format!("length error: header needs {header} bytes, file has {}", bytes.len())));
    }
    let sizes = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    Ok((sizes, &bytes[header..]))
}

fn check_payload(path: &Path, payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() < expected {
        return Err(DssError::format(
            path,
            format!("length error: payload has {} bytes, header promises {expected}", payload.len()),
        ));
    }
    Ok(())
}

pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Vec<ImageTensor>> {
    let (sizes, payload) = parse_header(path, bytes, IMAGES_MAGIC)?;
    let (n, h, w) = (sizes[0], sizes[1], sizes[2]);
    if n == 0 {
        return Ok(Vec::new());
    }
    let shape = Shape::new(1, h, w).map_err(|e| DssError::format(path, e.to_string()))?;
    check_payload(path, payload, n * shape.len())?;
    payload
        .chunks_exact(shape.len())
        .take(n)
        .map(|chunk| Ok(ImageTensor::from_bytes(shape, chunk)?))
        .collect()
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let (sizes, payload) = parse_header(path, bytes, LABELS_MAGIC)?;
    check_payload(path, payload, sizes[0])?;
    Ok(payload[..sizes[0]].iter().map(|&b| b as usize).collect())
}

/// Images of shape (1, H, W), bytes scaled to [0, 1].
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<ImageTensor>> {
    let path = path.as_ref();
    parse_idx_images(path, &read(path)?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    parse_idx_labels(path, &read(path)?)
}
