//! Big-endian IDX files (the MNIST distribution format).

use std::path::Path;

use super::{Dataset, Split};
use crate::autodiff::Array;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset,
            message: format!("truncated header: file has {} bytes", bytes.len()),
        })
}

fn expect_magic(bytes: &[u8], magic: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    Ok(())
}

fn body(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes.get(start..start + len).ok_or_else(|| Error::Format {
        offset: bytes.len(),
        message: format!("truncated payload: expected {len} bytes from offset {start}"),
    })
}

/// Returns `(count, rows * cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    expect_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let width = rows * cols;
    let pixels = body(bytes, 16, count * width)?;
    Ok((
        count,
        width,
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    ))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    expect_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    Ok(body(bytes, 8, count)?.iter().map(|&l| l as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (count, width, pixels) = parse_idx_images(&img)?;
    let ys = parse_idx_labels(&lab)?;
    if ys.len() != count {
        return Err(Error::Format {
            offset: 4,
            message: format!("{count} images but {} labels", ys.len()),
        });
    }
    if count == 0 || width == 0 {
        return Err(Error::Format {
            offset: 4,
            message: "empty image file".into(),
        });
    }
    let classes = ys.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(Array::new(vec![count, width], pixels)?, ys, classes, split)
}
