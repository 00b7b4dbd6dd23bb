//! Big-endian IDX files as used by the MNIST distribution.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::LabeledDataset;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Images as `[n×(rows·cols)]` with pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Tensor,
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format { offset: offset as u64, detail: format!("truncated while reading {what}") })
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    parse_image_rows(bytes, None)
}

/// Like [`parse_images`] but converts only `rows` (all when `None`).
fn parse_image_rows(bytes: &[u8], keep: Option<&[usize]>) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let d = rows * cols;
    if n == 0 || d == 0 {
        return Err(Error::Format { offset: 4, detail: format!("empty image block {n}×{rows}×{cols}") });
    }
    let body = &bytes[16..];
    if body.len() < n * d {
        return Err(Error::Format {
            offset: (16 + body.len()) as u64,
            detail: format!("truncated pixel data: {} of {} bytes", body.len(), n * d),
        });
    }
    let scale = |b: &u8| f64::from(*b) / 255.0;
    let (count, data): (usize, Vec<f64>) = match keep {
        None => (n, body[..n * d].iter().map(scale).collect()),
        Some(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Contract(format!("image row {bad} of {n}")));
            }
            (idx.len(), idx.iter().flat_map(|&i| body[i * d..(i + 1) * d].iter().map(scale)).collect())
        }
    };
    Ok(IdxImages { rows, cols, pixels: Tensor::matrix(count, d, data)? })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format {
            offset: (8 + body.len()) as u64,
            detail: format!("truncated labels: {} of {n} bytes", body.len()),
        });
    }
    Ok(body[..n].iter().map(|&b| usize::from(b)).collect())
}

/// Reads an image/label file pair. Labels become both class and condition.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    load_idx_where(images_path, labels_path, |_| true)
}

/// [`load_idx`] restricted to examples whose label satisfies `keep`; only
/// those rows are converted.
pub fn load_idx_where(images_path: &Path, labels_path: &Path, keep: impl Fn(usize) -> bool) -> Result<LabeledDataset> {
    let ib = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lb = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let all_labels = parse_labels(&lb)?;
    let n = be_u32(&ib, 4, "image count")? as usize;
    if all_labels.len() != n {
        return Err(Error::Format { offset: 4, detail: format!("{n} images but {} labels", all_labels.len()) });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| keep(all_labels[i])).collect();
    let images = parse_image_rows(&ib, Some(&rows))?;
    let labels: Vec<usize> = rows.iter().map(|&i| all_labels[i]).collect();
    Ok(LabeledDataset {
        name: "mnist".into(),
        provenance: format!("idx:{}", images_path.display()),
        images: images.pixels,
        labels: labels.iter().map(|&y| Some(y)).collect(),
        factors: None,
        conditions: labels,
    })
}
