//! IDX files (big-endian, unsigned-byte payload) as used by MNIST.

use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{HyprError, Result};
use crate::training::loss::Target;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw image tensor: `n` images of `rows × cols` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn seq_len(&self) -> usize {
        self.rows * self.cols
    }

    /// Image `i` as a pixel sequence scaled to `[0, 1]`.
    pub fn sequence(&self, i: usize) -> Vec<f64> {
        let len = self.seq_len();
        self.pixels[i * len..(i + 1) * len]
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect()
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| HyprError::Parse {
            offset,
            msg: format!("file ends inside a header field ({} bytes)", bytes.len()),
        })
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != want {
        return Err(HyprError::Parse {
            offset: 0,
            msg: format!("magic {magic:#010x}, expected {want:#010x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    let end = start.checked_add(len).ok_or_else(|| HyprError::Parse {
        offset: start,
        msg: "payload size overflows".into(),
    })?;
    if bytes.len() < end {
        return Err(HyprError::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: expected {len} bytes from offset {start}"),
        });
    }
    if bytes.len() > end {
        return Err(HyprError::Parse {
            offset: end,
            msg: format!("{} trailing bytes", bytes.len() - end),
        });
    }
    Ok(&bytes[start..end])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let pixels = payload(bytes, 16, n * rows * cols)?.to_vec();
    Ok(IdxImages {
        n,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, n)?.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HyprError::io(path, e))
}

pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read(path)?)
}

/// Pixel-by-pixel sequence classification from an image/label file pair,
/// keeping the first `limit` images when given.
pub fn load_pixel_sequences(
    images: &Path,
    labels: &Path,
    limit: Option<usize>,
) -> Result<Dataset<f64>> {
    let img = load_idx_images(images)?;
    let lab = load_idx_labels(labels)?;
    pixel_dataset(&img, &lab, limit)
}

pub fn pixel_dataset(img: &IdxImages, lab: &[u8], limit: Option<usize>) -> Result<Dataset<f64>> {
    if lab.len() != img.n {
        return Err(HyprError::dim(format!(
            "{} labels for {} images",
            lab.len(),
            img.n
        )));
    }
    let n = limit.map_or(img.n, |l| l.min(img.n));
    let n_classes = lab
        .iter()
        .map(|&c| c as usize + 1)
        .max()
        .unwrap_or(0)
        .max(10);
    let samples = (0..n)
        .map(|i| Sample {
            x: img.sequence(i),
            t_len: img.seq_len(),
            target: Target::Class(lab[i] as usize),
        })
        .collect();
    Ok(Dataset {
        name: "pixels".into(),
        d: 1,
        n_classes,
        t0: None,
        samples,
    })
}

/// Encodes images in the IDX layout.
pub fn encode_idx_images(img: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.pixels.len());
    for v in [IMAGES_MAGIC, img.n as u32, img.rows as u32, img.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
