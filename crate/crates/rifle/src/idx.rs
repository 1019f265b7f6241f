//! IDX image/label files (the MNIST container format).
//!
//! Big-endian throughout. Images: magic `0x00000803`, count, rows, cols,
//! then `count·rows·cols` unsigned bytes. Labels: magic `0x00000801`,
//! count, then `count` bytes.

use std::fs;
use std::path::Path;

use rifle_core::{Dataset, Matrix};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("bad magic in {file}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        file: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("{file} truncated: need {needed} bytes, have {actual}")]
    Truncated {
        file: &'static str,
        needed: usize,
        actual: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} is not below {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Raw decoded images: pixels row-major per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<u8>>,
}

fn be_u32(bytes: &[u8], at: usize, file: &'static str) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            file,
            needed: at + 4,
            actual: bytes.len(),
        })
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    let file = "images";
    let magic = be_u32(bytes, 0, file)?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::BadMagic {
            file,
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let size = rows * cols;
    let needed = 16 + count * size;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            file,
            needed,
            actual: bytes.len(),
        });
    }
    let pixels = bytes[16..needed]
        .chunks_exact(size.max(1))
        .take(count)
        .map(<[u8]>::to_vec)
        .collect();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let file = "labels";
    let magic = be_u32(bytes, 0, file)?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::BadMagic {
            file,
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, file)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            file,
            needed,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len() * images.rows * images.cols);
    for v in [
        IMAGE_MAGIC,
        images.pixels.len() as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for p in &images.pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pairs decoded images and labels into a dataset with pixels scaled to
/// `[0, 1]`, keeping the first `limit` samples if given.
pub fn to_dataset(
    images: &IdxImages,
    labels: &[u8],
    classes: usize,
    limit: Option<usize>,
) -> Result<Dataset, crate::Error> {
    if images.pixels.len() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.pixels.len(),
            labels: labels.len(),
        }
        .into());
    }
    let n = limit.map_or(labels.len(), |l| l.min(labels.len()));
    let width = images.rows * images.cols;
    let mut data = Vec::with_capacity(n * width);
    for p in &images.pixels[..n] {
        data.extend(p.iter().map(|&b| f64::from(b) / 255.0));
    }
    let ys = labels[..n]
        .iter()
        .map(|&y| {
            if (y as usize) < classes {
                Ok(y as usize)
            } else {
                Err(IdxError::LabelOutOfRange { label: y, classes })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::new(Matrix::new(n, width, data)?, ys, classes)?)
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_idx(
    images: &Path,
    labels: &Path,
    classes: usize,
    limit: Option<usize>,
) -> Result<Dataset, crate::Error> {
    let imgs = parse_images(&read(images)?)?;
    let lbls = parse_labels(&read(labels)?)?;
    to_dataset(&imgs, &lbls, classes, limit)
}
