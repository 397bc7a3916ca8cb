//! IDX container reader (MNIST / EMNIST distribution format).
//!
//! Layout: two zero bytes, a type byte (0x08 = unsigned byte), a dimension
//! count byte, one big-endian u32 per dimension, then the payload.

use std::path::{Path, PathBuf};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{found:08x} at offset 0, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated at offset {offset}, needed {needed} more bytes")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },
    #[error("image count {images} does not match label count {labels} (count field at offset 4)")]
    CountMismatch { images: usize, labels: usize },
}

/// Flattened features in `[0, 1]` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IdxError> {
        if self.bytes.len() < self.pos + n {
            return Err(IdxError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IdxError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses one IDX file, returning its dimensions and raw payload.
fn parse<'a>(
    path: &'a Path,
    bytes: &'a [u8],
    expected: u32,
) -> Result<(Vec<usize>, &'a [u8]), IdxError> {
    let mut cur = Cursor {
        path,
        bytes,
        pos: 0,
    };
    let magic = cur.u32()?;
    if magic != expected {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|_| cur.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let total: usize = dims.iter().product();
    let payload = cur.take(total)?;
    Ok((dims, payload))
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image/label file pair. Pixels are scaled by 1/255.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<RawDataset, IdxError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img_bytes = read(ip)?;
    let lbl_bytes = read(lp)?;
    let (idims, pixels) = parse(ip, &img_bytes, IMAGES_MAGIC)?;
    let (ldims, labels) = parse(lp, &lbl_bytes, LABELS_MAGIC)?;
    let (n_img, n_lbl) = (idims[0], ldims[0]);
    if n_img != n_lbl {
        return Err(IdxError::CountMismatch {
            images: n_img,
            labels: n_lbl,
        });
    }
    let dim = idims[1] * idims[2];
    let features = if dim == 0 {
        vec![Vec::new(); n_img]
    } else {
        pixels
            .chunks_exact(dim)
            .map(|c| c.iter().map(|&p| p as f64 / 255.0).collect())
            .collect()
    };
    Ok(RawDataset {
        features,
        labels: labels.iter().map(|&l| l as usize).collect(),
        dim,
    })
}
