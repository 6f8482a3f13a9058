//! Binary split files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | field                                 |
//! |----------------|---------------------------------------|
//! | 4              | magic `CDSH`                          |
//! | 4              | format version (`u32`, currently 1)   |
//! | 4 x 4          | `n`, `h`, `w`, `d` (`u32` each)       |
//! | 1              | split tag (0 train, 1 quasi_dev, 2 dev, 3 adv_dev) |
//! | n              | labels (`u8`)                         |
//! | n              | color indices (`u8`)                  |
//! | n * h * w * d * 4 | images (`f32`)                     |

use std::io::Write;
use std::path::Path;

use super::{ColoredDataset, Split, NUM_CLASSES, NUM_COLORS};
use crate::error::{Error, Result};

pub const SPLIT_MAGIC: &[u8; 4] = b"CDSH";
pub const SPLIT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 16 + 1;

pub fn encode_split(ds: &ColoredDataset) -> Vec<u8> {
    let n = ds.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * n + 4 * ds.images.len());
    out.extend_from_slice(SPLIT_MAGIC);
    out.extend_from_slice(&SPLIT_VERSION.to_le_bytes());
    for v in [n, ds.height, ds.width, ds.d] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(ds.split.tag());
    out.extend_from_slice(&ds.labels);
    out.extend_from_slice(&ds.color_idx);
    for v in &ds.images {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_split(bytes: &[u8]) -> Result<ColoredDataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("split file: truncated header"));
    }
    if &bytes[..4] != SPLIT_MAGIC {
        return Err(Error::format(format!("split file: bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let version = word(0) as u32;
    if version != SPLIT_VERSION {
        return Err(Error::format(format!("split file: unsupported version {version}")));
    }
    let (n, height, width, d) = (word(1), word(2), word(3), word(4));
    let split = Split::from_tag(bytes[HEADER_LEN - 1])
        .ok_or_else(|| Error::format(format!("split file: bad split tag {}", bytes[HEADER_LEN - 1])))?;
    let image_values = n
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::format("split file: dimensions overflow"))?;
    let expected = HEADER_LEN + 2 * n + 4 * image_values;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "split file: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let labels = bytes[HEADER_LEN..HEADER_LEN + n].to_vec();
    let color_idx = bytes[HEADER_LEN + n..HEADER_LEN + 2 * n].to_vec();
    if labels.iter().any(|&y| usize::from(y) >= NUM_CLASSES) {
        return Err(Error::format("split file: label out of range"));
    }
    if color_idx.iter().any(|&c| usize::from(c) >= NUM_COLORS) {
        return Err(Error::format("split file: color index out of range"));
    }
    let images = bytes[HEADER_LEN + 2 * n..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(ColoredDataset {
        split,
        height,
        width,
        d,
        labels,
        color_idx,
        images,
    })
}

pub fn save_split(ds: &ColoredDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_split(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: impl AsRef<Path>) -> Result<ColoredDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_split(&bytes)
}
