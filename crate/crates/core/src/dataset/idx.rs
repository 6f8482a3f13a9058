//! Reader for the big-endian IDX containers MNIST ships in.

use std::path::Path;

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale images with their raw digit labels. Pixels are kept as the
/// original bytes; [`MnistSet::scaled_image`] maps them onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistSet {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl MnistSet {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * rows * cols {
            return Err(Error::format(format!(
                "{} pixels for {} images of {rows}x{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.image_len()..][..self.image_len()]
    }

    /// Image `i` with every byte divided by 255.
    pub fn scaled_image(&self, i: usize) -> Vec<f64> {
        self.raw_image(i).iter().map(|&b| f64::from(b) / 255.0).collect()
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(format!("{what}: truncated header")))
}

pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(format!(
            "images: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    let expected = n * rows * cols;
    if body.len() != expected {
        return Err(Error::format(format!(
            "images: header promises {expected} pixel bytes, file has {}",
            body.len()
        )));
    }
    Ok((rows, cols, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(format!(
            "labels: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(format!(
            "labels: header promises {n} labels, file has {}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<MnistSet> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let label_bytes = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let (rows, cols, pixels) = parse_images(&image_bytes)?;
    let labels = parse_labels(&label_bytes)?;
    if pixels.len() != labels.len() * rows * cols {
        return Err(Error::format(format!(
            "{} images but {} labels",
            pixels.len() / (rows * cols).max(1),
            labels.len()
        )));
    }
    MnistSet::new(rows, cols, pixels, labels)
}

/// Standard MNIST file names inside `dir`: returns `(train, test)`.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(MnistSet, MnistSet)> {
    let dir = dir.as_ref();
    let train = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Keep only the listed digits, in their original order, relabelled to
/// their position in `keep` (so `[5, 6, 9]` maps 5 -> 0, 6 -> 1, 9 -> 2).
pub fn filter_digits(set: &MnistSet, keep: &[u8]) -> MnistSet {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (i, &label) in set.labels.iter().enumerate() {
        if let Some(pos) = keep.iter().position(|&k| k == label) {
            pixels.extend_from_slice(set.raw_image(i));
            labels.push(pos as u8);
        }
    }
    MnistSet {
        rows: set.rows,
        cols: set.cols,
        pixels,
        labels,
    }
}
