//! Colored-MNIST benchmark construction.
//!
//! Digits 5, 6 and 9 are kept and relabelled to classes 0, 1, 2. Each class
//! owns two of twelve fixed colors for training and two others for the
//! development set; every image is multiplied by one of its class's colors
//! as `x[i, j, k] = color[k] * (pixel[i, j] - 0.5)`.
//!
//! Four splits are produced: `train`, `quasi_dev` (train colors), `dev`
//! (unseen colors) and `adv_dev` (train colors handed to the wrong digits).
//! All splits are exactly class-balanced and the three evaluation splits
//! use disjoint source images.

mod idx;
mod io;
mod palette;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::Tensor;

pub use idx::{filter_digits, load_idx, load_mnist_dir, parse_images, parse_labels, MnistSet};
pub use io::{load_split, save_split, SPLIT_MAGIC, SPLIT_VERSION};
pub use palette::{sample_palette, Assignment, Palette, NUM_COLORS};

pub const NUM_CLASSES: usize = 3;
/// Source digits for classes 0, 1, 2.
pub const DIGITS: [u8; NUM_CLASSES] = [5, 6, 9];
pub const DEFAULT_COLOR_DIM: usize = 50;
pub const DEFAULT_PER_CLASS_TRAIN: usize = 1000;
pub const DEFAULT_PER_CLASS_EVAL: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    QuasiDev,
    Dev,
    AdvDev,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::QuasiDev, Split::Dev, Split::AdvDev];
    pub const EVAL: [Split; 3] = [Split::QuasiDev, Split::Dev, Split::AdvDev];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::QuasiDev => "quasi_dev",
            Split::Dev => "dev",
            Split::AdvDev => "adv_dev",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Split> {
        Split::ALL.get(usize::from(tag)).copied()
    }

    pub fn file_name(self) -> String {
        format!("{}.cdsh", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// Colorize one grayscale image (`[0, 1]` pixels) with a color vector,
/// producing a channels-last `h x w x d` image. This is the only code path
/// that turns grayscale into colored images, for every split.
pub fn colorize(image: &[f64], color: &[f64]) -> Vec<f32> {
    let mut out = vec![0.0; image.len() * color.len()];
    colorize_into(image, color, &mut out);
    out
}

pub fn colorize_into(image: &[f64], color: &[f64], out: &mut [f32]) {
    assert_eq!(out.len(), image.len() * color.len());
    for (px, dst) in image.iter().zip(out.chunks_exact_mut(color.len())) {
        let centered = px - 0.5;
        for (o, c) in dst.iter_mut().zip(color) {
            *o = (c * centered) as f32;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColoredDataset {
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub d: usize,
    pub labels: Vec<u8>,
    pub color_idx: Vec<u8>,
    /// `n x height x width x d`, row-major.
    pub images: Vec<f32>,
}

impl ColoredDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.d
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_len()..][..self.image_len()]
    }

    pub fn labels_usize(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| usize::from(self.labels[i])).collect()
    }

    pub fn colors_usize(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| usize::from(self.color_idx[i])).collect()
    }

    /// Stack the selected images into an `n x h x w x d` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| f64::from(v)));
        }
        Tensor::new(vec![indices.len(), self.height, self.width, self.d], data)
            .expect("batch shape matches data")
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &y in &self.labels {
            counts[usize::from(y)] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: ColoredDataset,
    pub quasi_dev: ColoredDataset,
    pub dev: ColoredDataset,
    pub adv_dev: ColoredDataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &ColoredDataset {
        match split {
            Split::Train => &self.train,
            Split::QuasiDev => &self.quasi_dev,
            Split::Dev => &self.dev,
            Split::AdvDev => &self.adv_dev,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ColoredDataset> {
        Split::ALL.into_iter().map(|s| self.get(s))
    }

    /// Write `<split>.cdsh` for all four splits into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for ds in self.iter() {
            save_split(ds, dir.join(ds.split.file_name()))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |split: Split| -> Result<ColoredDataset> {
            let ds = load_split(dir.join(split.file_name()))?;
            if ds.split != split {
                return Err(Error::format(format!(
                    "{} holds split {}",
                    split.file_name(),
                    ds.split
                )));
            }
            Ok(ds)
        };
        Ok(Self {
            train: load(Split::Train)?,
            quasi_dev: load(Split::QuasiDev)?,
            dev: load(Split::Dev)?,
            adv_dev: load(Split::AdvDev)?,
        })
    }
}

#[derive(Clone, Copy)]
enum Source {
    Train(usize),
    Test(usize),
}

fn class_indices(set: &MnistSet, class: usize) -> Vec<usize> {
    (0..set.len())
        .filter(|&i| usize::from(set.labels[i]) == class)
        .collect()
}

/// Build the four splits from MNIST sets already passed through
/// [`filter_digits`] with [`DIGITS`].
///
/// Per class, the train images are shuffled and the first
/// `per_class_train` form the training split. The evaluation pool is the
/// shuffled test images of that class followed by the unused train images;
/// its first `3 * per_class_eval` entries are dealt round-robin to
/// quasi_dev, dev and adv_dev. Within each split the order is shuffled and
/// each image gets one of its class's two colors uniformly at random.
pub fn build_splits(
    mnist_train: &MnistSet,
    mnist_test: &MnistSet,
    palette: &Palette,
    per_class_train: usize,
    per_class_eval: usize,
    seed: u64,
) -> Result<Splits> {
    if mnist_train.image_len() != mnist_test.image_len() || mnist_train.rows != mnist_test.rows {
        return Err(Error::Data("train and test images differ in size".into()));
    }
    if let Some(&y) = mnist_train.labels.iter().chain(&mnist_test.labels).find(|&&y| usize::from(y) >= NUM_CLASSES) {
        return Err(Error::Data(format!(
            "label {y} is not a class index; filter the digits first"
        )));
    }
    palette.validate()?;
    let mut rng = SplitMix64::new(derive_seed(seed, tag("splits")));
    let mut members: [Vec<(Source, usize)>; 4] = Default::default();
    for class in 0..NUM_CLASSES {
        let mut train_idx = class_indices(mnist_train, class);
        rng.shuffle(&mut train_idx);
        if train_idx.len() < per_class_train {
            return Err(Error::Data(format!(
                "class {class} (digit {}) has {} training images, {per_class_train} requested",
                DIGITS[class],
                train_idx.len()
            )));
        }
        let (chosen, spare) = train_idx.split_at(per_class_train);
        members[0].extend(chosen.iter().map(|&i| (Source::Train(i), class)));

        let mut test_idx = class_indices(mnist_test, class);
        rng.shuffle(&mut test_idx);
        let pool: Vec<Source> = test_idx
            .into_iter()
            .map(Source::Test)
            .chain(spare.iter().map(|&i| Source::Train(i)))
            .collect();
        let need = 3 * per_class_eval;
        if pool.len() < need {
            return Err(Error::Data(format!(
                "class {class} (digit {}) has {} held-out images, {need} requested",
                DIGITS[class],
                pool.len()
            )));
        }
        for (j, &src) in pool[..need].iter().enumerate() {
            members[1 + j % 3].push((src, class));
        }
    }

    let mut out = Vec::with_capacity(4);
    for (split, mut entries) in Split::ALL.into_iter().zip(members) {
        rng.shuffle(&mut entries);
        let assign = palette.assignment(split);
        let (rows, cols, d) = (mnist_train.rows, mnist_train.cols, palette.d);
        let mut ds = ColoredDataset {
            split,
            height: rows,
            width: cols,
            d,
            labels: Vec::with_capacity(entries.len()),
            color_idx: Vec::with_capacity(entries.len()),
            images: vec![0.0; entries.len() * rows * cols * d],
        };
        let image_len = rows * cols * d;
        for (i, &(src, class)) in entries.iter().enumerate() {
            let color = assign[class][rng.below(2)];
            let gray = match src {
                Source::Train(k) => mnist_train.scaled_image(k),
                Source::Test(k) => mnist_test.scaled_image(k),
            };
            colorize_into(&gray, palette.color(color), &mut ds.images[i * image_len..][..image_len]);
            ds.labels.push(class as u8);
            ds.color_idx.push(color as u8);
        }
        out.push(ds);
    }
    let mut it = out.into_iter();
    Ok(Splits {
        train: it.next().expect("train"),
        quasi_dev: it.next().expect("quasi_dev"),
        dev: it.next().expect("dev"),
        adv_dev: it.next().expect("adv_dev"),
    })
}

/// Load MNIST from `mnist_dir`, filter to [`DIGITS`], sample the palette
/// and build all splits.
pub fn generate(
    mnist_dir: impl AsRef<Path>,
    seed: u64,
    d: usize,
    per_class_train: usize,
    per_class_eval: usize,
) -> Result<(Palette, Splits)> {
    let (train, test) = load_mnist_dir(mnist_dir)?;
    let train = filter_digits(&train, &DIGITS);
    let test = filter_digits(&test, &DIGITS);
    let palette = sample_palette(seed, d)?;
    let splits = build_splits(&train, &test, &palette, per_class_train, per_class_eval, seed)?;
    Ok((palette, splits))
}
