use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag, SplitMix64};

use super::{Split, NUM_CLASSES};

pub const NUM_COLORS: usize = 12;

/// Color indices assigned to each class (indexed by class, not digit).
pub type Assignment = [[usize; 2]; NUM_CLASSES];

/// Twelve fixed colors in `[0, 1]^d` and the per-split class-to-color maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub seed: u64,
    pub d: usize,
    pub colors: Vec<Vec<f64>>,
    pub train_assign: Assignment,
    pub dev_assign: Assignment,
    pub adv_assign: Assignment,
}

/// Sample 12 uniform colors and split them into train and dev assignments.
///
/// A seeded shuffle of the 12 indices gives class `k` the train colors at
/// positions `2k, 2k + 1` and the dev colors at `6 + 2k, 7 + 2k`. The
/// adversarial map hands class `k` the train colors of class `(k + 1) % 3`.
pub fn sample_palette(seed: u64, d: usize) -> Result<Palette> {
    if d == 0 {
        return Err(Error::Config("color dimension must be at least 1".into()));
    }
    let mut rng = SplitMix64::new(derive_seed(seed, tag("palette")));
    let colors: Vec<Vec<f64>> = (0..NUM_COLORS)
        .map(|_| (0..d).map(|_| rng.next_f64()).collect())
        .collect();
    let mut order: Vec<usize> = (0..NUM_COLORS).collect();
    rng.shuffle(&mut order);
    let pair = |offset: usize, k: usize| [order[offset + 2 * k], order[offset + 2 * k + 1]];
    let train_assign: Assignment = std::array::from_fn(|k| pair(0, k));
    let dev_assign: Assignment = std::array::from_fn(|k| pair(2 * NUM_CLASSES, k));
    let adv_assign: Assignment = std::array::from_fn(|k| train_assign[(k + 1) % NUM_CLASSES]);
    let palette = Palette {
        seed,
        d,
        colors,
        train_assign,
        dev_assign,
        adv_assign,
    };
    palette.validate()?;
    Ok(palette)
}

impl Palette {
    pub fn color(&self, index: usize) -> &[f64] {
        &self.colors[index]
    }

    pub fn assignment(&self, split: Split) -> &Assignment {
        match split {
            Split::Train | Split::QuasiDev => &self.train_assign,
            Split::Dev => &self.dev_assign,
            Split::AdvDev => &self.adv_assign,
        }
    }

    /// The six distinct train color indices.
    pub fn train_colors(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train_assign.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }

    /// Class that owns `color` under the training assignment.
    pub fn train_class_of(&self, color: usize) -> Option<usize> {
        self.train_assign.iter().position(|pair| pair.contains(&color))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::format(format!("palette: {msg}")));
        if self.colors.len() != NUM_COLORS {
            return bad(format!("{} colors, expected {NUM_COLORS}", self.colors.len()));
        }
        if self.colors.iter().any(|c| c.len() != self.d) {
            return bad(format!("every color must have {} components", self.d));
        }
        if self.colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("color components must lie in [0, 1]".into());
        }
        let mut seen = [false; NUM_COLORS];
        for &c in self.train_assign.iter().chain(&self.dev_assign).flatten() {
            if c >= NUM_COLORS || std::mem::replace(&mut seen[c], true) {
                return bad("train and dev colors must partition the 12 indices".into());
            }
        }
        let train = self.train_colors();
        for (k, pair) in self.adv_assign.iter().enumerate() {
            if pair.iter().any(|c| !train.contains(c)) {
                return bad(format!("adversarial colors of class {k} are not train colors"));
            }
            if pair.iter().any(|c| self.train_assign[k].contains(c)) {
                return bad(format!("adversarial colors of class {k} overlap its train colors"));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("palette serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let palette: Palette = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        palette.validate()?;
        Ok(palette)
    }
}
