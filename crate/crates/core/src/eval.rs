//! Accuracy, confusion matrices, checkpoint selection and a color-reliance
//! diagnostic.

use serde::{Deserialize, Serialize};

use crate::dataset::{colorize, ColoredDataset, Palette, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::hsic::{hsic_penalty, KernelSpec, PenaltyVariant};
use crate::model::{classify, encode, ModelParams};
use crate::tensor::{Graph, Tensor};
use crate::train::MetricsRecord;

pub type Confusion = [[usize; NUM_CLASSES]; NUM_CLASSES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<String>,
    pub split: Split,
    pub n: usize,
    pub accuracy: f64,
    pub ce_loss: f64,
    pub hsic_value: f64,
    /// `confusion[true_class][predicted_class]`.
    pub confusion: Confusion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub variant: Option<PenaltyVariant>,
    pub kernel: KernelSpec,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            variant: Some(PenaltyVariant::Czy),
            kernel: KernelSpec::default(),
            batch_size: 150,
        }
    }
}

/// Anything that maps an `n x h x w x d` batch to `n x 3` logits.
pub trait Predictor {
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;

    fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }
}

impl Predictor for ModelParams {
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register_frozen(&mut g);
        let x = g.constant(batch.clone());
        let z = encode(&mut g, &vars, x)?;
        let logits = classify(&mut g, &vars, z)?;
        Ok(g.value(logits).clone())
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().expect("2-D logits");
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy_from_confusion(confusion: &Confusion) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    let hits: usize = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
    hits as f64 / total as f64
}

/// Evaluate `params` on `ds` in fixed-size batches. The HSIC value is the
/// mean over batches holding at least two samples (zero if no variant).
pub fn evaluate(params: &ModelParams, ds: &ColoredDataset, opts: &EvalOptions) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Data(format!("cannot evaluate on empty split {}", ds.split)));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut confusion = [[0; NUM_CLASSES]; NUM_CLASSES];
    let mut ce_sum = 0.0;
    let mut hsic_sum = 0.0;
    let mut hsic_batches = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(opts.batch_size) {
        let y = ds.labels_usize(chunk);
        let mut g = Graph::new();
        let vars = params.register_frozen(&mut g);
        let x = g.constant(ds.batch(chunk));
        let z = encode(&mut g, &vars, x)?;
        let logits = classify(&mut g, &vars, z)?;
        let ce = g.softmax_cross_entropy(logits, &y)?;
        ce_sum += g.value(ce).item() * chunk.len() as f64;
        for (&truth, pred) in y.iter().zip(argmax_rows(g.value(logits))) {
            confusion[truth][pred] += 1;
        }
        if let (Some(variant), true) = (opts.variant, chunk.len() >= 2) {
            let c = ds.colors_usize(chunk);
            let h = match hsic_penalty(&mut g, z, &y, &c, variant, &opts.kernel) {
                Ok(h) => g.value(h).item(),
                // A batch with identical representations is independent of c.
                Err(Error::DegenerateInput(_)) => 0.0,
                Err(e) => return Err(e),
            };
            hsic_sum += h;
            hsic_batches += 1;
        }
    }
    Ok(EvalReport {
        checkpoint: None,
        split: ds.split,
        n: ds.len(),
        accuracy: accuracy_from_confusion(&confusion),
        ce_loss: ce_sum / ds.len() as f64,
        hsic_value: if hsic_batches > 0 { hsic_sum / hsic_batches as f64 } else { 0.0 },
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    QuasiDevBest,
    DevBest,
}

impl SelectionPolicy {
    pub fn split(self) -> Split {
        match self {
            SelectionPolicy::QuasiDevBest => Split::QuasiDev,
            SelectionPolicy::DevBest => Split::Dev,
        }
    }
}

/// Metrics of one training run, keyed by a run identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub run: String,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub run: String,
    pub epoch: usize,
    pub beta: f64,
    pub lr: f64,
    pub policy_accuracy: f64,
    /// Accuracy on quasi_dev, dev and adv_dev at the chosen checkpoint.
    pub quasi_dev: Option<f64>,
    pub dev: Option<f64>,
    pub adv_dev: Option<f64>,
}

/// Checkpoint with the best accuracy on the policy's split across all runs
/// and epochs. Ties prefer the earlier epoch, then lower beta, then lower
/// learning rate, then the lexicographically smaller run id.
pub fn select_model(history: &[RunHistory], policy: SelectionPolicy) -> Option<Selection> {
    let target = policy.split();
    let candidate = history
        .iter()
        .flat_map(|h| h.records.iter().filter(|r| r.split == target).map(move |r| (h, r)))
        .min_by(|(ha, a), (hb, b)| {
            b.accuracy
                .total_cmp(&a.accuracy)
                .then(a.epoch.cmp(&b.epoch))
                .then(a.beta.total_cmp(&b.beta))
                .then(a.lr.total_cmp(&b.lr))
                .then_with(|| ha.run.cmp(&hb.run))
        })?;
    let (h, best) = candidate;
    let at = |split: Split| {
        h.records
            .iter()
            .find(|r| r.epoch == best.epoch && r.split == split)
            .map(|r| r.accuracy)
    };
    Some(Selection {
        run: h.run.clone(),
        epoch: best.epoch,
        beta: best.beta,
        lr: best.lr,
        policy_accuracy: best.accuracy,
        quasi_dev: at(Split::QuasiDev),
        dev: at(Split::Dev),
        adv_dev: at(Split::AdvDev),
    })
}

/// Fraction of probe images whose predicted class changes when the image is
/// recolored with the different training colors (shape held fixed).
/// 0 means predictions never depend on color alone.
///
/// `base_images` are grayscale images with pixels in `[0, 1]`.
pub fn color_reliance_probe(
    predictor: &impl Predictor,
    palette: &Palette,
    base_images: &[Vec<f64>],
    height: usize,
    width: usize,
) -> Result<f64> {
    if base_images.is_empty() {
        return Err(Error::Data("probe needs at least one image".into()));
    }
    let colors = palette.train_colors();
    let mut changed = 0usize;
    for gray in base_images {
        if gray.len() != height * width {
            return Err(Error::shape(format!(
                "probe image has {} pixels, expected {}",
                gray.len(),
                height * width
            )));
        }
        let mut data = Vec::with_capacity(colors.len() * gray.len() * palette.d);
        for &c in &colors {
            data.extend(colorize(gray, palette.color(c)).into_iter().map(f64::from));
        }
        let batch = Tensor::new(vec![colors.len(), height, width, palette.d], data)?;
        let preds = predictor.predict(&batch)?;
        if preds.iter().any(|&p| p != preds[0]) {
            changed += 1;
        }
    }
    Ok(changed as f64 / base_images.len() as f64)
}
