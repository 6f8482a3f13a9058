//! Minimization of `ce + beta * HSIC` over the colored training split.

mod metrics;
mod optim;
mod sweep;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{ColoredDataset, Split, Splits};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::hsic::{hsic_penalty, Bandwidth, KernelSpec, PenaltyVariant};
use crate::model::{classify, encode, init_params, save_checkpoint, ModelParams};
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::{Graph, Tensor};

pub use metrics::{read_metrics, MetricsRecord, MetricsWriter, METRICS_HEADER};
pub use optim::{adam_update, sgd_update, AdamState, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use sweep::{
    cell_name, config_hash, load_manifest, run_sweep, run_sweep_on, sweep_threads, GridSpec, RunDescriptor, RunStatus,
    THREADS_ENV,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HsicVariant {
    Czy,
    Cz,
    None,
}

impl HsicVariant {
    pub fn penalty(self) -> Option<PenaltyVariant> {
        match self {
            HsicVariant::Czy => Some(PenaltyVariant::Czy),
            HsicVariant::Cz => Some(PenaltyVariant::Cz),
            HsicVariant::None => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HsicVariant::Czy => "czy",
            HsicVariant::Cz => "cz",
            HsicVariant::None => "none",
        }
    }
}

impl fmt::Display for HsicVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HsicVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "czy" => Ok(HsicVariant::Czy),
            "cz" => Ok(HsicVariant::Cz),
            "none" => Ok(HsicVariant::None),
            _ => Err(Error::Config(format!("unknown hsic variant {s:?}"))),
        }
    }
}

fn default_epochs() -> usize {
    100
}

fn default_batch_size() -> usize {
    150
}

fn default_eval_every() -> usize {
    1
}

fn default_bandwidth() -> Bandwidth {
    Bandwidth::MedianHeuristic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub hsic_variant: HsicVariant,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Directory holding the four `<split>.cdsh` files.
    pub data_dir: PathBuf,
    /// Receives `metrics.csv` and `checkpoints/`.
    pub out_dir: PathBuf,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: Bandwidth,
}

impl TrainConfig {
    pub fn new(data_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            beta: 0.0,
            lr: 1e-3,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            hsic_variant: HsicVariant::Czy,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            data_dir: data_dir.into(),
            out_dir: out_dir.into(),
            eval_every: default_eval_every(),
            bandwidth: default_bandwidth(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Whether the penalty takes part in the gradient.
    pub fn penalty_active(&self) -> bool {
        self.beta != 0.0 && self.hsic_variant != HsicVariant::None
    }

    pub fn kernel(&self) -> KernelSpec {
        KernelSpec::gaussian(self.bandwidth)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            variant: self.hsic_variant.penalty(),
            kernel: self.kernel(),
            batch_size: self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be a finite non-negative number, got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.hsic_variant != HsicVariant::None && self.batch_size < 2 {
            return fail("batch_size must be at least 2 when an HSIC variant is set".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        self.kernel().validate()
    }
}

/// One minibatch: images plus labels and color indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub c: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(ds: &ColoredDataset, indices: &[usize]) -> Self {
        Self {
            x: ds.batch(indices),
            y: ds.labels_usize(indices),
            c: ds.colors_usize(indices),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub ce: f64,
    /// Penalty on this batch; zero when no variant is configured.
    pub hsic: f64,
    pub total: f64,
}

/// Forward pass of the training objective. Returns the graph, the parameter
/// handles and the loss components; the total is `ce + beta * hsic` when
/// the penalty is active and exactly `ce` otherwise.
pub fn build_objective(
    params: &ModelParams,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(Graph, crate::model::ParamVars, crate::tensor::Var, StepLoss)> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.constant(batch.x.clone());
    let z = encode(&mut g, &vars, x)?;
    let logits = classify(&mut g, &vars, z)?;
    let ce = g.softmax_cross_entropy(logits, &batch.y)?;
    let penalty = match config.hsic_variant.penalty() {
        Some(variant) => match hsic_penalty(&mut g, z, &batch.y, &batch.c, variant, &config.kernel()) {
            Ok(h) => Some(h),
            // Identical representations carry no information about c.
            Err(Error::DegenerateInput(_)) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let total = match penalty {
        Some(h) if config.penalty_active() => {
            let weighted = g.scale(h, config.beta);
            g.add(ce, weighted)?
        }
        _ => ce,
    };
    let loss = StepLoss {
        ce: g.value(ce).item(),
        hsic: penalty.map_or(0.0, |h| g.value(h).item()),
        total: g.value(total).item(),
    };
    Ok((g, vars, total, loss))
}

/// Owns the parameters and optimizer state of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub epoch: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, d: usize) -> Result<Self> {
        config.validate()?;
        let params = init_params(config.seed, d)?;
        Ok(Self::with_params(config, params))
    }

    pub fn with_params(config: TrainConfig, params: ModelParams) -> Self {
        let optimizer = Optimizer::new(config.optimizer);
        Self {
            config,
            params,
            optimizer,
            epoch: 0,
            step: 0,
        }
    }

    /// Apply one optimizer update on `batch`; the returned components are
    /// those of the loss before the update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLoss> {
        if self.config.hsic_variant != HsicVariant::None && batch.len() < 2 {
            return Err(Error::Config("HSIC needs batches of at least two samples".into()));
        }
        let (mut g, vars, total, loss) = build_objective(&self.params, batch, &self.config)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                step: self.step,
            });
        }
        g.backward(total)?;
        let grads: Vec<Vec<f64>> = vars
            .all()
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        self.optimizer
            .update(self.params.tensors_mut(), &grads, self.config.lr);
        if !self.params.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                step: self.step,
            });
        }
        self.step += 1;
        Ok(loss)
    }

    /// Seeded permutation of the training indices for `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let seed = derive_seed(derive_seed(self.config.seed, tag("shuffle")), epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::new(seed).shuffle(&mut order);
        order
    }

    /// One pass over `train` in shuffled minibatches. A trailing batch too
    /// small for HSIC is dropped.
    pub fn train_epoch(&mut self, train: &ColoredDataset) -> Result<Vec<StepLoss>> {
        self.epoch += 1;
        let order = self.epoch_order(train.len(), self.epoch);
        let min_batch = if self.config.hsic_variant == HsicVariant::None { 1 } else { 2 };
        let mut losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            losses.push(self.train_step(&Batch::from_dataset(train, chunk))?);
        }
        Ok(losses)
    }

    pub fn evaluate_all(&self, splits: &Splits) -> Result<Vec<MetricsRecord>> {
        let opts = self.config.eval_options();
        Split::ALL
            .into_iter()
            .map(|split| {
                let report = evaluate(&self.params, splits.get(split), &opts)?;
                Ok(MetricsRecord {
                    epoch: self.epoch,
                    split,
                    accuracy: report.accuracy,
                    ce_loss: report.ce_loss,
                    hsic_value: report.hsic_value,
                    beta: self.config.beta,
                    lr: self.config.lr,
                    variant: self.config.hsic_variant,
                    seed: self.config.seed,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub records: Vec<MetricsRecord>,
    pub params: ModelParams,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:03}.rckp"))
}

/// Train from scratch as configured, evaluating every `eval_every` epochs
/// (and at epoch 0 and the final epoch) on all four splits.
pub fn train_loop(config: &TrainConfig) -> Result<RunOutcome> {
    config.validate()?;
    let splits = Splits::load_dir(&config.data_dir)?;
    train_on(config, &splits)
}

/// [`train_loop`] with the splits already in memory.
pub fn train_on(config: &TrainConfig, splits: &Splits) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(config.clone(), splits.train.d)?;
    let ckpt_dir = config.out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics_path = config.out_dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();

    let mut record_point = |trainer: &Trainer| -> Result<()> {
        let rows = trainer.evaluate_all(splits)?;
        writer.append(&rows)?;
        records.extend(rows);
        let path = checkpoint_path(&config.out_dir, trainer.epoch);
        save_checkpoint(&trainer.params, &path)?;
        checkpoints.push(path);
        Ok(())
    };

    record_point(&trainer)?;
    for epoch in 1..=config.epochs {
        trainer.train_epoch(&splits.train)?;
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            record_point(&trainer)?;
        }
    }
    Ok(RunOutcome {
        metrics_path,
        checkpoints,
        records,
        params: trainer.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_batch(d: usize, seed: u64) -> Batch {
        let mut rng = SplitMix64::new(seed);
        let n = 4;
        let data = (0..n * 28 * 28 * d).map(|_| rng.uniform(-0.5, 0.5)).collect();
        Batch {
            x: Tensor::new(vec![n, 28, 28, d], data).unwrap(),
            y: vec![0, 1, 2, 0],
            c: vec![0, 3, 5, 1],
        }
    }

    fn config(beta: f64, variant: HsicVariant) -> TrainConfig {
        TrainConfig {
            beta,
            hsic_variant: variant,
            ..TrainConfig::new("unused", "unused")
        }
    }

    #[test]
    fn zero_beta_total_is_ce() {
        let params = init_params(1, 2).unwrap();
        let (_, _, _, loss) = build_objective(&params, &tiny_batch(2, 3), &config(0.0, HsicVariant::Czy)).unwrap();
        assert_eq!(loss.total, loss.ce);
        assert!(loss.hsic > 0.0);
    }

    #[test]
    fn decomposition_holds() {
        let params = init_params(1, 2).unwrap();
        let cfg = config(2.0, HsicVariant::Cz);
        let (_, _, _, l) = build_objective(&params, &tiny_batch(2, 3), &cfg).unwrap();
        assert!((l.total - (l.ce + 2.0 * l.hsic)).abs() < 1e-12);
    }

    #[test]
    fn none_variant_matches_zero_beta() {
        let batch = tiny_batch(2, 5);
        let mut a = Trainer::new(config(0.0, HsicVariant::Czy), 2).unwrap();
        let mut b = Trainer::new(config(5.0, HsicVariant::None), 2).unwrap();
        for _ in 0..3 {
            let la = a.train_step(&batch).unwrap();
            let lb = b.train_step(&batch).unwrap();
            assert_eq!(la.total, lb.total);
        }
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn single_step_reduces_loss() {
        let batch = tiny_batch(2, 9);
        for variant in [HsicVariant::Czy, HsicVariant::Cz, HsicVariant::None] {
            let mut t = Trainer::new(config(1.0, variant), 2).unwrap();
            let before = t.train_step(&batch).unwrap().total;
            let (_, _, _, after) = build_objective(&t.params, &batch, &t.config).unwrap();
            assert!(after.total < before, "{variant}: {before} -> {}", after.total);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut t = Trainer::new(config(0.0, HsicVariant::None), 2).unwrap();
        t.params.get_mut("fc.bias").unwrap().data_mut()[0] = f64::NAN;
        t.epoch = 4;
        t.step = 17;
        match t.train_step(&tiny_batch(2, 1)) {
            Err(Error::Divergence { epoch: 4, step: 17 }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_json_contract() {
        let json = r#"{"beta": 2.0, "lr": 0.001, "hsic_variant": "czy", "seed": 3,
                       "data_dir": "d", "out_dir": "o"}"#;
        let c = TrainConfig::from_json(json).unwrap();
        assert_eq!((c.epochs, c.batch_size, c.eval_every), (100, 150, 1));
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);

        let unknown = json.replace("\"seed\": 3", "\"seed\": 3, \"momentum\": 0.9");
        assert!(matches!(TrainConfig::from_json(&unknown), Err(Error::Config(_))));
        let bad = json.replace("\"hsic_variant\": \"czy\"", "\"hsic_variant\": \"czy\", \"batch_size\": 1");
        assert!(TrainConfig::from_json(&bad).is_err());
        let bad = json.replace("\"lr\": 0.001", "\"lr\": 0");
        assert!(TrainConfig::from_json(&bad).is_err());
        let fixed = json.replace("\"seed\": 3", "\"seed\": 3, \"bandwidth\": {\"fixed\": 1.5}");
        assert_eq!(TrainConfig::from_json(&fixed).unwrap().bandwidth, Bandwidth::Fixed(1.5));
    }

    #[test]
    fn epoch_order_is_seeded() {
        let t = Trainer::new(config(0.0, HsicVariant::None), 1).unwrap();
        assert_eq!(t.epoch_order(50, 3), t.epoch_order(50, 3));
        assert_ne!(t.epoch_order(50, 3), t.epoch_order(50, 4));
    }
}
