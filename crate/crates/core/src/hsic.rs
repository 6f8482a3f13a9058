//! Differentiable biased HSIC penalty.
//!
//! The continuous argument (`z`, or `[z, onehot(y)]`) gets a Gaussian kernel
//! whose bandwidth defaults to the median pairwise distance of the batch;
//! the categorical nuisance variable `c` gets the delta kernel. The
//! estimator is `trace(K H L H) / (n - 1)^2` with `H = I - 11^T / n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the current batch, detached from the graph.
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: Bandwidth,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::gaussian(Bandwidth::MedianHeuristic)
    }
}

impl KernelSpec {
    pub fn gaussian(bandwidth: Bandwidth) -> Self {
        Self {
            kind: KernelKind::Gaussian,
            bandwidth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Bandwidth::Fixed(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::Config(format!("fixed bandwidth must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

/// Which dependence the penalty measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyVariant {
    /// `HSIC(c, [z, y])`: removes information about `c` not explained by `y`.
    Czy,
    /// `HSIC(c, z)`: removes all information about `c`.
    Cz,
}

pub fn gaussian_kernel_matrix(graph: &mut Graph, x: Var, sigma: f64) -> Result<Var> {
    graph.gaussian_kernel(x, sigma)
}

/// Median of the pairwise Euclidean distances between the rows of `x`.
///
/// When more than half the pairs coincide the median is zero, which is not a
/// usable bandwidth; the median of the strictly positive distances is used
/// instead.
pub fn median_bandwidth(x: &Tensor) -> Result<f64> {
    let &[n, p] = x.shape() else {
        return Err(Error::shape(format!("bandwidth input must be 2-D, got {:?}", x.shape())));
    };
    if n < 2 {
        return Err(Error::DegenerateInput("median bandwidth needs at least two rows".into()));
    }
    let d = x.data();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = d[i * p..][..p]
                .iter()
                .zip(&d[j * p..][..p])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(s.sqrt());
        }
    }
    dists.sort_unstable_by(f64::total_cmp);
    let median = median_sorted(&dists);
    if median > 0.0 {
        return Ok(median);
    }
    let first_positive = dists.partition_point(|&v| v <= 0.0);
    if first_positive == dists.len() {
        return Err(Error::DegenerateInput("all pairwise distances are zero".into()));
    }
    Ok(median_sorted(&dists[first_positive..]))
}

fn median_sorted(v: &[f64]) -> f64 {
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// `L_ij = [c_i == c_j]`.
pub fn delta_kernel_matrix(c: &[usize]) -> Tensor {
    let n = c.len();
    let data = (0..n * n)
        .map(|idx| if c[idx / n] == c[idx % n] { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![n, n], data).expect("n x n")
}

pub fn hsic_biased(graph: &mut Graph, k: Var, l: Var) -> Result<Var> {
    graph.hsic(k, l)
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = 1.0;
    }
    t
}

/// Number of label classes used for the one-hot `y` block.
pub const NUM_CLASSES: usize = 3;

/// HSIC between the nuisance variable `c` and the representation `z`
/// (optionally joined with the one-hot label). `z` may have any shape with
/// the batch on the leading axis; gradients flow into `z` only.
pub fn hsic_penalty(
    graph: &mut Graph,
    z: Var,
    y: &[usize],
    c: &[usize],
    variant: PenaltyVariant,
    spec: &KernelSpec,
) -> Result<Var> {
    spec.validate()?;
    if spec.kind != KernelKind::Gaussian {
        return Err(Error::Config(
            "the continuous side of the penalty needs a gaussian kernel".into(),
        ));
    }
    let n = graph.shape(z).first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::shape("hsic penalty needs at least two samples"));
    }
    if y.len() != n || c.len() != n {
        return Err(Error::shape(format!(
            "batch of {n} with {} labels and {} colors",
            y.len(),
            c.len()
        )));
    }
    let flat = graph.flatten(z)?;
    let features = match variant {
        PenaltyVariant::Cz => flat,
        PenaltyVariant::Czy => {
            if let Some(&label) = y.iter().find(|&&l| l >= NUM_CLASSES) {
                return Err(Error::Label {
                    label,
                    classes: NUM_CLASSES,
                });
            }
            let onehot = graph.constant(one_hot(y, NUM_CLASSES));
            graph.concat(&[flat, onehot])?
        }
    };
    let sigma = match spec.bandwidth {
        Bandwidth::MedianHeuristic => median_bandwidth(graph.value(features))?,
        Bandwidth::Fixed(s) => s,
    };
    let k = graph.gaussian_kernel(features, sigma)?;
    let l = graph.constant(delta_kernel_matrix(c));
    graph.hsic(k, l)
}
