//! Property suites shared by the topic tests and the acceptance target.
#![allow(dead_code)]

use shiftlab_core::dataset::{
    build_splits, colorize, sample_palette, ColoredDataset, MnistSet, Palette, Split, Splits, NUM_CLASSES,
};
use shiftlab_core::hsic::{hsic_penalty, median_bandwidth, Bandwidth, KernelSpec, PenaltyVariant};
use shiftlab_core::model::{classify, encode, init_params, ParamVars};
use shiftlab_core::rng::SplitMix64;
use shiftlab_core::{Graph, Result, Tensor, Var};

use super::{check_gradients, hsic_quadruple_loop, naive_conv, random_psd, random_tensor, square};

pub struct Case {
    pub name: String,
    pub error: f64,
    pub tol: f64,
}

impl Case {
    fn new(name: impl Into<String>, error: f64, tol: f64) -> Self {
        Self { name: name.into(), error, tol }
    }

    pub fn ok(&self) -> bool {
        self.error < self.tol
    }
}

/// Contract `out` to a scalar with fixed pseudo-random weights so every
/// output entry contributes a distinct amount.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = random_tensor(&mut SplitMix64::new(seed), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Gradient check for every differentiable op plus composed graphs.
pub fn gradient_cases() -> Vec<Case> {
    let mut rng = SplitMix64::new(2024);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, -1.0, 1.0);
    let mut cases = Vec::new();
    let mut push = |name: &str, inputs: Vec<Tensor>, tol: f64, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| {
        cases.push(Case::new(name, check_gradients(&inputs, f), tol));
    };

    push("add", vec![r(&[3, 4]), r(&[3, 4])], 1e-6, &|g, v| {
        let o = g.add(v[0], v[1])?;
        weighted_sum(g, o, 1)
    });
    push("add broadcast", vec![r(&[3, 4]), r(&[4])], 1e-6, &|g, v| {
        let o = g.add(v[0], v[1])?;
        weighted_sum(g, o, 2)
    });
    push("sub", vec![r(&[2, 3]), r(&[2, 3])], 1e-6, &|g, v| {
        let o = g.sub(v[0], v[1])?;
        weighted_sum(g, o, 3)
    });
    push("sum(mul(a, b))", vec![r(&[5]), r(&[5])], 1e-6, &|g, v| {
        let o = g.mul(v[0], v[1])?;
        Ok(g.sum(o))
    });
    push("mul broadcast", vec![r(&[2, 3, 4]), r(&[3, 4])], 1e-6, &|g, v| {
        let o = g.mul(v[0], v[1])?;
        weighted_sum(g, o, 4)
    });
    push("scale", vec![r(&[6])], 1e-6, &|g, v| {
        let o = g.scale(v[0], -2.5);
        weighted_sum(g, o, 5)
    });
    push("matmul 4x5.5x3", vec![r(&[4, 5]), r(&[5, 3])], 1e-6, &|g, v| {
        let o = g.matmul(v[0], v[1])?;
        weighted_sum(g, o, 6)
    });
    for (stride, padding) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
        push(
            &format!("conv2d 1x5x5x2 k3 s{stride} p{padding}"),
            vec![r(&[1, 5, 5, 2]), r(&[3, 3, 2, 2]), r(&[2])],
            1e-5,
            &move |g, v| {
                let o = g.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
                weighted_sum(g, o, 7)
            },
        );
    }
    push("conv2d batch 2 no bias", vec![r(&[2, 6, 4, 3]), r(&[2, 3, 3, 2])], 1e-5, &|g, v| {
        let o = g.conv2d(v[0], v[1], None, 2, 1)?;
        weighted_sum(g, o, 8)
    });
    push("relu", vec![Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap()], 1e-6, &|g, v| {
        let o = g.relu(v[0]);
        Ok(g.sum(o))
    });
    push("relu away from kink", vec![r(&[3, 3]).map_away_from_zero()], 1e-6, &|g, v| {
        let o = g.relu(v[0]);
        weighted_sum(g, o, 9)
    });
    push("softmax cross-entropy 5x3", vec![r(&[5, 3])], 1e-6, &|g, v| {
        g.softmax_cross_entropy(v[0], &[0, 2, 1, 1, 0])
    });
    push("reshape", vec![r(&[2, 6])], 1e-6, &|g, v| {
        let o = g.reshape(v[0], &[3, 4])?;
        weighted_sum(g, o, 10)
    });
    push("flatten", vec![r(&[2, 2, 3])], 1e-6, &|g, v| {
        let o = g.flatten(v[0])?;
        weighted_sum(g, o, 11)
    });
    push("concat", vec![r(&[3, 2]), r(&[3, 4])], 1e-6, &|g, v| {
        let o = g.concat(&[v[0], v[1]])?;
        weighted_sum(g, o, 12)
    });
    push("mean", vec![r(&[4, 3])], 1e-6, &|g, v| {
        let o = g.mul(v[0], v[0])?;
        Ok(g.mean(o))
    });
    push("gaussian kernel 6x3", vec![r(&[6, 3])], 1e-5, &|g, v| {
        let o = g.gaussian_kernel(v[0], 0.9)?;
        weighted_sum(g, o, 13)
    });
    let (k, l) = {
        let mut prng = SplitMix64::new(77);
        (square(random_psd(&mut prng, 6, 3), 6), square(random_psd(&mut prng, 6, 3), 6))
    };
    push("hsic", vec![k, l], 1e-6, &|g, v| g.hsic(v[0], v[1]));
    push("two consumers", vec![r(&[3, 3])], 1e-6, &|g, v| {
        let a = g.matmul(v[0], v[0])?;
        let b = g.relu(v[0]);
        let s = g.add(a, b)?;
        weighted_sum(g, s, 14)
    });

    for variant in [PenaltyVariant::Czy, PenaltyVariant::Cz] {
        cases.push(Case::new(
            format!("full loss ({variant:?}, d=2, batch 4)"),
            full_loss_error(variant, 2.0),
            1e-4,
        ));
    }
    cases.push(Case::new("encoder sum(z) wrt conv1 kernel (d=2)", encoder_error(), 1e-4));
    cases
}

trait AwayFromZero {
    fn map_away_from_zero(self) -> Self;
}

impl AwayFromZero for Tensor {
    /// Push entries at least 0.1 from the ReLU kink.
    fn map_away_from_zero(mut self) -> Self {
        for v in self.data_mut() {
            *v = v.signum() * (v.abs() + 0.1);
        }
        self
    }
}

pub struct LossBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub c: Vec<usize>,
}

pub fn loss_batch(d: usize, seed: u64) -> LossBatch {
    let mut rng = SplitMix64::new(seed);
    LossBatch {
        x: random_tensor(&mut rng, &[4, 28, 28, d], -0.5, 0.5),
        y: vec![0, 1, 2, 1],
        c: vec![0, 4, 4, 9],
    }
}

/// `ce + beta * hsic` over explicit parameter handles.
pub fn objective(
    g: &mut Graph,
    vars: &[Var],
    batch: &LossBatch,
    variant: PenaltyVariant,
    beta: f64,
    spec: &KernelSpec,
) -> Result<Var> {
    let params = ParamVars::from_vars(vars.try_into().expect("eight parameters"));
    let x = g.constant(batch.x.clone());
    let z = encode(g, &params, x)?;
    let logits = classify(g, &params, z)?;
    let ce = g.softmax_cross_entropy(logits, &batch.y)?;
    let h = hsic_penalty(g, z, &batch.y, &batch.c, variant, spec)?;
    let weighted = g.scale(h, beta);
    g.add(ce, weighted)
}

/// Bandwidth the median heuristic picks at the unperturbed parameters, so
/// the finite differences see the same detached constant as backprop.
pub fn frozen_bandwidth(params: &[Tensor], batch: &LossBatch, variant: PenaltyVariant) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
    let pv = ParamVars::from_vars(vars.try_into().unwrap());
    let x = g.constant(batch.x.clone());
    let z = encode(&mut g, &pv, x).unwrap();
    let flat = g.flatten(z).unwrap();
    let features = match variant {
        PenaltyVariant::Cz => flat,
        PenaltyVariant::Czy => {
            let mut oh = Tensor::zeros(&[batch.y.len(), NUM_CLASSES]);
            for (i, &y) in batch.y.iter().enumerate() {
                oh.data_mut()[i * NUM_CLASSES + y] = 1.0;
            }
            let oh = g.constant(oh);
            g.concat(&[flat, oh]).unwrap()
        }
    };
    median_bandwidth(g.value(features)).unwrap()
}

pub fn full_loss_error(variant: PenaltyVariant, beta: f64) -> f64 {
    let params = init_params(5, 2).unwrap();
    let batch = loss_batch(2, 6);
    let tensors = params.tensors().to_vec();
    let sigma = frozen_bandwidth(&tensors, &batch, variant);
    let spec = KernelSpec::gaussian(Bandwidth::Fixed(sigma));
    check_gradients(&tensors, |g, v| objective(g, v, &batch, variant, beta, &spec))
}

fn encoder_error() -> f64 {
    let params = init_params(8, 2).unwrap();
    let batch = loss_batch(2, 9);
    let tensors = params.tensors().to_vec();
    let frozen_rest: Vec<Tensor> = tensors[1..].to_vec();
    check_gradients(&tensors[..1], |g, v| {
        let mut all = vec![v[0]];
        all.extend(frozen_rest.iter().map(|t| g.constant(t.clone())));
        let pv = ParamVars::from_vars(all.try_into().unwrap());
        let x = g.constant(batch.x.clone());
        let z = encode(g, &pv, x)?;
        Ok(g.sum(z))
    })
}

pub struct HsicOracleReport {
    pub max_loop_error: f64,
    pub max_symmetry_error: f64,
    pub max_permutation_error: f64,
}

fn hsic_value(k: &Tensor, l: &Tensor) -> f64 {
    let mut g = Graph::new();
    let kv = g.constant(k.clone());
    let lv = g.constant(l.clone());
    let h = g.hsic(kv, lv).unwrap();
    g.value(h).item()
}

fn permute(m: &[f64], n: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[perm[i] * n + perm[j]];
        }
    }
    out
}

/// 50 random PSD pairs with `2 <= n <= 12`.
pub fn hsic_oracle_report() -> HsicOracleReport {
    let mut rng = SplitMix64::new(31337);
    let mut report = HsicOracleReport {
        max_loop_error: 0.0,
        max_symmetry_error: 0.0,
        max_permutation_error: 0.0,
    };
    for trial in 0..50 {
        let n = 2 + trial % 11;
        let rank = 1 + rng.below(n);
        let (k, l) = (random_psd(&mut rng, n, rank), random_psd(&mut rng, n, rank));
        let kt = square(k.clone(), n);
        let lt = square(l.clone(), n);
        let value = hsic_value(&kt, &lt);
        let oracle = hsic_quadruple_loop(&k, &l, n);
        report.max_loop_error = report.max_loop_error.max((value - oracle).abs());
        report.max_symmetry_error = report.max_symmetry_error.max((value - hsic_value(&lt, &kt)).abs());
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let permuted = hsic_value(&square(permute(&k, n, &perm), n), &square(permute(&l, n, &perm), n));
        report.max_permutation_error = report.max_permutation_error.max((value - permuted).abs());
    }
    report
}

/// Mean `HSIC(c, z)` over `trials` draws for `z = onehot(c) + 0.01 noise`
/// and for `z` independent of `c`.
pub fn hsic_sensitivity(trials: usize, n: usize, p: usize) -> (f64, f64) {
    let mut rng = SplitMix64::new(99);
    let spec = KernelSpec::default();
    let (mut dependent, mut independent) = (0.0, 0.0);
    for _ in 0..trials {
        let c: Vec<usize> = (0..n).map(|_| rng.below(p)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.below(NUM_CLASSES)).collect();
        let mut zc = Tensor::zeros(&[n, p]);
        let mut zi = Tensor::zeros(&[n, p]);
        for i in 0..n {
            zc.data_mut()[i * p + c[i]] = 1.0;
            for j in 0..p {
                zc.data_mut()[i * p + j] += 0.01 * rng.normal();
                zi.data_mut()[i * p + j] = rng.normal();
            }
        }
        for (z, acc) in [(zc, &mut dependent), (zi, &mut independent)] {
            let mut g = Graph::new();
            let zv = g.constant(z);
            let h = hsic_penalty(&mut g, zv, &y, &c, PenaltyVariant::Cz, &spec).unwrap();
            *acc += g.value(h).item();
        }
    }
    (dependent / trials as f64, independent / trials as f64)
}

/// Largest absolute deviation between the library conv and the loop oracle
/// over every configuration with spatial input size up to 8x8.
pub fn conv_oracle_max_error() -> (f64, usize) {
    let mut rng = SplitMix64::new(4242);
    let mut worst = 0.0f64;
    let mut configs = 0;
    for h in 1..=8 {
        for w in 1..=8 {
            for kh in 1..=3 {
                for kw in 1..=3 {
                    for stride in 1..=3 {
                        for padding in 0..=2 {
                            if h + 2 * padding < kh || w + 2 * padding < kw {
                                continue;
                            }
                            let (cin, cout, n) = (1 + (h + kw) % 3, 1 + (w + kh) % 3, 1 + stride % 2);
                            let x = random_tensor(&mut rng, &[n, h, w, cin], -1.0, 1.0);
                            let k = random_tensor(&mut rng, &[kh, kw, cin, cout], -1.0, 1.0);
                            let b = random_tensor(&mut rng, &[cout], -1.0, 1.0);
                            let mut g = Graph::new();
                            let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
                            let out = g.conv2d(xv, kv, Some(bv), stride, padding).unwrap();
                            let oracle = naive_conv(&x, &k, Some(b.data()), stride, padding);
                            assert_eq!(g.shape(out), oracle.shape());
                            for (a, b) in g.value(out).data().iter().zip(oracle.data()) {
                                worst = worst.max((a - b).abs());
                            }
                            configs += 1;
                        }
                    }
                }
            }
        }
    }
    (worst, configs)
}

/// Synthetic MNIST stand-in: each image is a distinct deterministic pattern.
pub fn synthetic_mnist(per_class: usize, side: usize, seed: u64) -> MnistSet {
    let mut rng = SplitMix64::new(seed);
    let n = per_class * NUM_CLASSES;
    let labels: Vec<u8> = (0..n).map(|i| (i % NUM_CLASSES) as u8).collect();
    let pixels = (0..n * side * side).map(|_| (rng.next_u64() % 256) as u8).collect();
    MnistSet::new(side, side, pixels, labels).unwrap()
}

pub fn synthetic_splits(seed: u64, d: usize) -> (Palette, Splits) {
    let train = synthetic_mnist(40, 6, seed);
    let test = synthetic_mnist(30, 6, seed + 1);
    let palette = sample_palette(seed, d).unwrap();
    let splits = build_splits(&train, &test, &palette, 20, 9, seed).unwrap();
    (palette, splits)
}

/// Nearest palette color among the six train colors, read off the image by
/// projecting every pixel onto `color * (pixel - 0.5)` space.
fn nearest_train_color(palette: &Palette, ds: &ColoredDataset, i: usize) -> usize {
    let img = ds.image(i);
    let d = ds.d;
    // The brightest-magnitude pixel carries the color direction most clearly.
    let px = (0..img.len() / d)
        .max_by(|&a, &b| {
            let na: f32 = img[a * d..][..d].iter().map(|v| v * v).sum();
            let nb: f32 = img[b * d..][..d].iter().map(|v| v * v).sum();
            na.total_cmp(&nb)
        })
        .unwrap();
    let v: Vec<f64> = img[px * d..][..d].iter().map(|&x| f64::from(x)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    palette
        .train_colors()
        .into_iter()
        .max_by(|&a, &b| {
            let cos = |k: usize| {
                let c = palette.color(k);
                let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().zip(c).map(|(x, y)| x * y).sum::<f64>().abs() / (norm * cn)
            };
            cos(a).total_cmp(&cos(b))
        })
        .unwrap()
}

/// Accuracy of the classifier that names the digit owning the nearest
/// train color.
pub fn color_frequency_accuracy(palette: &Palette, ds: &ColoredDataset) -> f64 {
    let hits = (0..ds.len())
        .filter(|&i| {
            let color = nearest_train_color(palette, ds, i);
            palette.train_class_of(color) == Some(usize::from(ds.labels[i]))
        })
        .count();
    hits as f64 / ds.len() as f64
}

pub struct DatasetReport {
    pub balanced: bool,
    pub train_dev_disjoint: bool,
    pub derangement: bool,
    pub colors_legal: bool,
    pub range_ok: bool,
    pub deterministic: bool,
    pub recolor_bit_equal: bool,
    pub quasi_dev_color_accuracy: f64,
    pub adv_dev_color_accuracy: f64,
}

pub fn dataset_report(seed: u64, d: usize) -> DatasetReport {
    let (palette, splits) = synthetic_splits(seed, d);
    let (palette2, splits2) = synthetic_splits(seed, d);
    let balanced = splits.iter().all(|ds| {
        let counts = ds.class_counts();
        counts.iter().all(|&c| c == ds.len() / NUM_CLASSES) && ds.len() % NUM_CLASSES == 0
    });
    let train: Vec<usize> = palette.train_colors();
    let dev: Vec<usize> = palette.dev_assign.iter().flatten().copied().collect();
    let train_dev_disjoint = dev.iter().all(|c| !train.contains(c));
    let derangement = (0..NUM_CLASSES).all(|k| {
        palette.adv_assign[k].iter().all(|c| train.contains(c) && !palette.train_assign[k].contains(c))
    });
    let colors_legal = Split::ALL.into_iter().all(|split| {
        let ds = splits.get(split);
        let assign = palette.assignment(split);
        (0..ds.len()).all(|i| assign[usize::from(ds.labels[i])].contains(&usize::from(ds.color_idx[i])))
    });
    let range_ok = splits
        .iter()
        .all(|ds| ds.images.iter().all(|&v| (-0.5..=0.5).contains(&v)));
    let deterministic = palette == palette2 && splits.iter().zip(splits2.iter()).all(|(a, b)| a == b);

    let recolor_bit_equal = recolor_matches_train_pipeline(seed, d);

    DatasetReport {
        balanced,
        train_dev_disjoint,
        derangement,
        colors_legal,
        range_ok,
        deterministic,
        recolor_bit_equal,
        quasi_dev_color_accuracy: color_frequency_accuracy(&palette, &splits.quasi_dev),
        adv_dev_color_accuracy: color_frequency_accuracy(&palette, &splits.adv_dev),
    }
}

/// Every image of a class shares one source pattern, so any dev image can
/// be recolored with a train image's color and compared against that train
/// image bit for bit.
pub fn recolor_matches_train_pipeline(seed: u64, d: usize) -> bool {
    let side = 5;
    let pattern = |k: usize| -> Vec<u8> { (0..side * side).map(|p| ((p * 37 + k * 91) % 256) as u8).collect() };
    let make = |per_class: usize| {
        let n = per_class * NUM_CLASSES;
        let labels: Vec<u8> = (0..n).map(|i| (i % NUM_CLASSES) as u8).collect();
        let pixels = labels.iter().flat_map(|&k| pattern(usize::from(k))).collect();
        MnistSet::new(side, side, pixels, labels).unwrap()
    };
    let (train_src, test_src) = (make(12), make(9));
    let palette = sample_palette(seed, d).unwrap();
    let splits = build_splits(&train_src, &test_src, &palette, 6, 3, seed).unwrap();
    (0..splits.dev.len()).all(|i| {
        let class = usize::from(splits.dev.labels[i]);
        let base = test_src.scaled_image(class);
        (0..splits.train.len())
            .filter(|&j| usize::from(splits.train.labels[j]) == class)
            .all(|j| {
                let recolored = colorize(&base, palette.color(usize::from(splits.train.color_idx[j])));
                recolored
                    .iter()
                    .zip(splits.train.image(j))
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            })
    })
}
