#![allow(dead_code)]

pub mod suites;

use shiftlab_core::rng::SplitMix64;
use shiftlab_core::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-3)`; the floor keeps near-zero entries from
/// inflating the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn random_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Evaluate `f` on `inputs` (all registered as parameters), backpropagate,
/// and compare every gradient entry with a central difference. Returns the
/// worst relative error.
///
/// A central difference is only meaningful when both probes land on the
/// same smooth piece. If the set of exactly-zero node values (ReLU outputs)
/// differs between the `+h` and `-h` probes, the step is shrunk tenfold, up
/// to three times.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars).unwrap();
        let zeros: Vec<bool> = g
            .vars()
            .flat_map(|v| g.value(v).data().iter().map(|&x| x == 0.0).collect::<Vec<_>>())
            .collect();
        (g.value(loss).item(), zeros)
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work[t].data()[i];
            let mut h = FD_STEP;
            let fd = loop {
                work[t].data_mut()[i] = orig + h;
                let (plus, zp) = eval(&work);
                work[t].data_mut()[i] = orig - h;
                let (minus, zm) = eval(&work);
                if zp == zm || h < FD_STEP * 1e-3 * 1.5 {
                    break (plus - minus) / (2.0 * h);
                }
                h /= 10.0;
            };
            work[t].data_mut()[i] = orig;
            worst = worst.max(rel_err(grad[i], fd));
        }
    }
    worst
}

/// Cross-correlation by direct summation, NHWC input, HWIO kernel.
pub fn naive_conv(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Tensor {
    let &[n, h, w, cin] = input.shape() else { panic!("4-D input") };
    let &[kh, kw, _, cout] = kernel.shape() else { panic!("4-D kernel") };
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bias.map_or(0.0, |bs| bs[co]);
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy) as isize - padding as isize;
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((b * h + iy as usize) * w + ix as usize) * cin + ci];
                                acc += xv * k[((dy * kw + dx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, cout], out).unwrap()
}

/// `trace(K H L H) / (n - 1)^2` by explicit four-index summation.
pub fn hsic_quadruple_loop(k: &[f64], l: &[f64], n: usize) -> f64 {
    let h = |i: usize, j: usize| (if i == j { 1.0 } else { 0.0 }) - 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            for a in 0..n {
                let kh = k[i * n + j] * h(j, a);
                for b in 0..n {
                    total += kh * l[a * n + b] * h(b, i);
                }
            }
        }
    }
    total / ((n - 1) * (n - 1)) as f64
}

/// Gram matrix `A A^T` of a random `n x r` matrix.
pub fn random_psd(rng: &mut SplitMix64, n: usize, r: usize) -> Vec<f64> {
    let a: Vec<f64> = (0..n * r).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..r).map(|t| a[i * r + t] * a[j * r + t]).sum();
        }
    }
    out
}

pub fn square(data: Vec<f64>, n: usize) -> Tensor {
    Tensor::new(vec![n, n], data).unwrap()
}
