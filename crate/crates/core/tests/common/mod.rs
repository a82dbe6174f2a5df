#![allow(dead_code)]

pub mod derive_oracle;

use kreuse_core::{Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t<T: Real>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::c(rng.gen_range(-1.0..1.0)))
}

pub fn rand_v(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `max |a-b| / max |b|`, written out here rather than borrowed from the crate.
pub fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let d = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let s = b.data().iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

pub fn to64<T: Real>(t: &Tensor<T>) -> Tensor<f64> {
    t.cast()
}

/// Direct nested-loop cross-correlation.
pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wc, k, _] = w.shape();
    assert_eq!(cin, wc);
    let span = dil * (k - 1) + 1;
    let ho = (h + 2 * pad - span) / stride + 1;
    let wo = (wd + 2 * pad - span) / stride + 1;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for c in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let r = (i * stride + ki * dil) as isize - pad as isize;
                                let s = (j * stride + kj * dil) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                acc += x.at([b, c, r as usize, s as usize]) * w.at([o, c, ki, kj]);
                            }
                        }
                    }
                    out.set([b, o, i, j], acc);
                }
            }
        }
    }
    out
}

/// Concatenation along channels, by hand.
pub fn concat_oracle(xs: &[&Tensor<f64>]) -> Tensor<f64> {
    let [n, _, h, w] = xs[0].shape();
    let c: usize = xs.iter().map(|x| x.shape()[1]).sum();
    Tensor::from_fn([n, c, h, w], |[b, mut ch, i, j]| {
        for x in xs {
            if ch < x.shape()[1] {
                return x.at([b, ch, i, j]);
            }
            ch -= x.shape()[1];
        }
        unreachable!()
    })
}

/// Central differences of a scalar function of a flat parameter vector,
/// evaluated entirely in f64 on the test side.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut w = x.to_vec();
    (0..x.len())
        .map(|i| {
            w[i] = x[i] + eps;
            let p = f(&w);
            w[i] = x[i] - eps;
            let m = f(&w);
            w[i] = x[i];
            (p - m) / (2.0 * eps)
        })
        .collect()
}

pub fn max_rel_vec(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Five-point central differences, for smooth functions where the plain
/// stencil's truncation error matters.
pub fn fd_grad5(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut w = x.to_vec();
    let mut at = |i: usize, d: f64| {
        w[i] = x[i] + d;
        let v = f(&w);
        w[i] = x[i];
        v
    };
    (0..x.len())
        .map(|i| (8.0 * (at(i, h) - at(i, -h)) - (at(i, 2.0 * h) - at(i, -2.0 * h))) / (12.0 * h))
        .collect()
}
