//! Dynamic channel-number search.
//!
//! Each searchable layer samples one expansion rate per iteration with
//! Gumbel-argmax, runs with the hard one-hot choice in the forward pass and
//! routes gradients to the rate logits through the Gumbel-softmax relaxation.
//! Weights of the current and the following layer are cut to the leading
//! `e·C` filters / input channels. Convolutions after a concatenation are
//! split into a sum of per-input convolutions so every slice stays a prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::tensor::{Real, Tensor};

pub const RATES_WIDE: [f64; 3] = [0.5, 0.75, 1.0];
pub const RATES_C3: [f64; 2] = [0.75, 1.0];

/// Bounds for the uniform draw feeding `-log(-log(u))`.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// `rate · base` as an exact positive integer.
pub fn expanded_channels(base: usize, rate: f64) -> Result<usize> {
    let v = base as f64 * rate;
    if !(rate > 0.0 && rate <= 1.0) || v.fract() != 0.0 || v < 1.0 {
        return Err(config(format!("expansion {} of {} channels is not a positive integer", rate, base)));
    }
    Ok(v as usize)
}

/// Candidate expansion rates of one layer together with its base width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionChoice {
    pub candidates: Vec<f64>,
    pub base_channels: usize,
}

impl ExpansionChoice {
    pub fn new(candidates: &[f64], base_channels: usize) -> Result<Self> {
        if candidates.is_empty() {
            return Err(config("expansion choice without candidates"));
        }
        for &r in candidates {
            expanded_channels(base_channels, r)?;
        }
        Ok(ExpansionChoice { candidates: candidates.to_vec(), base_channels })
    }

    pub fn channels(&self, index: usize) -> usize {
        (self.base_channels as f64 * self.candidates[index]) as usize
    }

    pub fn index_of(&self, rate: f64) -> Option<usize> {
        self.candidates.iter().position(|&r| r == rate)
    }
}

/// One Gumbel draw: the hard one-hot choice, its relaxation and the noise
/// that produced both.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    pub index: usize,
    pub noise: Vec<f64>,
    pub relaxed: Vec<f64>,
    pub tau: f64,
}

impl GumbelSample {
    pub fn onehot(&self) -> Vec<f64> {
        (0..self.noise.len()).map(|i| if i == self.index { 1.0 } else { 0.0 }).collect()
    }
}

pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
            -(-u.ln()).ln()
        })
        .collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Hard choice `argmax_i(log softmax(alpha)_i + g_i)` for given noise.
pub fn gumbel_argmax(alpha: &[f64], noise: &[f64]) -> Result<usize> {
    if alpha.is_empty() || alpha.len() != noise.len() {
        return Err(input(format!("gumbel: {} logits, {} noise values", alpha.len(), noise.len())));
    }
    let lp = ops::log_softmax(alpha)?;
    let perturbed: Vec<f64> = lp.iter().zip(noise).map(|(a, g)| a + g).collect();
    Ok(argmax(&perturbed))
}

/// Draws Gumbel noise and returns the hard sample (relaxed part left empty;
/// see [`gumbel_sample`]).
pub fn gumbel_onehot<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<GumbelSample> {
    if alpha.is_empty() {
        return Err(input("gumbel_onehot of an empty vector"));
    }
    let noise = gumbel_noise(alpha.len(), rng);
    let index = gumbel_argmax(alpha, &noise)?;
    Ok(GumbelSample { index, noise, relaxed: Vec::new(), tau: f64::NAN })
}

/// Relaxed sample `softmax((log softmax(alpha) + g) / tau)`.
pub fn gumbel_softmax<T: Real>(alpha: &[T], noise: &[T], tau: f64) -> Result<Vec<T>> {
    if !(tau > 0.0) {
        return Err(config(format!("gumbel_softmax temperature must be positive, got {}", tau)));
    }
    if alpha.len() != noise.len() {
        return Err(input(format!("gumbel_softmax: {} logits, {} noise values", alpha.len(), noise.len())));
    }
    let lp = ops::log_softmax(alpha)?;
    let inv = T::c(1.0 / tau);
    let z: Vec<T> = lp.iter().zip(noise).map(|(&a, &g)| (a + g) * inv).collect();
    ops::softmax(&z)
}

/// A complete draw: hard index plus relaxed vector from the same noise.
pub fn gumbel_sample<R: Rng + ?Sized>(alpha: &[f64], tau: f64, rng: &mut R) -> Result<GumbelSample> {
    let mut s = gumbel_onehot(alpha, rng)?;
    s.relaxed = gumbel_softmax(alpha, &s.noise, tau)?;
    s.tau = tau;
    Ok(s)
}

/// Graph form of [`gumbel_softmax`], differentiable with respect to `alpha`.
pub fn gumbel_softmax_var<T: Real>(g: &mut Graph<T>, alpha: Var, noise: &[f64], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(config(format!("gumbel_softmax temperature must be positive, got {}", tau)));
    }
    let shape = g.shape(alpha);
    let noise = Tensor::new(shape, noise.iter().map(|&v| T::c(v)).collect())?;
    let lp = g.log_softmax(alpha)?;
    let z = g.add_const(lp, &noise)?;
    let z = g.scale(z, T::c(1.0 / tau));
    g.softmax(z)
}

/// Straight-through vector for a sampled layer: forward value is exactly the
/// one-hot choice, gradients flow through the relaxed node. `relaxed` must
/// come from the same noise as `index`.
pub fn straight_through<T: Real>(g: &mut Graph<T>, relaxed: Var, index: usize) -> Result<Var> {
    let r = g.value(relaxed);
    let n = r.numel();
    if index >= n {
        return Err(input(format!("straight_through: index {} of {} candidates", index, n)));
    }
    let rv = r.to_f64_vec();
    if argmax(&rv) != index {
        return Err(input(format!(
            "straight_through: relaxed sample peaks at {} but hard choice is {} (different noise?)",
            argmax(&rv),
            index
        )));
    }
    let hard = Tensor::new(r.shape(), (0..n).map(|i| if i == index { T::one() } else { T::zero() }).collect())?;
    g.straight_through(relaxed, hard)
}

/// Leading `c` filters of a `C_out × C_in × k × k` weight.
pub fn slice_out_channels<T: Real>(w: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    w.narrow(0, 0, c)
}

/// Leading `c` input channels of a `C_out × C_in × k × k` weight.
pub fn slice_in_channels<T: Real>(w: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    w.narrow(1, 0, c)
}

/// Splits the input-channel axis of a convolution weight that follows a
/// concatenation, so that `conv(concat(X_1..X_M), w) == Σ_m conv(X_m, θ_m)`.
pub fn concat_conv_to_sum<T: Real>(w: &Tensor<T>, splits: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = splits.iter().sum();
    if splits.is_empty() || total != w.shape()[1] || splits.contains(&0) {
        return Err(input(format!("splits {:?} do not partition {} input channels", splits, w.shape()[1])));
    }
    let mut start = 0;
    splits
        .iter()
        .map(|&c| {
            let blk = w.narrow(1, start, c);
            start += c;
            blk
        })
        .collect()
}

/// Exponential decay `tau0 · (tau_min / tau0)^(step / total)`.
pub fn temperature(step: usize, total_steps: usize, tau0: f64, tau_min: f64) -> Result<f64> {
    if !(tau_min > 0.0 && tau0 > tau_min) {
        return Err(config(format!("temperature bounds need tau0 > tau_min > 0, got {} / {}", tau0, tau_min)));
    }
    if step > total_steps {
        return Err(config(format!("temperature step {} beyond {}", step, total_steps)));
    }
    if total_steps == 0 {
        return Ok(tau0);
    }
    if step == total_steps {
        return Ok(tau_min);
    }
    Ok(tau0 * (tau_min / tau0).powf(step as f64 / total_steps as f64))
}

/// Upper-tail probability of a chi-square statistic with an even number of
/// degrees of freedom (closed form).
pub fn chi_square_sf_even(stat: f64, dof: usize) -> f64 {
    assert!(dof % 2 == 0 && dof > 0, "closed form needs even dof");
    let h = stat / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..dof / 2 {
        term *= h / i as f64;
        sum += term;
    }
    (-h).exp() * sum
}

/// Upper-tail probability for any positive dof, via the regularised upper
/// incomplete gamma function (series / continued fraction).
pub fn chi_square_sf(stat: f64, dof: usize) -> f64 {
    if dof % 2 == 0 {
        return chi_square_sf_even(stat, dof);
    }
    let a = dof as f64 / 2.0;
    let x = stat / 2.0;
    if x <= 0.0 {
        return 1.0;
    }
    let ln_gamma_a = ln_gamma(a);
    if x < a + 1.0 {
        let mut sum = 1.0 / a;
        let mut term = sum;
        let mut n = a;
        for _ in 0..500 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        1.0 - sum * (-x + a * x.ln() - ln_gamma_a).exp()
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        (-x + a * x.ln() - ln_gamma_a).exp() * h
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_is_plain_argmax() {
        assert_eq!(gumbel_argmax(&[0.1, 2.0, -1.0], &[0.0; 3]).unwrap(), 1);
        assert!(gumbel_argmax(&[], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(gumbel_onehot(&[], &mut rng).is_err());
    }

    #[test]
    fn sample_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let s = gumbel_sample(&[0.3, -0.2, 0.9], 0.7, &mut rng).unwrap();
            let sum: f64 = s.relaxed.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(s.relaxed.iter().all(|&v| v > 0.0));
            assert_eq!(argmax(&s.relaxed), s.index);
            assert_eq!(s.onehot().iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn temperature_limits() {
        let alpha = [0.2, -0.4, 0.1];
        let g = [0.05, 0.3, -0.1];
        let cold = gumbel_softmax(&alpha, &g, 0.01).unwrap();
        assert!(cold.iter().cloned().fold(0.0, f64::max) > 0.99);
        let hot = gumbel_softmax(&alpha, &g, 100.0).unwrap();
        assert!(hot.iter().all(|&v| (v - 1.0 / 3.0).abs() < 0.01));
        assert!(gumbel_softmax(&alpha, &g, 0.0).is_err());
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = gumbel_sample(&[0.0, 0.5, -0.5], 1.0, &mut rng).unwrap();
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::vector(vec![0.0, 0.5, -0.5]), true);
        let r = gumbel_softmax_var(&mut g, a, &s.noise, 1.0).unwrap();
        let st = straight_through(&mut g, r, s.index).unwrap();
        assert_eq!(g.value(st).to_f64_vec(), s.onehot());
        let wrong = (s.index + 1) % 3;
        assert!(straight_through(&mut g, r, wrong).is_err());
    }

    #[test]
    fn channel_arithmetic() {
        assert_eq!(expanded_channels(8, 0.75).unwrap(), 6);
        assert!(expanded_channels(6, 0.75).is_err());
        assert!(expanded_channels(1, 0.5).is_err());
        assert!(ExpansionChoice::new(&RATES_WIDE, 4).is_ok());
        assert!(ExpansionChoice::new(&RATES_WIDE, 6).is_err());
        let w = Tensor::<f32>::zeros([4, 3, 3, 3]);
        assert_eq!(slice_out_channels(&w, 2).unwrap().shape(), [2, 3, 3, 3]);
        assert_eq!(slice_in_channels(&w, 3).unwrap(), w);
        assert!(slice_in_channels(&w, 4).is_err());
        assert!(slice_out_channels(&w, 0).is_err());
    }

    #[test]
    fn split_validation() {
        let w = Tensor::<f32>::zeros([2, 5, 1, 1]);
        assert_eq!(concat_conv_to_sum(&w, &[5]).unwrap()[0], w);
        assert!(concat_conv_to_sum(&w, &[2, 2]).is_err());
        let parts = concat_conv_to_sum(&w, &[2, 3]).unwrap();
        assert_eq!(parts[1].shape(), [2, 3, 1, 1]);
    }

    #[test]
    fn temperature_schedule() {
        assert_eq!(temperature(0, 100, 5.0, 0.1).unwrap(), 5.0);
        assert_eq!(temperature(100, 100, 5.0, 0.1).unwrap(), 0.1);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let t = temperature(s, 100, 5.0, 0.1).unwrap();
            assert!(t <= prev);
            prev = t;
        }
        assert!(temperature(0, 10, 0.1, 5.0).is_err());
        assert!(temperature(11, 10, 5.0, 0.1).is_err());
    }

    #[test]
    fn chi_square_tails() {
        // dof 2: sf(x) = exp(-x/2); the 1% critical value is 9.2103.
        assert!((chi_square_sf(9.2103, 2) - 0.01).abs() < 1e-5);
        // dof 1: 1% critical value 6.6349; dof 3: 11.3449.
        assert!((chi_square_sf(6.6349, 1) - 0.01).abs() < 1e-5);
        assert!((chi_square_sf(11.3449, 3) - 0.01).abs() < 1e-5);
    }
}
