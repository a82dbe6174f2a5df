mod common;

use common::*;
use kreuse_core::chansearch::*;
use kreuse_core::ops::{self, ConvGeom};
use kreuse_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// softmax((log softmax(alpha) + g) / tau), computed from scratch.
fn relaxed_oracle(alpha: &[f64], g: &[f64], tau: f64) -> Vec<f64> {
    let lp: Vec<f64> = {
        let m = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + alpha.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
        alpha.iter().map(|a| a - lse).collect()
    };
    softmax(&lp.iter().zip(g).map(|(a, b)| (a + b) / tau).collect::<Vec<_>>())
}

#[test]
fn expansion_channels_are_integers() {
    assert_eq!(expanded_channels(8, 0.75).unwrap(), 6);
    assert!(expanded_channels(6, 0.75).is_err());
    assert!(expanded_channels(4, 0.0).is_err());
    let e = ExpansionChoice::new(&RATES_WIDE, 32).unwrap();
    assert_eq!((0..3).map(|i| e.channels(i)).collect::<Vec<_>>(), vec![16, 24, 32]);
    assert_eq!(e.index_of(0.75), Some(1));
    assert!(ExpansionChoice::new(&RATES_WIDE, 10).is_err());
    assert!(ExpansionChoice::new(&[], 8).is_err());
}

#[test]
fn gumbel_frequencies_match_softmax() {
    let mut r = rng(20);
    let probs = [0.7, 0.2, 0.1];
    let alpha: Vec<f64> = probs.iter().map(|p: &f64| p.ln()).collect();
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let s = gumbel_onehot(&alpha, &mut r).unwrap();
        assert_eq!(s.onehot().iter().sum::<f64>(), 1.0);
        counts[s.index] += 1;
    }
    let stat: f64 = counts.iter().zip(&probs).map(|(&c, p)| (c as f64 - p * n as f64).powi(2) / (p * n as f64)).sum();
    // Two degrees of freedom: survival function exp(-x/2).
    let p = (-stat / 2.0).exp();
    for (c, q) in counts.iter().zip(&probs) {
        assert!((*c as f64 / n as f64 - q).abs() <= 0.01);
    }
    assert!(p > 0.01, "chi-square p = {}", p);
    assert!((chi_square_sf(stat, 2) - p).abs() < 1e-12);
}

#[test]
fn chi_square_tail_reference_values() {
    // Critical values at the 1% level.
    assert!((chi_square_sf(6.634897, 1) - 0.01).abs() < 1e-6);
    assert!((chi_square_sf(9.210340, 2) - 0.01).abs() < 1e-6);
    assert!((chi_square_sf(11.344867, 3) - 0.01).abs() < 1e-6);
    assert!((chi_square_sf(0.0, 3) - 1.0).abs() < 1e-12);
}

#[test]
fn zero_noise_picks_argmax() {
    assert_eq!(gumbel_argmax(&[0.1, 2.0, -1.0], &[0.0; 3]).unwrap(), 1);
    assert_eq!(gumbel_argmax(&[0.0, 0.0, 0.0], &[0.0; 3]).unwrap(), 0);
    assert!(gumbel_onehot(&[], &mut rng(0)).is_err());
    assert!(gumbel_argmax(&[0.0, 1.0], &[0.0]).is_err());
}

#[test]
fn sample_fields_are_consistent() {
    let mut r = rng(21);
    for _ in 0..200 {
        let alpha = rand_v(&mut r, 3, 3.0);
        let s = gumbel_sample(&alpha, 0.7, &mut r).unwrap();
        assert!(s.relaxed.iter().all(|&v| v > 0.0));
        assert!((s.relaxed.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let peak = s.relaxed.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(peak, s.index);
        let want = relaxed_oracle(&alpha, &s.noise, 0.7);
        assert!(s.relaxed.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn temperature_limits() {
    let mut r = rng(22);
    for _ in 0..100 {
        let n = r.gen_range(2..=5);
        let alpha = rand_v(&mut r, n, 2.0);
        let noise = gumbel_noise(n, &mut r);
        let cold = gumbel_softmax(&alpha, &noise, 1e-3).unwrap();
        let idx = gumbel_argmax(&alpha, &noise).unwrap();
        // Cold: the relaxation collapses onto the hard choice unless two
        // perturbed logits are nearly tied.
        let mut z: Vec<f64> = relaxed_oracle(&alpha, &noise, 1.0).iter().map(|v| v.ln()).collect();
        z.sort_by(|a, b| b.total_cmp(a));
        if z[0] - z[1] > 0.05 {
            assert!(cold[idx] > 1.0 - 1e-6);
        }
    }
    // Hot: bounded logits with zero noise flatten toward uniform.
    let hot = gumbel_softmax::<f64>(&[1.0, -1.0, 0.5], &[0.0; 3], 1e4).unwrap();
    assert!(hot.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-3));
    assert!(gumbel_softmax::<f64>(&[1.0], &[0.0], 0.0).is_err());
}

#[test]
fn straight_through_forward_and_gradient() {
    let mut r = rng(23);
    for _ in 0..50 {
        let n = r.gen_range(2..=4);
        let alpha = rand_v(&mut r, n, 2.0);
        let noise = gumbel_noise(n, &mut r);
        let tau = r.gen_range(0.5..5.0);
        let c = rand_v(&mut r, n, 1.0);
        let idx = gumbel_argmax(&alpha, &noise).unwrap();

        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::vector(alpha.clone()), true);
        let rel_v = gumbel_softmax_var(&mut g, a, &noise, tau).unwrap();
        let st = straight_through(&mut g, rel_v, idx).unwrap();
        let fwd = g.value(st).data().to_vec();
        assert_eq!(fwd.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(fwd.iter().filter(|&&v| v == 0.0).count(), n - 1);
        assert_eq!(fwd[idx], 1.0);
        let l = g.dot(st, Tensor::vector(c.clone())).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad(a).unwrap().data().to_vec();

        // c·p shifted by the constant c_idx (Σp = 1), so small entries are
        // not swamped by rounding of the dominant term.
        let f = |al: &[f64]| {
            let p = relaxed_oracle(al, &noise, tau);
            (0..n).filter(|&k| k != idx).map(|k| (c[k] - c[idx]) * p[k]).sum()
        };
        let fd = fd_grad5(f, &alpha, 1e-2 * tau);
        assert!(max_rel_vec(&analytic, &fd) <= 1e-5, "{:?} vs {:?}", analytic, fd);
    }
}

#[test]
fn straight_through_rejects_mismatched_choice() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::vector(vec![3.0, 0.0, 0.0]), true);
    let relaxed = gumbel_softmax_var(&mut g, a, &[0.0; 3], 1.0).unwrap();
    assert!(straight_through(&mut g, relaxed, 1).is_err());
    assert!(straight_through(&mut g, relaxed, 3).is_err());
}

#[test]
fn output_slice_is_channel_crop() {
    let mut r = rng(24);
    let x = rand_t::<f64>(&mut r, [2, 3, 5, 5]);
    let w = rand_t::<f64>(&mut r, [6, 3, 3, 3]);
    let full = conv_oracle(&x, &w, None, 1, 1, 1);
    for c in 1..=6 {
        let y = ops::conv2d(&x, &slice_out_channels(&w, c).unwrap(), None, ConvGeom::new(1, 1, 1)).unwrap();
        assert!(rel(&y, &full.narrow(1, 0, c).unwrap()) <= 1e-12);
    }
    let wi = slice_in_channels(&w, 2).unwrap();
    assert_eq!(wi.shape(), [6, 2, 3, 3]);
    assert_eq!(wi.at([5, 1, 2, 0]), w.at([5, 1, 2, 0]));
    assert!(slice_out_channels(&w, 7).is_err());
}

fn prop1_instance(seed: u64, splits: &[usize], k: usize, stride: usize, hw: usize) -> f64 {
    let mut r = rng(seed);
    let xs: Vec<Tensor<f64>> = splits.iter().map(|&c| rand_t(&mut r, [1, c, hw, hw])).collect();
    let total: usize = splits.iter().sum();
    let w = rand_t::<f64>(&mut r, [4, total, k, k]);
    let pad = k / 2;
    let refs: Vec<&Tensor<f64>> = xs.iter().collect();
    let want = conv_oracle(&concat_oracle(&refs), &w, None, stride, pad, 1);
    let parts = concat_conv_to_sum(&w, splits).unwrap();
    let mut sum = Tensor::zeros(want.shape());
    for (x, p) in xs.iter().zip(&parts) {
        sum.axpy(1.0, &ops::conv2d(x, p, None, ConvGeom::new(stride, pad, 1)).unwrap()).unwrap();
    }
    rel(&sum, &want)
}

#[test]
fn concat_to_sum_examples() {
    assert!(prop1_instance(25, &[2, 3], 3, 1, 5) <= 1e-5);
    assert!(prop1_instance(26, &[2, 3], 3, 2, 5) <= 1e-5);
    assert!(prop1_instance(27, &[2, 3], 1, 1, 5) <= 1e-5);
    let w = Tensor::<f64>::zeros([1, 5, 1, 1]);
    assert!(concat_conv_to_sum(&w, &[2, 2]).is_err());
    assert!(concat_conv_to_sum(&w, &[5, 0]).is_err());
}

#[test]
fn schedule_endpoints() {
    assert_eq!(temperature(0, 50, 5.0, 0.1).unwrap(), 5.0);
    assert_eq!(temperature(50, 50, 5.0, 0.1).unwrap(), 0.1);
    assert!((temperature(25, 50, 5.0, 0.1).unwrap() - (5.0f64 * 0.1).sqrt()).abs() < 1e-12);
    assert!(temperature(0, 5, 0.1, 1.0).is_err());
    assert!(temperature(6, 5, 1.0, 0.1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn straight_through_matches_library_check(seed in any::<u64>(), n in 2usize..=5, tau in 0.3f64..5.0) {
        let mut r = rng(seed);
        let alpha = rand_v(&mut r, n, 3.0);
        let noise = gumbel_noise(n, &mut r);
        let c = rand_v(&mut r, n, 1.0);
        let (onehot, fd, same) = kreuse_core::selfcheck::straight_through_errors(&alpha, &noise, tau, &c).unwrap();
        prop_assert!(onehot);
        prop_assert!(fd <= 1e-5, "fd error {}", fd);
        prop_assert_eq!(same, 0.0);
    }

    #[test]
    fn concat_then_conv_equals_sum_of_split_convs(seed in any::<u64>(), splits in prop::collection::vec(1usize..4, 1..=3),
                                                  k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..=2, hw in 5usize..=8) {
        prop_assert!(prop1_instance(seed, &splits, k, stride, hw) <= 1e-5);
    }

    #[test]
    fn temperature_non_increasing(total in 1usize..200, tau0 in 0.2f64..10.0, ratio in 0.01f64..0.99) {
        let tmin = tau0 * ratio;
        let taus: Vec<f64> = (0..=total).map(|s| temperature(s, total, tau0, tmin).unwrap()).collect();
        prop_assert!(taus.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(taus.iter().all(|&t| t >= tmin && t <= tau0));
    }

    #[test]
    fn relaxed_sample_is_a_distribution(seed in any::<u64>(), n in 1usize..6, tau in 0.05f64..20.0) {
        let mut r = rng(seed);
        let alpha = rand_v(&mut r, n, 5.0);
        let s = gumbel_sample(&alpha, tau, &mut r).unwrap();
        prop_assert!(s.relaxed.iter().all(|&v| v >= 0.0));
        prop_assert!((s.relaxed.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.noise.iter().all(|v| v.is_finite()));
    }
}


