mod common;

use common::*;
use kreuse_core::data::{gen_synthetic_dataset, grid_targets, Batch, BoxRecord, DataParams, Dataset, ScaleTargets};
use kreuse_core::search::{
    alpha_entropies, detection_loss, detection_loss_values, run_search, split_dataset, train_derived, ArchCheckpoint,
    BilevelConfig, Searcher, TrainMetrics, P_CLAMP,
};
use kreuse_core::supernet::{derive, ArchParams, DerivedNet, ForwardMode, GradTargets, Level, SearchSpaceSpec};
use kreuse_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn mini(classes: usize) -> SearchSpaceSpec {
    SearchSpaceSpec::preset(Level::SMini).with_classes(classes)
}

fn data(n: usize, seed: u64) -> Dataset {
    gen_synthetic_dataset(n, &DataParams::default(), seed).unwrap()
}

proptest! {
    #[test]
    fn split_is_a_seeded_partition(n in 2usize..300, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let nw = (ratio * n as f64).round() as usize;
        match split_dataset(n, ratio, seed) {
            Ok((a, b)) => {
                prop_assert_eq!(a.len(), nw);
                prop_assert_eq!(a.len() + b.len(), n);
                let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(split_dataset(n, ratio, seed).unwrap(), (a, b));
            }
            Err(_) => prop_assert!(nw == 0 || nw == n),
        }
    }
}

#[test]
fn split_examples() {
    let (a, b) = split_dataset(10, 0.5, 7).unwrap();
    assert_eq!((a.len(), b.len()), (5, 5));
    assert!(a.iter().all(|i| !b.contains(i)));
    assert_ne!(split_dataset(100, 0.5, 1).unwrap(), split_dataset(100, 0.5, 2).unwrap());
    assert!(split_dataset(1, 0.5, 0).is_err());
    assert!(split_dataset(10, 0.0, 0).is_err());
    assert!(split_dataset(10, 0.01, 0).is_err());
}

fn random_targets(r: &mut rand_chacha::ChaCha8Rng, batch: usize, nc: usize, size: usize) -> Vec<ScaleTargets> {
    let boxes: Vec<Vec<BoxRecord>> = (0..batch)
        .map(|_| {
            (0..r.gen_range(1..=3))
                .map(|_| BoxRecord {
                    class: r.gen_range(0..nc),
                    cx: r.gen_range(0.1..0.9),
                    cy: r.gen_range(0.1..0.9),
                    w: r.gen_range(0.1..0.2),
                    h: r.gen_range(0.1..0.2),
                })
                .collect()
        })
        .collect();
    let refs: Vec<&[BoxRecord]> = boxes.iter().map(|b| b.as_slice()).collect();
    [8, 16, 32].iter().map(|&s| grid_targets(&refs, size, s)).collect()
}

/// The loss written out directly from its definition.
fn loss_oracle(preds: &[Tensor<f64>], t: &[ScaleTargets]) -> f64 {
    let npos: usize = t.iter().map(|t| t.obj.iter().filter(|&&o| o).count()).sum();
    let mut obj = 0.0;
    let mut rest = 0.0;
    for (p, t) in preds.iter().zip(t) {
        let [b, c, g, _] = p.shape();
        let nc = c - 5;
        for n in 0..b {
            for y in 0..g {
                for x in 0..g {
                    let i = (n * g + y) * g + x;
                    let pr = (1.0 / (1.0 + (-p.at([n, 0, y, x])).exp())).clamp(P_CLAMP, 1.0 - P_CLAMP);
                    let bce = if t.obj[i] { -pr.ln() } else { -(1.0 - pr).ln() };
                    obj += bce / (b * g * g) as f64;
                    if t.obj[i] {
                        let z: Vec<f64> = (0..nc).map(|k| p.at([n, 1 + k, y, x])).collect();
                        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                        rest += lse - z[t.class[i]];
                        for k in 0..4 {
                            rest += (p.at([n, 1 + nc + k, y, x]) - t.boxes[i][k]).powi(2);
                        }
                    }
                }
            }
        }
    }
    obj + rest / npos.max(1) as f64
}

#[test]
fn detection_loss_matches_definition_and_differences() {
    let mut r = rng(60);
    for _ in 0..10 {
        let nc = r.gen_range(1..=3);
        let batch = r.gen_range(1..=2);
        let t = random_targets(&mut r, batch, nc, 64);
        let preds: Vec<Tensor<f64>> = t.iter().map(|t| rand_t(&mut r, [batch, 5 + nc, t.grid, t.grid])).collect();
        let (parts, _) = detection_loss_values(&preds.iter().collect::<Vec<_>>(), &t).unwrap();
        let want = loss_oracle(&preds, &t);
        assert!((parts.total() - want).abs() <= 1e-12 * want.abs().max(1.0));

        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = preds.iter().map(|p| g.leaf(p.clone(), true)).collect();
        let (l, _) = detection_loss(&mut g, &vars, &t).unwrap();
        g.backward(l).unwrap();
        for s in 0..3 {
            let an = g.grad(vars[s]).unwrap().data().to_vec();
            let fd = fd_grad5(
                |v: &[f64]| {
                    let mut p = preds.clone();
                    p[s] = Tensor::new(p[s].shape(), v.to_vec()).unwrap();
                    loss_oracle(&p, &t)
                },
                preds[s].data(),
                1e-3,
            );
            let e = an.iter().zip(&fd).map(|(a, c)| (a - c).abs() / a.abs().max(c.abs()).max(1e-8)).fold(0.0, f64::max);
            assert!(e <= 1e-5, "scale {} gradient error {:.3e}", s, e);
        }
    }
}

fn perfect(t: &[ScaleTargets], nc: usize) -> Vec<Tensor<f64>> {
    t.iter()
        .map(|t| {
            let g = t.grid;
            Tensor::from_fn([t.batch, 5 + nc, g, g], |[n, c, y, x]| {
                let i = (n * g + y) * g + x;
                if c == 0 {
                    return if t.obj[i] { 50.0 } else { -50.0 };
                }
                if c <= nc {
                    return if t.obj[i] && c - 1 == t.class[i] { 50.0 } else { -50.0 };
                }
                if t.obj[i] {
                    t.boxes[i][c - 1 - nc]
                } else {
                    0.0
                }
            })
        })
        .collect()
}

#[test]
fn perfect_predictions_and_quadratic_box_term() {
    let mut r = rng(61);
    let t = random_targets(&mut r, 2, 3, 64);
    let mut p = perfect(&t, 3);
    let (parts, _) = detection_loss_values(&p.iter().collect::<Vec<_>>(), &t).unwrap();
    assert!(parts.total() < 1e-5, "{:?}", parts);

    let g = t[1].grid;
    let i = t[1].obj.iter().position(|&o| o).unwrap();
    let (n, y, x) = (i / (g * g), (i / g) % g, i % g);
    let c = 1 + 3 + 2;
    let base = p[1].at([n, c, y, x]);
    p[1].set([n, c, y, x], base + 0.05);
    let b1 = detection_loss_values(&p.iter().collect::<Vec<_>>(), &t).unwrap().0.boxes;
    p[1].set([n, c, y, x], base + 0.1);
    let b2 = detection_loss_values(&p.iter().collect::<Vec<_>>(), &t).unwrap().0.boxes;
    assert!((b2 / b1 - 4.0).abs() < 1e-9);
}

#[test]
fn detection_loss_rejects_bad_layout() {
    let mut r = rng(62);
    let t = random_targets(&mut r, 1, 2, 64);
    let short: Vec<Tensor<f64>> = t.iter().map(|t| Tensor::zeros([1, 5, t.grid, t.grid])).collect();
    assert!(detection_loss_values(&short.iter().collect::<Vec<_>>(), &t).is_err());
    let wrong_grid: Vec<Tensor<f64>> = t.iter().map(|t| Tensor::zeros([1, 7, t.grid + 1, t.grid + 1])).collect();
    assert!(detection_loss_values(&wrong_grid.iter().collect::<Vec<_>>(), &t).is_err());
    let ok: Vec<Tensor<f64>> = t.iter().map(|t| Tensor::zeros([1, 7, t.grid, t.grid])).collect();
    assert!(detection_loss_values(&ok.iter().collect::<Vec<_>>()[..2], &t).is_err());
}

fn small_cfg() -> BilevelConfig {
    BilevelConfig { epochs: 2, warmup_epochs: 1, batch_size: 4, seed: 5, ..Default::default() }
}

#[test]
fn steps_touch_only_their_own_parameters() {
    let d = data(8, 1);
    let mut s = Searcher::<f32>::new(&mini(3), &small_cfg()).unwrap();
    let batch = d.batch::<f32>(&[0, 1, 2, 3]).unwrap();
    let (w0, a0) = (s.net.weights.fingerprint(), s.net.arch.store.fingerprint());
    s.weight_step(&batch, &mut rng(1), 1.0).unwrap();
    let (w1, a1) = (s.net.weights.fingerprint(), s.net.arch.store.fingerprint());
    assert_eq!(a0, a1);
    assert_ne!(w0, w1);
    s.arch_step(&batch, &mut rng(2), 1.0).unwrap();
    let (w2, a2) = (s.net.weights.fingerprint(), s.net.arch.store.fingerprint());
    assert_eq!(w1, w2);
    assert_ne!(a1, a2);
}

fn batch_loss(s: &Searcher<f64>, b: &Batch<f64>, seed: u64, tau: f64) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(b.images.clone());
    let mut r = rng(seed);
    let out = s.net.forward(&mut g, x, ForwardMode::Search { rng: &mut r, tau }, GradTargets::NONE).unwrap();
    let vals: Vec<&Tensor<f64>> = out.preds.iter().map(|&p| g.value(p)).collect();
    detection_loss_values(&vals, &b.targets).unwrap().0.total()
}

#[test]
fn small_steps_decrease_the_batch_loss() {
    let d = data(4, 2);
    let b = d.batch::<f64>(&[0, 1, 2, 3]).unwrap();
    let mut r = rng(63);
    for trial in 0..3 {
        let seed = r.gen();
        let base = BilevelConfig { weight_decay: 0.0, grad_clip: 0.0, seed: trial, ..Default::default() };
        for arch in [false, true] {
            let mut decreased = false;
            for lr in [1e-1, 1e-2, 1e-3, 1e-4] {
                let cfg = BilevelConfig { weight_lr: lr, arch_lr: lr, ..base.clone() };
                let mut s = Searcher::<f64>::new(&mini(3), &cfg).unwrap();
                if arch {
                    // Non-uniform logits so that the step has something to move.
                    for id in s.net.arch.store.ids().collect::<Vec<_>>() {
                        for v in s.net.arch.store.get_mut(id).data_mut() {
                            *v = r.gen_range(-0.5..0.5);
                        }
                    }
                }
                let before = batch_loss(&s, &b, seed, 1.0);
                let reported = if arch {
                    s.arch_step(&b, &mut rng(seed), 1.0).unwrap()
                } else {
                    s.weight_step(&b, &mut rng(seed), 1.0).unwrap()
                };
                assert!((reported - before).abs() <= 1e-9 * before);
                if batch_loss(&s, &b, seed, 1.0) < before {
                    decreased = true;
                    break;
                }
            }
            assert!(decreased, "no learning rate decreased the loss (arch step {})", arch);
        }
    }
}

#[test]
fn zero_epochs_derive_the_initial_logits() {
    let spec = mini(3);
    let cfg = BilevelConfig { epochs: 0, warmup_epochs: 0, ..small_cfg() };
    let out = run_search::<f32>(&spec, &data(8, 3), &cfg).unwrap();
    assert_eq!(out.genotype, derive(&ArchParams::<f32>::new(&spec).unwrap(), &spec).unwrap());
    assert!(out.metrics.epochs.is_empty());
}

#[test]
fn search_is_reproducible_and_sharpens_logits() {
    let spec = mini(3);
    let d = data(24, 4);
    let cfg = BilevelConfig { epochs: 3, ..small_cfg() };
    let a = run_search::<f32>(&spec, &d, &cfg).unwrap();
    let b = run_search::<f32>(&spec, &d, &cfg).unwrap();
    assert_eq!(a.genotype, b.genotype);
    assert_eq!(a.searcher.net.weights.fingerprint(), b.searcher.net.weights.fingerprint());
    assert_eq!(a.searcher.net.arch.store.fingerprint(), b.searcher.net.arch.store.fingerprint());
    let wl = |m: &TrainMetrics| m.epochs.iter().map(|e| e.weight_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(wl(&a.metrics), wl(&b.metrics));

    let m = &a.metrics.epochs;
    assert_eq!(m.len(), 3);
    assert!(m[0].arch_loss.is_nan());
    assert!(m[1].arch_loss.is_finite());
    assert!(m.windows(2).all(|w| w[1].tau <= w[0].tau));
    let first = m[0].alpha_entropy_ops + m[0].alpha_entropy_edges + m[0].alpha_entropy_expansion;
    let last = m[2].alpha_entropy_ops + m[2].alpha_entropy_edges + m[2].alpha_entropy_expansion;
    assert!(last < first, "entropy {} -> {}", first, last);

    let other = run_search::<f32>(&spec, &d, &BilevelConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(other.searcher.net.weights.fingerprint(), a.searcher.net.weights.fingerprint());
}

#[test]
fn uniform_logits_have_maximal_entropy() {
    let a = ArchParams::<f64>::new(&mini(3)).unwrap();
    let (o, e, x) = alpha_entropies(&a);
    // Operators mix 4- and 3-way choices, expansions 3- and 2-way ones.
    assert!(o > 3f64.ln() && o < 4f64.ln() + 1e-12);
    assert!(x > 2f64.ln() && x < 3f64.ln() + 1e-12);
    assert!(e > 3f64.ln() && e < 5f64.ln());
}

#[test]
fn search_rejects_mismatched_classes() {
    assert!(run_search::<f32>(&mini(5), &data(8, 0), &small_cfg()).is_err());
    let bad = BilevelConfig { split_ratio: 1.0, ..small_cfg() };
    assert!(run_search::<f32>(&mini(3), &data(8, 0), &bad).is_err());
}

#[test]
fn derived_training_descends_and_repeats() {
    let spec = mini(3);
    let gt = derive(&ArchParams::<f32>::new(&spec).unwrap(), &spec).unwrap();
    let d = data(48, 7);
    let cfg = BilevelConfig { batch_size: 8, seed: 3, ..Default::default() };
    let run = || {
        let mut net = DerivedNet::<f32>::from_scratch(&gt, 3).unwrap();
        let m = train_derived(&mut net, &d, 10, &cfg).unwrap();
        (m, net.weights.fingerprint())
    };
    let (m, w) = run();
    let losses: Vec<f64> = m.epochs.iter().map(|e| e.weight_loss).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    let violations = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(violations <= 1, "{:?}", losses);
    assert!(losses[9] < losses[0]);
    let (m2, w2) = run();
    assert_eq!(w, w2);
    assert_eq!(m.epochs.iter().map(|e| e.weight_loss.to_bits()).collect::<Vec<_>>(), m2.epochs.iter().map(|e| e.weight_loss.to_bits()).collect::<Vec<_>>());
}

#[test]
fn metrics_and_checkpoints_round_trip() {
    let spec = mini(3);
    let out = run_search::<f32>(&spec, &data(8, 8), &BilevelConfig { epochs: 2, ..small_cfg() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("metrics.csv");
    out.metrics.write_csv(&csv).unwrap();
    let header = std::fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    assert_eq!(
        header,
        "epoch,weight_loss,arch_loss,tau,alpha_entropy_ops,alpha_entropy_edges,alpha_entropy_expansion,seconds"
    );
    let back = TrainMetrics::read_csv(&csv).unwrap();
    assert_eq!(back.epochs.len(), 2);
    assert_eq!(back.epochs[1].weight_loss, out.metrics.epochs[1].weight_loss);

    let ck = ArchCheckpoint::from_arch(&spec, &out.searcher.net.arch);
    let p = dir.path().join("arch.json");
    ck.save(&p).unwrap();
    let arch = ArchCheckpoint::load(&p).unwrap().arch().unwrap();
    assert_eq!(derive(&arch, &spec).unwrap(), out.genotype);
}
