//! Bi-level search: alternating weight and architecture updates on two
//! halves of the training set, plus plain training of derived networks.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chansearch::temperature;
use crate::data::{Batch, Dataset, ScaleTargets};
use crate::error::{config, input, Result};
use crate::graph::{Graph, Var};
use crate::ops::{log_softmax, sigmoid};
use crate::params::{ParamStore, Sgd};
use crate::supernet::{derive, ArchParams, DerivedNet, ForwardMode, Genotype, GradTargets, SearchSpaceSpec, SuperNet};
use crate::tensor::{Real, Tensor};

/// Objectness probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilevelConfig {
    pub epochs: usize,
    pub weight_lr: f64,
    pub arch_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub split_ratio: f64,
    /// Leading epochs with weight steps only; counted inside `epochs`.
    pub warmup_epochs: usize,
    pub tau0: f64,
    pub tau_min: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Global gradient-norm limit for weight steps; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            epochs: 50,
            weight_lr: 0.05,
            arch_lr: 0.5,
            momentum: 0.9,
            weight_decay: 5e-4,
            split_ratio: 0.5,
            warmup_epochs: 1,
            tau0: 5.0,
            tau_min: 0.1,
            seed: 0,
            batch_size: 8,
            grad_clip: 10.0,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_lr > 0.0 && self.arch_lr > 0.0) {
            return Err(config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config("weight decay must be non-negative"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(config("split ratio must lie in (0, 1)"));
        }
        if !(self.tau0 > self.tau_min && self.tau_min > 0.0) {
            return Err(config("need tau0 > tau_min > 0"));
        }
        if self.batch_size == 0 {
            return Err(config("batch size must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(config("grad_clip must be non-negative"));
        }
        Ok(())
    }
}

/// Seeded shuffle, then the first `round(ratio · N)` samples train weights
/// and the rest train the architecture.
pub fn split_dataset(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(config(format!("split ratio {} outside (0, 1)", ratio)));
    }
    let nw = (ratio * n as f64).round() as usize;
    if nw == 0 || nw == n {
        return Err(config(format!("split of {} samples at ratio {} leaves one side empty", n, ratio)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let alpha = idx.split_off(nw);
    Ok((idx, alpha))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub objectness: f64,
    pub boxes: f64,
    pub classes: f64,
    pub positives: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.objectness + self.boxes + self.classes
    }
}

/// Loss value and its gradient with respect to each prediction tensor.
pub fn detection_loss_values<T: Real>(preds: &[&Tensor<T>], targets: &[ScaleTargets]) -> Result<(LossParts, Vec<Tensor<T>>)> {
    if preds.len() != targets.len() {
        return Err(input(format!("{} prediction scales for {} target scales", preds.len(), targets.len())));
    }
    let mut ch = None;
    for (p, t) in preds.iter().zip(targets) {
        let s = p.shape();
        if s[0] != t.batch || s[2] != t.grid || s[3] != t.grid {
            return Err(input(format!("prediction {:?} does not match a {}-image {}x{} grid", s, t.batch, t.grid, t.grid)));
        }
        if s[1] < 6 || ch.is_some_and(|c| c != s[1]) {
            return Err(input(format!("prediction layout of {} channels is not 1 + classes + 4", s[1])));
        }
        ch = Some(s[1]);
        for (&o, &c) in t.obj.iter().zip(&t.class) {
            if o && c >= s[1] - 5 {
                return Err(input(format!("target class {} with {} class channels", c, s[1] - 5)));
            }
        }
    }
    let npos = targets.iter().map(|t| t.positives()).sum::<usize>();
    let pos_norm = 1.0 / npos.max(1) as f64;
    let mut parts = LossParts { positives: npos, ..Default::default() };
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        let [b, c, g, _] = p.shape();
        let nc = c - 5;
        let cells = (b * g * g) as f64;
        let mut gr = Tensor::zeros(p.shape());
        for n in 0..b {
            for y in 0..g {
                for x in 0..g {
                    let i = (n * g + y) * g + x;
                    let z = p.at([n, 0, y, x]).f64();
                    let target = if t.obj[i] { 1.0 } else { 0.0 };
                    let raw = sigmoid(z);
                    let pr = raw.clamp(P_CLAMP, 1.0 - P_CLAMP);
                    parts.objectness -= (target * pr.ln() + (1.0 - target) * (1.0 - pr).ln()) / cells;
                    let dz = if raw == pr { (pr - target) / cells } else { 0.0 };
                    gr.set([n, 0, y, x], T::c(dz));
                    if !t.obj[i] {
                        continue;
                    }
                    let logits: Vec<f64> = (0..nc).map(|k| p.at([n, 1 + k, y, x]).f64()).collect();
                    let lsm = log_softmax(&logits)?;
                    let cls = t.class[i];
                    parts.classes -= lsm[cls] * pos_norm;
                    for k in 0..nc {
                        let d = lsm[k].exp() - if k == cls { 1.0 } else { 0.0 };
                        gr.set([n, 1 + k, y, x], T::c(d * pos_norm));
                    }
                    for k in 0..4 {
                        let r = p.at([n, 1 + nc + k, y, x]).f64() - t.boxes[i][k];
                        parts.boxes += r * r * pos_norm;
                        gr.set([n, 1 + nc + k, y, x], T::c(2.0 * r * pos_norm));
                    }
                }
            }
        }
        grads.push(gr);
    }
    Ok((parts, grads))
}

/// Objectness BCE averaged over cells (summed over scales), plus box squared
/// error and class cross-entropy averaged over positive cells.
pub fn detection_loss<T: Real>(g: &mut Graph<T>, preds: &[Var], targets: &[ScaleTargets]) -> Result<(Var, LossParts)> {
    let values: Vec<&Tensor<T>> = preds.iter().map(|&p| g.value(p)).collect();
    let (parts, grads) = detection_loss_values(&values, targets)?;
    let v = g.fused_scalar(T::c(parts.total()), preds.to_vec(), grads);
    Ok((v, parts))
}

/// Scales `grads` so that their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / norm);
        for t in grads.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Optimiser state of one search run.
pub struct Searcher<T> {
    pub net: SuperNet<T>,
    pub weight_opt: Sgd<T>,
    pub arch_opt: Sgd<T>,
    pub config: BilevelConfig,
}

impl<T: Real> Searcher<T> {
    pub fn new(spec: &SearchSpaceSpec, config: &BilevelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Searcher {
            net: SuperNet::new(spec, config.seed)?,
            weight_opt: Sgd::new(config.weight_lr, config.momentum, config.weight_decay),
            arch_opt: Sgd::new(config.arch_lr, 0.0, 0.0),
            config: config.clone(),
        })
    }

    fn loss(&self, batch: &Batch<T>, rng: &mut ChaCha8Rng, tau: f64, grads: GradTargets) -> Result<(Graph<T>, Var, crate::supernet::ForwardOutput, LossParts)> {
        let mut g = Graph::new();
        let x = g.constant(batch.images.clone());
        let out = self.net.forward(&mut g, x, ForwardMode::Search { rng, tau }, grads)?;
        let (loss, parts) = detection_loss(&mut g, &out.preds, &batch.targets)?;
        Ok((g, loss, out, parts))
    }

    /// One SGD step on the network weights; architecture logits untouched.
    pub fn weight_step(&mut self, batch: &Batch<T>, rng: &mut ChaCha8Rng, tau: f64) -> Result<f64> {
        let (mut g, loss, out, parts) = self.loss(batch, rng, tau, GradTargets::WEIGHTS)?;
        g.backward(loss)?;
        let mut grads = out.weight_binder.grads(&g);
        clip_grad_norm(&mut grads, self.config.grad_clip);
        self.weight_opt.step(&mut self.net.weights, &grads)?;
        Ok(parts.total())
    }

    /// One first-order SGD step on the architecture logits; weights untouched.
    pub fn arch_step(&mut self, batch: &Batch<T>, rng: &mut ChaCha8Rng, tau: f64) -> Result<f64> {
        let (mut g, loss, out, parts) = self.loss(batch, rng, tau, GradTargets::ARCH)?;
        g.backward(loss)?;
        let grads = out.arch_binder.grads(&g);
        self.arch_opt.step(&mut self.net.arch.store, &grads)?;
        Ok(parts.total())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub weight_loss: f64,
    /// NaN for warmup epochs and plain training.
    pub arch_loss: f64,
    pub tau: f64,
    pub alpha_entropy_ops: f64,
    pub alpha_entropy_edges: f64,
    pub alpha_entropy_expansion: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// Batch loss of the first weight step, before any update.
    pub initial_weight_loss: Option<f64>,
    pub genotype: Option<String>,
}

impl TrainMetrics {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let epochs = r.deserialize().collect::<std::result::Result<Vec<EpochMetrics>, _>>()?;
        Ok(TrainMetrics { epochs, ..Default::default() })
    }
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Mean softmax entropy of the operator, edge and expansion logits.
pub fn alpha_entropies<T: Real>(arch: &ArchParams<T>) -> (f64, f64, f64) {
    let mut fam = [(0.0, 0usize); 3];
    let mut add = |k: usize, id| {
        let p = crate::ops::softmax(&arch.values(id)).expect("non-empty logits");
        fam[k].0 += entropy(&p);
        fam[k].1 += 1;
    };
    let l = &arch.layout;
    let c3 = |c: &crate::supernet::arch::C3Ids, add: &mut dyn FnMut(usize, crate::params::ParamId)| {
        add(2, c.expansion);
        for b in &c.bottlenecks {
            add(0, b.ops);
            add(2, b.hidden);
            add(2, b.out);
        }
    };
    for s in &l.stages {
        add(0, s.down.ops);
        add(2, s.down.expansion);
        if let Some(c) = &s.c3 {
            c3(c, &mut add);
        }
    }
    for f in &l.fpn {
        for n in &f.nodes {
            add(1, n.edges);
            for e in &n.per_edge {
                add(0, e.ops);
                add(2, e.expansion);
            }
        }
        for c in &f.c3 {
            c3(c, &mut add);
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(fam[0]), mean(fam[1]), mean(fam[2]))
}

fn batches(idx: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut v = idx.to_vec();
    v.shuffle(rng);
    v.chunks(size).map(|c| c.to_vec()).collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub struct SearchOutcome<T> {
    pub genotype: Genotype,
    pub metrics: TrainMetrics,
    pub searcher: Searcher<T>,
}

/// Warmup (weight steps only), then per-batch alternation of weight and
/// architecture steps; τ decays per iteration. Derives the genotype at the end.
pub fn run_search<T: Real>(spec: &SearchSpaceSpec, data: &Dataset, cfg: &BilevelConfig) -> Result<SearchOutcome<T>> {
    cfg.validate()?;
    if data.num_classes != spec.num_classes {
        return Err(config(format!("dataset has {} classes, search space {}", data.num_classes, spec.num_classes)));
    }
    let (dw, da) = split_dataset(data.len(), cfg.split_ratio, cfg.seed)?;
    let mut s = Searcher::<T>::new(spec, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let per_epoch = dw.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut metrics = TrainMetrics::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let wb = batches(&dw, cfg.batch_size, &mut rng);
        let mut ab = batches(&da, cfg.batch_size, &mut rng).into_iter().cycle();
        let (mut wl, mut al) = (Vec::new(), Vec::new());
        let mut tau = temperature(step, total, cfg.tau0, cfg.tau_min)?;
        for b in &wb {
            tau = temperature(step, total, cfg.tau0, cfg.tau_min)?;
            let batch = data.batch::<T>(b)?;
            let l = s.weight_step(&batch, &mut rng, tau)?;
            metrics.initial_weight_loss.get_or_insert(l);
            wl.push(l);
            if epoch >= cfg.warmup_epochs {
                let a = ab.next().expect("non-empty architecture split");
                let abatch = data.batch::<T>(&a)?;
                al.push(s.arch_step(&abatch, &mut rng, tau)?);
            }
            step += 1;
        }
        let (eo, ee, ex) = alpha_entropies(&s.net.arch);
        metrics.epochs.push(EpochMetrics {
            epoch,
            weight_loss: mean(&wl),
            arch_loss: mean(&al),
            tau,
            alpha_entropy_ops: eo,
            alpha_entropy_edges: ee,
            alpha_entropy_expansion: ex,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let genotype = derive(&s.net.arch, spec)?;
    metrics.genotype = Some(genotype.to_json()?);
    Ok(SearchOutcome { genotype, metrics, searcher: s })
}

/// Plain SGD training of a derived network on the whole dataset.
pub fn train_derived<T: Real>(net: &mut DerivedNet<T>, data: &Dataset, epochs: usize, cfg: &BilevelConfig) -> Result<TrainMetrics> {
    cfg.validate()?;
    let mut opt = Sgd::new(cfg.weight_lr, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut metrics = TrainMetrics { genotype: Some(net.genotype.to_json()?), ..Default::default() };
    for epoch in 0..epochs {
        let t0 = Instant::now();
        let mut wl = Vec::new();
        for b in batches(&all, cfg.batch_size, &mut rng) {
            let batch = data.batch::<T>(&b)?;
            let mut g = Graph::new();
            let x = g.constant(batch.images.clone());
            let (preds, binder) = net.forward(&mut g, x, true)?;
            let (loss, parts) = detection_loss(&mut g, &preds, &batch.targets)?;
            g.backward(loss)?;
            let mut grads = binder.grads(&g);
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut net.weights, &grads)?;
            metrics.initial_weight_loss.get_or_insert(parts.total());
            wl.push(parts.total());
        }
        metrics.epochs.push(EpochMetrics {
            epoch,
            weight_loss: mean(&wl),
            arch_loss: f64::NAN,
            tau: f64::NAN,
            alpha_entropy_ops: f64::NAN,
            alpha_entropy_edges: f64::NAN,
            alpha_entropy_expansion: f64::NAN,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}

/// Architecture logits saved after a search, for later derivation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchCheckpoint {
    pub spec: SearchSpaceSpec,
    pub alpha: ParamStore<f32>,
}

impl ArchCheckpoint {
    pub fn from_arch<T: Real>(spec: &SearchSpaceSpec, arch: &ArchParams<T>) -> Self {
        let mut alpha = ParamStore::new();
        for (_, p) in arch.store.iter() {
            alpha.add(p.name.clone(), p.value.cast());
        }
        ArchCheckpoint { spec: spec.clone(), alpha }
    }

    pub fn arch(&self) -> Result<ArchParams<f32>> {
        let mut a = ArchParams::new(&self.spec)?;
        a.store.load_from(&self.alpha)?;
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
