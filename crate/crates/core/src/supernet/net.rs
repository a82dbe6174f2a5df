//! The weight-sharing detection supernet and its forward pass.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chansearch::{self, expanded_channels, gumbel_noise, gumbel_softmax_var, RATES_C3, RATES_WIDE};
use crate::error::{input, Result};
use crate::graph::{Graph, Var};
use crate::kernelreuse::{build_mask, compound_conv_var, CandidateKind, Mask, ALL_CANDIDATES, BANK, BOTTLENECK_CANDIDATES};
use crate::ops::ConvGeom;
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

use super::arch::{argmax_first, node_preds, ArchParams, C3Choice, C3Ids, Choices, EdgeChoice};
use super::spec::{C3Spec, SearchSpaceSpec, SCALES, SCALE_STRIDES};

/// A convolution whose structure is not searched (its width may still be
/// sliced by a neighbouring expansion choice).
#[derive(Clone, Debug)]
pub struct FixedConv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub stride: usize,
}

impl FixedConv {
    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, self.k / 2, 1)
    }
}

/// A searchable convolution backed by a 5x5 weight bank.
#[derive(Clone, Debug)]
pub struct SuperEdge {
    pub theta: ParamId,
    pub bias: ParamId,
    pub candidates: &'static [CandidateKind],
    pub masks: Vec<Mask>,
    /// Output width at expansion 1.0.
    pub max_out: usize,
    pub stride: usize,
    /// Nearest 2x up-samplings applied to the input first.
    pub upsample: usize,
}

#[derive(Clone, Debug)]
pub struct BottleneckNet {
    pub conv1: FixedConv,
    pub conv2: SuperEdge,
}

#[derive(Clone, Debug)]
pub struct C3Net {
    pub spec: C3Spec,
    pub cv1: FixedConv,
    pub cv2: FixedConv,
    pub bottlenecks: Vec<BottleneckNet>,
    /// Acts on `concat(bottleneck path, cv2 path)`; applied as a sum of two
    /// convolutions over the blocks `[0, u)` and `[h, h + a)` of its input axis.
    pub cv3: FixedConv,
}

#[derive(Clone, Debug)]
pub struct SppNet {
    pub cv1: FixedConv,
    pub cv2: FixedConv,
    pub pools: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct FusionNet {
    /// Strides of the three block inputs, in predecessor order.
    pub input_scales: [usize; 3],
    pub node_scales: [usize; 3],
    pub node_channels: [usize; 3],
    /// `edges[j][p]`: edge from predecessor `p` into new node `j`.
    pub edges: Vec<Vec<SuperEdge>>,
    pub c3: Vec<C3Net>,
}

#[derive(Clone, Debug)]
pub struct StageNet {
    pub down: SuperEdge,
    pub c3: Option<C3Net>,
}

/// Model weights plus architecture logits.
#[derive(Clone, Debug)]
pub struct SuperNet<T> {
    pub spec: SearchSpaceSpec,
    pub weights: ParamStore<T>,
    pub arch: ArchParams<T>,
    pub stem: FixedConv,
    pub stages: Vec<StageNet>,
    pub spp: SppNet,
    /// Top-down block, then bottom-up block.
    pub fpn: [FusionNet; 2],
    /// Prediction convolutions for strides 8, 16, 32.
    pub heads: [FixedConv; 3],
}

/// Channels per head output cell: objectness, class logits, box.
pub fn head_channels(num_classes: usize) -> usize {
    1 + num_classes + 4
}

const INIT_GAIN: f64 = 3.0;

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    /// Uniform in `±sqrt(3 / fan_in)`, i.e. unit-variance pre-activations for
    /// unit-variance inputs.
    fn uniform(&mut self, name: String, shape: [usize; 4], fan_in: usize) -> ParamId {
        let bound = (INIT_GAIN / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::c(rng.gen_range(-bound..bound)));
        self.store.add(name, t)
    }

    fn bias(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::vector(vec![T::zero(); n]))
    }

    fn fixed(&mut self, name: &str, cout: usize, cin: usize, k: usize, stride: usize) -> FixedConv {
        let w = self.uniform(format!("{}.w", name), [cout, cin, k, k], cin * k * k);
        let b = self.bias(format!("{}.b", name), cout);
        FixedConv { w, b, k, stride }
    }

    fn edge(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        candidates: &'static [CandidateKind],
        stride: usize,
        upsample: usize,
    ) -> Result<SuperEdge> {
        // The 3x3 fan-in sits between the smallest and largest candidate.
        let theta = self.uniform(format!("{}.theta", name), [cout, cin, BANK, BANK], cin * 9);
        let bias = self.bias(format!("{}.b", name), cout);
        let masks = candidates.iter().map(|c| build_mask(c.op())).collect::<Result<_>>()?;
        Ok(SuperEdge { theta, bias, candidates, masks, max_out: cout, stride, upsample })
    }

    fn c3(&mut self, name: &str, cin: usize, spec: C3Spec) -> Result<C3Net> {
        let h = spec.hidden();
        let cv1 = self.fixed(&format!("{}.cv1", name), h, cin, 1, 1);
        let cv2 = self.fixed(&format!("{}.cv2", name), h, cin, 1, 1);
        let mut bottlenecks = Vec::new();
        for j in 0..spec.depth {
            let conv1 = self.fixed(&format!("{}.m{}.conv1", name, j), h, h, 1, 1);
            let conv2 = self.edge(&format!("{}.m{}.conv2", name, j), h, h, &BOTTLENECK_CANDIDATES, 1, 0)?;
            bottlenecks.push(BottleneckNet { conv1, conv2 });
        }
        let cv3 = self.fixed(&format!("{}.cv3", name), spec.channels, 2 * h, 1, 1);
        Ok(C3Net { spec, cv1, cv2, bottlenecks, cv3 })
    }
}

/// How `(from, to)` strides are aligned: `(conv stride, 2x up-samplings)`.
pub fn alignment(from: usize, to: usize) -> (usize, usize) {
    if from < to {
        (to / from, 0)
    } else {
        (1, (from / to).trailing_zeros() as usize)
    }
}

impl<T: Real> SuperNet<T> {
    /// Allocates every weight with a seeded uniform initialisation and zero
    /// architecture logits.
    pub fn new(spec: &SearchSpaceSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let arch = ArchParams::new(spec)?;
        let mut weights = ParamStore::new();
        let mut init = Init { store: &mut weights, rng: ChaCha8Rng::seed_from_u64(seed) };

        let stem = init.fixed("stem", spec.focus_channels, 12, 3, 1);
        let mut stages = Vec::new();
        let mut width = spec.focus_channels;
        for (i, st) in spec.stages.iter().enumerate() {
            let down = init.edge(&format!("down{}", i), st.down_channels, width, &ALL_CANDIDATES, 2, 0)?;
            width = st.down_channels;
            let c3 = match st.c3 {
                Some(c) => {
                    let net = init.c3(&format!("c3_{}", i), width, c)?;
                    width = c.channels;
                    Some(net)
                }
                None => None,
            };
            stages.push(StageNet { down, c3 });
        }
        let c = spec.spp_channels();
        let spp = SppNet {
            cv1: init.fixed("spp.cv1", c / 2, width, 1, 1),
            cv2: init.fixed("spp.cv2", c, 2 * c, 1, 1),
            pools: [5, 9, 13],
        };

        let bb = spec.backbone_out_channels();
        let f = spec.fpn_channels;
        let td = Self::fusion(
            &mut init,
            spec,
            "topdown",
            [SCALE_STRIDES[2], SCALE_STRIDES[1], SCALE_STRIDES[0]],
            [bb[2], bb[1], bb[0]],
            [SCALE_STRIDES[2], SCALE_STRIDES[1], SCALE_STRIDES[0]],
            [f[2], f[1], f[0]],
        )?;
        let bu = Self::fusion(
            &mut init,
            spec,
            "bottomup",
            SCALE_STRIDES,
            f,
            SCALE_STRIDES,
            f,
        )?;
        let hc = head_channels(spec.num_classes);
        let heads = [0, 1, 2].map(|s| init.fixed(&format!("head{}", SCALE_STRIDES[s]), hc, f[s], 1, 1));
        Ok(SuperNet { spec: spec.clone(), weights, arch, stem, stages, spp, fpn: [td, bu], heads })
    }

    fn fusion(
        init: &mut Init<'_, T>,
        spec: &SearchSpaceSpec,
        tag: &str,
        input_scales: [usize; 3],
        input_widths: [usize; 3],
        node_scales: [usize; 3],
        node_channels: [usize; 3],
    ) -> Result<FusionNet> {
        let mut scales: Vec<usize> = input_scales.to_vec();
        let mut widths: Vec<usize> = input_widths.to_vec();
        let mut edges = Vec::new();
        let mut c3 = Vec::new();
        for j in 0..SCALES {
            let mut row = Vec::new();
            for p in 0..node_preds(j) {
                let (stride, up) = alignment(scales[p], node_scales[j]);
                row.push(init.edge(
                    &format!("{}.node{}.e{}", tag, j, p),
                    node_channels[j],
                    widths[p],
                    &ALL_CANDIDATES,
                    stride,
                    up,
                )?);
            }
            edges.push(row);
            let cs = C3Spec { channels: node_channels[j], depth: spec.fpn_c3_depth };
            c3.push(init.c3(&format!("{}.c3_{}", tag, j), node_channels[j], cs)?);
            scales.push(node_scales[j]);
            widths.push(node_channels[j]);
        }
        Ok(FusionNet { input_scales, node_scales, node_channels, edges, c3 })
    }

    pub fn weight_count(&self) -> usize {
        self.weights.numel()
    }
}

/// How architecture decisions are made during a forward pass.
pub enum ForwardMode<'a> {
    /// Gumbel-sampled expansions with straight-through gates and
    /// softmax-weighted operator and edge mixtures.
    Search { rng: &'a mut dyn RngCore, tau: f64 },
    /// Argmax expansions and softmax mixtures, without noise.
    Deterministic,
    /// One fixed architecture: one-hot operators, chosen edges only.
    Forced(&'a Choices),
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradTargets {
    pub weights: bool,
    pub arch: bool,
}

impl GradTargets {
    pub const NONE: GradTargets = GradTargets { weights: false, arch: false };
    pub const WEIGHTS: GradTargets = GradTargets { weights: true, arch: false };
    pub const ARCH: GradTargets = GradTargets { weights: false, arch: true };
}

/// Expansion actually used by a searchable layer in one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub name: String,
    pub expansion: f64,
    /// Width at expansion 1.0.
    pub base: usize,
    pub channels: usize,
    /// The layer's activated output, when it is a tensor of its own (fusion
    /// edges are summed inside the node and leave this empty).
    pub output: Option<Var>,
}

pub struct ForwardOutput {
    /// Raw head outputs at strides 8, 16, 32.
    pub preds: [Var; 3],
    /// Bottom-up fused features feeding the heads.
    pub features: [Var; 3],
    pub trace: Vec<LayerTrace>,
    pub weight_binder: Binder,
    pub arch_binder: Binder,
}

/// Operator (or edge) weights of a fusion edge.
#[derive(Clone, Copy, Debug)]
pub enum Mixing {
    /// Raw logits; normalised with a softmax.
    Logits(Var),
    /// Already normalised weights, used as given.
    Normalized(Var),
}

/// One incoming edge of an FPN node.
pub struct FuseEdge<'a> {
    pub x: Var,
    pub upsample: usize,
    /// `C_out × C_in × 5 × 5` bank; sliced to `out_channels` filters and the
    /// input's width.
    pub theta: Var,
    pub bias: Option<Var>,
    pub ops: Mixing,
    pub masks: &'a [Mask],
    pub out_channels: usize,
    pub stride: usize,
    /// Straight-through expansion vector and the selected index.
    pub gate: Option<(Var, usize)>,
}

fn normalise<T: Real>(g: &mut Graph<T>, m: Mixing) -> Result<Var> {
    match m {
        Mixing::Logits(v) => g.softmax(v),
        Mixing::Normalized(v) => Ok(v),
    }
}

/// `compound_conv(x)` for one edge: up-sampling, bank slicing, the mixed
/// convolution and the expansion gate.
pub fn edge_conv<T: Real>(g: &mut Graph<T>, e: &FuseEdge<'_>) -> Result<Var> {
    let mut x = e.x;
    for _ in 0..e.upsample {
        x = g.upsample_nearest2x(x);
    }
    let cin = g.shape(x)[1];
    let bank = g.shape(e.theta);
    if cin > bank[1] || e.out_channels > bank[0] || e.out_channels == 0 {
        return Err(input(format!(
            "edge: {} -> {} channels do not fit a {}x{} bank",
            cin, e.out_channels, bank[0], bank[1]
        )));
    }
    let th = g.narrow(e.theta, 0, 0, e.out_channels)?;
    let th = g.narrow(th, 1, 0, cin)?;
    let b = match e.bias {
        Some(b) => Some(g.narrow(b, 0, 0, e.out_channels)?),
        None => None,
    };
    let alpha = normalise(g, e.ops)?;
    let y = compound_conv_var(g, x, th, b, alpha, e.masks, e.stride)?;
    match e.gate {
        Some((gate, i)) => g.mul_scalar_var(y, gate, i),
        None => Ok(y),
    }
}

/// `SiLU(norm(compound_conv(x)))` for a standalone searchable layer.
pub fn edge_forward<T: Real>(g: &mut Graph<T>, e: &FuseEdge<'_>) -> Result<Var> {
    let y = edge_conv(g, &FuseEdge { gate: None, ..*e })?;
    let y = g.sample_norm(y);
    let y = g.silu(y);
    match e.gate {
        Some((gate, i)) => g.mul_scalar_var(y, gate, i),
        None => Ok(y),
    }
}

/// Fuses the edges of one FPN node into `Σ_i w_i · compound_conv_i(x_i)`,
/// where the edge weights are the softmax of `edge_weights` (or plain 1 when
/// `None`). Edge outputs of different widths are added into their leading
/// channels. Predecessors must already sit at the node's resolution after
/// each edge's up-sampling and stride.
pub fn fuse_node<T: Real>(g: &mut Graph<T>, edges: &[FuseEdge<'_>], edge_weights: Option<Mixing>) -> Result<Var> {
    if edges.is_empty() {
        return Err(input("fuse_node without incoming edges"));
    }
    let w = match edge_weights {
        Some(m) => {
            let w = normalise(g, m)?;
            if g.value(w).numel() != edges.len() {
                return Err(input(format!(
                    "fuse_node: {} edge weights for {} edges",
                    g.value(w).numel(),
                    edges.len()
                )));
            }
            Some(w)
        }
        None => None,
    };
    let mut ys = Vec::with_capacity(edges.len());
    for (i, e) in edges.iter().enumerate() {
        let y = edge_conv(g, e)?;
        ys.push(match w {
            Some(w) => g.mul_scalar_var(y, w, i)?,
            None => y,
        });
    }
    if ys.len() == 1 {
        return Ok(ys[0]);
    }
    g.add_prefix(&ys)
}

struct Fwd<'n, 'g, 'm, T> {
    net: &'n SuperNet<T>,
    g: &'g mut Graph<T>,
    wb: Binder,
    ab: Binder,
    mode: ForwardMode<'m>,
    trace: Vec<LayerTrace>,
}

impl<'m, T: Real> Fwd<'_, '_, 'm, T> {
    fn forced(&self) -> Option<&'m Choices> {
        match &self.mode {
            ForwardMode::Forced(c) => Some(*c),
            _ => None,
        }
    }

    fn w(&mut self, id: ParamId) -> Var {
        self.wb.bind(self.g, &self.net.weights, id)
    }

    fn a(&mut self, id: ParamId) -> Var {
        self.ab.bind(self.g, &self.net.arch.store, id)
    }

    fn onehot(&mut self, n: usize, i: usize) -> Var {
        let t = Tensor::vector((0..n).map(|k| if k == i { T::one() } else { T::zero() }).collect());
        self.g.constant(t)
    }

    fn ops(&mut self, id: ParamId, n: usize, forced: Option<usize>) -> Mixing {
        match forced {
            Some(i) => Mixing::Normalized(self.onehot(n, i)),
            None => Mixing::Logits(self.a(id)),
        }
    }

    /// Picks an expansion index; in search mode also returns the
    /// straight-through gate vector.
    fn expansion(
        &mut self,
        id: ParamId,
        rates: &[f64],
        base: usize,
        forced: Option<usize>,
        name: String,
    ) -> Result<(usize, usize, Option<Var>)> {
        let (idx, gate) = match (&mut self.mode, forced) {
            (_, Some(i)) => (i, None),
            (ForwardMode::Deterministic, None) | (ForwardMode::Forced(_), None) => {
                (argmax_first(&self.net.arch.values(id)), None)
            }
            (ForwardMode::Search { rng, tau }, None) => {
                let tau = *tau;
                let noise = gumbel_noise(rates.len(), &mut **rng);
                let av = self.ab.bind(self.g, &self.net.arch.store, id);
                let relaxed = gumbel_softmax_var(self.g, av, &noise, tau)?;
                let idx = chansearch::argmax(&self.g.value(relaxed).to_f64_vec());
                let st = chansearch::straight_through(self.g, relaxed, idx)?;
                (idx, Some(st))
            }
        };
        let channels = expanded_channels(base, rates[idx])?;
        self.trace.push(LayerTrace { name, expansion: rates[idx], base, channels, output: None });
        Ok((idx, channels, gate))
    }

    fn gate(&mut self, y: Var, gate: Option<Var>, idx: usize) -> Result<Var> {
        match gate {
            Some(gv) => self.g.mul_scalar_var(y, gv, idx),
            None => Ok(y),
        }
    }

    /// Conv with the leading `out` filters and as many input channels as `x` has.
    fn fixed(&mut self, c: &FixedConv, x: Var, out: usize) -> Result<Var> {
        let w = self.w(c.w);
        let b = self.w(c.b);
        let cin = self.g.shape(x)[1];
        let w = self.g.narrow(w, 0, 0, out)?;
        let w = self.g.narrow(w, 1, 0, cin)?;
        let b = self.g.narrow(b, 0, 0, out)?;
        self.g.conv2d(x, w, Some(b), c.geom())
    }

    /// `SiLU(norm(conv))`.
    fn act(&mut self, c: &FixedConv, x: Var, out: usize) -> Result<Var> {
        let y = self.fixed(c, x, out)?;
        let y = self.g.sample_norm(y);
        Ok(self.g.silu(y))
    }

    fn act_full(&mut self, c: &FixedConv, x: Var) -> Result<Var> {
        let out = self.net.weights.get(c.w).shape()[0];
        self.act(c, x, out)
    }

    fn fixed_full(&mut self, c: &FixedConv, x: Var) -> Result<Var> {
        let out = self.net.weights.get(c.w).shape()[0];
        self.fixed(c, x, out)
    }

    #[allow(clippy::too_many_arguments)]
    fn edge(
        &mut self,
        e: &SuperEdge,
        x: Var,
        ops_id: ParamId,
        exp_id: ParamId,
        forced: Option<EdgeChoice>,
        name: String,
    ) -> Result<Var> {
        let (idx, out, gate) = self.expansion(exp_id, &RATES_WIDE, e.max_out, forced.map(|f| f.expansion), name)?;
        let ti = self.trace.len() - 1;
        let ops = self.ops(ops_id, e.candidates.len(), forced.map(|f| f.op));
        let fe = FuseEdge {
            x,
            upsample: e.upsample,
            theta: self.w(e.theta),
            bias: Some(self.w(e.bias)),
            ops,
            masks: &e.masks,
            out_channels: out,
            stride: e.stride,
            gate: gate.map(|gv| (gv, idx)),
        };
        let y = edge_forward(self.g, &fe)?;
        self.trace[ti].output = Some(y);
        Ok(y)
    }

    fn c3(&mut self, net: &C3Net, ids: &C3Ids, forced: Option<&C3Choice>, x: Var, name: &str) -> Result<Var> {
        let h = net.spec.hidden();
        let (ei, a, gate) =
            self.expansion(ids.expansion, &RATES_C3, h, forced.map(|f| f.expansion), name.to_string())?;
        let ti = self.trace.len() - 1;
        let y1 = self.act(&net.cv1, x, a)?;
        let y1 = self.gate(y1, gate, ei)?;
        self.trace[ti].output = Some(y1);
        let y2 = self.act(&net.cv2, x, a)?;
        let y2 = self.gate(y2, gate, ei)?;
        let mut m = y1;
        for (j, (bn, bid)) in net.bottlenecks.iter().zip(&ids.bottlenecks).enumerate() {
            let fb = forced.map(|f| f.bottlenecks[j]);
            let (hi, c1, g1) =
                self.expansion(bid.hidden, &RATES_WIDE, h, fb.map(|b| b.hidden), format!("{}.m{}.conv1", name, j))?;
            let ti = self.trace.len() - 1;
            let t = self.act(&bn.conv1, m, c1)?;
            let t = self.gate(t, g1, hi)?;
            self.trace[ti].output = Some(t);
            let fe = fb.map(|b| EdgeChoice { op: b.op, expansion: b.out });
            m = self.edge(&bn.conv2, t, bid.ops, bid.out, fe, format!("{}.m{}.conv2", name, j))?;
        }
        let u = self.g.shape(m)[1];
        let w = self.w(net.cv3.w);
        let b = self.w(net.cv3.b);
        let wa = self.g.narrow(w, 1, 0, u)?;
        let wb = self.g.narrow(w, 1, h, a)?;
        let za = self.g.conv2d(m, wa, Some(b), net.cv3.geom())?;
        let zb = self.g.conv2d(y2, wb, None, net.cv3.geom())?;
        let z = self.g.add(za, zb)?;
        let z = self.g.sample_norm(z);
        Ok(self.g.silu(z))
    }

    fn spp(&mut self, x: Var) -> Result<Var> {
        let spp = &self.net.spp;
        let y = self.act_full(&spp.cv1, x)?;
        let mut parts = vec![y];
        for &k in &spp.pools {
            parts.push(self.g.maxpool2d(y, k, 1, k / 2)?);
        }
        let cat = self.g.concat_channels(&parts)?;
        self.act_full(&spp.cv2, cat)
    }

    fn fusion(&mut self, b: usize, inputs: [Var; 3]) -> Result<[Var; 3]> {
        let net = &self.net.fpn[b];
        let ids = &self.net.arch.layout.fpn[b];
        let forced = self.forced().map(|c| &c.fpn[b]);
        let tag = ["topdown", "bottomup"][b];
        let mut preds: Vec<Var> = inputs.to_vec();
        let mut outs = Vec::new();
        for j in 0..SCALES {
            let fnode = forced.map(|f| f.nodes[j]);
            let chosen: Vec<usize> = match fnode {
                Some(n) => n.preds.to_vec(),
                None => (0..node_preds(j)).collect(),
            };
            let mut fes = Vec::new();
            for (k, &p) in chosen.iter().enumerate() {
                let e = &net.edges[j][p];
                let eid = &ids.nodes[j].per_edge[p];
                let fe = fnode.map(|n| n.edges[k]);
                let (idx, out, gate) = self.expansion(
                    eid.expansion,
                    &RATES_WIDE,
                    e.max_out,
                    fe.map(|f| f.expansion),
                    format!("{}.node{}.e{}", tag, j, p),
                )?;
                let ops = self.ops(eid.ops, e.candidates.len(), fe.map(|f| f.op));
                fes.push(FuseEdge {
                    x: preds[p],
                    upsample: e.upsample,
                    theta: self.w(e.theta),
                    bias: Some(self.w(e.bias)),
                    ops,
                    masks: &e.masks,
                    out_channels: out,
                    stride: e.stride,
                    gate: gate.map(|gv| (gv, idx)),
                });
            }
            let ew = match fnode {
                Some(_) => None,
                None => Some(Mixing::Logits(self.a(ids.nodes[j].edges))),
            };
            let node = fuse_node(self.g, &fes, ew)?;
            let node = self.g.sample_norm(node);
            let node = self.g.silu(node);
            let fc3 = forced.map(|f| &f.c3[j]);
            let y = self.c3(&net.c3[j], &ids.c3[j], fc3, node, &format!("{}.c3_{}", tag, j))?;
            preds.push(y);
            outs.push(y);
        }
        Ok([outs[0], outs[1], outs[2]])
    }

    fn run(&mut self, x: Var) -> Result<([Var; 3], [Var; 3])> {
        let s = self.g.shape(x);
        if s[1] != 3 || s[2] % 32 != 0 || s[3] % 32 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(input(format!("supernet input must be N×3×H×W with H, W multiples of 32, got {:?}", s)));
        }
        let net = self.net;
        let forced = self.forced();
        let y = self.g.space_to_depth(x)?;
        let mut y = self.act_full(&net.stem, y)?;
        let mut taps = Vec::new();
        for (i, (st, ids)) in net.stages.iter().zip(&net.arch.layout.stages).enumerate() {
            let fs = forced.map(|c| &c.stages[i]);
            y = self.edge(&st.down, y, ids.down.ops, ids.down.expansion, fs.map(|f| f.down), format!("down{}", i))?;
            if let (Some(c3), Some(cids)) = (&st.c3, &ids.c3) {
                y = self.c3(c3, cids, fs.and_then(|f| f.c3.as_ref()), y, &format!("c3_{}", i))?;
            }
            taps.push(y);
        }
        let p5 = self.spp(y)?;
        let (p3, p4) = (taps[1], taps[2]);
        let td = self.fusion(0, [p5, p4, p3])?;
        let bu = self.fusion(1, [td[2], td[1], td[0]])?;
        let mut preds = [bu[0]; 3];
        for s in 0..SCALES {
            preds[s] = self.fixed_full(&net.heads[s], bu[s])?;
        }
        Ok((preds, bu))
    }
}

impl<T: Real> SuperNet<T> {
    /// Builds the forward graph for images `x` (a node of `g`).
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: ForwardMode<'_>, grads: GradTargets) -> Result<ForwardOutput> {
        if let ForwardMode::Forced(c) = &mode {
            c.validate(&self.spec)?;
        }
        let mut f = Fwd {
            net: self,
            wb: Binder::new(&self.weights, grads.weights),
            ab: Binder::new(&self.arch.store, grads.arch),
            g,
            mode,
            trace: Vec::new(),
        };
        let (preds, features) = f.run(x)?;
        Ok(ForwardOutput { preds, features, trace: f.trace, weight_binder: f.wb, arch_binder: f.ab })
    }

    /// Convenience wrapper: forward pass on a tensor, returning head values.
    pub fn predict(&self, x: &Tensor<T>, mode: ForwardMode<'_>) -> Result<[Tensor<T>; 3]> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, mode, GradTargets::NONE)?;
        Ok(out.preds.map(|p| g.value(p).clone()))
    }
}
