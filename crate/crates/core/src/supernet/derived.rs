//! Standalone networks for one genotype, and their parameter/MAC counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chansearch::{expanded_channels, RATES_C3, RATES_WIDE};
use crate::error::{input, Result};
use crate::graph::{Graph, Var};
use crate::kernelreuse::{extract_from_bank, CandidateKind, ALL_CANDIDATES, BOTTLENECK_CANDIDATES};
use crate::ops::ConvGeom;
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

use super::arch::{C3Choice, Choices};
use super::genotype::Genotype;
use super::net::{alignment, head_channels, FixedConv, SuperEdge, SuperNet};
use super::spec::{C3Spec, SearchSpaceSpec, SCALES, SCALE_STRIDES};

/// Where a C3 block sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum C3Site {
    Backbone(usize),
    /// `(fusion block, scale position)`.
    Fpn(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum C3Part {
    Cv1,
    Cv2,
    Conv1(usize),
    Conv2(usize),
    Cv3,
}

/// The supernet location a derived convolution comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvSite {
    Stem,
    Down(usize),
    C3(C3Site, C3Part),
    SppCv1,
    SppCv2,
    FpnEdge { block: usize, node: usize, pred: usize },
    Head(usize),
}

/// One convolution of a derived network.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvDesc {
    pub name: String,
    pub site: ConvSite,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
    /// Nearest 2x up-samplings applied to the input first.
    pub upsample: usize,
    /// Searched operator, for convolutions cut from a weight bank.
    pub op: Option<CandidateKind>,
    /// For a C3 output conv: `(u, a, h)`, the widths of the two concatenated
    /// inputs and the offset of the second block in the supernet weight.
    pub split: Option<(usize, usize, usize)>,
    /// Output stride relative to the input image.
    pub out_stride: usize,
}

impl ConvDesc {
    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, self.padding, self.dilation)
    }

    pub fn weight_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.c_out
    }
}

#[derive(Clone, Debug)]
struct DC3 {
    cv1: usize,
    cv2: usize,
    bottlenecks: Vec<(usize, usize)>,
    cv3: usize,
}

#[derive(Clone, Debug)]
struct DFusion {
    /// Per node: `(predecessor, conv)` for both retained edges.
    nodes: Vec<[(usize, usize); 2]>,
    c3: Vec<DC3>,
}

#[derive(Clone, Debug)]
struct Plan {
    stem: usize,
    stages: Vec<(usize, Option<DC3>)>,
    spp: (usize, usize),
    fpn: Vec<DFusion>,
    heads: [usize; 3],
}

struct Planner {
    convs: Vec<ConvDesc>,
}

impl Planner {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        name: String,
        site: ConvSite,
        c_in: usize,
        c_out: usize,
        op: Option<CandidateKind>,
        k: usize,
        stride: usize,
        upsample: usize,
        out_stride: usize,
    ) -> usize {
        let (kernel, dilation, padding) = match op {
            Some(o) => {
                let c = o.op();
                (c.kernel_size, c.dilation, c.padding())
            }
            None => (k, 1, k / 2),
        };
        self.convs.push(ConvDesc {
            name,
            site,
            c_in,
            c_out,
            kernel,
            dilation,
            stride,
            padding,
            upsample,
            op,
            split: None,
            out_stride,
        });
        self.convs.len() - 1
    }

    /// Returns the block plan and its output width.
    fn c3(&mut self, site: C3Site, name: &str, cin: usize, spec: C3Spec, c: &C3Choice, s: usize) -> Result<(DC3, usize)> {
        let h = spec.hidden();
        let a = expanded_channels(h, RATES_C3[c.expansion])?;
        let cv1 = self.push(format!("{}.cv1", name), ConvSite::C3(site, C3Part::Cv1), cin, a, None, 1, 1, 0, s);
        let cv2 = self.push(format!("{}.cv2", name), ConvSite::C3(site, C3Part::Cv2), cin, a, None, 1, 1, 0, s);
        let mut m = a;
        let mut bottlenecks = Vec::new();
        for (j, b) in c.bottlenecks.iter().enumerate() {
            let c1 = expanded_channels(h, RATES_WIDE[b.hidden])?;
            let c2 = expanded_channels(h, RATES_WIDE[b.out])?;
            let i1 = self.push(format!("{}.m{}.conv1", name, j), ConvSite::C3(site, C3Part::Conv1(j)), m, c1, None, 1, 1, 0, s);
            let op = BOTTLENECK_CANDIDATES[b.op];
            let i2 = self.push(format!("{}.m{}.conv2", name, j), ConvSite::C3(site, C3Part::Conv2(j)), c1, c2, Some(op), 0, 1, 0, s);
            bottlenecks.push((i1, i2));
            m = c2;
        }
        let cv3 = self.push(format!("{}.cv3", name), ConvSite::C3(site, C3Part::Cv3), m + a, spec.channels, None, 1, 1, 0, s);
        self.convs[cv3].split = Some((m, a, h));
        Ok((DC3 { cv1, cv2, bottlenecks, cv3 }, spec.channels))
    }

    fn plan(spec: &SearchSpaceSpec, c: &Choices) -> Result<(Vec<ConvDesc>, Plan)> {
        c.validate(spec)?;
        let mut p = Planner { convs: Vec::new() };
        let stem = p.push("stem".into(), ConvSite::Stem, 12, spec.focus_channels, None, 3, 1, 0, 2);
        let mut width = spec.focus_channels;
        let mut stride = 2;
        let mut stages = Vec::new();
        let mut taps = Vec::new();
        for (i, (st, ch)) in spec.stages.iter().zip(&c.stages).enumerate() {
            let out = expanded_channels(st.down_channels, RATES_WIDE[ch.down.expansion])?;
            stride *= 2;
            let d = p.push(format!("down{}", i), ConvSite::Down(i), width, out, Some(ALL_CANDIDATES[ch.down.op]), 0, 2, 0, stride);
            width = out;
            let c3 = match (&st.c3, &ch.c3) {
                (Some(cs), Some(cc)) => {
                    let (plan, w) = p.c3(C3Site::Backbone(i), &format!("c3_{}", i), width, *cs, cc, stride)?;
                    width = w;
                    Some(plan)
                }
                _ => None,
            };
            stages.push((d, c3));
            taps.push(width);
        }
        let sc = spec.spp_channels();
        let spp = (
            p.push("spp.cv1".into(), ConvSite::SppCv1, width, sc / 2, None, 1, 1, 0, 32),
            p.push("spp.cv2".into(), ConvSite::SppCv2, 2 * sc, sc, None, 1, 1, 0, 32),
        );
        let f = spec.fpn_channels;
        let mut fpn = Vec::new();
        let mut in_scales = [32, 16, 8];
        let mut in_widths = [sc, taps[2], taps[1]];
        let mut node_scales = [32, 16, 8];
        let mut node_ch = [f[2], f[1], f[0]];
        for (b, fc) in c.fpn.iter().enumerate() {
            let tag = ["topdown", "bottomup"][b];
            let mut scales = in_scales.to_vec();
            let mut widths = in_widths.to_vec();
            let mut nodes = Vec::new();
            let mut c3s = Vec::new();
            for j in 0..SCALES {
                let n = &fc.nodes[j];
                let mut pair = [(0, 0); 2];
                let mut node_w = 0;
                for k in 0..2 {
                    let pred = n.preds[k];
                    let e = n.edges[k];
                    let out = expanded_channels(node_ch[j], RATES_WIDE[e.expansion])?;
                    let (st, up) = alignment(scales[pred], node_scales[j]);
                    let id = p.push(
                        format!("{}.node{}.e{}", tag, j, pred),
                        ConvSite::FpnEdge { block: b, node: j, pred },
                        widths[pred],
                        out,
                        Some(ALL_CANDIDATES[e.op]),
                        0,
                        st,
                        up,
                        node_scales[j],
                    );
                    pair[k] = (pred, id);
                    node_w = node_w.max(out);
                }
                nodes.push(pair);
                let cs = C3Spec { channels: node_ch[j], depth: spec.fpn_c3_depth };
                let (plan, w) =
                    p.c3(C3Site::Fpn(b, j), &format!("{}.c3_{}", tag, j), node_w, cs, &fc.c3[j], node_scales[j])?;
                c3s.push(plan);
                scales.push(node_scales[j]);
                widths.push(w);
            }
            fpn.push(DFusion { nodes, c3: c3s });
            in_scales = [8, 16, 32];
            in_widths = [widths[5], widths[4], widths[3]];
            node_scales = [8, 16, 32];
            node_ch = f;
        }
        let hc = head_channels(spec.num_classes);
        let heads = [0, 1, 2].map(|s| {
            p.push(format!("head{}", SCALE_STRIDES[s]), ConvSite::Head(s), f[s], hc, None, 1, 1, 0, SCALE_STRIDES[s])
        });
        Ok((p.convs, Plan { stem, stages, spp, fpn, heads }))
    }
}

/// How a C3 output convolution consumes its two inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConcatMode {
    /// Concatenate, then one convolution.
    Concat,
    /// One convolution per input block, summed.
    Sum,
}

/// A discrete network for one genotype, with no architecture parameters.
#[derive(Clone, Debug)]
pub struct DerivedNet<T> {
    pub genotype: Genotype,
    pub spec: SearchSpaceSpec,
    pub convs: Vec<ConvDesc>,
    /// Weight then bias for every entry of `convs`.
    pub weights: ParamStore<T>,
    pub concat_mode: ConcatMode,
    plan: Plan,
}

fn bank_weights<T: Real>(net: &SuperNet<T>, e: &SuperEdge, d: &ConvDesc) -> Result<(Tensor<T>, Tensor<T>)> {
    let op = d.op.ok_or_else(|| input(format!("{}: bank convolution without operator", d.name)))?;
    if !e.candidates.contains(&op) {
        return Err(input(format!("{}: {} is not a candidate of this edge", d.name, op)));
    }
    let theta = net.weights.get(e.theta).narrow(0, 0, d.c_out)?.narrow(1, 0, d.c_in)?;
    let w = extract_from_bank(&theta, op.op())?;
    let b = net.weights.get(e.bias).narrow(0, 0, d.c_out)?;
    Ok((w, b))
}

fn fixed_weights<T: Real>(net: &SuperNet<T>, c: &FixedConv, d: &ConvDesc) -> Result<(Tensor<T>, Tensor<T>)> {
    let w = net.weights.get(c.w);
    let w = match d.split {
        Some((u, a, h)) => {
            let top = w.narrow(1, 0, u)?;
            let bot = w.narrow(1, h, a)?;
            crate::ops::concat_channels(&[&top, &bot])?
        }
        None => w.narrow(0, 0, d.c_out)?.narrow(1, 0, d.c_in)?,
    };
    let b = net.weights.get(c.b).narrow(0, 0, d.c_out)?;
    Ok((w, b))
}

/// Cuts the weights of `d` out of the supernet.
fn supernet_weights<T: Real>(net: &SuperNet<T>, d: &ConvDesc) -> Result<(Tensor<T>, Tensor<T>)> {
    match d.site {
        ConvSite::Stem => fixed_weights(net, &net.stem, d),
        ConvSite::Down(i) => bank_weights(net, &net.stages[i].down, d),
        ConvSite::SppCv1 => fixed_weights(net, &net.spp.cv1, d),
        ConvSite::SppCv2 => fixed_weights(net, &net.spp.cv2, d),
        ConvSite::Head(s) => fixed_weights(net, &net.heads[s], d),
        ConvSite::FpnEdge { block, node, pred } => bank_weights(net, &net.fpn[block].edges[node][pred], d),
        ConvSite::C3(site, part) => {
            let c3 = match site {
                C3Site::Backbone(i) => net.stages[i].c3.as_ref().ok_or_else(|| input("stage without C3 block"))?,
                C3Site::Fpn(b, j) => &net.fpn[b].c3[j],
            };
            match part {
                C3Part::Cv1 => fixed_weights(net, &c3.cv1, d),
                C3Part::Cv2 => fixed_weights(net, &c3.cv2, d),
                C3Part::Cv3 => fixed_weights(net, &c3.cv3, d),
                C3Part::Conv1(j) => fixed_weights(net, &c3.bottlenecks[j].conv1, d),
                C3Part::Conv2(j) => bank_weights(net, &c3.bottlenecks[j].conv2, d),
            }
        }
    }
}

impl<T: Real> DerivedNet<T> {
    fn with_weights(
        genotype: &Genotype,
        mut make: impl FnMut(&ConvDesc) -> Result<(Tensor<T>, Tensor<T>)>,
    ) -> Result<Self> {
        let choices = genotype.choices()?;
        let spec = genotype.spec_echo.clone();
        let (convs, plan) = Planner::plan(&spec, &choices)?;
        let mut weights = ParamStore::new();
        for d in &convs {
            let (w, b) = make(d)?;
            weights.add(format!("{}.w", d.name), w);
            weights.add(format!("{}.b", d.name), b);
        }
        Ok(DerivedNet { genotype: genotype.clone(), spec, convs, weights, concat_mode: ConcatMode::Concat, plan })
    }

    /// Extracts the chosen kernels and channel slices from a trained supernet.
    pub fn materialize(genotype: &Genotype, net: &SuperNet<T>) -> Result<Self> {
        if genotype.spec_echo != net.spec {
            return Err(input("genotype was derived for a different search space"));
        }
        Self::with_weights(genotype, |d| supernet_weights(net, d))
    }

    /// Fresh seeded initialisation, for training from scratch.
    pub fn from_scratch(genotype: &Genotype, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_weights(genotype, |d| {
            let bound = (3.0 / (d.c_in * d.kernel * d.kernel) as f64).sqrt();
            let w = Tensor::from_fn([d.c_out, d.c_in, d.kernel, d.kernel], |_| T::c(rng.gen_range(-bound..bound)));
            Ok((w, Tensor::vector(vec![T::zero(); d.c_out])))
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel()
    }

    fn conv(&self, g: &mut Graph<T>, b: &mut Binder, i: usize, mut x: Var) -> Result<Var> {
        let d = &self.convs[i];
        for _ in 0..d.upsample {
            x = g.upsample_nearest2x(x);
        }
        let w = b.bind(g, &self.weights, ParamId::from_index(2 * i));
        let bias = b.bind(g, &self.weights, ParamId::from_index(2 * i + 1));
        g.conv2d(x, w, Some(bias), d.geom())
    }

    fn act(&self, g: &mut Graph<T>, b: &mut Binder, i: usize, x: Var) -> Result<Var> {
        let y = self.conv(g, b, i, x)?;
        let y = g.sample_norm(y);
        Ok(g.silu(y))
    }

    fn c3(&self, g: &mut Graph<T>, b: &mut Binder, p: &DC3, x: Var) -> Result<Var> {
        let y1 = self.act(g, b, p.cv1, x)?;
        let y2 = self.act(g, b, p.cv2, x)?;
        let mut m = y1;
        for &(c1, c2) in &p.bottlenecks {
            let t = self.act(g, b, c1, m)?;
            m = self.act(g, b, c2, t)?;
        }
        let z = match self.concat_mode {
            ConcatMode::Concat => {
                let cat = g.concat_channels(&[m, y2])?;
                self.conv(g, b, p.cv3, cat)?
            }
            ConcatMode::Sum => {
                let d = &self.convs[p.cv3];
                let (u, a, _) = d.split.expect("C3 output conv records its split");
                let w = b.bind(g, &self.weights, ParamId::from_index(2 * p.cv3));
                let bias = b.bind(g, &self.weights, ParamId::from_index(2 * p.cv3 + 1));
                let wa = g.narrow(w, 1, 0, u)?;
                let wb = g.narrow(w, 1, u, a)?;
                let za = g.conv2d(m, wa, Some(bias), d.geom())?;
                let zb = g.conv2d(y2, wb, None, d.geom())?;
                g.add(za, zb)?
            }
        };
        let z = g.sample_norm(z);
        Ok(g.silu(z))
    }

    /// Head outputs at strides 8, 16, 32 plus the weight binder.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, requires_grad: bool) -> Result<([Var; 3], Binder)> {
        let s = g.shape(x);
        if s[1] != 3 || s[2] % 32 != 0 || s[3] % 32 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(input(format!("network input must be N×3×H×W with H, W multiples of 32, got {:?}", s)));
        }
        let mut b = Binder::new(&self.weights, requires_grad);
        let p = &self.plan;
        let y = g.space_to_depth(x)?;
        let mut y = self.act(g, &mut b, p.stem, y)?;
        let mut taps = Vec::new();
        for (d, c3) in &p.stages {
            y = self.act(g, &mut b, *d, y)?;
            if let Some(c3) = c3 {
                y = self.c3(g, &mut b, c3, y)?;
            }
            taps.push(y);
        }
        let s1 = self.act(g, &mut b, p.spp.0, y)?;
        let mut parts = vec![s1];
        for k in [5, 9, 13] {
            parts.push(g.maxpool2d(s1, k, 1, k / 2)?);
        }
        let cat = g.concat_channels(&parts)?;
        let p5 = self.act(g, &mut b, p.spp.1, cat)?;
        let mut inputs = [p5, taps[2], taps[1]];
        for f in &p.fpn {
            let mut preds = inputs.to_vec();
            for (j, pair) in f.nodes.iter().enumerate() {
                let e0 = self.conv(g, &mut b, pair[0].1, preds[pair[0].0])?;
                let e1 = self.conv(g, &mut b, pair[1].1, preds[pair[1].0])?;
                let node = g.add_prefix(&[e0, e1])?;
                let node = g.sample_norm(node);
                let node = g.silu(node);
                let y = self.c3(g, &mut b, &f.c3[j], node)?;
                preds.push(y);
            }
            inputs = [preds[5], preds[4], preds[3]];
        }
        // After the bottom-up block `inputs` runs 32, 16, 8.
        let feats = [inputs[2], inputs[1], inputs[0]];
        let mut out = feats;
        for s in 0..SCALES {
            out[s] = self.conv(g, &mut b, p.heads[s], feats[s])?;
        }
        Ok((out, b))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = self.forward(&mut g, xv, false)?;
        Ok(out.map(|p| g.value(p).clone()))
    }
}

/// `(params, multiply-accumulates)` of the network a genotype describes, on
/// an `h × w` input.
pub fn count_params_flops(genotype: &Genotype, input_hw: (usize, usize)) -> Result<(u64, u64)> {
    let (h, w) = input_hw;
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(input(format!("input {}x{} is not a multiple of 32", h, w)));
    }
    let choices = genotype.choices()?;
    let (convs, _) = Planner::plan(&genotype.spec_echo, &choices)?;
    let mut params = 0u64;
    let mut macs = 0u64;
    for d in &convs {
        params += d.param_count() as u64;
        macs += (d.weight_count() * (h / d.out_stride) * (w / d.out_stride)) as u64;
    }
    Ok((params, macs))
}
