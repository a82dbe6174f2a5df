//! Architecture parameters and discrete architecture choices.

use crate::chansearch::{RATES_C3, RATES_WIDE};
use crate::error::{input, Result};
use crate::kernelreuse::{ALL_CANDIDATES, BOTTLENECK_CANDIDATES};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

use super::spec::{SearchSpaceSpec, SCALES};

/// Operator and expansion logits of one searchable convolution.
#[derive(Clone, Debug)]
pub struct EdgeIds {
    pub ops: ParamId,
    pub expansion: ParamId,
}

#[derive(Clone, Debug)]
pub struct BottleneckIds {
    /// Expansion of the 1x1 convolution.
    pub hidden: ParamId,
    /// Expansion of the searchable second convolution.
    pub out: ParamId,
    pub ops: ParamId,
}

#[derive(Clone, Debug)]
pub struct C3Ids {
    pub expansion: ParamId,
    pub bottlenecks: Vec<BottleneckIds>,
}

/// A new FPN node: one logit per predecessor plus per-edge op/expansion logits.
#[derive(Clone, Debug)]
pub struct NodeIds {
    pub edges: ParamId,
    pub per_edge: Vec<EdgeIds>,
}

#[derive(Clone, Debug)]
pub struct FusionIds {
    pub nodes: Vec<NodeIds>,
    pub c3: Vec<C3Ids>,
}

#[derive(Clone, Debug)]
pub struct StageIds {
    pub down: EdgeIds,
    pub c3: Option<C3Ids>,
}

#[derive(Clone, Debug)]
pub struct ArchLayout {
    pub stages: Vec<StageIds>,
    /// Top-down block, then bottom-up block.
    pub fpn: [FusionIds; 2],
}

/// Every architecture logit of a supernet, zero-initialised so that each
/// decision starts uniform.
#[derive(Clone, Debug)]
pub struct ArchParams<T> {
    pub store: ParamStore<T>,
    pub layout: ArchLayout,
}

/// Number of predecessors of new node `j` in a fusion block.
pub fn node_preds(j: usize) -> usize {
    SCALES + j
}

impl<T: Real> ArchParams<T> {
    pub fn new(spec: &SearchSpaceSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let zeros = |store: &mut ParamStore<T>, name: String, n: usize| store.add(name, Tensor::vector(vec![T::zero(); n]));
        let c3_ids = |store: &mut ParamStore<T>, name: &str, depth: usize| C3Ids {
            expansion: zeros(store, format!("{}.expansion", name), RATES_C3.len()),
            bottlenecks: (0..depth)
                .map(|j| BottleneckIds {
                    hidden: zeros(store, format!("{}.m{}.hidden", name, j), RATES_WIDE.len()),
                    out: zeros(store, format!("{}.m{}.out", name, j), RATES_WIDE.len()),
                    ops: zeros(store, format!("{}.m{}.ops", name, j), BOTTLENECK_CANDIDATES.len()),
                })
                .collect(),
        };
        let mut stages = Vec::new();
        for (i, st) in spec.stages.iter().enumerate() {
            let down = EdgeIds {
                ops: zeros(&mut store, format!("down{}.ops", i), ALL_CANDIDATES.len()),
                expansion: zeros(&mut store, format!("down{}.expansion", i), RATES_WIDE.len()),
            };
            let c3 = st.c3.as_ref().map(|c| c3_ids(&mut store, &format!("c3_{}", i), c.depth));
            stages.push(StageIds { down, c3 });
        }
        let fusion = |store: &mut ParamStore<T>, tag: &str| {
            let mut nodes = Vec::new();
            let mut c3 = Vec::new();
            for j in 0..SCALES {
                let n = node_preds(j);
                let edges = zeros(store, format!("{}.node{}.edges", tag, j), n);
                let per_edge = (0..n)
                    .map(|p| EdgeIds {
                        ops: zeros(store, format!("{}.node{}.e{}.ops", tag, j, p), ALL_CANDIDATES.len()),
                        expansion: zeros(store, format!("{}.node{}.e{}.expansion", tag, j, p), RATES_WIDE.len()),
                    })
                    .collect();
                nodes.push(NodeIds { edges, per_edge });
            }
            for j in 0..SCALES {
                c3.push(c3_ids(store, &format!("{}.c3_{}", tag, j), spec.fpn_c3_depth));
            }
            FusionIds { nodes, c3 }
        };
        let td = fusion(&mut store, "topdown");
        let bu = fusion(&mut store, "bottomup");
        Ok(ArchParams { store, layout: ArchLayout { stages, fpn: [td, bu] } })
    }

    pub fn values(&self, id: ParamId) -> Vec<f64> {
        self.store.get(id).to_f64_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeChoice {
    pub op: usize,
    pub expansion: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckChoice {
    pub hidden: usize,
    pub out: usize,
    pub op: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct C3Choice {
    pub expansion: usize,
    pub bottlenecks: Vec<BottleneckChoice>,
}

/// The two retained predecessors of a node, in ascending order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeChoice {
    pub preds: [usize; 2],
    pub edges: [EdgeChoice; 2],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionChoice {
    pub nodes: Vec<NodeChoice>,
    pub c3: Vec<C3Choice>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageChoice {
    pub down: EdgeChoice,
    pub c3: Option<C3Choice>,
}

/// One discrete architecture, as indices into the candidate lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Choices {
    pub stages: Vec<StageChoice>,
    pub fpn: [FusionChoice; 2],
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the two largest values in ascending index order; ties go to the
/// lower index.
pub fn top2(v: &[f64]) -> [usize; 2] {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut p = [idx[0], idx[1]];
    p.sort_unstable();
    p
}

impl Choices {
    /// The argmax architecture of `arch`: strongest operator and expansion
    /// everywhere and the two strongest incoming edges per FPN node.
    pub fn argmax<T: Real>(arch: &ArchParams<T>) -> Self {
        let am = |id: ParamId| argmax_first(&arch.values(id));
        let edge = |e: &EdgeIds| EdgeChoice { op: am(e.ops), expansion: am(e.expansion) };
        let c3 = |c: &C3Ids| C3Choice {
            expansion: am(c.expansion),
            bottlenecks: c
                .bottlenecks
                .iter()
                .map(|b| BottleneckChoice { hidden: am(b.hidden), out: am(b.out), op: am(b.ops) })
                .collect(),
        };
        let stages = arch
            .layout
            .stages
            .iter()
            .map(|s| StageChoice { down: edge(&s.down), c3: s.c3.as_ref().map(c3) })
            .collect();
        let fusion = |f: &FusionIds| FusionChoice {
            nodes: f
                .nodes
                .iter()
                .map(|n| {
                    let preds = top2(&arch.values(n.edges));
                    NodeChoice { preds, edges: [edge(&n.per_edge[preds[0]]), edge(&n.per_edge[preds[1]])] }
                })
                .collect(),
            c3: f.c3.iter().map(c3).collect(),
        };
        Choices { stages, fpn: [fusion(&arch.layout.fpn[0]), fusion(&arch.layout.fpn[1])] }
    }

    /// A uniformly random architecture of `spec`.
    pub fn random<R: rand::Rng + ?Sized>(spec: &SearchSpaceSpec, rng: &mut R) -> Self {
        let c3 = |depth: usize, rng: &mut R| C3Choice {
            expansion: rng.gen_range(0..RATES_C3.len()),
            bottlenecks: (0..depth)
                .map(|_| BottleneckChoice {
                    hidden: rng.gen_range(0..RATES_WIDE.len()),
                    out: rng.gen_range(0..RATES_WIDE.len()),
                    op: rng.gen_range(0..BOTTLENECK_CANDIDATES.len()),
                })
                .collect(),
        };
        let edge = |rng: &mut R| EdgeChoice {
            op: rng.gen_range(0..ALL_CANDIDATES.len()),
            expansion: rng.gen_range(0..RATES_WIDE.len()),
        };
        let mut stages = Vec::new();
        for st in &spec.stages {
            let down = edge(rng);
            let c = st.c3.map(|c| c3(c.depth, rng));
            stages.push(StageChoice { down, c3: c });
        }
        let fusion = |rng: &mut R| {
            let nodes = (0..SCALES)
                .map(|j| {
                    let n = node_preds(j);
                    let a = rng.gen_range(0..n);
                    let mut b = rng.gen_range(0..n - 1);
                    if b >= a {
                        b += 1;
                    }
                    NodeChoice { preds: [a.min(b), a.max(b)], edges: [edge(rng), edge(rng)] }
                })
                .collect();
            let c3 = (0..SCALES).map(|_| c3(spec.fpn_c3_depth, rng)).collect();
            FusionChoice { nodes, c3 }
        };
        let td = fusion(rng);
        let bu = fusion(rng);
        Choices { stages, fpn: [td, bu] }
    }

    /// Checks that the choices fit `spec` and index valid candidates.
    pub fn validate(&self, spec: &SearchSpaceSpec) -> Result<()> {
        let bad = |what: String| Err(input(format!("architecture does not fit the search space: {}", what)));
        let c3_ok = |c: &C3Choice, depth: usize, tag: &str| -> Result<()> {
            if c.expansion >= RATES_C3.len() {
                return bad(format!("{}: C3 expansion index {}", tag, c.expansion));
            }
            if c.bottlenecks.len() != depth {
                return bad(format!("{}: {} bottlenecks, {} expected", tag, c.bottlenecks.len(), depth));
            }
            for b in &c.bottlenecks {
                if b.hidden >= RATES_WIDE.len() || b.out >= RATES_WIDE.len() || b.op >= BOTTLENECK_CANDIDATES.len() {
                    return bad(format!("{}: bottleneck {:?}", tag, b));
                }
            }
            Ok(())
        };
        let edge_ok = |e: &EdgeChoice, tag: &str| -> Result<()> {
            if e.op >= ALL_CANDIDATES.len() || e.expansion >= RATES_WIDE.len() {
                return bad(format!("{}: edge {:?}", tag, e));
            }
            Ok(())
        };
        if self.stages.len() != spec.stages.len() {
            return bad(format!("{} backbone stages, {} expected", self.stages.len(), spec.stages.len()));
        }
        for (i, (c, s)) in self.stages.iter().zip(&spec.stages).enumerate() {
            edge_ok(&c.down, &format!("down{}", i))?;
            match (&c.c3, &s.c3) {
                (Some(c), Some(s)) => c3_ok(c, s.depth, &format!("c3_{}", i))?,
                (None, None) => {}
                _ => return bad(format!("stage {} C3 presence", i)),
            }
        }
        for (b, f) in self.fpn.iter().enumerate() {
            if f.nodes.len() != SCALES || f.c3.len() != SCALES {
                return bad(format!("fusion block {} needs {} nodes and C3 blocks", b, SCALES));
            }
            for (j, n) in f.nodes.iter().enumerate() {
                if !(n.preds[0] < n.preds[1] && n.preds[1] < node_preds(j)) {
                    return bad(format!("fusion block {} node {} predecessors {:?}", b, j, n.preds));
                }
                for e in &n.edges {
                    edge_ok(e, &format!("fusion block {} node {}", b, j))?;
                }
            }
            for (j, c) in f.c3.iter().enumerate() {
                c3_ok(c, spec.fpn_c3_depth, &format!("fusion block {} C3 {}", b, j))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::spec::Level;

    #[test]
    fn top2_ties_prefer_low_index() {
        assert_eq!(top2(&[0.0, 0.0, 0.0]), [0, 1]);
        assert_eq!(top2(&[0.0, 2.0, 1.0, 2.0]), [1, 3]);
        assert_eq!(top2(&[5.0, -1.0, 3.0]), [0, 2]);
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn uniform_arch_derives_first_choices() {
        let spec = SearchSpaceSpec::preset(Level::SMini);
        let a = ArchParams::<f32>::new(&spec).unwrap();
        let c = Choices::argmax(&a);
        c.validate(&spec).unwrap();
        assert!(c.fpn.iter().all(|f| f.nodes.iter().all(|n| n.preds == [0, 1])));
        assert_eq!(c.stages[0].down, EdgeChoice { op: 0, expansion: 0 });
    }

    #[test]
    fn arch_param_counts() {
        let spec = SearchSpaceSpec::preset(Level::SMini);
        let a = ArchParams::<f32>::new(&spec).unwrap();
        // 4 down layers, 3 backbone C3 with 7 bottlenecks, 2 fusion blocks of
        // 3 nodes (3+4+5 edges) and 3 single-bottleneck C3 blocks.
        let down = 4 * 7;
        let c3 = |m: usize| 2 + m * 9;
        let backbone = down + c3(1) + c3(3) + c3(3);
        let fusion = (3 + 4 + 5) * 8 + 3 * c3(1);
        assert_eq!(a.store.numel(), backbone + 2 * fusion);
    }
}
