//! Brute-force sort-and-select reference for architecture derivation.

use kreuse_core::kernelreuse::{CandidateKind, ALL_CANDIDATES};
use kreuse_core::supernet::arch::{ArchParams, C3Ids};
use kreuse_core::supernet::genotype::{BlockKind, EdgeGene, LayerGene};
use kreuse_core::supernet::Genotype;
use rand::Rng;

use super::softmax;

macro_rules! ensure_eq {
    ($a:expr, $b:expr) => {{
        let (a, b) = (&$a, &$b);
        if a != b {
            return Err(format!("{} = {:?}, oracle {:?}", stringify!($a), a, b));
        }
    }};
}

/// Sort by (probability desc, index asc), keep the first two, list in index order.
pub fn oracle_top2(logits: &[f64]) -> [usize; 2] {
    let p = softmax(logits);
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut keep = [idx[0], idx[1]];
    keep.sort();
    keep
}

pub fn oracle_argmax(logits: &[f64]) -> usize {
    let p = softmax(logits);
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    idx[0]
}

/// Checks a derived genotype gene by gene against the raw logits.
pub fn check_against_oracle(arch: &ArchParams<f64>, gt: &Genotype) -> Result<(), String> {
    let rates = [0.5, 0.75, 1.0];
    let c3_rates = [0.75, 1.0];
    let bottleneck_ops = [CandidateKind::Conv3x3, CandidateKind::Conv5x5, CandidateKind::Conv3x3Dilated2];
    let am = |id| oracle_argmax(&arch.values(id));
    let check_c3 = |genes: &[LayerGene], ids: &C3Ids| -> Result<(), String> {
        ensure_eq!(genes[0].block_kind, BlockKind::C3);
        ensure_eq!(genes[0].expansion, c3_rates[am(ids.expansion)]);
        ensure_eq!(genes.len(), ids.bottlenecks.len() + 1);
        for (g, b) in genes[1..].iter().zip(&ids.bottlenecks) {
            ensure_eq!(g.block_kind, BlockKind::Bottleneck);
            ensure_eq!(g.op, Some(bottleneck_ops[am(b.ops)]));
            ensure_eq!(g.expansion, rates[am(b.out)]);
            ensure_eq!(g.hidden_expansion, Some(rates[am(b.hidden)]));
        }
        Ok(())
    };
    let mut i = 0;
    for st in &arch.layout.stages {
        let g = &gt.backbone[i];
        ensure_eq!(g.block_kind, BlockKind::Downsample);
        ensure_eq!(g.op, Some(ALL_CANDIDATES[am(st.down.ops)]));
        ensure_eq!(g.expansion, rates[am(st.down.expansion)]);
        i += 1;
        if let Some(c) = &st.c3 {
            check_c3(&gt.backbone[i..i + 1 + c.bottlenecks.len()], c)?;
            i += 1 + c.bottlenecks.len();
        }
    }
    ensure_eq!(i, gt.backbone.len());
    let blocks: [(&Vec<[EdgeGene; 2]>, &Vec<Vec<LayerGene>>); 2] =
        [(&gt.fpn.topdown, &gt.fpn.topdown_c3), (&gt.fpn.bottomup, &gt.fpn.bottomup_c3)];
    for (b, (nodes, c3s)) in blocks.iter().enumerate() {
        let ids = &arch.layout.fpn[b];
        ensure_eq!(nodes.len(), 3);
        for (j, pair) in nodes.iter().enumerate() {
            let keep = oracle_top2(&arch.values(ids.nodes[j].edges));
            ensure_eq!([pair[0].pred, pair[1].pred], keep);
            for e in pair.iter() {
                let eid = &ids.nodes[j].per_edge[e.pred];
                ensure_eq!(e.op, ALL_CANDIDATES[am(eid.ops)]);
                ensure_eq!(e.expansion, rates[am(eid.expansion)]);
            }
        }
        for (genes, cid) in c3s.iter().zip(&ids.c3) {
            check_c3(genes, cid)?;
        }
    }
    Ok(())
}

pub fn randomize(arch: &mut ArchParams<f64>, r: &mut rand_chacha::ChaCha8Rng, ties: bool) {
    for id in arch.store.ids().collect::<Vec<_>>() {
        let v = arch.store.get_mut(id).data_mut();
        for x in v.iter_mut() {
            // A coarse grid makes exact ties common.
            *x = if ties { r.gen_range(-2i32..=2) as f64 } else { r.gen_range(-3.0..3.0) };
        }
    }
}

