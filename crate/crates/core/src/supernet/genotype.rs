//! Serialisable description of a derived architecture.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chansearch::{RATES_C3, RATES_WIDE};
use crate::error::{input, Result};
use crate::kernelreuse::{CandidateKind, ALL_CANDIDATES, BOTTLENECK_CANDIDATES};

use super::arch::{BottleneckChoice, C3Choice, Choices, EdgeChoice, FusionChoice, NodeChoice, StageChoice};
use super::spec::SearchSpaceSpec;

pub const GENOTYPE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Downsample,
    C3,
    Bottleneck,
}

/// One searchable backbone or FPN-C3 layer. For bottlenecks `expansion`
/// belongs to the searchable second convolution and `hidden_expansion` to the
/// 1x1 convolution before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerGene {
    pub block_kind: BlockKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<CandidateKind>,
    pub expansion: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_expansion: Option<f64>,
}

/// A retained FPN edge into a node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeGene {
    pub pred: usize,
    pub op: CandidateKind,
    pub expansion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpnGenotype {
    pub topdown: Vec<[EdgeGene; 2]>,
    pub bottomup: Vec<[EdgeGene; 2]>,
    /// Per scale: the C3 gene followed by its bottleneck genes.
    pub topdown_c3: Vec<Vec<LayerGene>>,
    pub bottomup_c3: Vec<Vec<LayerGene>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub version: u32,
    pub level: String,
    pub backbone: Vec<LayerGene>,
    pub fpn: FpnGenotype,
    pub spec_echo: SearchSpaceSpec,
}

fn rate_index(rates: &[f64], r: f64, what: &str) -> Result<usize> {
    rates
        .iter()
        .position(|&x| (x - r).abs() < 1e-9)
        .ok_or_else(|| input(format!("{}: expansion {} is not one of {:?}", what, r, rates)))
}

fn op_index(ops: &[CandidateKind], k: CandidateKind, what: &str) -> Result<usize> {
    ops.iter()
        .position(|&o| o == k)
        .ok_or_else(|| input(format!("{}: operator {} is not a candidate here", what, k)))
}

fn c3_genes(c: &C3Choice) -> Vec<LayerGene> {
    let mut out = vec![LayerGene {
        block_kind: BlockKind::C3,
        op: None,
        expansion: RATES_C3[c.expansion],
        hidden_expansion: None,
    }];
    for b in &c.bottlenecks {
        out.push(LayerGene {
            block_kind: BlockKind::Bottleneck,
            op: Some(BOTTLENECK_CANDIDATES[b.op]),
            expansion: RATES_WIDE[b.out],
            hidden_expansion: Some(RATES_WIDE[b.hidden]),
        });
    }
    out
}

fn edge_gene(pred: usize, e: &EdgeChoice) -> EdgeGene {
    EdgeGene { pred, op: ALL_CANDIDATES[e.op], expansion: RATES_WIDE[e.expansion] }
}

/// Reads a C3 gene and `depth` bottleneck genes from the front of `genes`.
fn parse_c3(genes: &[LayerGene], depth: usize, what: &str) -> Result<C3Choice> {
    let head = genes.first().ok_or_else(|| input(format!("{}: missing C3 gene", what)))?;
    if head.block_kind != BlockKind::C3 {
        return Err(input(format!("{}: expected a c3 gene, found {:?}", what, head.block_kind)));
    }
    if genes.len() < depth + 1 {
        return Err(input(format!("{}: {} bottleneck genes, {} expected", what, genes.len() - 1, depth)));
    }
    let expansion = rate_index(&RATES_C3, head.expansion, what)?;
    let mut bottlenecks = Vec::new();
    for g in &genes[1..=depth] {
        if g.block_kind != BlockKind::Bottleneck {
            return Err(input(format!("{}: expected a bottleneck gene, found {:?}", what, g.block_kind)));
        }
        let op = g.op.ok_or_else(|| input(format!("{}: bottleneck gene without op", what)))?;
        let hidden = g.hidden_expansion.ok_or_else(|| input(format!("{}: bottleneck without hidden_expansion", what)))?;
        bottlenecks.push(BottleneckChoice {
            hidden: rate_index(&RATES_WIDE, hidden, what)?,
            out: rate_index(&RATES_WIDE, g.expansion, what)?,
            op: op_index(&BOTTLENECK_CANDIDATES, op, what)?,
        });
    }
    Ok(C3Choice { expansion, bottlenecks })
}

impl Genotype {
    pub fn from_choices(c: &Choices, spec: &SearchSpaceSpec) -> Result<Self> {
        c.validate(spec)?;
        let mut backbone = Vec::new();
        for s in &c.stages {
            backbone.push(LayerGene {
                block_kind: BlockKind::Downsample,
                op: Some(ALL_CANDIDATES[s.down.op]),
                expansion: RATES_WIDE[s.down.expansion],
                hidden_expansion: None,
            });
            if let Some(c3) = &s.c3 {
                backbone.extend(c3_genes(c3));
            }
        }
        let nodes = |f: &FusionChoice| -> Vec<[EdgeGene; 2]> {
            f.nodes
                .iter()
                .map(|n| [edge_gene(n.preds[0], &n.edges[0]), edge_gene(n.preds[1], &n.edges[1])])
                .collect()
        };
        Ok(Genotype {
            version: GENOTYPE_VERSION,
            level: spec.level.clone(),
            backbone,
            fpn: FpnGenotype {
                topdown: nodes(&c.fpn[0]),
                bottomup: nodes(&c.fpn[1]),
                topdown_c3: c.fpn[0].c3.iter().map(c3_genes).collect(),
                bottomup_c3: c.fpn[1].c3.iter().map(c3_genes).collect(),
            },
            spec_echo: spec.clone(),
        })
    }

    /// Converts back to indices, rejecting genotypes inconsistent with the
    /// recorded search space.
    pub fn choices(&self) -> Result<Choices> {
        if self.version != GENOTYPE_VERSION {
            return Err(input(format!("unsupported genotype version {}", self.version)));
        }
        let spec = &self.spec_echo;
        spec.validate()?;
        let mut stages = Vec::new();
        let mut i = 0;
        for (si, st) in spec.stages.iter().enumerate() {
            let what = format!("backbone stage {}", si);
            let g = self.backbone.get(i).ok_or_else(|| input(format!("{}: missing downsample gene", what)))?;
            if g.block_kind != BlockKind::Downsample {
                return Err(input(format!("{}: expected a downsample gene, found {:?}", what, g.block_kind)));
            }
            let op = g.op.ok_or_else(|| input(format!("{}: downsample gene without op", what)))?;
            let down = EdgeChoice {
                op: op_index(&ALL_CANDIDATES, op, &what)?,
                expansion: rate_index(&RATES_WIDE, g.expansion, &what)?,
            };
            i += 1;
            let c3 = match &st.c3 {
                Some(c) => {
                    let ch = parse_c3(&self.backbone[i..], c.depth, &what)?;
                    i += 1 + c.depth;
                    Some(ch)
                }
                None => None,
            };
            stages.push(StageChoice { down, c3 });
        }
        if i != self.backbone.len() {
            return Err(input(format!("{} backbone genes, {} expected", self.backbone.len(), i)));
        }
        let fusion = |nodes: &[[EdgeGene; 2]], c3s: &[Vec<LayerGene>], tag: &str| -> Result<FusionChoice> {
            let nodes = nodes
                .iter()
                .enumerate()
                .map(|(j, n)| {
                    let what = format!("{} node {}", tag, j);
                    let e = |g: &EdgeGene| -> Result<EdgeChoice> {
                        Ok(EdgeChoice {
                            op: op_index(&ALL_CANDIDATES, g.op, &what)?,
                            expansion: rate_index(&RATES_WIDE, g.expansion, &what)?,
                        })
                    };
                    Ok(NodeChoice { preds: [n[0].pred, n[1].pred], edges: [e(&n[0])?, e(&n[1])?] })
                })
                .collect::<Result<Vec<_>>>()?;
            let c3 = c3s
                .iter()
                .enumerate()
                .map(|(j, genes)| {
                    let what = format!("{} C3 {}", tag, j);
                    if genes.len() != spec.fpn_c3_depth + 1 {
                        return Err(input(format!("{}: {} genes, {} expected", what, genes.len(), spec.fpn_c3_depth + 1)));
                    }
                    parse_c3(genes, spec.fpn_c3_depth, &what)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FusionChoice { nodes, c3 })
        };
        let c = Choices {
            stages,
            fpn: [
                fusion(&self.fpn.topdown, &self.fpn.topdown_c3, "topdown")?,
                fusion(&self.fpn.bottomup, &self.fpn.bottomup_c3, "bottomup")?,
            ],
        };
        c.validate(spec)?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(s)?;
        g.choices()?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::arch::ArchParams;
    use crate::supernet::spec::Level;

    #[test]
    fn json_round_trip_is_byte_stable() {
        let spec = SearchSpaceSpec::preset(Level::SMini);
        let a = ArchParams::<f32>::new(&spec).unwrap();
        let g = Genotype::from_choices(&Choices::argmax(&a), &spec).unwrap();
        let s = g.to_json().unwrap();
        let g2 = Genotype::from_json(&s).unwrap();
        assert_eq!(g, g2);
        assert_eq!(s, g2.to_json().unwrap());
        assert_eq!(g2.choices().unwrap(), Choices::argmax(&a));
    }

    #[test]
    fn inconsistent_genotype_rejected() {
        let spec = SearchSpaceSpec::preset(Level::SMini);
        let a = ArchParams::<f32>::new(&spec).unwrap();
        let g = Genotype::from_choices(&Choices::argmax(&a), &spec).unwrap();

        let mut bad = g.clone();
        bad.backbone[0].expansion = 0.6;
        assert!(matches!(bad.choices(), Err(crate::Error::Input(_))));

        let mut bad = g.clone();
        bad.backbone.pop();
        assert!(bad.choices().is_err());

        let mut bad = g.clone();
        bad.fpn.topdown[0][1].pred = 7;
        assert!(bad.choices().is_err());

        let mut bad = g.clone();
        bad.backbone[2].op = Some(CandidateKind::Conv1x1);
        assert!(bad.choices().is_err());

        assert!(Genotype::from_json("{\"version\":1}").is_err());
    }
}
