//! Kernel reusing: every candidate convolution on an edge is a binary-masked
//! view of one shared 5x5 weight bank, so the architecture-weighted mixture of
//! candidates collapses into a single 5x5 convolution:
//!
//! ```text
//! Σ_o α_o · (X ⊛ (M_o ⊙ θ))  ==  X ⊛ (θ ⊙ Σ_o α_o M_o)
//! ```
//!
//! Taps are shared literally: the centre tap belongs to every candidate and
//! the dilated candidate's corner taps are the plain 5x5 candidate's corners.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, input, Error, Result};
use crate::graph::{mix_coefficients, Graph, Var};
use crate::ops::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Side length of the unified weight bank.
pub const BANK: usize = 5;
/// Padding that keeps a 5x5 bank "same"-sized.
pub const BANK_PADDING: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Conv1x1,
    Conv3x3,
    Conv5x5,
    Conv3x3Dilated2,
}

impl CandidateKind {
    pub fn op(self) -> CandidateOp {
        match self {
            CandidateKind::Conv1x1 => CandidateOp::new(1, 1),
            CandidateKind::Conv3x3 => CandidateOp::new(3, 1),
            CandidateKind::Conv5x5 => CandidateOp::new(5, 1),
            CandidateKind::Conv3x3Dilated2 => CandidateOp::new(3, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CandidateKind::Conv1x1 => "conv1x1",
            CandidateKind::Conv3x3 => "conv3x3",
            CandidateKind::Conv5x5 => "conv5x5",
            CandidateKind::Conv3x3Dilated2 => "conv3x3_dilated2",
        }
    }
}

impl fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CandidateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_CANDIDATES
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| input(format!("unknown candidate op {:?}", s)))
    }
}

/// The four candidates searched on down-sampling layers and FPN edges.
pub const ALL_CANDIDATES: [CandidateKind; 4] = [
    CandidateKind::Conv1x1,
    CandidateKind::Conv3x3,
    CandidateKind::Conv5x5,
    CandidateKind::Conv3x3Dilated2,
];

/// Candidates for the second convolution of a bottleneck cell.
pub const BOTTLENECK_CANDIDATES: [CandidateKind; 3] =
    [CandidateKind::Conv3x3, CandidateKind::Conv5x5, CandidateKind::Conv3x3Dilated2];

/// A square convolution described by kernel size and dilation. Its native
/// padding keeps the output the same size as the input at stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CandidateOp {
    pub kernel_size: usize,
    pub dilation: usize,
}

impl CandidateOp {
    pub const fn new(kernel_size: usize, dilation: usize) -> Self {
        CandidateOp { kernel_size, dilation }
    }

    pub fn receptive_field(&self) -> usize {
        self.dilation * (self.kernel_size.saturating_sub(1)) + 1
    }

    pub fn padding(&self) -> usize {
        self.receptive_field() / 2
    }

    pub fn geom(&self, stride: usize) -> ConvGeom {
        ConvGeom::new(stride, self.padding(), self.dilation)
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 || self.dilation == 0 {
            return Err(config(format!("candidate {:?} is not an odd, centred kernel", self)));
        }
        if self.receptive_field() > BANK {
            return Err(config(format!(
                "candidate {:?} has receptive field {} > {}",
                self,
                self.receptive_field(),
                BANK
            )));
        }
        Ok(())
    }

    /// Position in the 5x5 bank of native tap `(i, j)`.
    fn bank_pos(&self, i: usize, j: usize) -> (usize, usize) {
        let half = (self.kernel_size / 2) as isize;
        let d = self.dilation as isize;
        let c = (BANK / 2) as isize;
        ((c + (i as isize - half) * d) as usize, (c + (j as isize - half) * d) as usize)
    }
}

/// A 5x5 binary pattern selecting the taps of one candidate.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Mask {
    bits: [bool; 25],
}

impl Mask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * BANK + c]
    }

    pub fn support(&self) -> Vec<(usize, usize)> {
        (0..25).filter(|&p| self.bits[p]).map(|p| (p / BANK, p % BANK)).collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn as_weights<T: Real>(&self) -> [T; 25] {
        let mut w = [T::zero(); 25];
        for (p, &b) in self.bits.iter().enumerate() {
            if b {
                w[p] = T::one();
            }
        }
        w
    }
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..BANK {
            let row: String = (0..BANK).map(|c| if self.get(r, c) { '#' } else { '.' }).collect();
            writeln!(f, "{}", row)?;
        }
        Ok(())
    }
}

/// Centred embedding of a candidate's taps into the 5x5 bank.
pub fn build_mask(op: CandidateOp) -> Result<Mask> {
    op.validate()?;
    let mut bits = [false; 25];
    for i in 0..op.kernel_size {
        for j in 0..op.kernel_size {
            let (r, c) = op.bank_pos(i, j);
            bits[r * BANK + c] = true;
        }
    }
    Ok(Mask { bits })
}

/// Shared weight bank of one super-edge.
#[derive(Clone, Debug)]
pub struct UnifiedKernel<T> {
    /// `C_out × C_in × 5 × 5`.
    pub theta: Tensor<T>,
    /// One bias per output channel, shared by all candidates.
    pub bias: Option<Tensor<T>>,
    candidates: Vec<CandidateOp>,
    masks: Vec<Mask>,
}

impl<T: Real> UnifiedKernel<T> {
    pub fn new(theta: Tensor<T>, bias: Option<Tensor<T>>, candidates: Vec<CandidateOp>) -> Result<Self> {
        let s = theta.shape();
        if s[2] != BANK || s[3] != BANK {
            return Err(input(format!("unified kernel must be {}x{}, got {:?}", BANK, BANK, s)));
        }
        if let Some(b) = &bias {
            if b.numel() != s[0] {
                return Err(input(format!("bias has {} entries for {} filters", b.numel(), s[0])));
            }
        }
        if candidates.is_empty() {
            return Err(input("unified kernel needs at least one candidate"));
        }
        let masks = candidates.iter().map(|&c| build_mask(c)).collect::<Result<_>>()?;
        Ok(UnifiedKernel { theta, bias, candidates, masks })
    }

    pub fn candidates(&self) -> &[CandidateOp] {
        &self.candidates
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn mask_weights(&self) -> Vec<[T; 25]> {
        self.masks.iter().map(|m| m.as_weights()).collect()
    }

    /// Stored parameter count: `25·C_in·C_out` plus one bias per filter.
    pub fn param_count(&self) -> usize {
        self.theta.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }

    /// Parameter count if every candidate kept private weights and bias.
    pub fn independent_param_count(&self) -> usize {
        let [co, ci, _, _] = self.theta.shape();
        let taps: usize = self.candidates.iter().map(|c| c.kernel_size * c.kernel_size).sum();
        taps * co * ci + if self.bias.is_some() { self.candidates.len() * co } else { 0 }
    }
}

/// `θ ⊙ Σ_o alpha_o · M_o`. `alpha` is used as given, with no normalisation.
pub fn compound_kernel<T: Real>(uk: &UnifiedKernel<T>, alpha: &[T]) -> Result<Tensor<T>> {
    if alpha.len() != uk.candidates.len() {
        return Err(input(format!(
            "compound_kernel: {} weights for {} candidates",
            alpha.len(),
            uk.candidates.len()
        )));
    }
    let coef = mix_coefficients(alpha, &uk.mask_weights());
    let mut out = uk.theta.clone();
    for chunk in out.data_mut().chunks_mut(25) {
        for (v, &c) in chunk.iter_mut().zip(coef.iter()) {
            *v *= c;
        }
    }
    Ok(out)
}

/// The whole edge as one 5x5 convolution (padding 2, dilation 1).
pub fn compound_conv<T: Real>(x: &Tensor<T>, uk: &UnifiedKernel<T>, alpha: &[T], stride: usize) -> Result<Tensor<T>> {
    let cin = uk.theta.shape()[1];
    if x.shape()[1] > cin {
        return Err(input(format!("compound_conv: {} input channels exceed bank width {}", x.shape()[1], cin)));
    }
    let w = compound_kernel(uk, alpha)?;
    let w = if x.shape()[1] < cin { w.narrow(1, 0, x.shape()[1])? } else { w };
    ops::conv2d(x, &w, uk.bias.as_ref(), ConvGeom::new(stride, BANK_PADDING, 1))
}

/// Graph form of [`compound_conv`]: `theta` is a `C_out × C_in × 5 × 5` node,
/// `alpha` a vector node of candidate weights.
pub fn compound_conv_var<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    theta: Var,
    bias: Option<Var>,
    alpha: Var,
    masks: &[Mask],
    stride: usize,
) -> Result<Var> {
    let w = g.masked_mix(theta, alpha, masks.iter().map(|m| m.as_weights()).collect())?;
    g.conv2d(x, w, bias, ConvGeom::new(stride, BANK_PADDING, 1))
}

/// The candidate's kernel in its native `k × k` shape; its padded 5x5
/// embedding equals `M_o ⊙ θ`.
pub fn extract_candidate_kernel<T: Real>(uk: &UnifiedKernel<T>, op: CandidateOp) -> Result<Tensor<T>> {
    if !uk.candidates.contains(&op) {
        return Err(input(format!("candidate {:?} is not on this edge", op)));
    }
    extract_from_bank(&uk.theta, op)
}

pub(crate) fn extract_from_bank<T: Real>(theta: &Tensor<T>, op: CandidateOp) -> Result<Tensor<T>> {
    op.validate()?;
    let [co, ci, _, _] = theta.shape();
    let k = op.kernel_size;
    Ok(Tensor::from_fn([co, ci, k, k], |[o, c, i, j]| {
        let (r, s) = op.bank_pos(i, j);
        theta.at([o, c, r, s])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_supports() {
        assert_eq!(build_mask(CandidateKind::Conv1x1.op()).unwrap().support(), vec![(2, 2)]);
        let dil = build_mask(CandidateKind::Conv3x3Dilated2.op()).unwrap();
        let want: Vec<(usize, usize)> =
            [0, 2, 4].iter().flat_map(|&r| [0, 2, 4].iter().map(move |&c| (r, c))).collect();
        assert_eq!(dil.support(), want);
        assert_eq!(build_mask(CandidateKind::Conv5x5.op()).unwrap().count(), 25);
    }

    #[test]
    fn mask_nesting() {
        let m: Vec<Mask> = ALL_CANDIDATES.iter().map(|k| build_mask(k.op()).unwrap()).collect();
        assert!(m[0].is_subset_of(&m[1]) && m[0] != m[1]);
        assert!(m[1].is_subset_of(&m[2]) && m[1] != m[2]);
        assert_eq!(m[3].count(), 9);
        assert!(!m[3].is_subset_of(&m[1]));
    }

    #[test]
    fn oversized_candidate_rejected() {
        assert!(matches!(build_mask(CandidateOp::new(7, 1)), Err(Error::Config(_))));
        assert!(matches!(build_mask(CandidateOp::new(3, 3)), Err(Error::Config(_))));
    }

    #[test]
    fn names_round_trip() {
        for k in ALL_CANDIDATES {
            assert_eq!(k.name().parse::<CandidateKind>().unwrap(), k);
        }
        assert!("conv7x7".parse::<CandidateKind>().is_err());
    }

    fn bank() -> UnifiedKernel<f64> {
        let theta = Tensor::from_fn([2, 3, 5, 5], |[o, c, i, j]| 1.0 + (o * 75 + c * 25 + i * 5 + j) as f64);
        UnifiedKernel::new(theta, None, ALL_CANDIDATES.iter().map(|k| k.op()).collect()).unwrap()
    }

    #[test]
    fn compound_kernel_cases() {
        let uk = bank();
        assert_eq!(compound_kernel(&uk, &[0.0, 0.0, 1.0, 0.0]).unwrap(), uk.theta);
        assert!(compound_kernel(&uk, &[0.0; 4]).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(compound_kernel(&uk, &[1.0; 3]).is_err());
        // Coefficient per tap = Σ of the four masks weighted 0.25.
        let ck = compound_kernel(&uk, &[0.25; 4]).unwrap();
        let at = |i, j| ck.at([0, 0, i, j]) / uk.theta.at([0, 0, i, j]);
        assert!((at(2, 2) - 1.0).abs() < 1e-15);
        assert!((at(0, 0) - 0.5).abs() < 1e-15);
        assert!((at(1, 1) - 0.5).abs() < 1e-15);
        assert!((at(0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn extract_shapes() {
        let uk = bank();
        assert_eq!(extract_candidate_kernel(&uk, CandidateKind::Conv5x5.op()).unwrap(), uk.theta);
        let one = extract_candidate_kernel(&uk, CandidateKind::Conv1x1.op()).unwrap();
        assert_eq!(one.shape(), [2, 3, 1, 1]);
        assert_eq!(one.at([1, 2, 0, 0]), uk.theta.at([1, 2, 2, 2]));
        let dil = extract_candidate_kernel(&uk, CandidateKind::Conv3x3Dilated2.op()).unwrap();
        assert_eq!(dil.at([0, 0, 0, 2]), uk.theta.at([0, 0, 0, 4]));
        let narrow = UnifiedKernel::new(uk.theta.clone(), None, vec![CandidateKind::Conv3x3.op()]).unwrap();
        assert!(extract_candidate_kernel(&narrow, CandidateKind::Conv1x1.op()).is_err());
    }

    #[test]
    fn param_counts() {
        let theta = Tensor::<f32>::zeros([6, 4, 5, 5]);
        let uk = UnifiedKernel::new(theta, Some(Tensor::zeros([6, 1, 1, 1])), ALL_CANDIDATES.iter().map(|k| k.op()).collect())
            .unwrap();
        assert_eq!(uk.param_count(), 25 * 24 + 6);
        assert_eq!(uk.independent_param_count(), 44 * 24 + 4 * 6);
    }
}
