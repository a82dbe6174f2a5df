//! Exact search-space sizes.

use num_bigint::BigUint;
use num_traits::One;
use serde::Serialize;

use super::spec::{SearchSpaceSpec, SpaceCounts};

/// Operator-times-expansion choices of one searchable FPN edge or
/// down-sampling layer.
const EDGE_CHOICES: u32 = 12;
/// Expansion choices of a C3 block.
const C3_CHOICES: u32 = 2;
/// Operator-times-expansion choices of a bottleneck's second convolution.
const BOTTLENECK_CHOICES: u32 = 9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SearchSpaceSize {
    #[serde(serialize_with = "ser_big")]
    pub backbone: BigUint,
    /// Both fusion blocks.
    #[serde(serialize_with = "ser_big")]
    pub fpn: BigUint,
    #[serde(serialize_with = "ser_big")]
    pub total: BigUint,
    pub backbone_sci: String,
    pub fpn_sci: String,
    pub total_sci: String,
    /// Product of the rounded backbone and FPN sizes, rounded again; this is
    /// how the published totals were formed.
    pub table_total_sci: String,
}

fn ser_big<S: serde::Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

fn pow(base: u32, e: usize) -> BigUint {
    num_traits::pow(BigUint::from(base), e)
}

fn binom(n: u32, k: u32) -> BigUint {
    let mut r = BigUint::one();
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

/// `12^L_D · 2^L_C · 9^L_B`.
pub fn backbone_size(c: &SpaceCounts) -> BigUint {
    pow(EDGE_CHOICES, c.l_d) * pow(C3_CHOICES, c.l_c) * pow(BOTTLENECK_CHOICES, c.l_b)
}

/// `C(3,2)·C(4,2)·C(5,2)`: ways to keep two incoming edges at each of the
/// three new nodes.
pub fn connection_choices() -> BigUint {
    binom(3, 2) * binom(4, 2) * binom(5, 2)
}

/// One fusion block: six retained edges, their connection pattern, one C3
/// expansion per scale and `K_B` bottlenecks.
pub fn fusion_block_size(k_b: usize) -> BigUint {
    pow(EDGE_CHOICES, 6) * connection_choices() * pow(C3_CHOICES, 3) * pow(BOTTLENECK_CHOICES, k_b)
}

/// The per-block formula with a single C3 expansion factor.
pub fn fusion_block_size_single_c3(k_b: usize) -> BigUint {
    pow(EDGE_CHOICES, 6) * connection_choices() * pow(C3_CHOICES, 1) * pow(BOTTLENECK_CHOICES, k_b)
}

pub fn count_from_counts(c: &SpaceCounts) -> SearchSpaceSize {
    let backbone = backbone_size(c);
    let block = fusion_block_size(c.k_b);
    let fpn = &block * &block;
    let total = &backbone * &fpn;
    SearchSpaceSize {
        backbone_sci: sci2(&backbone),
        fpn_sci: sci2(&fpn),
        total_sci: sci2(&total),
        table_total_sci: product_sci2(&backbone, &fpn),
        backbone,
        fpn,
        total,
    }
}

pub fn count_search_space(spec: &SearchSpaceSpec) -> SearchSpaceSize {
    count_from_counts(&spec.counts())
}

/// Two significant figures, rounding half up: `(mantissa digits, exponent)`.
fn round2(n: &BigUint) -> (u32, i64) {
    let digits = n.to_string();
    let b = digits.as_bytes();
    let d = |i: usize| b.get(i).map_or(0, |c| (c - b'0') as u32);
    let mut m = d(0) * 10 + d(1);
    let mut exp = digits.len() as i64 - 1;
    if d(2) >= 5 {
        m += 1;
    }
    if m >= 100 {
        m /= 10;
        exp += 1;
    }
    (m, exp)
}

/// `n` as `d.de<exp>` with two significant figures.
pub fn sci2(n: &BigUint) -> String {
    let (m, e) = round2(n);
    format!("{}.{}e{}", m / 10, m % 10, e)
}

/// Rounds `a` and `b` to two significant figures, multiplies and rounds again.
pub fn product_sci2(a: &BigUint, b: &BigUint) -> String {
    let (ma, ea) = round2(a);
    let (mb, eb) = round2(b);
    let (m, e) = round2(&BigUint::from(ma * mb));
    format!("{}.{}e{}", m / 10, m % 10, e + ea + eb - 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::spec::Level;

    #[test]
    fn sci_rounding() {
        assert_eq!(sci2(&BigUint::from(1u32)), "1.0e0");
        assert_eq!(sci2(&BigUint::from(12345u32)), "1.2e4");
        assert_eq!(sci2(&BigUint::from(12500u32)), "1.3e4");
        assert_eq!(sci2(&BigUint::from(99960u32)), "1.0e5");
        assert_eq!(product_sci2(&BigUint::from(79u32), &BigUint::from(98u32)), "7.7e3");
    }

    #[test]
    fn empty_counts() {
        let c = SpaceCounts { l_d: 0, l_c: 0, l_b: 0, k_b: 0 };
        assert_eq!(backbone_size(&c), BigUint::one());
    }

    #[test]
    fn connection_patterns() {
        assert_eq!(connection_choices(), BigUint::from(180u32));
    }

    #[test]
    fn small_level() {
        let s = count_search_space(&SearchSpaceSpec::preset(Level::S));
        assert_eq!(s.backbone, BigUint::from(12u64.pow(4) * 8 * 9u64.pow(7)));
        assert_eq!(s.backbone_sci, "7.9e11");
        assert_eq!(s.fpn_sci, "9.8e24");
        assert_eq!(s.table_total_sci, "7.7e36");
        assert_eq!(sci2(&num_traits::pow(fusion_block_size_single_c3(3), 2)), "6.1e23");
    }
}
