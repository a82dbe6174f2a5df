//! Search-space presets (depth/width per level) and their validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chansearch::{expanded_channels, RATES_C3, RATES_WIDE};
use crate::error::{config, Error, Result};

/// Searchable C3 block: `channels` output width, `depth` bottleneck cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct C3Spec {
    pub channels: usize,
    pub depth: usize,
}

impl C3Spec {
    pub fn hidden(&self) -> usize {
        self.channels / 2
    }
}

/// One down-sampling layer, optionally followed by a C3 block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub down_channels: usize,
    pub c3: Option<C3Spec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "s")]
    S,
    #[serde(rename = "m")]
    M,
    #[serde(rename = "l")]
    L,
    #[serde(rename = "x")]
    X,
    #[serde(rename = "s-mini")]
    SMini,
    #[serde(rename = "m-mini")]
    MMini,
}

impl Level {
    pub const FULL: [Level; 4] = [Level::S, Level::M, Level::L, Level::X];

    pub fn name(self) -> &'static str {
        match self {
            Level::S => "s",
            Level::M => "m",
            Level::L => "l",
            Level::X => "x",
            Level::SMini => "s-mini",
            Level::MMini => "m-mini",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Level::S, Level::M, Level::L, Level::X, Level::SMini, Level::MMini]
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| config(format!("unknown level {:?} (s, m, l, x, s-mini, m-mini)", s)))
    }
}

/// Macro structure of a supernet: stem width, four down-sampling stages
/// (the first three followed by C3 blocks, the last by SPP), FPN widths per
/// scale and bottlenecks per FPN C3 block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpaceSpec {
    pub level: String,
    pub focus_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Widths of the 8x, 16x and 32x down-sampled FPN nodes.
    pub fpn_channels: [usize; 3],
    /// Bottlenecks in each FPN C3 block (one block per scale and fusion block).
    pub fpn_c3_depth: usize,
    pub num_classes: usize,
}

/// Block counts that determine the size of the search space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceCounts {
    /// Down-sampling layers.
    pub l_d: usize,
    /// Backbone C3 blocks.
    pub l_c: usize,
    /// Backbone bottlenecks.
    pub l_b: usize,
    /// Bottlenecks per FPN fusion block.
    pub k_b: usize,
}

/// Number of feature scales fused by the FPN.
pub const SCALES: usize = 3;
/// Down-sampling factors of the fused scales.
pub const SCALE_STRIDES: [usize; 3] = [8, 16, 32];

impl SearchSpaceSpec {
    /// Width `w` and depth `d` multipliers over the small model, scaled down
    /// by `div` for the desk-sized variants.
    fn scaled(level: Level, w_num: usize, w_den: usize, depth: usize, div: usize) -> Self {
        let c = |base: usize| base * w_num / w_den / div;
        let stages = vec![
            StageSpec { down_channels: c(64), c3: Some(C3Spec { channels: c(64), depth }) },
            StageSpec { down_channels: c(128), c3: Some(C3Spec { channels: c(128), depth: 3 * depth }) },
            StageSpec { down_channels: c(256), c3: Some(C3Spec { channels: c(256), depth: 3 * depth }) },
            StageSpec { down_channels: c(512), c3: None },
        ];
        SearchSpaceSpec {
            level: level.name().to_string(),
            focus_channels: c(32),
            stages,
            fpn_channels: [c(128), c(256), c(512)],
            fpn_c3_depth: depth,
            num_classes: 80,
        }
    }

    pub fn preset(level: Level) -> Self {
        match level {
            Level::S => Self::scaled(level, 1, 1, 1, 1),
            Level::M => Self::scaled(level, 3, 2, 2, 1),
            Level::L => Self::scaled(level, 2, 1, 3, 1),
            Level::X => Self::scaled(level, 5, 2, 4, 1),
            Level::SMini => Self::scaled(level, 1, 1, 1, 8),
            Level::MMini => Self::scaled(level, 3, 2, 2, 4),
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn counts(&self) -> SpaceCounts {
        let c3s: Vec<&C3Spec> = self.stages.iter().filter_map(|s| s.c3.as_ref()).collect();
        SpaceCounts {
            l_d: self.stages.len(),
            l_c: c3s.len(),
            l_b: c3s.iter().map(|c| c.depth).sum(),
            k_b: SCALES * self.fpn_c3_depth,
        }
    }

    /// Width of the SPP block, equal to the last down-sampling layer.
    pub fn spp_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.down_channels)
    }

    /// Output width of the backbone at each fused scale (8x, 16x, 32x).
    pub fn backbone_out_channels(&self) -> [usize; 3] {
        let c3 = |i: usize| self.stages[i].c3.map_or(self.stages[i].down_channels, |c| c.channels);
        [c3(1), c3(2), self.spp_channels()]
    }

    /// Checks that this describes a buildable supernet and that every
    /// candidate expansion yields an integer channel count.
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(config(format!("supernet needs 4 down-sampling stages, got {}", self.stages.len())));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if (i < 3) != s.c3.is_some() {
                return Err(config(format!(
                    "stage {}: C3 blocks follow the first three down-sampling layers only",
                    i
                )));
            }
        }
        if self.num_classes == 0 {
            return Err(config("num_classes must be at least 1"));
        }
        if self.focus_channels == 0 {
            return Err(config("focus_channels must be positive"));
        }
        let check_c3 = |c: &C3Spec| -> Result<()> {
            if c.channels % 2 != 0 || c.depth == 0 {
                return Err(config(format!("C3 block {:?} needs even width and depth >= 1", c)));
            }
            for &r in &RATES_C3 {
                expanded_channels(c.hidden(), r)?;
            }
            for &r in &RATES_WIDE {
                expanded_channels(c.hidden(), r)?;
            }
            Ok(())
        };
        for s in &self.stages {
            for &r in &RATES_WIDE {
                expanded_channels(s.down_channels, r)?;
            }
            if let Some(c) = &s.c3 {
                check_c3(c)?;
            }
        }
        if self.spp_channels() % 2 != 0 {
            return Err(config("SPP width must be even"));
        }
        for &f in &self.fpn_channels {
            for &r in &RATES_WIDE {
                expanded_channels(f, r)?;
            }
            check_c3(&C3Spec { channels: f, depth: self.fpn_c3_depth })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_preset_statistics_rows() {
        let want = [(4, 3, 7, 3), (4, 3, 14, 6), (4, 3, 21, 9), (4, 3, 28, 12)];
        for (lvl, w) in Level::FULL.iter().zip(want) {
            let c = SearchSpaceSpec::preset(*lvl).counts();
            assert_eq!((c.l_d, c.l_c, c.l_b, c.k_b), w, "{}", lvl);
        }
    }

    #[test]
    fn presets_validate() {
        for lvl in [Level::S, Level::M, Level::L, Level::X, Level::SMini, Level::MMini] {
            SearchSpaceSpec::preset(lvl).validate().unwrap();
        }
    }

    #[test]
    fn small_preset_widths() {
        let s = SearchSpaceSpec::preset(Level::S);
        assert_eq!(s.focus_channels, 32);
        let depths: Vec<usize> = s.stages.iter().filter_map(|st| st.c3.map(|c| c.depth)).collect();
        assert_eq!(depths, vec![1, 3, 3]);
        assert_eq!(s.spp_channels(), 512);
        assert_eq!(s.fpn_channels, [128, 256, 512]);
        assert_eq!(SearchSpaceSpec::preset(Level::X).fpn_channels, [320, 640, 1280]);
    }

    #[test]
    fn bad_channel_arithmetic_rejected() {
        let mut s = SearchSpaceSpec::preset(Level::SMini);
        s.stages[0].down_channels = 6;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = SearchSpaceSpec::preset(Level::MMini);
        s.fpn_channels[0] = 12;
        assert!(s.validate().is_err());
    }

    #[test]
    fn level_names() {
        assert_eq!("s-mini".parse::<Level>().unwrap(), Level::SMini);
        assert!("xl".parse::<Level>().is_err());
    }
}
