//! Run configuration: one JSON document per run, unknown fields rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kreuse_core::data::DataParams;
use kreuse_core::search::BilevelConfig;
use kreuse_core::supernet::{Level, SearchSpaceSpec};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Preset used when `spec` is absent.
    pub level: Level,
    /// Explicit macro structure; overrides `level`. Its class count is
    /// replaced by the dataset's.
    pub spec: Option<SearchSpaceSpec>,
    pub search: BilevelConfig,
    pub data: DataParams,
    /// Images generated for search and eval.
    pub n_train: usize,
    pub data_seed: u64,
    /// Training epochs for `eval`.
    pub eval_epochs: usize,
    /// Parent of the timestamped run directories.
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            level: Level::SMini,
            spec: None,
            search: BilevelConfig { epochs: 10, ..Default::default() },
            data: DataParams::default(),
            n_train: 200,
            data_seed: 0,
            eval_epochs: 10,
            out: PathBuf::from("runs"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub level: Option<Level>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        // serde_json reports the offending field with its line and column.
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    /// Reads `path` if given, otherwise starts from the defaults, then
    /// applies the overrides and validates.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = o.seed {
            cfg.search.seed = seed;
            cfg.data_seed = seed;
        }
        if let Some(out) = &o.out {
            cfg.out = out.clone();
        }
        if let Some(level) = o.level {
            cfg.level = level;
            cfg.spec = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.search.validate()?;
        self.space().validate()?;
        if self.n_train < 2 {
            bail!("n_train must be at least 2 (weight and architecture splits)");
        }
        Ok(())
    }

    /// The search space, with the head sized for the dataset's classes.
    pub fn space(&self) -> SearchSpaceSpec {
        self.spec.clone().unwrap_or_else(|| SearchSpaceSpec::preset(self.level)).with_classes(self.data.num_classes)
    }
}
