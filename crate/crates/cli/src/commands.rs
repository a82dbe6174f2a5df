//! The six commands. Each writes into its own run directory and returns a
//! human-readable summary, which is also saved as `summary.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use kreuse_core::data::{gen_synthetic_dataset, Dataset};
use kreuse_core::search::{run_search, train_derived, ArchCheckpoint, TrainMetrics};
use kreuse_core::selfcheck::{run_selected, REFERENCE_SIZES};
use kreuse_core::supernet::count::{fusion_block_size_single_c3, sci2};
use kreuse_core::supernet::derived::count_params_flops;
use kreuse_core::supernet::{count_search_space, derive, ArchParams, DerivedNet, Genotype, Level, SearchSpaceSpec};
use serde_json::json;

use crate::config::RunConfig;
use crate::rundir::create_run_dir;

pub struct Report {
    pub dir: PathBuf,
    pub summary: String,
    /// False only for a failed selfcheck.
    pub passed: bool,
}

fn start(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = create_run_dir(&cfg.out, command)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(dir)
}

fn finish(dir: PathBuf, summary: String, passed: bool) -> Result<Report> {
    std::fs::write(dir.join("summary.txt"), &summary)?;
    Ok(Report { dir, summary, passed })
}

fn dataset(cfg: &RunConfig, from: Option<&Path>) -> Result<Dataset> {
    let d = match from {
        Some(p) => Dataset::load(p).with_context(|| format!("loading dataset {}", p.display()))?,
        None => gen_synthetic_dataset(cfg.n_train, &cfg.data, cfg.data_seed)?,
    };
    if d.num_classes != cfg.data.num_classes {
        bail!("dataset has {} classes, config says {}", d.num_classes, cfg.data.num_classes);
    }
    Ok(d)
}

fn loss_line(m: &TrainMetrics) -> String {
    match (m.epochs.first(), m.epochs.last()) {
        (Some(a), Some(b)) => format!(
            "weight loss {:.4} (epoch 0) -> {:.4} (epoch {}), ratio {:.3}",
            a.weight_loss,
            b.weight_loss,
            b.epoch,
            b.weight_loss / a.weight_loss
        ),
        _ => "no epochs run".to_string(),
    }
}

fn genotype_line(gt: &Genotype, image: usize) -> Result<String> {
    let (params, macs) = count_params_flops(gt, (image, image))?;
    Ok(format!("derived network: {} parameters, {} MACs at {}x{}", params, macs, image, image))
}

pub fn search(cfg: &RunConfig, data: Option<&Path>) -> Result<Report> {
    let spec = cfg.space();
    let d = dataset(cfg, data)?;
    let dir = start(cfg, "search")?;
    let t = Instant::now();
    let out = run_search::<f32>(&spec, &d, &cfg.search)?;
    out.genotype.save(&dir.join("genotype.json"))?;
    out.metrics.write_csv(&dir.join("metrics.csv"))?;
    ArchCheckpoint::from_arch(&spec, &out.searcher.net.arch).save(&dir.join("arch.json"))?;
    let mut s = String::new();
    writeln!(s, "search at level {} on {} images, {} epochs, {:.1} s", spec.level, d.len(), cfg.search.epochs, t.elapsed().as_secs_f64())?;
    writeln!(s, "{}", loss_line(&out.metrics))?;
    writeln!(s, "{}", genotype_line(&out.genotype, cfg.data.image_size)?)?;
    writeln!(s, "wrote genotype.json, metrics.csv, arch.json to {}", dir.display())?;
    finish(dir, s, true)
}

pub fn derive_cmd(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Report> {
    let (spec, arch) = match checkpoint {
        Some(p) => {
            let ck = ArchCheckpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            let arch = ck.arch()?;
            (ck.spec, arch)
        }
        // Zero logits: every choice falls to the lowest index.
        None => {
            let spec = cfg.space();
            let arch = ArchParams::<f32>::new(&spec)?;
            (spec, arch)
        }
    };
    let gt = derive(&arch, &spec)?;
    let dir = start(cfg, "derive")?;
    gt.save(&dir.join("genotype.json"))?;
    let mut s = String::new();
    match checkpoint {
        Some(p) => writeln!(s, "derived from {}", p.display())?,
        None => writeln!(s, "derived from zero-initialized logits at level {}", spec.level)?,
    }
    writeln!(s, "{}", genotype_line(&gt, cfg.data.image_size)?)?;
    writeln!(s, "wrote genotype.json to {}", dir.display())?;
    finish(dir, s, true)
}

pub fn eval(cfg: &RunConfig, genotype: &Path, data: Option<&Path>) -> Result<Report> {
    let gt = Genotype::load(genotype).with_context(|| format!("loading genotype {}", genotype.display()))?;
    if gt.spec_echo.num_classes != cfg.data.num_classes {
        bail!("genotype heads predict {} classes, config data has {}", gt.spec_echo.num_classes, cfg.data.num_classes);
    }
    let d = dataset(cfg, data)?;
    let dir = start(cfg, "eval")?;
    let mut net = DerivedNet::<f32>::from_scratch(&gt, cfg.search.seed)?;
    let t = Instant::now();
    let m = train_derived(&mut net, &d, cfg.eval_epochs, &cfg.search)?;
    m.write_csv(&dir.join("metrics.csv"))?;
    gt.save(&dir.join("genotype.json"))?;
    let finite = m.epochs.iter().all(|e| e.weight_loss.is_finite());
    let mut s = String::new();
    writeln!(s, "trained {} from scratch on {} images, {} epochs, {:.1} s", genotype.display(), d.len(), cfg.eval_epochs, t.elapsed().as_secs_f64())?;
    writeln!(s, "{}", loss_line(&m))?;
    writeln!(s, "losses finite: {}", finite)?;
    writeln!(s, "{}", genotype_line(&gt, cfg.data.image_size)?)?;
    writeln!(s, "wrote metrics.csv to {}", dir.display())?;
    finish(dir, s, finite)
}

/// Counting always runs on the full presets.
pub fn count_space(cfg: &RunConfig, level: Option<Level>) -> Result<Report> {
    let levels: Vec<Level> = match level {
        None => Level::FULL.to_vec(),
        Some(l) if Level::FULL.contains(&l) => vec![l],
        Some(l) => bail!("count-space takes a full preset (s, m, l, x), not {}", l),
    };
    let dir = start(cfg, "count-space")?;
    let mut s = String::new();
    let mut rows = Vec::new();
    writeln!(s, "{:<6}{:>10}{:>10}{:>10}{:>12}  reference", "level", "backbone", "fpn", "total", "exact total")?;
    for l in levels {
        let c = count_search_space(&SearchSpaceSpec::preset(l));
        let reference = REFERENCE_SIZES.iter().find(|r| r.0 == l).map(|r| (r.1, r.2, r.3));
        let matches = reference == Some((c.backbone_sci.as_str(), c.fpn_sci.as_str(), c.table_total_sci.as_str()));
        writeln!(
            s,
            "{:<6}{:>10}{:>10}{:>10}{:>12}  {}",
            l.name(),
            c.backbone_sci,
            c.fpn_sci,
            c.table_total_sci,
            c.total_sci,
            if matches { "match" } else { "MISMATCH" }
        )?;
        writeln!(s, "      exact: backbone {} fpn {} total {}", c.backbone, c.fpn, c.total)?;
        rows.push(json!({
            "level": l.name(),
            "counts": l_counts(l),
            "backbone": c.backbone.to_string(),
            "fpn": c.fpn.to_string(),
            "total": c.total.to_string(),
            "backbone_sci": c.backbone_sci,
            "fpn_sci": c.fpn_sci,
            "total_sci": c.total_sci,
            "table_total_sci": c.table_total_sci,
            "matches_reference": matches,
        }));
    }
    let k_b = SearchSpaceSpec::preset(Level::S).counts().k_b;
    let single = fusion_block_size_single_c3(k_b);
    writeln!(s, "note: the total column multiplies the rounded backbone and FPN sizes; the exact product can differ in the last digit (s: 7.8e36 exact)")?;
    writeln!(
        s,
        "note: the per-block FPN formula with a single C3 expansion factor gives {} for s; one C3 factor per fused scale (three per block) reproduces the reference sizes, so that reading is used",
        sci2(&(&single * &single))
    )?;
    std::fs::write(dir.join("count-space.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    finish(dir, s, true)
}

fn l_counts(l: Level) -> serde_json::Value {
    let c = SearchSpaceSpec::preset(l).counts();
    json!({"l_d": c.l_d, "l_c": c.l_c, "l_b": c.l_b, "k_b": c.k_b})
}

pub fn selfcheck(cfg: &RunConfig, seed: u64, only: &[String]) -> Result<Report> {
    let dir = start(cfg, "selfcheck")?;
    let report = run_selected(seed, |name| only.is_empty() || only.iter().any(|o| name.contains(o.as_str())));
    if report.checks.is_empty() {
        bail!("no check matches {:?}", only);
    }
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut s = String::new();
    for c in &report.checks {
        writeln!(s, "{} {:<30} {:>6.2} s  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.seconds, c.detail)?;
    }
    let failed = report.failures().count();
    writeln!(s, "{} of {} checks passed (seed {})", report.checks.len() - failed, report.checks.len(), seed)?;
    finish(dir, s, report.passed())
}

pub fn gen_data(cfg: &RunConfig) -> Result<Report> {
    let d = gen_synthetic_dataset(cfg.n_train, &cfg.data, cfg.data_seed)?;
    let dir = start(cfg, "gen-data")?;
    let target = dir.join("dataset");
    d.save(&target)?;
    let boxes: usize = d.samples.iter().map(|s| s.boxes.len()).sum();
    let mut s = String::new();
    writeln!(
        s,
        "{} images of {}x{}, {} classes, {} boxes, seed {}",
        d.len(),
        cfg.data.image_size,
        cfg.data.image_size,
        d.num_classes,
        boxes,
        cfg.data_seed
    )?;
    writeln!(s, "wrote {}", target.display())?;
    finish(dir, s, true)
}
