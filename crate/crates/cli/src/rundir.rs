use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Creates a fresh `<parent>/<command>-<UTC timestamp>` directory. An
/// existing directory is never reused; a numeric suffix is added instead.
pub fn create_run_dir(parent: &Path, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    for n in 0.. {
        let name = if n == 0 { format!("{}-{}", command, stamp) } else { format!("{}-{}-{}", command, stamp, n) };
        let dir = parent.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}
