//! Stage-completion markers: each finished stage leaves `<stage>.done`
//! holding the config hash. A rerun skips stages whose marker matches the
//! current hash; the first stale or missing stage invalidates every marker
//! after it, so downstream work is redone under the new configuration.

use std::path::{Path, PathBuf};

use rexlab_core::{Error, Result};

pub fn marker_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}.done"))
}

pub fn is_done(dir: &Path, stage: &str, hash: &str) -> bool {
    std::fs::read_to_string(marker_path(dir, stage))
        .map(|c| c.trim() == hash)
        .unwrap_or(false)
}

pub fn mark_done(dir: &Path, stage: &str, hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(marker_path(dir, stage), hash)?;
    Ok(())
}

/// Runs an ordered stage list, resuming after the last marker that matches
/// `hash`. Markers from the first stale stage onward are removed before any
/// stage runs. Returns the names of the stages that actually ran.
pub fn run_stages<'a>(
    dir: &Path,
    hash: &str,
    stages: &mut [(&'a str, Box<dyn FnMut() -> Result<()> + 'a>)],
) -> Result<Vec<&'a str>> {
    let first_stale = stages
        .iter()
        .position(|(name, _)| !is_done(dir, name, hash))
        .unwrap_or(stages.len());
    for (name, _) in &stages[first_stale..] {
        let m = marker_path(dir, name);
        if m.exists() {
            std::fs::remove_file(&m)?;
        }
    }
    let mut ran = Vec::new();
    for (name, f) in &mut stages[first_stale..] {
        f()?;
        mark_done(dir, name, hash)?;
        ran.push(*name);
    }
    Ok(ran)
}

/// Confirms every listed stage finished under `hash`; names the first gap and
/// the artifact a rerun would produce.
pub fn check_all_done(dir: &Path, hash: &str, stages: &[&str], producer: &str) -> Result<()> {
    for name in stages {
        if !is_done(dir, name, hash) {
            return Err(Error::config(format!(
                "stage `{name}` has not run under the current config (expected marker {}); run `{producer}` first",
                marker_path(dir, name).display()
            )));
        }
    }
    Ok(())
}
