//! `report`: collects recovery and similarity results from one run directory
//! or from every run directory under a parent, prints them as a table, and
//! writes a combined CSV next to the scanned directory's contents.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use rexlab_core::eval::RecoveryRow;
use rexlab_core::{Error, Result};

use crate::curate::read_jsonl_as;

/// One grid cell attributed to the run it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub block_size: usize,
    pub k: usize,
    pub accuracy: f64,
    pub masked_positions: usize,
}

#[derive(Debug, Deserialize)]
struct SimilarityFile {
    baseline_spearman: f64,
    fine_tune: FineTuneTail,
}

#[derive(Debug, Deserialize)]
struct FineTuneTail {
    dev_spearman: Vec<f64>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Directories holding results: `dir` itself when it contains an `eval/`
/// output, otherwise its immediate subdirectories that do, sorted by name.
fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("eval").join("recovery.jsonl").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    if !dir.is_dir() {
        return Err(Error::config(format!("{} is not a directory", dir.display())));
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.join("eval").join("recovery.jsonl").is_file() {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

pub fn cmd_report(dir: &Path) -> Result<()> {
    let runs = run_dirs(dir)?;
    if runs.is_empty() {
        println!("no completed runs under {}", dir.display());
        return Ok(());
    }
    let mut rows: Vec<ReportRow> = Vec::new();
    for rd in &runs {
        let name = run_name(rd);
        let recovery: Vec<RecoveryRow> = read_jsonl_as(&rd.join("eval").join("recovery.jsonl"))?;
        for r in recovery {
            rows.push(ReportRow {
                run: name.clone(),
                block_size: r.block_size,
                k: r.k,
                accuracy: r.accuracy,
                masked_positions: r.masked_positions,
            });
        }
    }

    println!("{:<20}{:>10}{:>6}{:>12}{:>10}", "run", "block", "k", "accuracy", "masked");
    for r in &rows {
        println!(
            "{:<20}{:>10}{:>6}{:>12.4}{:>10}",
            r.run, r.block_size, r.k, r.accuracy, r.masked_positions
        );
    }
    for rd in &runs {
        let sim = rd.join("eval").join("similarity.json");
        if let Ok(text) = std::fs::read_to_string(&sim) {
            let s: SimilarityFile = serde_json::from_str(&text).map_err(Error::from)?;
            println!(
                "{:<20}similarity: baseline {:.4}, tuned {:.4}",
                run_name(rd),
                s.baseline_spearman,
                s.fine_tune.dev_spearman.last().copied().unwrap_or(f64::NAN)
            );
        }
    }

    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, rows_to_csv(&rows))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("run,block_size,k,accuracy,masked_positions\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.run, r.block_size, r.k, r.accuracy, r.masked_positions
        ));
    }
    out
}

/// Parses the CSV written by [`rows_to_csv`]; floats round-trip exactly.
#[cfg(test)]
pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::data(format!("report line {} has {} fields", i + 1, parts.len())));
        }
        let field = |j: usize, what: &str| -> Result<f64> {
            parts[j]
                .parse::<f64>()
                .map_err(|_| Error::data(format!("bad {what} on report line {}", i + 1)))
        };
        rows.push(ReportRow {
            run: parts[0].to_string(),
            block_size: field(1, "block size")? as usize,
            k: field(2, "k")? as usize,
            accuracy: field(3, "accuracy")?,
            masked_positions: field(4, "masked position count")? as usize,
        });
    }
    Ok(rows)
}
