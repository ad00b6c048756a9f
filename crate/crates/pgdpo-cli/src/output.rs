//! Output files of a run: the metrics CSV, checkpoint files with their
//! retention policy, trajectory dumps, and the policy-surface CSV. Every
//! file is rewritten whole through a temp-file rename, so an interrupted
//! run never leaves a truncated file that still parses.

use std::path::{Path, PathBuf};

use pgdpo::checkpoint::{self, Checkpoint};
use pgdpo::error::{Error, Result};
use pgdpo::eval::{self, EVAL_GRID};
use pgdpo::model::{Domain, MarketParams};
use pgdpo::sim::{CPolicyRef, PiPolicyRef};
use pgdpo::train::MILESTONES;

/// Header of the per-step trajectory dump.
pub const PATHS_CSV_HEADER: &str = "iter,path,k,t,x,pi,c";

/// Header of the policy-surface dump.
pub const SURFACE_CSV_HEADER: &str = "t,x,c_learned,c_exact,pi_learned,pi_exact";

/// Checkpoints besides milestones kept at any one time.
pub const KEEP_LAST_CHECKPOINTS: usize = 3;

/// A CSV file that accumulates rows and is atomically rewritten on every
/// append, so its on-disk form is always complete.
pub struct CsvFile {
    path: PathBuf,
    header: &'static str,
    rows: Vec<String>,
}

impl CsvFile {
    pub fn fresh(path: PathBuf, header: &'static str) -> CsvFile {
        CsvFile { path, header, rows: Vec::new() }
    }

    /// Reopen an existing file keeping only rows whose leading integer
    /// column is at most `upto_iter`; a missing file starts empty. Kept rows
    /// are preserved verbatim, so a resumed run reproduces the bytes an
    /// uninterrupted run would have written.
    pub fn resume(path: PathBuf, header: &'static str, upto_iter: u64) -> Result<CsvFile> {
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(CsvFile::fresh(path, header))
            }
            Err(e) => return Err(e.into()),
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(first) if first == header => {}
            _ => {
                return Err(Error::Checkpoint(format!(
                    "{} is not a {} CSV; refusing to resume over it",
                    path.display(),
                    header.split(',').next().unwrap_or("run")
                )))
            }
        }
        let mut rows = Vec::new();
        for line in lines {
            let iter_field = line.split(',').next().unwrap_or("");
            let it: u64 = iter_field.parse().map_err(|_| {
                Error::Checkpoint(format!(
                    "{} has a malformed row {line:?}; refusing to resume over it",
                    path.display()
                ))
            })?;
            if it <= upto_iter {
                rows.push(line.to_string());
            }
        }
        Ok(CsvFile { path, header, rows })
    }

    pub fn append(&mut self, row: String) -> Result<()> {
        self.rows.push(row);
        self.flush()
    }

    pub fn append_all(&mut self, rows: impl IntoIterator<Item = String>) -> Result<()> {
        self.rows.extend(rows);
        self.flush()
    }

    fn flush(&self) -> Result<()> {
        let mut text = String::with_capacity(self.header.len() + 1 + 32 * self.rows.len());
        text.push_str(self.header);
        text.push('\n');
        for row in &self.rows {
            text.push_str(row);
            text.push('\n');
        }
        checkpoint::write_atomic(&self.path, text.as_bytes())
    }
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

pub fn paths_path(out: &Path) -> PathBuf {
    out.join("paths.csv")
}

pub fn checkpoint_filename(iter: u64) -> String {
    format!("checkpoint-{iter:07}.json")
}

fn checkpoint_iter(name: &str) -> Option<u64> {
    name.strip_prefix("checkpoint-")?.strip_suffix(".json")?.parse().ok()
}

/// All checkpoints in `dir`, sorted by iteration.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(found),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let entry = entry?;
        if let Some(it) = entry.file_name().to_str().and_then(checkpoint_iter) {
            found.push((it, entry.path()));
        }
    }
    found.sort_by_key(|(it, _)| *it);
    Ok(found)
}

pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    Ok(list_checkpoints(dir)?.into_iter().next_back())
}

/// Write a checkpoint and drop old ones, keeping the newest
/// [`KEEP_LAST_CHECKPOINTS`] plus every milestone iteration.
pub fn save_checkpoint_pruning(dir: &Path, ck: &Checkpoint) -> Result<()> {
    checkpoint::save(&dir.join(checkpoint_filename(ck.iter)), ck)?;
    let found = list_checkpoints(dir)?;
    let cut = found.len().saturating_sub(KEEP_LAST_CHECKPOINTS);
    for (it, path) in &found[..cut] {
        if !MILESTONES.contains(it) {
            std::fs::remove_file(path)?;
        }
    }
    Ok(())
}

/// Evaluate both policies against their closed forms on the standard grid
/// and write the surface CSV.
pub fn write_surface(
    path: &Path,
    pi: &PiPolicyRef<'_>,
    c: &CPolicyRef<'_>,
    p: &MarketParams,
    d: &Domain,
) -> Result<()> {
    let rows = eval::surface_rows(pi, c, p, d, EVAL_GRID)?;
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(SURFACE_CSV_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.t, r.x, r.c_learned, r.c_exact, r.pi_learned, r.pi_exact
        ));
    }
    checkpoint::write_atomic(path, text.as_bytes())
}
