//! Run directory: config snapshot, long-format metrics, event log and
//! checkpoints, guarded by a lock file.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::metrics::{CsvRow, CSV_HEADER};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.log";
pub const LOCK_FILE: &str = "run.lock";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DIAGNOSTIC_DIR: &str = "diagnostics";

/// Exclusive writer handle on a run directory. The lock is released on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    started: Instant,
}

impl RunDir {
    /// Creates (if needed) and locks `root`. Fails with [`Error::Locked`]
    /// while another writer holds the lock.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join(CHECKPOINT_DIR))?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(Error::Locked { path: root.to_path_buf() }),
            Err(e) => return Err(e.into()),
        }
        Ok(Self { root: root.to_path_buf(), started: Instant::now() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_snapshot(&self, contents: &str) -> Result<()> {
        fs::write(self.root.join(SNAPSHOT_FILE), contents)?;
        Ok(())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn append_metrics(&self, rows: &[CsvRow]) -> Result<()> {
        let path = self.metrics_path();
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(f, "{CSV_HEADER}")?;
        }
        for r in rows {
            writeln!(f, "{}", r.to_line())?;
        }
        Ok(())
    }

    /// Drops metric rows logged after `step`, so a resumed run does not
    /// duplicate them.
    pub fn truncate_metrics_after(&self, step: usize) -> Result<()> {
        let path = self.metrics_path();
        if !path.exists() {
            return Ok(());
        }
        let rows = read_metrics(&path)?;
        let mut out = format!("{CSV_HEADER}\n");
        for r in rows.iter().filter(|r| r.step <= step) {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Appends a line prefixed with seconds since the directory was opened.
    pub fn event(&self, msg: &str) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.root.join(EVENTS_FILE))?;
        writeln!(f, "[{:.3}s] {msg}", self.started.elapsed().as_secs_f64())?;
        Ok(())
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        checkpoint_path(&self.root, step)
    }

    pub fn diagnostic_path(&self, step: usize) -> PathBuf {
        self.root.join(DIAGNOSTIC_DIR).join(format!("step_{step}"))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

pub fn checkpoint_path(root: &Path, step: usize) -> PathBuf {
    root.join(CHECKPOINT_DIR).join(format!("step_{step}"))
}

/// Checkpoint with the highest step in `root`, if any.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    let dir = root.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let step = p.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("step_")).and_then(|n| n.parse().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, p));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn read_metrics(path: &Path) -> Result<Vec<CsvRow>> {
    let f = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != CSV_HEADER {
                return Err(Error::InvalidArgument(format!("{}: unexpected header {line:?}", path.display())));
            }
            continue;
        }
        if !line.trim().is_empty() {
            rows.push(CsvRow::parse(&line)?);
        }
    }
    Ok(rows)
}
