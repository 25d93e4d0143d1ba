//! Atomic file output with rollback.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Tracks every file and directory created during one command so that a
/// failure can remove them again.
#[derive(Debug, Default)]
pub struct OutputSet {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl OutputSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `dir` (and missing parents), remembering what was new.
    pub fn ensure_dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        missing.reverse();
        self.dirs.extend(missing);
        Ok(())
    }

    /// Writes `bytes` to `path` through a temporary sibling and a rename.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent() {
            self.ensure_dir(parent)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let written = (|| -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        })();
        if let Err(e) = written {
            let _ = fs::remove_file(&tmp);
            return Err(e).with_context(|| format!("writing {}", path.display()));
        }
        self.files.push(path.to_path_buf());
        Ok(())
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    /// Removes everything this set created, newest first.
    pub fn rollback(self) {
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollback_removes_new_files_and_dirs() {
        let root = tempfile::tempdir().unwrap();
        let keep = root.path().join("keep.txt");
        fs::write(&keep, "x").unwrap();
        let mut out = OutputSet::new();
        let nested = root.path().join("a/b/c.csv");
        out.write(&nested, b"data").unwrap();
        assert_eq!(fs::read(&nested).unwrap(), b"data");
        assert!(!root.path().join("a/b/c.csv.tmp").exists());
        out.rollback();
        assert!(!root.path().join("a").exists());
        assert!(keep.exists());
    }
}
