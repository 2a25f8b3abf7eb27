use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use crate::CliResult;

/// Tracks files written by a command so a failed run leaves nothing
/// behind: new files are deleted, appended files are truncated back and a
/// directory created by the run is removed.
pub(crate) struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<(PathBuf, Option<u64>)>,
    committed: bool,
}

impl Outputs {
    pub fn new(dir: &Path) -> CliResult<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Register `name` inside the output directory before writing it.
    pub fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        if !self.files.iter().any(|(f, _)| *f == p) {
            let len = fs::metadata(&p).ok().map(|m| m.len());
            self.files.push((p.clone(), len));
        }
        p
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.created_dir {
            let _ = fs::remove_dir_all(&self.dir);
            return;
        }
        for (path, len) in self.files.iter().rev() {
            match len {
                None => {
                    let _ = fs::remove_file(path);
                }
                Some(n) => {
                    if let Ok(f) = OpenOptions::new().write(true).open(path) {
                        let _ = f.set_len(*n);
                    }
                }
            }
        }
    }
}
