//! Outputs are assembled in a hidden sibling directory and renamed into place
//! only once every file is written.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use layout_attn::{Error, Result};
use tempfile::TempDir;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parent_of(dest: &Path) -> Result<PathBuf> {
    let parent = match dest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    Ok(parent)
}

fn hidden_prefix(dest: &Path) -> String {
    let name = dest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    format!(".{name}.partial-")
}

pub struct StagedDir {
    tmp: TempDir,
    dest: PathBuf,
}

impl StagedDir {
    pub fn new(dest: &Path) -> Result<Self> {
        let parent = parent_of(dest)?;
        let tmp = tempfile::Builder::new()
            .prefix(&hidden_prefix(dest))
            .tempdir_in(&parent)
            .map_err(io_err(&parent))?;
        Ok(Self {
            tmp,
            dest: dest.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        self.tmp.path()
    }

    /// Replaces `dest` with the staged directory.
    pub fn commit(self) -> Result<()> {
        if self.dest.is_dir() {
            fs::remove_dir_all(&self.dest).map_err(io_err(&self.dest))?;
        } else if self.dest.exists() {
            fs::remove_file(&self.dest).map_err(io_err(&self.dest))?;
        }
        let staged = self.tmp.keep();
        fs::rename(&staged, &self.dest).map_err(io_err(&self.dest))
    }
}

/// Writes a single file through a temporary sibling.
pub fn write_file(dest: &Path, bytes: &[u8]) -> Result<()> {
    let parent = parent_of(dest)?;
    let mut tmp = tempfile::Builder::new()
        .prefix(&hidden_prefix(dest))
        .tempfile_in(&parent)
        .map_err(io_err(&parent))?;
    tmp.write_all(bytes).map_err(io_err(dest))?;
    tmp.persist(dest).map_err(|e| Error::Io {
        path: dest.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}
