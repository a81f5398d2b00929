//! Output files are written next to their destination under a temporary name and
//! renamed into place only once the whole command has succeeded.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

#[derive(Default)]
pub struct StagedOutputs {
    pending: Vec<(PathBuf, PathBuf)>,
}

impl StagedOutputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserves `dest` and returns the temporary path to write instead.
    pub fn stage(&mut self, dest: &Path) -> Result<PathBuf> {
        if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let name = dest
            .file_name()
            .with_context(|| format!("output path {} has no file name", dest.display()))?;
        let mut tmp_name = std::ffi::OsString::from(".");
        tmp_name.push(name);
        tmp_name.push(format!(".tmp-{}", std::process::id()));
        let tmp = dest.with_file_name(tmp_name);
        self.pending.push((tmp.clone(), dest.to_path_buf()));
        Ok(tmp)
    }

    /// Moves every staged file into place.
    pub fn commit(mut self) -> Result<()> {
        let pending = std::mem::take(&mut self.pending);
        let mut done: Vec<PathBuf> = Vec::new();
        for (i, (tmp, dest)) in pending.iter().enumerate() {
            if let Err(e) = fs::rename(tmp, dest) {
                for d in &done {
                    let _ = fs::remove_file(d);
                }
                for (t, _) in &pending[i..] {
                    let _ = fs::remove_file(t);
                }
                return Err(e).with_context(|| format!("moving output into {}", dest.display()));
            }
            done.push(dest.clone());
        }
        Ok(())
    }
}

impl Drop for StagedOutputs {
    fn drop(&mut self) {
        for (tmp, _) in &self.pending {
            let _ = fs::remove_file(tmp);
        }
    }
}
