//! Output files appear whole or not at all.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Named documents produced by one command.
#[derive(Debug, Default)]
pub struct Outputs {
    docs: Vec<(String, String)>,
    /// Skipped when printing to stdout.
    files: Vec<(String, String)>,
}

impl Outputs {
    pub fn push(&mut self, name: impl Into<String>, body: String) {
        self.docs.push((name.into(), body));
    }

    pub fn push_file_only(&mut self, name: impl Into<String>, body: String) {
        self.files.push((name.into(), body));
    }

    /// Print to stdout, or write every document into `dir`.
    pub fn emit(self, dir: Option<&Path>) -> Result<()> {
        match dir {
            None => {
                let mut out = std::io::stdout().lock();
                for (_, body) in &self.docs {
                    out.write_all(body.as_bytes())?;
                }
                Ok(())
            }
            Some(dir) => {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                // Stage everything first so a failed write leaves no new files.
                let staged = self
                    .docs
                    .iter()
                    .chain(&self.files)
                    .map(|(name, body)| Ok((stage(dir, body)?, dir.join(name))))
                    .collect::<Result<Vec<_>>>()?;
                for (tmp, dest) in staged {
                    tmp.persist(&dest)
                        .with_context(|| format!("writing {}", dest.display()))?;
                }
                Ok(())
            }
        }
    }
}

fn stage(dir: &Path, body: &str) -> Result<tempfile::NamedTempFile> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(body.as_bytes())?;
    tmp.as_file().sync_all()?;
    Ok(tmp)
}

/// Write one file atomically through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
