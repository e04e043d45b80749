//! Checkpoint manifests.
//!
//! One checkpoint per line, comma separated:
//!
//! ```text
//! # step, tokens, path, alpha, M, K
//! 5000, 2560000000, ckpt_5000.moer, 0.01, 64, 8
//! 10000, 5120000000, ckpt_10000.moer, -, 64, 8
//! ```
//!
//! Lines starting with `#` and blank lines are ignored. `alpha` is `-` or
//! `nan` when the model has no auxiliary balance loss. Relative paths are
//! resolved against the manifest's directory. Steps must strictly increase.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub step: u64,
    pub tokens: u64,
    pub path: PathBuf,
    pub alpha: Option<f64>,
    pub experts: usize,
    pub top_k: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Parse manifest text. `source` names the file in error messages.
    pub fn parse(text: &str, base: &Path, source: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Manifest {
            path: source.to_path_buf(),
            line,
            message,
        };
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = body.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(err(
                    line,
                    format!("expected 6 fields, found {}", fields.len()),
                ));
            }
            let int = |i: usize, name: &str| {
                fields[i]
                    .parse::<u64>()
                    .map_err(|_| err(line, format!("{name} {:?} is not an integer", fields[i])))
            };
            let step = int(0, "step")?;
            let tokens = int(1, "tokens")?;
            if fields[2].is_empty() {
                return Err(err(line, "empty path".into()));
            }
            let path = Path::new(fields[2]);
            let path = if path.is_absolute() {
                path.to_path_buf()
            } else {
                base.join(path)
            };
            let alpha = match fields[3] {
                "-" | "" => None,
                s if s.eq_ignore_ascii_case("nan") => None,
                s => {
                    let a: f64 = s
                        .parse()
                        .map_err(|_| err(line, format!("alpha {s:?} is not a number")))?;
                    if !a.is_finite() || a < 0.0 {
                        return Err(err(
                            line,
                            format!("alpha {a} must be finite and nonnegative"),
                        ));
                    }
                    Some(a)
                }
            };
            let experts = int(4, "M")? as usize;
            let top_k = int(5, "K")? as usize;
            if experts < 2 || top_k == 0 || top_k > experts {
                return Err(err(
                    line,
                    format!("need M >= 2 and 1 <= K <= M, got M={experts} K={top_k}"),
                ));
            }
            if let Some(prev) = entries.last() {
                if step <= prev.step {
                    return Err(err(
                        line,
                        format!("step {step} does not follow {}", prev.step),
                    ));
                }
            }
            entries.push(ManifestEntry {
                step,
                tokens,
                path,
                alpha,
                experts,
                top_k,
            });
        }
        if entries.is_empty() {
            return Err(err(0, "manifest lists no checkpoints".into()));
        }
        Ok(Self { entries })
    }

    /// Render the manifest, writing paths relative to `base` where possible.
    pub fn render(&self, base: &Path) -> String {
        let mut out = String::from("# step, tokens, path, alpha, M, K\n");
        for e in &self.entries {
            let path = e.path.strip_prefix(base).unwrap_or(&e.path);
            let alpha = e.alpha.map_or("-".to_string(), |a| a.to_string());
            let _ = writeln!(
                out,
                "{}, {}, {}, {}, {}, {}",
                e.step,
                e.tokens,
                path.display(),
                alpha,
                e.experts,
                e.top_k
            );
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        fs::write(path, self.render(base))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}
