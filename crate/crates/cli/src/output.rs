use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::settings::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const OUTPUT_ROOT_ENV: &str = "MSTOP_OUTPUT_ROOT";

/// Resolves the run directory: `--out`, else `$MSTOP_OUTPUT_ROOT/<default_name>`,
/// else `runs/<default_name>`.
pub fn output_dir(out: Option<&Path>, default_name: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(default_name)
        }
    }
}

/// A hidden sibling directory that is renamed onto the target on commit and
/// removed otherwise.
pub struct Staging {
    target: PathBuf,
    dir: PathBuf,
    force: bool,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path, force: bool) -> Result<Self> {
        if target.exists() && !force {
            return Err(CliError::OutputExists(target.to_path_buf()));
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("output path {} has no final component", target.display())))?
            .to_string_lossy()
            .into_owned();
        let dir = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::create_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            target: target.to_path_buf(),
            dir,
            force,
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut out = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut out, r).map_err(|e| CliError::Runtime(e.to_string()))?;
            out.push(b'\n');
        }
        self.write(name, &out)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut out = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        out.push(b'\n');
        self.write(name, &out)
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Runtime(format!("{name}: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Runtime(format!("{name}: {e}")))?;
        self.write(name, &bytes)
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            if !self.force {
                return Err(CliError::OutputExists(self.target.clone()));
            }
            fs::remove_dir_all(&self.target).map_err(|e| CliError::io(&self.target, e))?;
        }
        fs::rename(&self.dir, &self.target).map_err(|e| CliError::io(&self.target, e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub run: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub workers: usize,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(run: RunConfig, workers: usize, files: &[&str]) -> Self {
        let mut files: Vec<String> = files.iter().map(|f| f.to_string()).collect();
        files.push(MANIFEST.into());
        files.sort();
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seeds: run.seeds(),
            run,
            workers,
            files,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Left-aligned first column, right-aligned others.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// `(reference - obtained) / reference` in percent; zero when the reference
/// is zero.
pub fn gap_pct(reference: f64, obtained: f64) -> f64 {
    if reference > 0.0 {
        100.0 * (reference - obtained) / reference
    } else {
        0.0
    }
}
