//! File writers with fixed formatting, so identical runs give identical bytes.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use gradflow::density::io::fmt_f64;
use serde::Serialize;

use crate::CliError;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes a CSV with a header row and one formatted row per entry.
pub fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut body = String::new();
    body.push_str(&header.join(","));
    body.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        let cells: Vec<String> = row.into_iter().map(fmt_f64).collect();
        body.push_str(&cells.join(","));
        body.push('\n');
        if body.len() > 1 << 16 {
            out.write_all(body.as_bytes()).map_err(io_err(path))?;
            body.clear();
        }
    }
    out.write_all(body.as_bytes()).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn snapshot_dir(out: &Path) -> Result<PathBuf, CliError> {
    let dir = out.join("snapshots");
    ensure_dir(&dir)?;
    Ok(dir)
}

pub fn columns(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}
