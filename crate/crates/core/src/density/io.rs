//! Plain-text serialization of grid densities: a CSV of node coordinates and
//! values plus a JSON sidecar with the grid and mass.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Grid, GridDensity};

/// Fixed float formatting: 17 significant digits, so output is exact and
/// byte-stable across runs.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHeader {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub nodes: Vec<usize>,
    pub mass: f64,
}

const AXIS_NAMES: [&str; 2] = ["x", "y"];

/// Writes `<stem>.csv` and `<stem>.json` into `dir` and returns the CSV path.
pub fn write_density(dir: &Path, stem: &str, density: &GridDensity) -> io::Result<PathBuf> {
    let grid = density.grid();
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut out = io::BufWriter::new(fs::File::create(&csv_path)?);
    let mut header: Vec<&str> = AXIS_NAMES[..grid.dimension()].to_vec();
    header.push("value");
    writeln!(out, "{}", header.join(","))?;
    for (i, v) in density.values().iter().enumerate() {
        let mut row: Vec<String> = grid.point(i).into_iter().map(fmt_f64).collect();
        row.push(fmt_f64(*v));
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;

    let meta = DensityHeader {
        lower: grid.lower().to_vec(),
        upper: grid.upper().to_vec(),
        nodes: grid.nodes().to_vec(),
        mass: density.mass(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(io::Error::other)?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(csv_path)
}

/// Reads a density written by [`write_density`].
pub fn read_density(dir: &Path, stem: &str) -> io::Result<GridDensity> {
    let meta: DensityHeader =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)
            .map_err(io::Error::other)?;
    let grid = Grid::new(meta.lower, meta.upper, meta.nodes).map_err(io::Error::other)?;
    let text = fs::read_to_string(dir.join(format!("{stem}.csv")))?;
    let values = text
        .lines()
        .skip(1)
        .map(|line| {
            line.rsplit(',')
                .next()
                .unwrap_or_default()
                .parse::<f64>()
                .map_err(io::Error::other)
        })
        .collect::<io::Result<Vec<f64>>>()?;
    GridDensity::new(grid, values).map_err(io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("gradflow-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let grid = Grid::new(vec![-1.0, 0.0], vec![1.0, 2.0], vec![16, 17]).unwrap();
        let d = GridDensity::gaussian(&grid, &[0.1, 1.0], 0.3).unwrap();
        write_density(&dir, "snap", &d).unwrap();
        let back = read_density(&dir, "snap").unwrap();
        assert_eq!(back, d);
        let first = fs::read_to_string(dir.join("snap.csv")).unwrap();
        assert!(first.starts_with("x,y,value\n"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn formatting_keeps_all_digits() {
        let v = 0.1 + 0.2;
        assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }
}
