//! Map export and import.
//!
//! PGM (plain P2) renders occupied as 0, unexplored as 128 and free as 255,
//! with the top image line at the largest `iy`. The CSV form starts with a
//! `# grid` line carrying the geometry, followed by one line per `iy`
//! (ascending) of comma-separated cell values. Evidence maps and ground-truth
//! tri-state maps share this layout; a tri-state map reads back as the sign of
//! each value.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{CellState, GridGeometry, OccupancyGrid, TriMap};

#[derive(Debug, Error)]
pub enum MapIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub fn pgm_string(map: &TriMap) -> String {
    let g = map.geometry;
    let mut out = format!("P2\n{} {}\n255\n", g.cols, g.rows);
    for iy in (0..g.rows).rev() {
        let row: Vec<&str> = (0..g.cols)
            .map(|ix| match map.cells[iy * g.cols + ix] {
                CellState::Occupied => "0",
                CellState::Unexplored => "128",
                CellState::Free => "255",
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_pgm(path: &Path, map: &TriMap) -> Result<(), MapIoError> {
    fs::write(path, pgm_string(map))?;
    Ok(())
}

fn header(g: &GridGeometry) -> String {
    format!(
        "# grid origin_x={} origin_y={} resolution={} rows={} cols={}\n",
        g.origin[0], g.origin[1], g.resolution, g.rows, g.cols
    )
}

fn csv_string<T: std::fmt::Display>(g: &GridGeometry, values: impl Iterator<Item = T>) -> String {
    let mut out = header(g);
    let values: Vec<T> = values.collect();
    for row in values.chunks(g.cols) {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_evidence_csv(path: &Path, grid: &OccupancyGrid) -> Result<(), MapIoError> {
    fs::write(path, csv_string(grid.geometry(), grid.evidence_slice().iter()))?;
    Ok(())
}

pub fn write_tri_csv(path: &Path, map: &TriMap) -> Result<(), MapIoError> {
    fs::write(path, csv_string(&map.geometry, map.cells.iter().map(|c| c.value())))?;
    Ok(())
}

/// Reads a map CSV into its geometry and raw cell values.
pub fn parse_map_csv(text: &str) -> Result<(GridGeometry, Vec<f64>), MapIoError> {
    let err = |line: usize, message: String| MapIoError::Parse { line, message };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let rest = first
        .strip_prefix("# grid")
        .ok_or_else(|| err(1, "missing `# grid` header".into()))?;
    let mut origin = [f64::NAN; 2];
    let mut resolution = f64::NAN;
    let (mut rows, mut cols) = (0usize, 0usize);
    for token in rest.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| err(1, format!("malformed header token `{token}`")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|e| err(1, format!("{key}: {e}")));
        let int = |v: &str| v.parse::<usize>().map_err(|e| err(1, format!("{key}: {e}")));
        match key {
            "origin_x" => origin[0] = num(value)?,
            "origin_y" => origin[1] = num(value)?,
            "resolution" => resolution = num(value)?,
            "rows" => rows = int(value)?,
            "cols" => cols = int(value)?,
            other => return Err(err(1, format!("unknown header key `{other}`"))),
        }
    }
    let geometry = GridGeometry::new(origin, resolution, rows, cols).map_err(|e| err(1, e.to_string()))?;

    let mut values = Vec::with_capacity(geometry.len());
    let mut data_lines = 0;
    for (k, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        data_lines += 1;
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(k + 1, e.to_string()))?;
        if row.len() != cols {
            return Err(err(k + 1, format!("expected {cols} values, found {}", row.len())));
        }
        values.extend(row);
    }
    if data_lines != rows {
        return Err(err(
            text.lines().count(),
            format!("expected {rows} rows, found {data_lines}"),
        ));
    }
    Ok((geometry, values))
}

/// Loads a map CSV as a tri-state map (sign of each value).
pub fn read_map_csv(path: &Path) -> Result<TriMap, MapIoError> {
    let (geometry, values) = parse_map_csv(&fs::read_to_string(path)?)?;
    Ok(TriMap {
        geometry,
        cells: values.into_iter().map(CellState::from_evidence).collect(),
    })
}
