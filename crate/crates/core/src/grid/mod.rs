//! Occupancy evidence grid driven by raycasts between tag and anchors.
//!
//! Each cell accumulates signed evidence: LOS rays add `p_free`, NLOS rays
//! subtract `p_occupy` from cells that are not currently free. The tri-state
//! view is the sign of the evidence, with zero meaning unexplored.

mod filter;
mod io;

pub use filter::{filter_binary, majority_stage, FilterParams};
pub use io::{read_map_csv, write_evidence_csv, write_pgm, write_tri_csv, MapIoError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("point ({0}, {1}) lies outside the grid")]
    OutOfBounds(f64, f64),
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid hit parameters: {0}")]
    InvalidParams(String),
    #[error("grid geometries differ")]
    GeometryMismatch,
}

/// Integer cell index; `ix` runs along world x, `iy` along world y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub ix: usize,
    pub iy: usize,
}

impl Cell {
    pub fn new(ix: usize, iy: usize) -> Self {
        Self { ix, iy }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridGeometry {
    /// World coordinates of the outer corner of cell (0, 0).
    pub origin: [f64; 2],
    /// Cell edge length in meters.
    pub resolution: f64,
    /// Cells along y.
    pub rows: usize,
    /// Cells along x.
    pub cols: usize,
}

impl GridGeometry {
    pub fn new(origin: [f64; 2], resolution: f64, rows: usize, cols: usize) -> Result<Self, GridError> {
        let g = Self {
            origin,
            resolution,
            rows,
            cols,
        };
        g.validate()?;
        Ok(g)
    }

    /// Smallest grid at `resolution` covering the rectangle `min..max`.
    pub fn covering(min: [f64; 2], max: [f64; 2], resolution: f64) -> Result<Self, GridError> {
        if !(resolution > 0.0) {
            return Err(GridError::InvalidGeometry(format!("resolution {resolution}")));
        }
        let span = |lo: f64, hi: f64| ((hi - lo) / resolution - 1e-9).ceil().max(1.0) as usize;
        Self::new(min, resolution, span(min[1], max[1]), span(min[0], max[0]))
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(GridError::InvalidGeometry(format!(
                "resolution {} must be positive",
                self.resolution
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(GridError::InvalidGeometry("grid has no cells".into()));
        }
        if !(self.origin[0].is_finite() && self.origin[1].is_finite()) {
            return Err(GridError::InvalidGeometry("origin is not finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, cell: Cell) -> usize {
        cell.iy * self.cols + cell.ix
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index % self.cols, index / self.cols)
    }

    /// Cell containing `(x, y)`. The upper edges are closed so that a point on
    /// the far boundary maps to the last cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Result<Cell, GridError> {
        let fx = (x - self.origin[0]) / self.resolution;
        let fy = (y - self.origin[1]) / self.resolution;
        let inside = |f: f64, n: usize| f >= 0.0 && f <= n as f64;
        if !(inside(fx, self.cols) && inside(fy, self.rows)) {
            return Err(GridError::OutOfBounds(x, y));
        }
        Ok(Cell::new(
            (fx.floor() as usize).min(self.cols - 1),
            (fy.floor() as usize).min(self.rows - 1),
        ))
    }

    pub fn center(&self, cell: Cell) -> [f64; 2] {
        [
            self.origin[0] + (cell.ix as f64 + 0.5) * self.resolution,
            self.origin[1] + (cell.iy as f64 + 0.5) * self.resolution,
        ]
    }

    /// 8-neighbourhood of `cell` (including itself) clipped to the grid.
    pub fn neighborhood(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        let x0 = cell.ix.saturating_sub(1);
        let x1 = (cell.ix + 1).min(self.cols - 1);
        let y0 = cell.iy.saturating_sub(1);
        let y1 = (cell.iy + 1).min(self.rows - 1);
        (y0..=y1).flat_map(move |iy| (x0..=x1).map(move |ix| Cell::new(ix, iy)))
    }
}

/// Cells crossed by a segment, from the tag cell to the anchor cell inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RayTrace {
    pub cells: Vec<Cell>,
}

impl RayTrace {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Bresenham line between the cells containing `from` and `to`.
///
/// The line is always rasterized from the lexicographically smaller cell and
/// reversed when needed, so `a -> b` and `b -> a` cover the same cells.
pub fn raycast(geometry: &GridGeometry, from: [f64; 2], to: [f64; 2]) -> Result<RayTrace, GridError> {
    let a = geometry.cell_of(from[0], from[1])?;
    let b = geometry.cell_of(to[0], to[1])?;
    Ok(RayTrace {
        cells: bresenham_cells(a, b),
    })
}

pub fn bresenham_cells(a: Cell, b: Cell) -> Vec<Cell> {
    if b < a {
        let mut cells = bresenham_cells(b, a);
        cells.reverse();
        return cells;
    }
    let (mut x, mut y) = (a.ix as i64, a.iy as i64);
    let (x1, y1) = (b.ix as i64, b.iy as i64);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut cells = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        cells.push(Cell::new(x as usize, y as usize));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    cells
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitParams {
    pub p_free: f64,
    pub p_occupy: f64,
}

impl HitParams {
    pub fn new(p_free: f64, p_occupy: f64) -> Result<Self, GridError> {
        let p = Self { p_free, p_occupy };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.p_free > 0.0 && self.p_occupy > 0.0 && self.p_free.is_finite() && self.p_occupy.is_finite() {
            Ok(())
        } else {
            Err(GridError::InvalidParams(format!(
                "p_free = {}, p_occupy = {} must both be positive",
                self.p_free, self.p_occupy
            )))
        }
    }
}

impl Default for HitParams {
    fn default() -> Self {
        Self {
            p_free: 0.4,
            p_occupy: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(i8)]
pub enum CellState {
    Occupied = -1,
    Unexplored = 0,
    Free = 1,
}

impl CellState {
    /// Sign of the evidence; zero stays unexplored.
    pub fn from_evidence(e: f64) -> Self {
        if e > 0.0 {
            CellState::Free
        } else if e < 0.0 {
            CellState::Occupied
        } else {
            CellState::Unexplored
        }
    }

    pub fn value(self) -> i8 {
        self as i8
    }

    pub fn is_explored(self) -> bool {
        self != CellState::Unexplored
    }
}

/// Tri-state map snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMap {
    pub geometry: GridGeometry,
    pub cells: Vec<CellState>,
}

impl TriMap {
    pub fn filled(geometry: GridGeometry, state: CellState) -> Self {
        Self {
            geometry,
            cells: vec![state; geometry.len()],
        }
    }

    pub fn get(&self, cell: Cell) -> CellState {
        self.cells[self.geometry.index(cell)]
    }

    pub fn set(&mut self, cell: Cell, state: CellState) {
        let i = self.geometry.index(cell);
        self.cells[i] = state;
    }

    pub fn count(&self, state: CellState) -> usize {
        self.cells.iter().filter(|&&c| c == state).count()
    }
}

/// Evidence accumulator with a live tri-state layer.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    geometry: GridGeometry,
    evidence: Vec<f64>,
    binary: Vec<CellState>,
    protected: Vec<bool>,
    e_max: f64,
    updates: u64,
}

impl OccupancyGrid {
    pub fn new(geometry: GridGeometry, e_max: f64) -> Result<Self, GridError> {
        geometry.validate()?;
        if !(e_max > 0.0) {
            return Err(GridError::InvalidParams(format!("evidence clamp {e_max} must be positive")));
        }
        let n = geometry.len();
        Ok(Self {
            geometry,
            evidence: vec![0.0; n],
            binary: vec![CellState::Unexplored; n],
            protected: vec![false; n],
            e_max,
            updates: 0,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn e_max(&self) -> f64 {
        self.e_max
    }

    pub fn evidence(&self, cell: Cell) -> f64 {
        self.evidence[self.geometry.index(cell)]
    }

    pub fn evidence_slice(&self) -> &[f64] {
        &self.evidence
    }

    pub fn state(&self, cell: Cell) -> CellState {
        self.binary[self.geometry.index(cell)]
    }

    /// Number of ray updates applied so far.
    pub fn update_count(&self) -> u64 {
        self.updates
    }

    /// Exempts `cell` from occupancy decrements (anchor cells).
    pub fn protect(&mut self, cell: Cell) {
        let i = self.geometry.index(cell);
        self.protected[i] = true;
    }

    pub fn update_los(&mut self, ray: &RayTrace, params: &HitParams) {
        for &cell in &ray.cells {
            let i = self.geometry.index(cell);
            self.evidence[i] = (self.evidence[i] + params.p_free).min(self.e_max);
            self.binary[i] = CellState::from_evidence(self.evidence[i]);
        }
        self.updates += 1;
    }

    /// Decrements every ray cell that is not currently free.
    pub fn update_nlos(&mut self, ray: &RayTrace, params: &HitParams) {
        for &cell in &ray.cells {
            let i = self.geometry.index(cell);
            if self.binary[i] == CellState::Free || self.protected[i] {
                continue;
            }
            self.evidence[i] = (self.evidence[i] - params.p_occupy).max(-self.e_max);
            self.binary[i] = CellState::from_evidence(self.evidence[i]);
        }
        self.updates += 1;
    }

    pub fn binarize(&self) -> TriMap {
        TriMap {
            geometry: self.geometry,
            cells: self.evidence.iter().map(|&e| CellState::from_evidence(e)).collect(),
        }
    }
}
