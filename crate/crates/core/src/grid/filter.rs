//! Binary map refinement: majority smoothing, morphological closing of the
//! occupied class, and removal of small occupied regions.
//!
//! Unexplored cells are never promoted to occupied.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{CellState, TriMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub majority: bool,
    pub closing: bool,
    /// Occupied 8-connected components smaller than this are cleared.
    pub min_region: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            majority: true,
            closing: true,
            min_region: 3,
        }
    }
}

const MAX_MAJORITY_SWEEPS: usize = 1024;

/// 3x3 majority vote over explored cells, applied in place in raster order
/// until no cell changes. Ties keep the current state. Each flip strictly
/// lowers the number of disagreeing neighbour pairs, so the sweep terminates
/// at a fixed point.
pub fn majority_stage(map: &TriMap) -> TriMap {
    let mut out = map.clone();
    let g = map.geometry;
    for _ in 0..MAX_MAJORITY_SWEEPS {
        let mut changed = false;
        for index in 0..g.len() {
            let current = out.cells[index];
            if !current.is_explored() {
                continue;
            }
            let (mut occ, mut free) = (0usize, 0usize);
            for n in g.neighborhood(g.cell_at(index)) {
                match out.get(n) {
                    CellState::Occupied => occ += 1,
                    CellState::Free => free += 1,
                    CellState::Unexplored => {}
                }
            }
            let next = if occ > free {
                CellState::Occupied
            } else if free > occ {
                CellState::Free
            } else {
                current
            };
            if next != current {
                out.cells[index] = next;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    out
}

/// Dilate then erode the occupied class with a 3x3 element. Cells outside the
/// grid count as occupied during erosion so the closing stays extensive.
/// Only free cells may be filled.
pub fn closing_stage(map: &TriMap) -> TriMap {
    let g = map.geometry;
    let occupied: Vec<bool> = map.cells.iter().map(|&c| c == CellState::Occupied).collect();
    let dilated: Vec<bool> = (0..g.len())
        .map(|i| g.neighborhood(g.cell_at(i)).any(|n| occupied[g.index(n)]))
        .collect();
    let mut out = map.clone();
    for i in 0..g.len() {
        if map.cells[i] != CellState::Free {
            continue;
        }
        // clipping the neighbourhood is the same as occupied padding
        if g.neighborhood(g.cell_at(i)).all(|n| dilated[g.index(n)]) {
            out.cells[i] = CellState::Occupied;
        }
    }
    out
}

/// Clears occupied 8-connected components with fewer than `min_region` cells.
pub fn region_stage(map: &TriMap, min_region: usize) -> TriMap {
    let g = map.geometry;
    let mut out = map.clone();
    let mut seen = vec![false; g.len()];
    let mut queue = VecDeque::new();
    let mut component: Vec<usize> = Vec::new();
    for start in 0..g.len() {
        if seen[start] || map.cells[start] != CellState::Occupied {
            continue;
        }
        component.clear();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            component.push(i);
            for n in g.neighborhood(g.cell_at(i)) {
                let j = g.index(n);
                if !seen[j] && map.cells[j] == CellState::Occupied {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if component.len() < min_region {
            for &i in &component {
                out.cells[i] = CellState::Free;
            }
        }
    }
    out
}

pub fn filter_binary(map: &TriMap, params: &FilterParams) -> TriMap {
    let mut out = if params.majority {
        majority_stage(map)
    } else {
        map.clone()
    };
    if params.closing {
        out = closing_stage(&out);
    }
    if params.min_region > 1 {
        out = region_stage(&out, params.min_region);
    }
    out
}
