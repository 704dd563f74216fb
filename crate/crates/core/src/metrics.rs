//! Map confusion scores, trajectory ATE and label agreement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{CellState, GridGeometry, TriMap};
use crate::sim::Rect;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("map geometries differ")]
    GeometryMismatch,
    #[error("ground-truth map has unexplored cells")]
    IncompleteTruth,
    #[error("trajectories have no time-aligned pairs")]
    NoOverlap,
    #[error("label streams differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label streams are empty")]
    Empty,
}

/// Counts with occupied cells as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn score(self) -> MapScore {
        MapScore {
            accuracy: self.accuracy(),
            recall: self.recall(),
            f1: self.f1(),
            counts: self,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapScore {
    pub accuracy: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

/// How unexplored cells of the estimate are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellPolicy {
    /// Unexplored estimate cells are skipped.
    #[default]
    ExploredOnly,
    /// Unexplored estimate cells count as free.
    AllCells,
}

pub fn map_metrics(estimated: &TriMap, truth: &TriMap, policy: CellPolicy) -> Result<MapScore, MetricsError> {
    if estimated.geometry != truth.geometry || estimated.cells.len() != truth.cells.len() {
        return Err(MetricsError::GeometryMismatch);
    }
    let mut counts = ConfusionCounts::default();
    for (&est, &tru) in estimated.cells.iter().zip(&truth.cells) {
        let truth_occupied = match tru {
            CellState::Occupied => true,
            CellState::Free => false,
            CellState::Unexplored => return Err(MetricsError::IncompleteTruth),
        };
        let est_occupied = match (est, policy) {
            (CellState::Occupied, _) => true,
            (CellState::Free, _) => false,
            (CellState::Unexplored, CellPolicy::AllCells) => false,
            (CellState::Unexplored, CellPolicy::ExploredOnly) => continue,
        };
        match (est_occupied, truth_occupied) {
            (true, true) => counts.tp += 1,
            (false, false) => counts.tn += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    Ok(counts.score())
}

/// Ground truth map: a cell is occupied iff its center lies inside an obstacle.
pub fn rasterize_truth(geometry: &GridGeometry, obstacles: &[Rect]) -> TriMap {
    let mut map = TriMap::filled(*geometry, CellState::Free);
    for i in 0..geometry.len() {
        let c = geometry.center(geometry.cell_at(i));
        if obstacles.iter().any(|r| r.contains_closed(c)) {
            map.cells[i] = CellState::Occupied;
        }
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// ATE RMSE in centimeters, pairing each estimate with the nearest truth sample
/// within `tolerance` seconds.
pub fn ate_rmse_with_tolerance(
    estimated: &[TimedPoint],
    truth: &[TimedPoint],
    tolerance: f64,
) -> Result<f64, MetricsError> {
    let mut sorted: Vec<&TimedPoint> = truth.iter().collect();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for e in estimated {
        let k = sorted.partition_point(|p| p.t < e.t);
        let nearest = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter_map(|i| sorted.get(i))
            .min_by(|a, b| (a.t - e.t).abs().total_cmp(&(b.t - e.t).abs()));
        if let Some(tp) = nearest {
            if (tp.t - e.t).abs() <= tolerance {
                sum += (e.x - tp.x).powi(2) + (e.y - tp.y).powi(2);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(MetricsError::NoOverlap);
    }
    Ok((sum / pairs as f64).sqrt() * 100.0)
}

/// ATE RMSE in centimeters with the pairing tolerance set to half the median
/// truth sampling period.
pub fn ate_rmse(estimated: &[TimedPoint], truth: &[TimedPoint]) -> Result<f64, MetricsError> {
    ate_rmse_with_tolerance(estimated, truth, half_period(truth))
}

fn half_period(truth: &[TimedPoint]) -> f64 {
    let mut t: Vec<f64> = truth.iter().map(|p| p.t).collect();
    t.sort_by(f64::total_cmp);
    let mut gaps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).filter(|g| *g > 0.0).collect();
    if gaps.is_empty() {
        return 1e-9;
    }
    gaps.sort_by(f64::total_cmp);
    gaps[gaps.len() / 2] / 2.0
}

/// Fraction of positions where the two label streams agree.
pub fn identification_report(presented: &[bool], truth: &[bool]) -> Result<f64, MetricsError> {
    if presented.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(presented.len(), truth.len()));
    }
    if presented.is_empty() {
        return Err(MetricsError::Empty);
    }
    let agree = presented.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / presented.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Cell;

    fn geometry() -> GridGeometry {
        GridGeometry::new([0.0, 0.0], 1.0, 4, 4).unwrap()
    }

    fn truth() -> TriMap {
        let mut t = TriMap::filled(geometry(), CellState::Free);
        t.set(Cell::new(1, 1), CellState::Occupied);
        t.set(Cell::new(2, 1), CellState::Occupied);
        t
    }

    #[test]
    fn perfect_estimate() {
        let s = map_metrics(&truth(), &truth(), CellPolicy::ExploredOnly).unwrap();
        assert_eq!((s.accuracy, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_free_estimate() {
        let est = TriMap::filled(geometry(), CellState::Free);
        let s = map_metrics(&est, &truth(), CellPolicy::ExploredOnly).unwrap();
        assert_eq!((s.recall, s.f1), (0.0, 0.0));
        assert_eq!(s.counts.tn, 14);
    }

    #[test]
    fn paper_table_counts() {
        let c = ConfusionCounts {
            tp: 2500,
            tn: 6312,
            fp: 1188,
            fn_: 0,
        };
        assert!((c.accuracy() - 0.8812).abs() < 1e-12);
        assert_eq!(c.recall(), 1.0);
        assert!((c.f1() - 5000.0 / 6188.0).abs() < 1e-12);
    }

    #[test]
    fn policies_differ_on_unexplored() {
        let mut est = truth();
        est.set(Cell::new(1, 1), CellState::Unexplored);
        est.set(Cell::new(3, 3), CellState::Unexplored);
        let a = map_metrics(&est, &truth(), CellPolicy::ExploredOnly).unwrap();
        let b = map_metrics(&est, &truth(), CellPolicy::AllCells).unwrap();
        assert_eq!(a.counts.total(), 14);
        assert_eq!(b.counts.total(), 16);
        assert_eq!(b.counts.fn_, 1);
    }

    #[test]
    fn mismatched_geometry() {
        let other = TriMap::filled(GridGeometry::new([0.0, 0.0], 1.0, 4, 5).unwrap(), CellState::Free);
        assert_eq!(
            map_metrics(&other, &truth(), CellPolicy::AllCells),
            Err(MetricsError::GeometryMismatch)
        );
    }

    fn traj(points: &[(f64, f64, f64)]) -> Vec<TimedPoint> {
        points.iter().map(|&(t, x, y)| TimedPoint { t, x, y }).collect()
    }

    #[test]
    fn ate_examples() {
        let truth = traj(&[(0.0, 0.0, 0.0), (0.02, 1.0, 0.0), (0.04, 2.0, 1.0)]);
        assert_eq!(ate_rmse(&truth, &truth).unwrap(), 0.0);

        let shifted: Vec<_> = truth.iter().map(|p| TimedPoint { x: p.x + 0.1, ..*p }).collect();
        assert!((ate_rmse(&shifted, &truth).unwrap() - 10.0).abs() < 1e-9);

        let t2 = traj(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)]);
        let e2 = traj(&[(0.0, 0.03, 0.0), (1.0, 0.0, 0.04)]);
        assert!((ate_rmse(&e2, &t2).unwrap() - 3.5355339).abs() < 1e-6);
    }

    #[test]
    fn ate_without_overlap() {
        let truth = traj(&[(0.0, 0.0, 0.0), (0.02, 0.0, 0.0)]);
        let est = traj(&[(5.0, 0.0, 0.0)]);
        assert_eq!(ate_rmse(&est, &truth), Err(MetricsError::NoOverlap));
    }

    #[test]
    fn identification_examples() {
        let a = [true, false, true, true];
        let inv: Vec<bool> = a.iter().map(|x| !x).collect();
        assert_eq!(identification_report(&a, &a).unwrap(), 1.0);
        assert_eq!(identification_report(&a, &inv).unwrap(), 0.0);
        assert!(identification_report(&a, &a[..2]).is_err());
    }

    #[test]
    fn truth_raster_matches_table_obstacle() {
        let g = GridGeometry::covering([0.0, 0.0], [20.0, 20.0], 0.2).unwrap();
        let t = rasterize_truth(&g, &[Rect::new([5.0, 5.0], [15.0, 15.0])]);
        assert_eq!(t.count(CellState::Occupied), 2500);
    }
}
