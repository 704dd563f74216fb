//! Range-only SLAM with UWB: LOS/NLOS identification, occupancy mapping from
//! ray evidence, and map-aided trilateration.

pub mod dataset;
pub mod grid;
pub mod localizer;
pub mod metrics;
pub mod runner;
pub mod sensor;
pub mod sim;
pub mod svm;
