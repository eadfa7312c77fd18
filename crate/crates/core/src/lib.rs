//! Multi-robot frontier exploration on 2D occupancy grids.
//!
//! The crate is organized as a pipeline. Robots fuse lidar scans into
//! per-robot occupancy grids ([`grid`]), extract and exchange frontier cells
//! in a compact wire format ([`frontier`]), and a central planner clusters
//! the merged frontiers ([`cluster`]), scores robot/cluster pairs with a
//! graph attention network ([`global_planner`]), and orders waypoints inside
//! the chosen cluster by a gain/cost utility ([`local_planner`]). Geodesic
//! distances come from [`pathing`]. The [`sim`] module closes the loop with a
//! deterministic grid-world simulator, [`learner`] trains the assignment
//! network with PPO, and [`cli`] wires everything into the `gridfront`
//! binary.

pub mod cli;
pub mod cluster;
pub mod frontier;
pub mod global_planner;
pub mod grid;
pub mod learner;
pub mod local_planner;
pub mod nn;
pub mod pathing;
pub mod render;
pub mod sim;
