//! Flat-kernel mean-shift clustering of unknown-facing frontier cells.
//!
//! Each point iteratively moves to the centroid of all points within one
//! bandwidth of it until the shift falls below the convergence tolerance;
//! points whose converged modes land within the merge tolerance of each
//! other form one cluster. The bandwidth adapts to the frontier layout:
//! by default it is the 15th percentile (nearest-rank) of all pairwise
//! point distances, so tight frontier bands produce small bandwidths and
//! scattered ones produce large bandwidths.
//!
//! Cluster centers are snapped onto the nearest member cell so that a
//! center is always a real frontier cell a robot can path to. A cluster's
//! gain is its member count.

use thiserror::Error;

use crate::grid::Cell;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("need at least 2 points for a bandwidth estimate, got {0}")]
    TooFewPoints(usize),
    #[error("all pairwise distances are zero")]
    NoPositiveDistance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftConfig {
    /// Kernel radius in cells; `0.0` selects the adaptive percentile value.
    pub bandwidth: f64,
    /// Percentile of pairwise distances used when the bandwidth is adaptive.
    pub bandwidth_percentile: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    /// Mode-merge radius; `0.0` selects `bandwidth / 2`.
    pub merge_tol: f64,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        MeanShiftConfig {
            bandwidth: 0.0,
            bandwidth_percentile: 15.0,
            max_iterations: 100,
            convergence_tol: 1e-3,
            merge_tol: 0.0,
        }
    }
}

/// One frontier cluster: snapped center, member cells, gain (= member count).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub center: Cell,
    pub members: Vec<Cell>,
    pub gain: usize,
}

#[inline]
fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
fn to_f(c: &Cell) -> [f64; 2] {
    [c.x as f64, c.y as f64]
}

/// Nearest-rank percentile of all pairwise Euclidean distances.
///
/// A zero percentile value (duplicated points) falls back to the smallest
/// positive distance. Degenerate inputs error: fewer than two points, or
/// every point identical.
pub fn adaptive_bandwidth(points: &[Cell], percentile: f64) -> Result<f64, ClusterError> {
    if points.len() < 2 {
        return Err(ClusterError::TooFewPoints(points.len()));
    }
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            dists.push(dist2(to_f(&points[i]), to_f(&points[j])).sqrt());
        }
    }
    dists.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dists.len();
    let rank = ((percentile / 100.0 * m as f64).ceil() as usize).clamp(1, m);
    let picked = dists[rank - 1];
    if picked > 0.0 {
        return Ok(picked);
    }
    dists
        .iter()
        .copied()
        .find(|&d| d > 0.0)
        .ok_or(ClusterError::NoPositiveDistance)
}

/// Snap a continuous mode position onto the nearest member cell; ties go to
/// the row-major smallest cell.
pub fn snap_center(mode: [f64; 2], members: &[Cell]) -> Cell {
    debug_assert!(!members.is_empty());
    let mut best = members[0];
    let mut best_d = dist2(mode, to_f(&best));
    for &c in &members[1..] {
        let d = dist2(mode, to_f(&c));
        if d < best_d || (d == best_d && c < best) {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Run the mode-seeking iteration for every point; returns each point's
/// converged mode.
pub fn mean_shift_modes(
    points: &[Cell],
    bandwidth: f64,
    max_iterations: usize,
    convergence_tol: f64,
) -> Vec<[f64; 2]> {
    let pts: Vec<[f64; 2]> = points.iter().map(to_f).collect();
    let bw2 = bandwidth * bandwidth;
    let tol2 = convergence_tol * convergence_tol;
    pts.iter()
        .map(|&start| {
            let mut mode = start;
            for _ in 0..max_iterations {
                let mut sum = [0.0f64; 2];
                let mut n = 0usize;
                for p in &pts {
                    if dist2(mode, *p) <= bw2 {
                        sum[0] += p[0];
                        sum[1] += p[1];
                        n += 1;
                    }
                }
                let next = [sum[0] / n as f64, sum[1] / n as f64];
                let moved = dist2(mode, next);
                mode = next;
                if moved < tol2 {
                    break;
                }
            }
            mode
        })
        .collect()
}

/// Cluster frontier cells with flat-kernel mean shift.
///
/// Zero or one input points short-circuit to zero or one clusters. If the
/// adaptive bandwidth is degenerate (all points identical) everything
/// collapses into a single cluster.
pub fn mean_shift(points: &[Cell], config: &MeanShiftConfig) -> Result<Vec<Cluster>, ClusterError> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    if points.len() == 1 {
        return Ok(vec![Cluster { center: points[0], members: points.to_vec(), gain: 1 }]);
    }
    let bandwidth = if config.bandwidth > 0.0 {
        config.bandwidth
    } else {
        match adaptive_bandwidth(points, config.bandwidth_percentile) {
            Ok(bw) => bw,
            Err(ClusterError::NoPositiveDistance) => {
                return Ok(vec![Cluster {
                    center: points[0],
                    members: points.to_vec(),
                    gain: points.len(),
                }]);
            }
            Err(e) => return Err(e),
        }
    };
    let merge_tol = if config.merge_tol > 0.0 { config.merge_tol } else { bandwidth / 2.0 };

    let modes = mean_shift_modes(points, bandwidth, config.max_iterations, config.convergence_tol);

    // Group modes in point order; the first mode of a group is its anchor.
    let merge2 = merge_tol * merge_tol;
    let mut anchors: Vec<[f64; 2]> = Vec::new();
    let mut member_lists: Vec<Vec<Cell>> = Vec::new();
    for (i, &mode) in modes.iter().enumerate() {
        let found = anchors.iter().position(|&a| dist2(a, mode) <= merge2);
        match found {
            Some(g) => member_lists[g].push(points[i]),
            None => {
                anchors.push(mode);
                member_lists.push(vec![points[i]]);
            }
        }
    }

    Ok(anchors
        .iter()
        .zip(member_lists)
        .map(|(&anchor, members)| {
            let gain = members.len();
            Cluster { center: snap_center(anchor, &members), members, gain }
        })
        .collect())
}
