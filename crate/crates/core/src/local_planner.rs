//! Local multi-target routing.
//!
//! When assigned clusters are large on average, each robot splits its
//! cluster into sub-targets (mean shift again), then searches a visiting
//! order by subsequence reversal. Gains are normalized through a sharpening
//! exponential and leg costs through a flattening logarithm, so one big
//! nearby target cannot be drowned out by several distant small ones:
//!
//! * gain:  `U_G * exp(k_g * ((G - min) / (max - min + eps) - 1))`
//! * cost:  `U_L * ln(k_l * (L - min) / (max - min + eps) + 1)`
//!
//! Route utility is the sum over targets of normalized gain minus
//! `c` times the normalized cost of the leg reaching that target. Leg
//! costs are geodesic and depend on the visiting order, so reversals
//! change utility; min/max cost normalization is recomputed per ordering.

use thiserror::Error;

use crate::cluster::{mean_shift, Cluster, ClusterError, MeanShiftConfig};
use crate::grid::{Cell, TriStateGrid};
use crate::pathing::{astar, single_source_dists, PathError};

#[derive(Debug, Error)]
pub enum LocalPlanError {
    #[error("no path between consecutive route stops {0} and {1}")]
    UnreachableLeg(Cell, Cell),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Weights for the route utility; defaults follow the reference setup
/// (c = k_g = k_l = 1, U_G = U_L = 5).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityParams {
    /// Balance factor `c` on the (subtracted) cost term.
    pub cost_weight: f64,
    /// Gain sharpening rate `k_g`.
    pub gain_decay: f64,
    /// Cost flattening rate `k_l`.
    pub cost_decay: f64,
    /// Gain normalization ceiling `U_G`.
    pub gain_limit: f64,
    /// Cost normalization ceiling `U_L`.
    pub cost_limit: f64,
    /// Positive guard added to min/max spreads.
    pub epsilon: f64,
    /// Mean sub-cluster size that switches local routing on.
    pub activation_threshold: f64,
}

impl Default for UtilityParams {
    fn default() -> Self {
        UtilityParams {
            cost_weight: 1.0,
            gain_decay: 1.0,
            cost_decay: 1.0,
            gain_limit: 5.0,
            cost_limit: 5.0,
            epsilon: 1e-6,
            activation_threshold: 10.0,
        }
    }
}

/// An ordered visiting plan; `sequence[0]` is the robot position.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub sequence: Vec<Cell>,
    pub utility: f64,
}

/// True when the mean member count of the clusters reaches the threshold.
pub fn should_plan_locally(clusters: &[Cluster], threshold: f64) -> bool {
    if clusters.is_empty() {
        return false;
    }
    let total: usize = clusters.iter().map(|c| c.members.len()).sum();
    total as f64 / clusters.len() as f64 >= threshold
}

/// Split one cluster's members into local targets with their own gains.
pub fn subcluster(members: &[Cell], config: &MeanShiftConfig) -> Result<Vec<Cluster>, LocalPlanError> {
    Ok(mean_shift(members, config)?)
}

pub fn normalize_gain(gains: &[f64], p: &UtilityParams) -> Vec<f64> {
    let min = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let max = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = max - min + p.epsilon;
    gains.iter().map(|g| p.gain_limit * (p.gain_decay * ((g - min) / spread - 1.0)).exp()).collect()
}

pub fn normalize_cost(costs: &[f64], p: &UtilityParams) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = max - min + p.epsilon;
    costs.iter().map(|l| p.cost_limit * (p.cost_decay * (l - min) / spread + 1.0).ln()).collect()
}

/// Utility of visiting `sequence[1..]` in order, starting at `sequence[0]`.
/// `normalized_gains[j]` belongs to `sequence[j + 1]`.
pub fn route_utility(
    sequence: &[Cell],
    grid: &TriStateGrid,
    normalized_gains: &[f64],
    p: &UtilityParams,
) -> Result<f64, LocalPlanError> {
    assert_eq!(normalized_gains.len() + 1, sequence.len(), "one gain per visited target");
    let mut legs = Vec::with_capacity(sequence.len() - 1);
    for pair in sequence.windows(2) {
        match astar(grid, pair[0], pair[1])? {
            Some(path) => legs.push(path.length),
            None => return Err(LocalPlanError::UnreachableLeg(pair[0], pair[1])),
        }
    }
    if legs.is_empty() {
        return Ok(0.0);
    }
    let costs = normalize_cost(&legs, p);
    Ok(normalized_gains
        .iter()
        .zip(&costs)
        .map(|(g, l)| g - p.cost_weight * l)
        .sum())
}

fn utility_from_table(
    order: &[usize],
    dist: &[Vec<f64>],
    gains: &[f64],
    p: &UtilityParams,
) -> f64 {
    let mut legs = Vec::with_capacity(order.len());
    let mut prev = 0usize;
    for &t in order {
        legs.push(dist[prev][t + 1]);
        prev = t + 1;
    }
    let costs = normalize_cost(&legs, p);
    order.iter().zip(&costs).map(|(&t, l)| gains[t] - p.cost_weight * l).sum()
}

/// Order targets by subsequence reversal: start from descending raw gain,
/// then repeatedly adopt the best strictly-improving reversal of any
/// contiguous target segment until none improves. The robot position is
/// pinned at index 0. Targets with no path from the start are dropped.
pub fn optimize_route(
    start: Cell,
    targets: &[Cluster],
    grid: &TriStateGrid,
    p: &UtilityParams,
) -> Result<Route, LocalPlanError> {
    let start_dists = single_source_dists(grid, start)?;
    let reachable: Vec<&Cluster> = targets
        .iter()
        .filter(|t| start_dists[t.center.y * grid.width() + t.center.x].is_finite())
        .collect();
    if reachable.is_empty() {
        return Ok(Route { sequence: vec![start], utility: 0.0 });
    }

    let gains = normalize_gain(&reachable.iter().map(|t| t.gain as f64).collect::<Vec<_>>(), p);

    // Geodesic distances between every pair of stops (start = index 0).
    let points: Vec<Cell> = std::iter::once(start).chain(reachable.iter().map(|t| t.center)).collect();
    let mut dist = vec![vec![0.0; points.len()]; points.len()];
    for (i, &from) in points.iter().enumerate() {
        let d = single_source_dists(grid, from)?;
        for (j, &to) in points.iter().enumerate() {
            dist[i][j] = d[to.y * grid.width() + to.x];
        }
    }

    let mut order: Vec<usize> = (0..reachable.len()).collect();
    order.sort_by(|&a, &b| reachable[b].gain.cmp(&reachable[a].gain));
    let mut best_u = utility_from_table(&order, &dist, &gains, p);

    loop {
        let mut best_move: Option<(usize, usize, f64)> = None;
        for x in 0..order.len() {
            for y in x + 1..order.len() {
                let mut cand = order.clone();
                cand[x..=y].reverse();
                let u = utility_from_table(&cand, &dist, &gains, p);
                if u > best_u && best_move.map_or(true, |(_, _, bu)| u > bu) {
                    best_move = Some((x, y, u));
                }
            }
        }
        match best_move {
            Some((x, y, u)) => {
                order[x..=y].reverse();
                best_u = u;
            }
            None => break,
        }
    }

    let sequence = std::iter::once(start).chain(order.iter().map(|&t| reachable[t].center)).collect();
    Ok(Route { sequence, utility: best_u })
}
