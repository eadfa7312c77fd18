//! Geodesic distances on tri-state grids.
//!
//! Movement is 8-connected over free cells: orthogonal steps cost 1,
//! diagonal steps cost sqrt(2) and are only allowed when both adjacent
//! orthogonal cells are free too (no corner cutting past obstacles).
//! Unknown cells are untraversable.
//!
//! A* uses the octile heuristic. Ties are broken deterministically: lower
//! f-score first, then lower heuristic, then row-major cell order, so the
//! same query always expands the same nodes and returns the same path.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::grid::{Cell, CellState, Pose, TriStateGrid};

pub const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("cell {0} lies outside the grid")]
    OutOfBounds(Cell),
    #[error("cell {0} is not free")]
    NotFree(Cell),
}

/// A concrete grid path; `cells` includes both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub cells: Vec<Cell>,
    pub length: f64,
}

/// Octile distance: the cost of the best obstacle-free 8-connected path.
pub fn octile(a: Cell, b: Cell) -> f64 {
    let dx = (a.x as f64 - b.x as f64).abs();
    let dy = (a.y as f64 - b.y as f64).abs();
    let (lo, hi) = if dx < dy { (dx, dy) } else { (dy, dx) };
    hi + (SQRT2 - 1.0) * lo
}

fn check_free(grid: &TriStateGrid, c: Cell) -> Result<(), PathError> {
    if !grid.in_bounds(c.x, c.y) {
        return Err(PathError::OutOfBounds(c));
    }
    if grid.get(c.x, c.y) != CellState::Free {
        return Err(PathError::NotFree(c));
    }
    Ok(())
}

const STEPS: [(isize, isize); 8] =
    [(0, -1), (-1, 0), (1, 0), (0, 1), (-1, -1), (1, -1), (-1, 1), (1, 1)];

/// Enumerate traversable neighbors of a free cell with their step costs.
fn neighbors(grid: &TriStateGrid, x: usize, y: usize, mut f: impl FnMut(usize, usize, f64)) {
    let free = |x: isize, y: isize| {
        x >= 0
            && y >= 0
            && grid.in_bounds(x as usize, y as usize)
            && grid.get(x as usize, y as usize) == CellState::Free
    };
    for &(dx, dy) in &STEPS {
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        if !free(nx, ny) {
            continue;
        }
        if dx != 0 && dy != 0 {
            // both orthogonal cells must be free for a diagonal step
            if !free(x as isize + dx, y as isize) || !free(x as isize, y as isize + dy) {
                continue;
            }
            f(nx as usize, ny as usize, SQRT2);
        } else {
            f(nx as usize, ny as usize, 1.0);
        }
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    f: f64,
    h: f64,
    idx: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for min-first ordering.
        other
            .f
            .partial_cmp(&self.f)
            .unwrap()
            .then(other.h.partial_cmp(&self.h).unwrap())
            .then(other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest path between two free cells, or `None` when no path exists.
pub fn astar(grid: &TriStateGrid, start: Cell, goal: Cell) -> Result<Option<Path>, PathError> {
    check_free(grid, start)?;
    check_free(grid, goal)?;
    let w = grid.width();
    let n = w * grid.height();
    let idx = |c: Cell| c.y * w + c.x;

    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    g[idx(start)] = 0.0;
    heap.push(HeapEntry { f: octile(start, goal), h: octile(start, goal), idx: idx(start) });

    while let Some(HeapEntry { idx: cur, .. }) = heap.pop() {
        if closed[cur] {
            continue;
        }
        closed[cur] = true;
        if cur == idx(goal) {
            let mut cells = Vec::new();
            let mut at = cur;
            while at != usize::MAX {
                cells.push(Cell::new(at % w, at / w));
                at = parent[at];
            }
            cells.reverse();
            return Ok(Some(Path { cells, length: g[cur] }));
        }
        let (cx, cy) = (cur % w, cur / w);
        neighbors(grid, cx, cy, |nx, ny, cost| {
            let ni = ny * w + nx;
            if closed[ni] {
                return;
            }
            let cand = g[cur] + cost;
            if cand < g[ni] {
                g[ni] = cand;
                parent[ni] = cur;
                let h = octile(Cell::new(nx, ny), goal);
                heap.push(HeapEntry { f: cand + h, h, idx: ni });
            }
        });
    }
    Ok(None)
}

/// Best-effort approach when the goal itself cannot be reached: path to
/// the reachable cell nearest the goal by octile distance, breaking ties
/// toward shorter travel and then row-major order. `None` when the start
/// already is that cell. The goal only steers the search, so it may be
/// occupied or unknown.
pub fn astar_toward(
    grid: &TriStateGrid,
    start: Cell,
    goal: Cell,
) -> Result<Option<Path>, PathError> {
    if !grid.in_bounds(goal.x, goal.y) {
        return Err(PathError::OutOfBounds(goal));
    }
    let dist = single_source_dists(grid, start)?;
    let w = grid.width();
    let mut best = start;
    let mut best_octile = octile(start, goal);
    let mut best_travel = 0.0;
    for (i, d) in dist.iter().enumerate() {
        if !d.is_finite() {
            continue;
        }
        let c = Cell::new(i % w, i / w);
        let o = octile(c, goal);
        if o < best_octile || (o == best_octile && *d < best_travel) {
            best = c;
            best_octile = o;
            best_travel = *d;
        }
    }
    if best == start {
        return Ok(None);
    }
    astar(grid, start, best)
}

/// Geodesic distance from `start` to every cell (infinity = unreachable).
pub fn single_source_dists(grid: &TriStateGrid, start: Cell) -> Result<Vec<f64>, PathError> {
    check_free(grid, start)?;
    let w = grid.width();
    let n = w * grid.height();
    let mut dist = vec![f64::INFINITY; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[start.y * w + start.x] = 0.0;
    heap.push(HeapEntry { f: 0.0, h: 0.0, idx: start.y * w + start.x });
    while let Some(HeapEntry { idx: cur, .. }) = heap.pop() {
        if closed[cur] {
            continue;
        }
        closed[cur] = true;
        neighbors(grid, cur % w, cur / w, |nx, ny, cost| {
            let ni = ny * w + nx;
            if closed[ni] {
                return;
            }
            let cand = dist[cur] + cost;
            if cand < dist[ni] {
                dist[ni] = cand;
                heap.push(HeapEntry { f: cand, h: 0.0, idx: ni });
            }
        });
    }
    Ok(dist)
}

/// Whether a free-space path connects the two cells. Out-of-bounds cells
/// error; standing on or targeting a non-free cell is simply unreachable.
pub fn is_reachable(grid: &TriStateGrid, from: Cell, to: Cell) -> Result<bool, PathError> {
    for c in [from, to] {
        if !grid.in_bounds(c.x, c.y) {
            return Err(PathError::OutOfBounds(c));
        }
    }
    if grid.get(from.x, from.y) != CellState::Free || grid.get(to.x, to.y) != CellState::Free {
        return Ok(false);
    }
    // A diagonal step requires both orthogonal cells free, so connectivity
    // collapses to plain 4-connectivity over free cells.
    let w = grid.width();
    let mut seen = vec![false; w * grid.height()];
    let mut stack = vec![from];
    seen[from.y * w + from.x] = true;
    while let Some(c) = stack.pop() {
        if c == to {
            return Ok(true);
        }
        for (dx, dy) in [(0isize, -1isize), (-1, 0), (1, 0), (0, 1)] {
            let nx = c.x as isize + dx;
            let ny = c.y as isize + dy;
            if nx < 0 || ny < 0 || !grid.in_bounds(nx as usize, ny as usize) {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if !seen[ny * w + nx] && grid.get(nx, ny) == CellState::Free {
                seen[ny * w + nx] = true;
                stack.push(Cell::new(nx, ny));
            }
        }
    }
    Ok(false)
}

/// Robot-by-cluster geodesic distances; `None` marks unreachable pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    entries: Vec<Vec<Option<f64>>>,
}

impl DistanceMatrix {
    /// Build from explicit rows; every row must have the same length.
    pub fn from_rows(entries: Vec<Vec<Option<f64>>>) -> Self {
        let cols = entries.first().map_or(0, |r| r.len());
        assert!(entries.iter().all(|r| r.len() == cols), "ragged distance rows");
        DistanceMatrix { entries }
    }

    pub fn robots(&self) -> usize {
        self.entries.len()
    }

    pub fn clusters(&self) -> usize {
        self.entries.first().map_or(0, |r| r.len())
    }

    pub fn get(&self, robot: usize, cluster: usize) -> Option<f64> {
        self.entries[robot][cluster]
    }

    pub fn row(&self, robot: usize) -> &[Option<f64>] {
        &self.entries[robot]
    }

    /// True if at least one pair is reachable.
    pub fn any_reachable(&self) -> bool {
        self.entries.iter().any(|row| row.iter().any(|e| e.is_some()))
    }
}

/// One Dijkstra sweep per robot against all cluster centers.
pub fn distance_matrix(
    grid: &TriStateGrid,
    robots: &[Pose],
    clusters: &[Cell],
) -> Result<DistanceMatrix, PathError> {
    let w = grid.width();
    let mut entries = Vec::with_capacity(robots.len());
    for robot in robots {
        let dists = single_source_dists(grid, robot.cell())?;
        let row = clusters
            .iter()
            .map(|c| {
                if !grid.in_bounds(c.x, c.y) || grid.get(c.x, c.y) != CellState::Free {
                    return None;
                }
                let d = dists[c.y * w + c.x];
                d.is_finite().then_some(d)
            })
            .collect();
        entries.push(row);
    }
    Ok(DistanceMatrix { entries })
}
