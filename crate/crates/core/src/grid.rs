//! Occupancy grids and the tri-state maps derived from them.
//!
//! Every robot keeps a per-cell occupancy probability in `[0, 1]`. Cell
//! updates fuse the previous estimate with a new measurement as a product of
//! odds ratios, discounted by the prior:
//!
//! ```text
//! P' = [ 1 + (1-Pz)/Pz * (1-Pprev)/Pprev * Pn/(1-Pn) ]^-1
//! ```
//!
//! where `Pz` is the inverse sensor model for the observation, `Pprev` the
//! stored value and `Pn` the prior. The update is commutative and associative
//! over measurement sequences, which is what makes the fusion order across
//! robots irrelevant.
//!
//! Probability grids are thresholded into [`TriStateGrid`]s (free, occupied,
//! unknown) before any geometric processing. Free space is then smoothed with
//! a morphological closing ([`close_free_space`]) so that isolated unknown
//! specks inside observed rooms do not spawn spurious frontiers.
//!
//! Grids serialize to a small text fixture format used throughout the tests:
//! a `"w h"` header line followed by `h` rows of `.` (free), `#` (occupied)
//! and `?` (unknown), row `0` first.

use std::fmt;

use thiserror::Error;

/// Lower clamp for fused occupancy probabilities.
pub const PROB_MIN: f64 = 0.01;
/// Upper clamp for fused occupancy probabilities.
pub const PROB_MAX: f64 = 0.99;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("probability {0} is degenerate (exactly 0 or 1)")]
    DegenerateProbability(f64),
    #[error("free threshold {free} must not exceed occupied threshold {occupied}")]
    InvalidThresholds { free: f64, occupied: f64 },
    #[error("grid dimensions {0}x{1} and {2}x{3} do not match")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("truth grid has no known cells")]
    EmptyTruth,
    #[error("bad grid header: {0}")]
    BadHeader(String),
    #[error("grid row {0} has wrong length or bad character")]
    BadRow(usize),
    #[error("grid body has {got} rows, header declared {expected}")]
    RowCount { expected: usize, got: usize },
}

/// Integer grid coordinate, `x` column and `y` row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub y: usize,
    pub x: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }

    /// Euclidean distance to another cell.
    pub fn dist(&self, other: &Cell) -> f64 {
        let dx = self.x as f64 - other.x as f64;
        let dy = self.y as f64 - other.y as f64;
        (dx * dx + dy * dy).sqrt()
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// A robot pose: grid position plus the robot's stable index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pose {
    pub x: usize,
    pub y: usize,
    pub robot_id: usize,
}

impl Pose {
    pub fn new(x: usize, y: usize, robot_id: usize) -> Self {
        Pose { x, y, robot_id }
    }

    pub fn cell(&self) -> Cell {
        Cell::new(self.x, self.y)
    }
}

/// Inverse sensor model used when fusing ray observations into the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorModel {
    /// Ray length in cells.
    pub range: usize,
    /// Measurement probability fused for a cell observed occupied.
    pub p_hit: f64,
    /// Measurement probability fused for a cell observed free.
    pub p_miss: f64,
    /// Prior occupancy probability; also the initial value of every cell.
    pub prior: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel { range: 20, p_hit: 0.7, p_miss: 0.3, prior: 0.5 }
    }
}

/// Tri-state classification of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellState {
    Free,
    Occupied,
    Unknown,
}

impl CellState {
    pub fn to_char(self) -> char {
        match self {
            CellState::Free => '.',
            CellState::Occupied => '#',
            CellState::Unknown => '?',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            '.' => Some(CellState::Free),
            '#' => Some(CellState::Occupied),
            '?' => Some(CellState::Unknown),
            _ => None,
        }
    }
}

/// Fuse one measurement into a cell's stored probability.
///
/// All three inputs must lie strictly inside `(0, 1)`; values at exactly 0 or
/// 1 would collapse the odds product and are rejected.
pub fn update_cell_occupancy(prev: f64, measurement: f64, prior: f64) -> Result<f64, GridError> {
    for &p in &[prev, measurement, prior] {
        if !(p > 0.0 && p < 1.0) {
            return Err(GridError::DegenerateProbability(p));
        }
    }
    let inv_odds =
        (1.0 - measurement) / measurement * ((1.0 - prev) / prev) * (prior / (1.0 - prior));
    Ok(1.0 / (1.0 + inv_odds))
}

/// Dense per-cell occupancy probabilities for one robot.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    /// Metric size of one cell in meters.
    pub resolution: f64,
    probs: Vec<f64>,
}

impl OccupancyGrid {
    /// Create a grid with every cell at the prior probability.
    pub fn new(width: usize, height: usize, resolution: f64, prior: f64) -> Self {
        OccupancyGrid { width, height, resolution, probs: vec![prior; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.probs[self.idx(x, y)]
    }

    pub fn set_prob(&mut self, x: usize, y: usize, p: f64) {
        let i = self.idx(x, y);
        self.probs[i] = p;
    }

    /// Fuse a measurement into one cell and clamp the result to
    /// `[PROB_MIN, PROB_MAX]` so no cell ever saturates irreversibly.
    pub fn fuse(&mut self, x: usize, y: usize, measurement: f64, prior: f64) -> Result<(), GridError> {
        let i = self.idx(x, y);
        let updated = update_cell_occupancy(self.probs[i], measurement, prior)?;
        self.probs[i] = updated.clamp(PROB_MIN, PROB_MAX);
        Ok(())
    }
}

/// Thresholded grid: every cell is free, occupied or unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriStateGrid {
    width: usize,
    height: usize,
    cells: Vec<CellState>,
}

impl TriStateGrid {
    pub fn new(width: usize, height: usize, fill: CellState) -> Self {
        TriStateGrid { width, height, cells: vec![fill; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn in_bounds(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height
    }

    #[inline]
    fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(self.in_bounds(x, y));
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> CellState {
        self.cells[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, s: CellState) {
        let i = self.idx(x, y);
        self.cells[i] = s;
    }

    /// Number of cells in a given state.
    pub fn count(&self, s: CellState) -> usize {
        self.cells.iter().filter(|&&c| c == s).count()
    }

    /// Number of cells classified free or occupied.
    pub fn known_cells(&self) -> usize {
        self.cells.iter().filter(|&&c| c != CellState::Unknown).count()
    }

    /// Parse the text fixture format (`"w h"` header, then `h` rows).
    pub fn from_text(text: &str) -> Result<Self, GridError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| GridError::BadHeader("empty input".into()))?;
        let mut parts = header.split_whitespace();
        let width: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| GridError::BadHeader(header.into()))?;
        let height: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| GridError::BadHeader(header.into()))?;
        if parts.next().is_some() {
            return Err(GridError::BadHeader(header.into()));
        }
        let mut grid = TriStateGrid::new(width, height, CellState::Unknown);
        let mut rows = 0;
        for (y, line) in lines.enumerate() {
            if y >= height {
                return Err(GridError::RowCount { expected: height, got: y + 1 });
            }
            if line.chars().count() != width {
                return Err(GridError::BadRow(y));
            }
            for (x, c) in line.chars().enumerate() {
                let state = CellState::from_char(c).ok_or(GridError::BadRow(y))?;
                grid.set(x, y, state);
            }
            rows += 1;
        }
        if rows != height {
            return Err(GridError::RowCount { expected: height, got: rows });
        }
        Ok(grid)
    }

    /// Render as the text fixture format.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.get(x, y).to_char());
            }
            out.push('\n');
        }
        out
    }
}

/// Threshold a probability grid into free / occupied / unknown.
///
/// Cells at or below `free_threshold` become free, cells at or above
/// `occupied_threshold` become occupied, everything between stays unknown.
/// Both boundaries are inclusive.
pub fn classify(
    grid: &OccupancyGrid,
    free_threshold: f64,
    occupied_threshold: f64,
) -> Result<TriStateGrid, GridError> {
    if free_threshold > occupied_threshold {
        return Err(GridError::InvalidThresholds {
            free: free_threshold,
            occupied: occupied_threshold,
        });
    }
    let mut out = TriStateGrid::new(grid.width, grid.height, CellState::Unknown);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let p = grid.prob(x, y);
            let state = if p >= occupied_threshold {
                CellState::Occupied
            } else if p <= free_threshold {
                CellState::Free
            } else {
                CellState::Unknown
            };
            out.set(x, y, state);
        }
    }
    Ok(out)
}

/// Split a tri-state grid into per-state boolean masks, row-major.
///
/// The masks partition the grid: exactly one of the three is set per cell.
pub fn split_channels(grid: &TriStateGrid) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    let n = grid.width * grid.height;
    let mut free = vec![false; n];
    let mut occupied = vec![false; n];
    let mut unknown = vec![false; n];
    for (i, &c) in grid.cells.iter().enumerate() {
        match c {
            CellState::Free => free[i] = true,
            CellState::Occupied => occupied[i] = true,
            CellState::Unknown => unknown[i] = true,
        }
    }
    (free, occupied, unknown)
}

fn dilate(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if !mask[y as usize * width + x as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                        out[ny as usize * width + nx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

fn erode(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        'cell: for x in 0..width as isize {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                        if !mask[ny as usize * width + nx as usize] {
                            continue 'cell;
                        }
                    }
                }
            }
            out[y as usize * width + x as usize] = true;
        }
    }
    out
}

/// Morphological closing of the free-space channel.
///
/// Free space is dilated and then eroded with a square structuring element of
/// side `2 * radius + 1`. Occupied cells are never overwritten; cells that
/// started free stay free. The result is idempotent: closing a closed grid
/// changes nothing.
pub fn close_free_space(grid: &TriStateGrid, radius: usize) -> TriStateGrid {
    let (free, occupied, _) = split_channels(grid);
    let mut dilated = dilate(&free, grid.width, grid.height, radius);
    for (d, &o) in dilated.iter_mut().zip(occupied.iter()) {
        if o {
            *d = false;
        }
    }
    let eroded = erode(&dilated, grid.width, grid.height, radius);
    let mut out = grid.clone();
    for i in 0..out.cells.len() {
        if eroded[i] && !occupied[i] {
            out.cells[i] = CellState::Free;
        }
    }
    out
}

/// Fraction of the truth grid's known cells that are known in `explored`.
pub fn coverage(explored: &TriStateGrid, truth: &TriStateGrid) -> Result<f64, GridError> {
    if explored.width != truth.width || explored.height != truth.height {
        return Err(GridError::DimensionMismatch(
            explored.width,
            explored.height,
            truth.width,
            truth.height,
        ));
    }
    let denom = truth.known_cells();
    if denom == 0 {
        return Err(GridError::EmptyTruth);
    }
    Ok(explored.known_cells() as f64 / denom as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    // Independent fusion oracle: track the running odds product directly.
    fn odds_oracle(prior: f64, measurements: &[f64]) -> f64 {
        let prior_odds = prior / (1.0 - prior);
        let mut odds = prior_odds;
        for &m in measurements {
            odds *= (m / (1.0 - m)) / prior_odds;
        }
        odds / (1.0 + odds)
    }

    #[test]
    fn fusion_matches_worked_example() {
        let p = update_cell_occupancy(0.7, 0.7, 0.5).unwrap();
        assert!((p - 49.0 / 58.0).abs() < 1e-12, "got {p}");
    }

    #[test]
    fn fusion_matches_odds_oracle_on_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let prior = rng.gen_range(0.2..0.8);
            let count = rng.gen_range(1..8);
            let ms: Vec<f64> = (0..count).map(|_| rng.gen_range(0.05..0.95)).collect();
            let mut p = prior;
            for &m in &ms {
                p = update_cell_occupancy(p, m, prior).unwrap();
            }
            let expect = odds_oracle(prior, &ms);
            let rel = (p - expect).abs() / expect.max(1e-300);
            assert!(rel < 1e-12, "fused {p} oracle {expect}");
        }
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prior = 0.5;
        let ms: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..0.9)).collect();
        let fuse_all = |seq: &[f64]| {
            let mut p = prior;
            for &m in seq {
                p = update_cell_occupancy(p, m, prior).unwrap();
            }
            p
        };
        let base = fuse_all(&ms);
        let mut shuffled = ms.clone();
        for _ in 0..20 {
            shuffled.shuffle(&mut rng);
            let p = fuse_all(&shuffled);
            assert!((p - base).abs() / base < 1e-12);
        }
    }

    #[test]
    fn fusion_with_neutral_measurement_is_identity() {
        let p = update_cell_occupancy(0.3, 0.5, 0.5).unwrap();
        assert!((p - 0.3).abs() < 1e-15);
    }

    #[test]
    fn fusion_rejects_degenerate_probabilities() {
        assert!(update_cell_occupancy(0.0, 0.5, 0.5).is_err());
        assert!(update_cell_occupancy(0.5, 1.0, 0.5).is_err());
        assert!(update_cell_occupancy(0.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn classify_thresholds_are_inclusive() {
        let mut g = OccupancyGrid::new(3, 1, 0.05, 0.5);
        g.set_prob(0, 0, 0.35);
        g.set_prob(1, 0, 0.65);
        g.set_prob(2, 0, 0.5);
        let t = classify(&g, 0.35, 0.65).unwrap();
        assert_eq!(t.get(0, 0), CellState::Free);
        assert_eq!(t.get(1, 0), CellState::Occupied);
        assert_eq!(t.get(2, 0), CellState::Unknown);
    }

    #[test]
    fn classify_rejects_inverted_thresholds() {
        let g = OccupancyGrid::new(1, 1, 0.05, 0.5);
        assert!(matches!(classify(&g, 0.7, 0.3), Err(GridError::InvalidThresholds { .. })));
    }

    #[test]
    fn classify_matches_per_cell_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = OccupancyGrid::new(12, 9, 0.05, 0.5);
        for y in 0..9 {
            for x in 0..12 {
                g.set_prob(x, y, rng.gen_range(0.0..=1.0));
            }
        }
        let t = classify(&g, 0.35, 0.65).unwrap();
        for y in 0..9 {
            for x in 0..12 {
                let p = g.prob(x, y);
                let expect = if p >= 0.65 {
                    CellState::Occupied
                } else if p <= 0.35 {
                    CellState::Free
                } else {
                    CellState::Unknown
                };
                assert_eq!(t.get(x, y), expect, "at {x},{y} p={p}");
            }
        }
    }

    #[test]
    fn split_channels_partitions_the_grid() {
        let g = TriStateGrid::from_text("3 2\n.#?\n?.#\n").unwrap();
        let (f, o, u) = split_channels(&g);
        for i in 0..6 {
            let set = f[i] as u8 + o[i] as u8 + u[i] as u8;
            assert_eq!(set, 1);
        }
        assert!(f[0] && o[1] && u[2]);
    }

    // Brute-force dilation and erosion written independently of the
    // production code, composed to form the closing oracle.
    fn oracle_close(grid: &TriStateGrid, radius: usize) -> TriStateGrid {
        let (w, h) = (grid.width(), grid.height());
        let r = radius as isize;
        let is = |g: &TriStateGrid, x: isize, y: isize, s: CellState| {
            x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && g.get(x as usize, y as usize) == s
        };
        // dilation of free, skipping occupied
        let mut dil = vec![false; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                if is(grid, x, y, CellState::Occupied) {
                    continue;
                }
                let mut hit = false;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if is(grid, x + dx, y + dy, CellState::Free) {
                            hit = true;
                        }
                    }
                }
                dil[y as usize * w + x as usize] = hit;
            }
        }
        // erosion with border windows clipped
        let mut out = grid.clone();
        for y in 0..h as isize {
            for x in 0..w as isize {
                if is(grid, x, y, CellState::Occupied) {
                    continue;
                }
                let mut all = true;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                            all &= dil[ny as usize * w + nx as usize];
                        }
                    }
                }
                if all || grid.get(x as usize, y as usize) == CellState::Free {
                    out.set(x as usize, y as usize, CellState::Free);
                }
            }
        }
        out
    }

    fn random_grid(rng: &mut ChaCha8Rng, w: usize, h: usize) -> TriStateGrid {
        let mut g = TriStateGrid::new(w, h, CellState::Unknown);
        for y in 0..h {
            for x in 0..w {
                let s = match rng.gen_range(0..3) {
                    0 => CellState::Free,
                    1 => CellState::Occupied,
                    _ => CellState::Unknown,
                };
                g.set(x, y, s);
            }
        }
        g
    }

    #[test]
    fn closing_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let g = random_grid(&mut rng, 14, 11);
            assert_eq!(close_free_space(&g, 1), oracle_close(&g, 1));
        }
    }

    #[test]
    fn closing_fills_single_unknown_hole() {
        let g = TriStateGrid::from_text("3 3\n...\n.?.\n...\n").unwrap();
        let c = close_free_space(&g, 1);
        assert_eq!(c.get(1, 1), CellState::Free);
    }

    #[test]
    fn closing_leaves_all_free_grid_unchanged() {
        let g = TriStateGrid::new(6, 6, CellState::Free);
        assert_eq!(close_free_space(&g, 1), g);
    }

    #[test]
    fn closing_never_overwrites_occupied_and_keeps_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let g = random_grid(&mut rng, 10, 10);
            let c = close_free_space(&g, 1);
            for y in 0..10 {
                for x in 0..10 {
                    match g.get(x, y) {
                        CellState::Occupied => assert_eq!(c.get(x, y), CellState::Occupied),
                        CellState::Free => assert_eq!(c.get(x, y), CellState::Free),
                        CellState::Unknown => {}
                    }
                }
            }
        }
    }

    #[test]
    fn closing_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let g = random_grid(&mut rng, 12, 8);
            let once = close_free_space(&g, 1);
            let twice = close_free_space(&once, 1);
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn coverage_counts_known_cells() {
        let truth = TriStateGrid::from_text("2 2\n..\n.#\n").unwrap();
        let explored = TriStateGrid::from_text("2 2\n..\n??\n").unwrap();
        let c = coverage(&explored, &truth).unwrap();
        assert!((c - 0.5).abs() < 1e-12);
        assert!((coverage(&truth, &truth).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_rejects_mismatch_and_empty_truth() {
        let a = TriStateGrid::new(2, 2, CellState::Free);
        let b = TriStateGrid::new(3, 2, CellState::Free);
        assert!(matches!(coverage(&a, &b), Err(GridError::DimensionMismatch(..))));
        let empty = TriStateGrid::new(2, 2, CellState::Unknown);
        assert_eq!(coverage(&a, &empty), Err(GridError::EmptyTruth));
    }

    #[test]
    fn text_fixture_roundtrip() {
        let text = "4 3\n..#?\n####\n?..?\n";
        let g = TriStateGrid::from_text(text).unwrap();
        assert_eq!(g.to_text(), text);
    }

    #[test]
    fn text_fixture_rejects_malformed_input() {
        assert!(matches!(TriStateGrid::from_text(""), Err(GridError::BadHeader(_))));
        assert!(matches!(TriStateGrid::from_text("2 x\n..\n..\n"), Err(GridError::BadHeader(_))));
        assert!(matches!(TriStateGrid::from_text("2 2\n...\n..\n"), Err(GridError::BadRow(0))));
        assert!(matches!(TriStateGrid::from_text("2 2\n.z\n..\n"), Err(GridError::BadRow(0))));
        assert!(matches!(
            TriStateGrid::from_text("2 2\n..\n"),
            Err(GridError::RowCount { expected: 2, got: 1 })
        ));
    }
}
