//! Frontier extraction, the sparse wire format, and map reconstruction.
//!
//! A frontier cell is a free cell on the edge of the explored region. Two
//! labels are kept apart: unknown-facing cells (`f_un`, at least one
//! 4-neighbor unknown) drive exploration targets, occupied-facing cells
//! (`f_occ`, at least one 4-neighbor occupied) trace observed walls and are
//! only used to rebuild maps on the receiving side. A cell can carry both
//! labels.
//!
//! Robots never ship their dense grids. They send a [`SparseFrontierMap`]:
//! a 24-byte header plus 4 bytes per frontier cell. The receiver rebuilds a
//! tri-state grid by scan-line flood filling free space from the robot's
//! pose, bounded by the frontier contour, then painting the wall band just
//! outside the `f_occ` cells.
//!
//! Wire layout, little-endian:
//!
//! ```text
//! magic "SFM1"   4 bytes
//! version        u16 (= 1)
//! width, height  u16, u16
//! resolution     u32, micrometers per cell
//! robot_id       u16
//! pose_x, pose_y u16, u16
//! count_un       u16
//! count_occ      u16
//! ----           24 bytes total
//! then count_un + count_occ (x u16, y u16) pairs, row-major sorted
//! ```

use thiserror::Error;

use crate::grid::{close_free_space, split_channels, Cell, CellState, GridError, Pose, TriStateGrid};

pub const MAGIC: [u8; 4] = *b"SFM1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Error, PartialEq)]
pub enum FrontierError {
    #[error("grid dimension {0} exceeds the u16 wire limit")]
    DimensionTooLarge(usize),
    #[error("frontier count {0} exceeds the u16 wire limit")]
    CountTooLarge(usize),
    #[error("robot id {0} exceeds the u16 wire limit")]
    RobotIdTooLarge(usize),
    #[error("resolution {0} m/cell does not fit the u32 micrometer field")]
    ResolutionOutOfRange(f64),
    #[error("cell {0} lies outside the {1}x{2} grid")]
    CellOutOfBounds(Cell, usize, usize),
    #[error("payload does not start with the SFM1 magic")]
    BadMagic,
    #[error("unsupported wire version {0}")]
    BadVersion(u16),
    #[error("payload truncated: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("payload has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("grid error: {0}")]
    Grid(#[from] GridError),
    #[error("no grids to overlay")]
    NothingToOverlay,
}

/// Frontier label: what kind of boundary the cell touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrontierLabel {
    UnknownFacing,
    OccupiedFacing,
}

/// One labeled frontier cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrontierCell {
    pub cell: Cell,
    pub label: FrontierLabel,
}

/// The two frontier cell lists of one map, each sorted row-major and
/// duplicate-free.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrontierSet {
    pub f_un: Vec<Cell>,
    pub f_occ: Vec<Cell>,
}

impl FrontierSet {
    /// Build a set from unsorted, possibly duplicated cell lists.
    pub fn new(mut f_un: Vec<Cell>, mut f_occ: Vec<Cell>) -> Self {
        f_un.sort_unstable();
        f_un.dedup();
        f_occ.sort_unstable();
        f_occ.dedup();
        FrontierSet { f_un, f_occ }
    }

    pub fn is_empty(&self) -> bool {
        self.f_un.is_empty() && self.f_occ.is_empty()
    }

    /// Total number of stored cells, counting dual-labeled cells twice.
    pub fn len(&self) -> usize {
        self.f_un.len() + self.f_occ.len()
    }

    pub fn cells(&self, label: FrontierLabel) -> &[Cell] {
        match label {
            FrontierLabel::UnknownFacing => &self.f_un,
            FrontierLabel::OccupiedFacing => &self.f_occ,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = FrontierCell> + '_ {
        let un = self.f_un.iter().map(|&cell| FrontierCell { cell, label: FrontierLabel::UnknownFacing });
        let occ = self.f_occ.iter().map(|&cell| FrontierCell { cell, label: FrontierLabel::OccupiedFacing });
        un.chain(occ)
    }
}

/// Everything one robot transmits per planning round.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFrontierMap {
    pub width: usize,
    pub height: usize,
    /// Meters per cell.
    pub resolution: f64,
    pub pose: Pose,
    pub frontiers: FrontierSet,
}

const NEIGHBORS4: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

#[inline]
fn neighbor4(x: usize, y: usize, w: usize, h: usize, k: usize) -> Option<(usize, usize)> {
    let (dx, dy) = NEIGHBORS4[k];
    let nx = x as isize + dx;
    let ny = y as isize + dy;
    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
        Some((nx as usize, ny as usize))
    } else {
        None
    }
}

/// Extract both frontier sets from a tri-state grid.
///
/// Works on the channel masks: the unknown and occupied channels are shifted
/// in the four cardinal directions and OR-combined into adjacency masks,
/// then intersected with the free channel. Output lists come out row-major
/// sorted because cells are collected in scan order.
pub fn detect_frontiers(grid: &TriStateGrid) -> FrontierSet {
    let (w, h) = (grid.width(), grid.height());
    let (free, occupied, unknown) = split_channels(grid);

    let shift_or = |mask: &[bool]| {
        let mut adj = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if !mask[y * w + x] {
                    continue;
                }
                for k in 0..4 {
                    if let Some((nx, ny)) = neighbor4(x, y, w, h, k) {
                        adj[ny * w + nx] = true;
                    }
                }
            }
        }
        adj
    };

    let unknown_adj = shift_or(&unknown);
    let occupied_adj = shift_or(&occupied);

    let mut f_un = Vec::new();
    let mut f_occ = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !free[i] {
                continue;
            }
            if unknown_adj[i] {
                f_un.push(Cell::new(x, y));
            }
            if occupied_adj[i] {
                f_occ.push(Cell::new(x, y));
            }
        }
    }
    FrontierSet { f_un, f_occ }
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn check_u16(v: usize, err: fn(usize) -> FrontierError) -> Result<u16, FrontierError> {
    u16::try_from(v).map_err(|_| err(v))
}

/// Serialize a sparse frontier map. Output length is exactly
/// `24 + 4 * (|f_un| + |f_occ|)`.
pub fn encode_sparse(map: &SparseFrontierMap) -> Result<Vec<u8>, FrontierError> {
    let width = check_u16(map.width, FrontierError::DimensionTooLarge)?;
    let height = check_u16(map.height, FrontierError::DimensionTooLarge)?;
    let count_un = check_u16(map.frontiers.f_un.len(), FrontierError::CountTooLarge)?;
    let count_occ = check_u16(map.frontiers.f_occ.len(), FrontierError::CountTooLarge)?;
    let robot_id = check_u16(map.pose.robot_id, FrontierError::RobotIdTooLarge)?;
    let micrometers = (map.resolution * 1e6).round();
    if !(micrometers >= 1.0 && micrometers <= u32::MAX as f64) {
        return Err(FrontierError::ResolutionOutOfRange(map.resolution));
    }
    if map.pose.x >= map.width || map.pose.y >= map.height {
        return Err(FrontierError::CellOutOfBounds(map.pose.cell(), map.width, map.height));
    }
    for fc in map.frontiers.iter() {
        if fc.cell.x >= map.width || fc.cell.y >= map.height {
            return Err(FrontierError::CellOutOfBounds(fc.cell, map.width, map.height));
        }
    }

    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (count_un as usize + count_occ as usize));
    out.extend_from_slice(&MAGIC);
    push_u16(&mut out, VERSION);
    push_u16(&mut out, width);
    push_u16(&mut out, height);
    push_u32(&mut out, micrometers as u32);
    push_u16(&mut out, robot_id);
    push_u16(&mut out, map.pose.x as u16);
    push_u16(&mut out, map.pose.y as u16);
    push_u16(&mut out, count_un);
    push_u16(&mut out, count_occ);
    for cell in map.frontiers.f_un.iter().chain(map.frontiers.f_occ.iter()) {
        push_u16(&mut out, cell.x as u16);
        push_u16(&mut out, cell.y as u16);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrontierError> {
        if self.at + n > self.buf.len() {
            return Err(FrontierError::Truncated { expected: self.at + n, got: self.buf.len() });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FrontierError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FrontierError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Deserialize a sparse frontier map, validating magic, version, bounds and
/// exact payload length.
pub fn decode_sparse(bytes: &[u8]) -> Result<SparseFrontierMap, FrontierError> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(FrontierError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(FrontierError::BadVersion(version));
    }
    let width = r.u16()? as usize;
    let height = r.u16()? as usize;
    let resolution = r.u32()? as f64 / 1e6;
    let robot_id = r.u16()? as usize;
    let pose_x = r.u16()? as usize;
    let pose_y = r.u16()? as usize;
    let count_un = r.u16()? as usize;
    let count_occ = r.u16()? as usize;

    if pose_x >= width || pose_y >= height {
        return Err(FrontierError::CellOutOfBounds(Cell::new(pose_x, pose_y), width, height));
    }
    let mut read_cells = |n: usize| -> Result<Vec<Cell>, FrontierError> {
        let mut cells = Vec::with_capacity(n);
        for _ in 0..n {
            let x = r.u16()? as usize;
            let y = r.u16()? as usize;
            if x >= width || y >= height {
                return Err(FrontierError::CellOutOfBounds(Cell::new(x, y), width, height));
            }
            cells.push(Cell::new(x, y));
        }
        Ok(cells)
    };
    let f_un = read_cells(count_un)?;
    let f_occ = read_cells(count_occ)?;
    if r.at != bytes.len() {
        return Err(FrontierError::TrailingBytes(bytes.len() - r.at));
    }
    Ok(SparseFrontierMap {
        width,
        height,
        resolution,
        pose: Pose::new(pose_x, pose_y, robot_id),
        frontiers: FrontierSet { f_un, f_occ },
    })
}

/// Scan-line flood fill from `seed`. The fill expands 4-connected through
/// open cells; barrier cells stop it but every barrier cell touching the
/// filled region (8-connected, so contour corners count) is painted too.
/// That way the whole frontier contour ends up inside the filled region.
/// Returns the painted mask.
fn scanline_fill(width: usize, height: usize, barrier: &[bool], seed: Cell) -> Vec<bool> {
    let mut painted = vec![false; width * height];
    let idx = |x: usize, y: usize| y * width + x;
    if barrier[idx(seed.x, seed.y)] {
        painted[idx(seed.x, seed.y)] = true;
        return painted;
    }
    let mut stack = vec![(seed.x, seed.y)];
    while let Some((sx, sy)) = stack.pop() {
        if painted[idx(sx, sy)] || barrier[idx(sx, sy)] {
            continue;
        }
        let mut x0 = sx;
        while x0 > 0 && !barrier[idx(x0 - 1, sy)] && !painted[idx(x0 - 1, sy)] {
            x0 -= 1;
        }
        let mut x1 = sx;
        while x1 + 1 < width && !barrier[idx(x1 + 1, sy)] && !painted[idx(x1 + 1, sy)] {
            x1 += 1;
        }
        for x in x0..=x1 {
            painted[idx(x, sy)] = true;
        }
        // Run-end barriers are reached by the fill.
        if x0 > 0 && barrier[idx(x0 - 1, sy)] {
            painted[idx(x0 - 1, sy)] = true;
        }
        if x1 + 1 < width && barrier[idx(x1 + 1, sy)] {
            painted[idx(x1 + 1, sy)] = true;
        }
        for ny in [sy.wrapping_sub(1), sy + 1] {
            if ny >= height {
                continue;
            }
            // One wider than the run on both sides: diagonal barrier touches.
            let lo = x0.saturating_sub(1);
            let hi = (x1 + 1).min(width - 1);
            for x in lo..=hi {
                if barrier[idx(x, ny)] {
                    painted[idx(x, ny)] = true;
                } else if x >= x0 && x <= x1 && !painted[idx(x, ny)] {
                    stack.push((x, ny));
                }
            }
        }
    }
    painted
}

const REC_UNK: u8 = 0;
const REC_FREE: u8 = 1;
const REC_OCC: u8 = 2;

/// Rebuild a tri-state grid from one robot's frontier set.
///
/// Every frontier cell is free space at the sender, so the whole contour is
/// painted free up front. The contour is the inner boundary of the sender's
/// observed free region, so an exterior flood from the grid border, blocked
/// by contour cells, splits the rest into the provably-outside cells and
/// enclosed pockets. Each pocket is either observed free space behind a
/// contour pinch, such as a room interior past a doorway, or an obstacle
/// the sender walked around. Purely occupied-facing cells decide between
/// those readings: each one saw a wall among its non-contour neighbors, so
/// pockets are marked free greedily by size as long as every such cell
/// keeps a possible wall, which leaves thin walked-around obstacles
/// non-free. A scan-line fill from the seed covers the open-contour cases:
/// with no enclosing curve the chamber around the seed is still known
/// free, and an empty frontier set yields a fully free grid. Free paint
/// disconnected from the seed is dropped again, each purely occupied-facing
/// cell paints its undetermined 4-neighbors occupied, and the free space
/// is smoothed with [`close_free_space`].
pub fn reconstruct_grid(
    frontiers: &FrontierSet,
    seed: Cell,
    width: usize,
    height: usize,
    closing_radius: usize,
) -> Result<TriStateGrid, FrontierError> {
    if seed.x >= width || seed.y >= height {
        return Err(FrontierError::CellOutOfBounds(seed, width, height));
    }
    for fc in frontiers.iter() {
        if fc.cell.x >= width || fc.cell.y >= height {
            return Err(FrontierError::CellOutOfBounds(fc.cell, width, height));
        }
    }
    let n = width * height;
    let idx = |c: &Cell| c.y * width + c.x;

    let mut contour = vec![false; n];
    for fc in frontiers.iter() {
        contour[idx(&fc.cell)] = true;
    }
    let mut state = vec![REC_UNK; n];
    for fc in frontiers.iter() {
        state[idx(&fc.cell)] = REC_FREE;
    }

    let mut exterior = vec![false; n];
    let mut stack = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if (x == 0 || y == 0 || x == width - 1 || y == height - 1) && !contour[y * width + x]
            {
                exterior[y * width + x] = true;
                stack.push((x, y));
            }
        }
    }
    while let Some((x, y)) = stack.pop() {
        for k in 0..4 {
            if let Some((nx, ny)) = neighbor4(x, y, width, height, k) {
                let j = ny * width + nx;
                if !exterior[j] && !contour[j] {
                    exterior[j] = true;
                    stack.push((nx, ny));
                }
            }
        }
    }

    // Each enclosed pocket is either observed free space behind a contour
    // pinch or an obstacle the sender walked around, and the cell labels
    // alone cannot say which.
    let un_set: std::collections::HashSet<Cell> = frontiers.f_un.iter().copied().collect();
    let mut pocket_id = vec![usize::MAX; n];
    let mut pockets: Vec<Vec<usize>> = Vec::new();
    for i0 in 0..n {
        if exterior[i0] || contour[i0] || pocket_id[i0] != usize::MAX {
            continue;
        }
        let id = pockets.len();
        let mut member = vec![i0];
        pocket_id[i0] = id;
        let mut cursor = 0;
        while cursor < member.len() {
            let i = member[cursor];
            cursor += 1;
            let (x, y) = (i % width, i / width);
            for k in 0..4 {
                if let Some((nx, ny)) = neighbor4(x, y, width, height, k) {
                    let j = ny * width + nx;
                    if !exterior[j] && !contour[j] && pocket_id[j] == usize::MAX {
                        pocket_id[j] = id;
                        member.push(j);
                    }
                }
            }
        }
        pockets.push(member);
    }
    // A purely occupied-facing cell saw at least one wall among its
    // non-contour neighbors, and an exterior neighbor can always be that
    // wall. Each such cell whose possible walls all sit in pockets pins a
    // constraint: at least one of those pockets holds obstacle. Pockets
    // are then decided free greedily, largest first, except when that
    // would leave some constraint with nothing left to point at. Room
    // interiors come out free while a thin obstacle the sender walked
    // around, paired in its flank constraints with the larger free areas
    // beside it, is the one forced to stay non-free.
    let mut constraints: Vec<Vec<usize>> = Vec::new();
    for c in frontiers.f_occ.iter().filter(|c| !un_set.contains(c)) {
        let mut members = Vec::new();
        let mut satisfied_by_exterior = false;
        for k in 0..4 {
            let Some((nx, ny)) = neighbor4(c.x, c.y, width, height, k) else {
                continue;
            };
            let j = ny * width + nx;
            if contour[j] {
                continue;
            }
            if exterior[j] {
                satisfied_by_exterior = true;
                break;
            }
            let p = pocket_id[j];
            if !members.contains(&p) {
                members.push(p);
            }
        }
        if !satisfied_by_exterior && !members.is_empty() {
            constraints.push(members);
        }
    }
    let mut constraints_of = vec![Vec::new(); pockets.len()];
    for (ci, members) in constraints.iter().enumerate() {
        for &p in members {
            constraints_of[p].push(ci);
        }
    }
    let mut undecided_in: Vec<usize> = constraints.iter().map(|m| m.len()).collect();
    let mut has_obstacle = vec![false; constraints.len()];
    let mut free_pocket = vec![false; pockets.len()];
    let seed_idx = seed.y * width + seed.x;
    let seed_pocket = if contour[seed_idx] || exterior[seed_idx] {
        usize::MAX
    } else {
        pocket_id[seed_idx]
    };
    let mut order: Vec<usize> = (0..pockets.len()).collect();
    order.sort_by_key(|&p| (std::cmp::Reverse(pockets[p].len()), p));
    if seed_pocket != usize::MAX {
        let pos = order.iter().position(|&p| p == seed_pocket).unwrap();
        order.remove(pos);
        order.insert(0, seed_pocket);
    }
    for &p in &order {
        let free_ok = p == seed_pocket
            || constraints_of[p]
                .iter()
                .all(|&ci| has_obstacle[ci] || undecided_in[ci] >= 2);
        free_pocket[p] = free_ok;
        for &ci in &constraints_of[p] {
            undecided_in[ci] -= 1;
            if !free_ok {
                has_obstacle[ci] = true;
            }
        }
    }
    for (p, member) in pockets.iter().enumerate() {
        if free_pocket[p] {
            for &i in member {
                state[i] = REC_FREE;
            }
        }
    }

    for (i, filled) in scanline_fill(width, height, &contour, seed).iter().enumerate() {
        if *filled {
            state[i] = REC_FREE;
        }
    }

    // Pocket paint disconnected from the seed is dropped again, so a lobe
    // sealed off behind its own separate contour stays unknown. Contour
    // cells themselves always stay free: stray glimpsed cells connect to
    // the rest of the observation only diagonally but are still real.
    let mut connected = vec![false; n];
    if state[seed_idx] == REC_FREE {
        connected[seed_idx] = true;
        stack.clear();
        stack.push((seed.x, seed.y));
        while let Some((x, y)) = stack.pop() {
            for k in 0..4 {
                if let Some((nx, ny)) = neighbor4(x, y, width, height, k) {
                    let j = ny * width + nx;
                    if state[j] == REC_FREE && !connected[j] {
                        connected[j] = true;
                        stack.push((nx, ny));
                    }
                }
            }
        }
    }
    for i in 0..n {
        if state[i] == REC_FREE && !connected[i] && !contour[i] {
            state[i] = REC_UNK;
        }
    }

    // Wall band. A purely occupied-facing cell had no unknown neighbors at
    // the sender, so each of its non-contour undetermined neighbors here is
    // a wall it saw. Cells that also face unknown space leave their
    // undetermined sides alone: those could be horizon rather than wall.
    for c in &frontiers.f_occ {
        if un_set.contains(c) {
            continue;
        }
        for k in 0..4 {
            if let Some((nx, ny)) = neighbor4(c.x, c.y, width, height, k) {
                let i = ny * width + nx;
                if state[i] != REC_FREE && !contour[i] {
                    state[i] = REC_OCC;
                }
            }
        }
    }

    let mut grid = TriStateGrid::new(width, height, CellState::Unknown);
    for y in 0..height {
        for x in 0..width {
            match state[y * width + x] {
                REC_FREE => grid.set(x, y, CellState::Free),
                REC_OCC => grid.set(x, y, CellState::Occupied),
                _ => {}
            }
        }
    }

    Ok(close_free_space(&grid, closing_radius))
}

/// Union of several frontier sets. Commutative, associative, idempotent.
pub fn merge_frontiers(sets: &[FrontierSet]) -> FrontierSet {
    let mut f_un = Vec::new();
    let mut f_occ = Vec::new();
    for s in sets {
        f_un.extend_from_slice(&s.f_un);
        f_occ.extend_from_slice(&s.f_occ);
    }
    FrontierSet::new(f_un, f_occ)
}

/// Drop cells that no longer satisfy their label's frontier condition on the
/// merged grid: a frontier one robot reported may be interior free space in
/// the combined map because another robot explored past it.
pub fn prune_interior(set: &FrontierSet, grid: &TriStateGrid) -> FrontierSet {
    let (w, h) = (grid.width(), grid.height());
    let keep = |cell: &Cell, facing: CellState| {
        if cell.x >= w || cell.y >= h || grid.get(cell.x, cell.y) != CellState::Free {
            return false;
        }
        (0..4).any(|k| {
            neighbor4(cell.x, cell.y, w, h, k)
                .map_or(false, |(nx, ny)| grid.get(nx, ny) == facing)
        })
    };
    FrontierSet {
        f_un: set.f_un.iter().filter(|c| keep(c, CellState::Unknown)).copied().collect(),
        f_occ: set.f_occ.iter().filter(|c| keep(c, CellState::Occupied)).copied().collect(),
    }
}

/// Overlay several reconstructions into one global grid. Occupied paint goes
/// down first, free space wins conflicts: free cells were directly observed,
/// while the occupied band around `f_occ` cells is partly inferred.
pub fn overlay_grids(grids: &[TriStateGrid]) -> Result<TriStateGrid, FrontierError> {
    let first = grids.first().ok_or(FrontierError::NothingToOverlay)?;
    let (w, h) = (first.width(), first.height());
    for g in grids {
        if g.width() != w || g.height() != h {
            return Err(GridError::DimensionMismatch(w, h, g.width(), g.height()).into());
        }
    }
    let mut out = TriStateGrid::new(w, h, CellState::Unknown);
    for g in grids {
        for y in 0..h {
            for x in 0..w {
                if g.get(x, y) == CellState::Occupied && out.get(x, y) == CellState::Unknown {
                    out.set(x, y, CellState::Occupied);
                }
            }
        }
    }
    for g in grids {
        for y in 0..h {
            for x in 0..w {
                if g.get(x, y) == CellState::Free {
                    out.set(x, y, CellState::Free);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CellState;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

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

    // Brute-force oracle: per-cell scan with explicit neighbor checks.
    fn oracle_detect(grid: &TriStateGrid) -> FrontierSet {
        let (w, h) = (grid.width(), grid.height());
        let mut f_un = Vec::new();
        let mut f_occ = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if grid.get(x, y) != CellState::Free {
                    continue;
                }
                let mut saw_unknown = false;
                let mut saw_occupied = false;
                for (dx, dy) in [(0isize, -1isize), (-1, 0), (1, 0), (0, 1)] {
                    let nx = x as isize + dx;
                    let ny = y as isize + dy;
                    if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                        continue;
                    }
                    match grid.get(nx as usize, ny as usize) {
                        CellState::Unknown => saw_unknown = true,
                        CellState::Occupied => saw_occupied = true,
                        CellState::Free => {}
                    }
                }
                if saw_unknown {
                    f_un.push(Cell::new(x, y));
                }
                if saw_occupied {
                    f_occ.push(Cell::new(x, y));
                }
            }
        }
        FrontierSet { f_un, f_occ }
    }

    #[test]
    fn detect_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..60 {
            let g = random_grid(&mut rng, 16, 13);
            assert_eq!(detect_frontiers(&g), oracle_detect(&g));
        }
    }

    #[test]
    fn detect_on_fully_known_grid_has_no_unknown_facing_cells() {
        let g = TriStateGrid::from_text("4 3\n....\n.##.\n....\n").unwrap();
        let f = detect_frontiers(&g);
        assert!(f.f_un.is_empty());
        assert!(!f.f_occ.is_empty());
    }

    #[test]
    fn detect_labels_dual_frontier_cells_in_both_sets() {
        // center cell is free with an occupied neighbor and an unknown one
        let g = TriStateGrid::from_text("3 3\n.?.\n..#\n...\n").unwrap();
        let f = detect_frontiers(&g);
        let c = Cell::new(1, 1);
        assert!(f.f_un.contains(&c));
        assert!(f.f_occ.contains(&Cell::new(1, 1)));
    }

    #[test]
    fn detect_output_is_sorted_row_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_grid(&mut rng, 20, 20);
        let f = detect_frontiers(&g);
        let mut sorted = f.f_un.clone();
        sorted.sort_unstable();
        assert_eq!(f.f_un, sorted);
    }

    fn sample_map(rng: &mut ChaCha8Rng) -> SparseFrontierMap {
        let w = rng.gen_range(4..64);
        let h = rng.gen_range(4..64);
        let mut cells: Vec<Cell> = Vec::new();
        for _ in 0..rng.gen_range(0..30) {
            cells.push(Cell::new(rng.gen_range(0..w), rng.gen_range(0..h)));
        }
        let (un, occ) = cells.split_at(cells.len() / 2);
        SparseFrontierMap {
            width: w,
            height: h,
            resolution: rng.gen_range(1u32..200_000) as f64 / 1e6,
            pose: Pose::new(rng.gen_range(0..w), rng.gen_range(0..h), rng.gen_range(0..100)),
            frontiers: FrontierSet::new(un.to_vec(), occ.to_vec()),
        }
    }

    #[test]
    fn codec_roundtrip_preserves_every_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let map = sample_map(&mut rng);
            let bytes = encode_sparse(&map).unwrap();
            assert_eq!(decode_sparse(&bytes).unwrap(), map);
        }
    }

    #[test]
    fn encoded_size_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let map = sample_map(&mut rng);
            let bytes = encode_sparse(&map).unwrap();
            assert_eq!(bytes.len(), HEADER_LEN + 4 * (map.frontiers.f_un.len() + map.frontiers.f_occ.len()));
        }
    }

    #[test]
    fn empty_frontier_sets_encode_to_exactly_24_bytes() {
        let map = SparseFrontierMap {
            width: 10,
            height: 10,
            resolution: 0.05,
            pose: Pose::new(3, 4, 0),
            frontiers: FrontierSet::default(),
        };
        assert_eq!(encode_sparse(&map).unwrap().len(), 24);
    }

    #[test]
    fn encode_rejects_oversized_dimensions() {
        let map = SparseFrontierMap {
            width: 70_000,
            height: 10,
            resolution: 0.05,
            pose: Pose::new(0, 0, 0),
            frontiers: FrontierSet::default(),
        };
        assert_eq!(encode_sparse(&map), Err(FrontierError::DimensionTooLarge(70_000)));
    }

    #[test]
    fn decode_rejects_bad_magic_truncation_and_bad_coords() {
        let map = SparseFrontierMap {
            width: 8,
            height: 8,
            resolution: 0.05,
            pose: Pose::new(1, 1, 0),
            frontiers: FrontierSet::new(vec![Cell::new(2, 3)], vec![]),
        };
        let good = encode_sparse(&map).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode_sparse(&bad), Err(FrontierError::BadMagic));

        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(decode_sparse(&bad), Err(FrontierError::BadVersion(9)));

        assert!(matches!(decode_sparse(&good[..20]), Err(FrontierError::Truncated { .. })));
        assert!(matches!(decode_sparse(&good[..26]), Err(FrontierError::Truncated { .. })));

        let mut bad = good.clone();
        bad[24] = 200; // coordinate x = 200 on an 8-wide grid
        assert!(matches!(decode_sparse(&bad), Err(FrontierError::CellOutOfBounds(..))));

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(decode_sparse(&bad), Err(FrontierError::TrailingBytes(1)));
    }

    // BFS flood fill with the same barrier semantics, for checking the
    // scan-line implementation: 4-connected expansion through open cells,
    // then every barrier cell 8-adjacent to the open region is painted.
    fn bfs_fill(width: usize, height: usize, barrier: &[bool], seed: Cell) -> Vec<bool> {
        let idx = |x: usize, y: usize| y * width + x;
        let mut open = vec![false; width * height];
        if barrier[idx(seed.x, seed.y)] {
            let mut painted = vec![false; width * height];
            painted[idx(seed.x, seed.y)] = true;
            return painted;
        }
        let mut queue = std::collections::VecDeque::new();
        open[idx(seed.x, seed.y)] = true;
        queue.push_back((seed.x, seed.y));
        while let Some((x, y)) = queue.pop_front() {
            for k in 0..4 {
                if let Some((nx, ny)) = neighbor4(x, y, width, height, k) {
                    if !open[idx(nx, ny)] && !barrier[idx(nx, ny)] {
                        open[idx(nx, ny)] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
        }
        let mut painted = open.clone();
        for y in 0..height as isize {
            for x in 0..width as isize {
                if !barrier[y as usize * width + x as usize] {
                    continue;
                }
                'search: for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx >= 0
                            && ny >= 0
                            && (nx as usize) < width
                            && (ny as usize) < height
                            && open[ny as usize * width + nx as usize]
                        {
                            painted[y as usize * width + x as usize] = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        painted
    }

    #[test]
    fn scanline_fill_matches_bfs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..80 {
            let (w, h) = (rng.gen_range(3..18), rng.gen_range(3..18));
            let barrier: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.25)).collect();
            let seed = Cell::new(rng.gen_range(0..w), rng.gen_range(0..h));
            assert_eq!(
                scanline_fill(w, h, &barrier, seed),
                bfs_fill(w, h, &barrier, seed),
                "w={w} h={h} seed={seed}"
            );
        }
    }

    #[test]
    fn reconstruct_ring_of_occupied_facing_cells() {
        // 5x5, f_occ ring around the center, seed in the middle
        let mut ring = Vec::new();
        for i in 1..=3usize {
            ring.push(Cell::new(i, 1));
            ring.push(Cell::new(i, 3));
        }
        ring.push(Cell::new(1, 2));
        ring.push(Cell::new(3, 2));
        let set = FrontierSet::new(vec![], ring.clone());
        let g = reconstruct_grid(&set, Cell::new(2, 2), 5, 5, 0).unwrap();
        assert_eq!(g.get(2, 2), CellState::Free);
        for c in &ring {
            assert_eq!(g.get(c.x, c.y), CellState::Free, "ring cell {c}");
        }
        // band beyond the ring is occupied
        assert_eq!(g.get(2, 0), CellState::Occupied);
        assert_eq!(g.get(0, 2), CellState::Occupied);
        assert_eq!(g.get(4, 2), CellState::Occupied);
        assert_eq!(g.get(2, 4), CellState::Occupied);
        // corners outside the band stay unknown
        assert_eq!(g.get(0, 0), CellState::Unknown);
        assert_eq!(g.get(4, 4), CellState::Unknown);
    }

    #[test]
    fn reconstruct_unknown_facing_line_leaves_far_side_unknown() {
        // vertical f_un wall at x=2 on a 5x3 grid, seed on the left
        let wall: Vec<Cell> = (0..3).map(|y| Cell::new(2, y)).collect();
        let set = FrontierSet::new(wall.clone(), vec![]);
        let g = reconstruct_grid(&set, Cell::new(0, 1), 5, 3, 0).unwrap();
        for y in 0..3 {
            assert_eq!(g.get(0, y), CellState::Free);
            assert_eq!(g.get(1, y), CellState::Free);
            assert_eq!(g.get(2, y), CellState::Free, "frontier cells are free");
            assert_eq!(g.get(3, y), CellState::Unknown);
            assert_eq!(g.get(4, y), CellState::Unknown);
        }
    }

    #[test]
    fn reconstruct_recovers_room_behind_a_doorway() {
        let truth = TriStateGrid::from_text(concat!(
            "9 7\n",
            "#########\n",
            "#...#...#\n",
            "#...#...#\n",
            "#.......#\n",
            "#...#...#\n",
            "#...#...#\n",
            "#########\n",
        ))
        .unwrap();
        let set = detect_frontiers(&truth);
        assert!(set.f_un.is_empty());
        let g = reconstruct_grid(&set, Cell::new(2, 3), 9, 7, 0).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                if truth.get(x, y) == CellState::Free {
                    assert_eq!(g.get(x, y), CellState::Free, "free cell ({x},{y})");
                }
            }
        }
        for y in [1, 2, 4, 5] {
            assert_eq!(g.get(4, y), CellState::Occupied, "doorpost column ({y})");
        }
        assert_eq!(detect_frontiers(&g), set);
    }

    #[test]
    fn reconstruct_keeps_walked_around_obstacle_solid() {
        let truth = TriStateGrid::from_text(concat!(
            "9 7\n",
            "#########\n",
            "#.......#\n",
            "#.......#\n",
            "#..###..#\n",
            "#.......#\n",
            "#.......#\n",
            "#########\n",
        ))
        .unwrap();
        let set = detect_frontiers(&truth);
        let g = reconstruct_grid(&set, Cell::new(2, 2), 9, 7, 0).unwrap();
        for x in [3, 4, 5] {
            assert_eq!(g.get(x, 3), CellState::Occupied, "obstacle cell ({x},3)");
        }
        for y in 0..7 {
            for x in 0..9 {
                if truth.get(x, y) == CellState::Free {
                    assert_eq!(g.get(x, y), CellState::Free, "free cell ({x},{y})");
                }
            }
        }
        assert_eq!(detect_frontiers(&g), set);
    }

    #[test]
    fn reconstruct_rejects_out_of_bounds_seed() {
        let set = FrontierSet::default();
        assert!(matches!(
            reconstruct_grid(&set, Cell::new(9, 0), 5, 5, 1),
            Err(FrontierError::CellOutOfBounds(..))
        ));
    }

    fn random_set(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FrontierSet {
        let mut un = Vec::new();
        let mut occ = Vec::new();
        for _ in 0..rng.gen_range(0..12) {
            un.push(Cell::new(rng.gen_range(0..w), rng.gen_range(0..h)));
        }
        for _ in 0..rng.gen_range(0..12) {
            occ.push(Cell::new(rng.gen_range(0..w), rng.gen_range(0..h)));
        }
        FrontierSet::new(un, occ)
    }

    #[test]
    fn merge_is_commutative_associative_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..40 {
            let a = random_set(&mut rng, 12, 12);
            let b = random_set(&mut rng, 12, 12);
            let c = random_set(&mut rng, 12, 12);
            assert_eq!(merge_frontiers(&[a.clone(), b.clone()]), merge_frontiers(&[b.clone(), a.clone()]));
            assert_eq!(
                merge_frontiers(&[merge_frontiers(&[a.clone(), b.clone()]), c.clone()]),
                merge_frontiers(&[a.clone(), merge_frontiers(&[b.clone(), c.clone()])])
            );
            assert_eq!(merge_frontiers(&[a.clone(), a.clone()]), a);
        }
    }

    #[test]
    fn disjoint_merge_is_plain_union() {
        let a = FrontierSet::new(vec![Cell::new(0, 0)], vec![Cell::new(1, 0)]);
        let b = FrontierSet::new(vec![Cell::new(2, 2)], vec![]);
        let m = merge_frontiers(&[a, b]);
        assert_eq!(m.f_un, vec![Cell::new(0, 0), Cell::new(2, 2)]);
        assert_eq!(m.f_occ, vec![Cell::new(1, 0)]);
    }

    #[test]
    fn merged_overlapping_exploration_matches_merged_grid_detection() {
        // Ground truth: a 9x5 corridor with walls top and bottom. Robot A has
        // explored the left part, robot B the right part, overlapping in the
        // middle.
        let mut beliefs = Vec::new();
        for (x0, x1) in [(0usize, 5usize), (3, 8)] {
            let mut g = TriStateGrid::new(9, 5, CellState::Unknown);
            for x in x0..=x1 {
                for y in 1..4 {
                    g.set(x, y, CellState::Free);
                }
                g.set(x, 0, CellState::Occupied);
                g.set(x, 4, CellState::Occupied);
            }
            beliefs.push(g);
        }
        let sets: Vec<FrontierSet> = beliefs.iter().map(detect_frontiers).collect();
        let poses = [Cell::new(2, 2), Cell::new(6, 2)];
        let recon: Vec<TriStateGrid> = sets
            .iter()
            .zip(poses.iter())
            .map(|(s, p)| reconstruct_grid(s, *p, 9, 5, 1).unwrap())
            .collect();
        let merged_grid = overlay_grids(&recon).unwrap();
        let merged = prune_interior(&merge_frontiers(&sets), &merged_grid);
        assert_eq!(merged, detect_frontiers(&merged_grid));
    }

    #[test]
    fn prune_drops_cells_explored_by_another_robot() {
        let g = TriStateGrid::from_text("3 1\n...\n").unwrap();
        let set = FrontierSet::new(vec![Cell::new(1, 0)], vec![]);
        assert!(prune_interior(&set, &g).is_empty());
    }

    #[test]
    fn overlay_prefers_free_over_occupied_over_unknown() {
        let a = TriStateGrid::from_text("3 1\n#?.\n").unwrap();
        let b = TriStateGrid::from_text("3 1\n.#?\n").unwrap();
        let m = overlay_grids(&[a, b]).unwrap();
        assert_eq!(m.get(0, 0), CellState::Free);
        assert_eq!(m.get(1, 0), CellState::Occupied);
        assert_eq!(m.get(2, 0), CellState::Free);
    }
}
