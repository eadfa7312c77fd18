//! Deterministic multi-robot grid-world simulator.
//!
//! Procedurally generated indoor-like floorplans, ray-cast range sensing,
//! per-robot belief fusion, the full planning round (transmit, reconstruct,
//! cluster, assign, route, move), termination, and byte accounting.

use std::collections::VecDeque;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cluster::{mean_shift, Cluster, MeanShiftConfig};
use crate::frontier::{
    decode_sparse, detect_frontiers, encode_sparse, merge_frontiers, overlay_grids,
    prune_interior, reconstruct_grid, FrontierError, FrontierLabel, FrontierSet,
    SparseFrontierMap, HEADER_LEN,
};
use crate::global_planner::{GraphInputs, Model};
use crate::grid::{
    classify, coverage, Cell, CellState, GridError, OccupancyGrid, Pose, SensorModel,
    TriStateGrid,
};
use crate::local_planner::{
    optimize_route, should_plan_locally, subcluster, LocalPlanError, UtilityParams,
};
use crate::pathing::{astar, astar_toward, distance_matrix, DistanceMatrix, PathError};

/// Belief probability at or below which a cell counts as free.
pub const FREE_THRESHOLD: f64 = 0.35;
/// Belief probability at or above which a cell counts as occupied.
pub const OCCUPIED_THRESHOLD: f64 = 0.65;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation needs at least one robot")]
    NoRobots,
    #[error("requested {got} robots but the world has {have} spawn points")]
    TooManyRobots { got: usize, have: usize },
    #[error("world file: {0}")]
    WorldFormat(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Frontier(#[from] FrontierError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Plan(#[from] LocalPlanError),
    #[error(transparent)]
    Cluster(#[from] crate::cluster::ClusterError),
}

/// Map scale bucket; bounds are inclusive side-length ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Middle,
    Large,
}

impl SizeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Middle => "middle",
            SizeClass::Large => "large",
        }
    }

    /// Inclusive (min, max) side length for worlds of this class.
    pub fn bounds(self) -> (usize, usize) {
        match self {
            SizeClass::Small => (44, 52),
            SizeClass::Middle => (88, 104),
            SizeClass::Large => (152, 168),
        }
    }
}

impl std::str::FromStr for SizeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(SizeClass::Small),
            "middle" => Ok(SizeClass::Middle),
            "large" => Ok(SizeClass::Large),
            other => Err(format!("unknown size class '{other}'")),
        }
    }
}

/// Ground truth plus the spawn cells robots may start from.
#[derive(Debug, Clone)]
pub struct World {
    pub truth: TriStateGrid,
    pub spawns: Vec<Cell>,
    pub seed: u64,
    pub size_class: SizeClass,
}

impl World {
    /// Serialize as a dimensions line, a spawn line, then the grid rows.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\nspawn", self.truth.width(), self.truth.height());
        for c in &self.spawns {
            out.push_str(&format!(" {} {}", c.x, c.y));
        }
        out.push('\n');
        out.push_str(&self.truth.to_text());
        out
    }

    /// Parse the [`to_text`](World::to_text) format. The stored seed is not
    /// part of the format and comes back as zero; the class is inferred from
    /// the larger side.
    pub fn from_text(text: &str) -> Result<World, SimError> {
        let mut lines = text.lines();
        let dims = lines.next().ok_or_else(|| SimError::WorldFormat("empty input".into()))?;
        let mut parts = dims.split_whitespace();
        let parse_dim = |tok: Option<&str>| -> Result<usize, SimError> {
            tok.and_then(|t| t.parse().ok())
                .ok_or_else(|| SimError::WorldFormat(format!("bad dimensions line '{dims}'")))
        };
        let width = parse_dim(parts.next())?;
        let height = parse_dim(parts.next())?;

        let spawn_line =
            lines.next().ok_or_else(|| SimError::WorldFormat("missing spawn line".into()))?;
        let mut toks = spawn_line.split_whitespace();
        if toks.next() != Some("spawn") {
            return Err(SimError::WorldFormat(format!("bad spawn line '{spawn_line}'")));
        }
        let coords: Vec<usize> = toks
            .map(|t| {
                t.parse().map_err(|_| {
                    SimError::WorldFormat(format!("bad spawn coordinate '{t}'"))
                })
            })
            .collect::<Result<_, _>>()?;
        if coords.is_empty() || coords.len() % 2 != 0 {
            return Err(SimError::WorldFormat("spawn line needs x y pairs".into()));
        }
        let spawns: Vec<Cell> =
            coords.chunks(2).map(|p| Cell::new(p[0], p[1])).collect();

        let rows: Vec<&str> = lines.collect();
        let truth = TriStateGrid::from_text(&rows.join("\n"))?;
        if truth.width() != width || truth.height() != height {
            return Err(SimError::WorldFormat(format!(
                "header says {}x{} but rows give {}x{}",
                width,
                height,
                truth.width(),
                truth.height()
            )));
        }
        if truth.count(CellState::Unknown) > 0 {
            return Err(SimError::WorldFormat("ground truth may not contain '?'".into()));
        }
        for c in &spawns {
            if !truth.in_bounds(c.x, c.y) || truth.get(c.x, c.y) != CellState::Free {
                return Err(SimError::WorldFormat(format!(
                    "spawn ({}, {}) is not a free cell",
                    c.x, c.y
                )));
            }
        }
        let side = width.max(height);
        let size_class = if side <= 70 {
            SizeClass::Small
        } else if side <= 128 {
            SizeClass::Middle
        } else {
            SizeClass::Large
        };
        Ok(World { truth, spawns, seed: 0, size_class })
    }
}

const SPAWN_COUNT: usize = 6;

/// Build a connected indoor floorplan from recursive space partitioning.
///
/// Side lengths are odd so walls land on even coordinates with rooms between
/// them; every wall gets a two-cell doorway, which keeps all free cells in
/// one component. Spawn points are the six cells nearest the center of the
/// largest room.
pub fn generate_world(seed: u64, size_class: SizeClass) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (width, height) = match size_class {
        SizeClass::Small => (45 + 2 * rng.gen_range(0..4), 45 + 2 * rng.gen_range(0..4)),
        SizeClass::Middle => (89 + 2 * rng.gen_range(0..8), 89 + 2 * rng.gen_range(0..8)),
        SizeClass::Large => (153 + 2 * rng.gen_range(0..8), 153 + 2 * rng.gen_range(0..8)),
    };

    let mut truth = TriStateGrid::new(width, height, CellState::Free);
    for x in 0..width {
        truth.set(x, 0, CellState::Occupied);
        truth.set(x, height - 1, CellState::Occupied);
    }
    for y in 0..height {
        truth.set(0, y, CellState::Occupied);
        truth.set(width - 1, y, CellState::Occupied);
    }

    let mut rooms = Vec::new();
    let mut stack = vec![(1usize, 1usize, width - 2, height - 2)];
    while let Some((x0, y0, x1, y1)) = stack.pop() {
        let w = x1 - x0 + 1;
        let h = y1 - y0 + 1;
        let can_v = w >= 7;
        let can_h = h >= 7;
        let small_enough = w <= 15 && h <= 15;
        if (!can_v && !can_h) || (small_enough && rng.gen_bool(0.25)) {
            rooms.push((x0, y0, x1, y1));
            continue;
        }
        let vertical = if can_v && can_h {
            if w > h {
                true
            } else if h > w {
                false
            } else {
                rng.gen_bool(0.5)
            }
        } else {
            can_v
        };
        if vertical {
            let picks = (x1 - 3 - (x0 + 3)) / 2 + 1;
            let e = x0 + 3 + 2 * rng.gen_range(0..picks);
            for y in y0..=y1 {
                truth.set(e, y, CellState::Occupied);
            }
            let doors = (y1 - 1 - y0) / 2 + 1;
            let dy = y0 + 2 * rng.gen_range(0..doors);
            truth.set(e, dy, CellState::Free);
            truth.set(e, dy + 1, CellState::Free);
            stack.push((x0, y0, e - 1, y1));
            stack.push((e + 1, y0, x1, y1));
        } else {
            let picks = (y1 - 3 - (y0 + 3)) / 2 + 1;
            let f = y0 + 3 + 2 * rng.gen_range(0..picks);
            for x in x0..=x1 {
                truth.set(x, f, CellState::Occupied);
            }
            let doors = (x1 - 1 - x0) / 2 + 1;
            let dx = x0 + 2 * rng.gen_range(0..doors);
            truth.set(dx, f, CellState::Free);
            truth.set(dx + 1, f, CellState::Free);
            stack.push((x0, y0, x1, f - 1));
            stack.push((x0, f + 1, x1, y1));
        }
    }

    let spawn_room = rooms
        .iter()
        .copied()
        .max_by_key(|&(x0, y0, x1, y1)| ((x1 - x0 + 1) * (y1 - y0 + 1), height - y0, width - x0))
        .expect("partition always yields at least one room");
    let (x0, y0, x1, y1) = spawn_room;
    let cx = (x0 + x1) as f64 / 2.0;
    let cy = (y0 + y1) as f64 / 2.0;
    let mut cells: Vec<Cell> = (y0..=y1)
        .flat_map(|y| (x0..=x1).map(move |x| Cell::new(x, y)))
        .collect();
    cells.sort_by(|a, b| {
        let da = (a.x as f64 - cx).powi(2) + (a.y as f64 - cy).powi(2);
        let db = (b.x as f64 - cx).powi(2) + (b.y as f64 - cy).powi(2);
        da.partial_cmp(&db).unwrap().then(a.cmp(b))
    });
    cells.truncate(SPAWN_COUNT);

    World { truth, spawns: cells, seed, size_class }
}

fn bresenham(a: Cell, b: Cell) -> Vec<Cell> {
    let (mut x0, mut y0) = (a.x as isize, a.y as isize);
    let (x1, y1) = (b.x as isize, b.y as isize);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push(Cell::new(x0 as usize, y0 as usize));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

/// Cast a ray to every in-bounds cell of the range disk and report what each
/// ray sees: cells are free until the first occupied cell, which is reported
/// occupied and stops the ray. The union over rays comes back sorted
/// row-major with one entry per cell.
pub fn lidar_scan(world: &World, origin: Cell, range: usize) -> Vec<(Cell, CellState)> {
    let (w, h) = (world.truth.width(), world.truth.height());
    let mut seen: Vec<Option<CellState>> = vec![None; w * h];
    seen[origin.y * w + origin.x] = Some(CellState::Free);

    let r = range as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r || (dx == 0 && dy == 0) {
                continue;
            }
            let tx = origin.x as isize + dx;
            let ty = origin.y as isize + dy;
            if tx < 0 || ty < 0 || tx as usize >= w || ty as usize >= h {
                continue;
            }
            let target = Cell::new(tx as usize, ty as usize);
            for cell in bresenham(origin, target).into_iter().skip(1) {
                let state = world.truth.get(cell.x, cell.y);
                seen[cell.y * w + cell.x] = Some(state);
                if state == CellState::Occupied {
                    break;
                }
            }
        }
    }

    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if let Some(state) = seen[y * w + x] {
                out.push((Cell::new(x, y), state));
            }
        }
    }
    out
}

/// One robot's mutable state: where it is, what it believes, where it is
/// heading.
#[derive(Debug, Clone)]
pub struct RobotSim {
    pub pose: Pose,
    pub belief: OccupancyGrid,
    pub plan: VecDeque<Cell>,
    pub trail: Vec<Cell>,
    pub needs_replan: bool,
}

fn scan_and_fuse(robot: &mut RobotSim, world: &World, sensor: &SensorModel) -> Result<(), SimError> {
    for (cell, state) in lidar_scan(world, robot.pose.cell(), sensor.range) {
        let measurement = match state {
            CellState::Occupied => sensor.p_hit,
            _ => sensor.p_miss,
        };
        robot.belief.fuse(cell.x, cell.y, measurement, sensor.prior)?;
    }
    Ok(())
}

/// Move up to `budget` cells along the robot's plan, scanning before the
/// first move and after every move. The robot stops and flags a replan as
/// soon as the next plan cell is occupied in truth or in its own classified
/// belief.
pub fn advance(
    robot: &mut RobotSim,
    world: &World,
    sensor: &SensorModel,
    budget: usize,
) -> Result<(), SimError> {
    scan_and_fuse(robot, world, sensor)?;
    for _ in 0..budget {
        let Some(&next) = robot.plan.front() else { break };
        let blocked = world.truth.get(next.x, next.y) == CellState::Occupied
            || robot.belief.prob(next.x, next.y) >= OCCUPIED_THRESHOLD;
        if blocked {
            robot.plan.clear();
            robot.needs_replan = true;
            break;
        }
        robot.plan.pop_front();
        robot.pose = Pose::new(next.x, next.y, robot.pose.robot_id);
        robot.trail.push(next);
        scan_and_fuse(robot, world, sensor)?;
    }
    Ok(())
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    NoReachableTarget,
    AllClustersSmall,
    StepLimit,
}

impl TerminationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminationReason::NoReachableTarget => "no_reachable_target",
            TerminationReason::AllClustersSmall => "all_clusters_small",
            TerminationReason::StepLimit => "step_limit",
        }
    }
}

/// Episode-level accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub steps: usize,
    pub coverage: f64,
    pub dense_bytes: usize,
    pub sparse_bytes: usize,
    pub reason: TerminationReason,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub robots: usize,
    pub sensor_range: usize,
    pub motion_budget: usize,
    pub max_steps: usize,
    /// Clusters with fewer members than this do not keep an episode alive.
    pub termination_cluster_size: usize,
    pub closing_radius: usize,
    /// Meters per cell, carried in the wire header.
    pub resolution: f64,
    pub cluster: MeanShiftConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            robots: 3,
            sensor_range: 20,
            motion_budget: 20,
            max_steps: 100,
            termination_cluster_size: 2,
            closing_radius: 1,
            resolution: 0.05,
            cluster: MeanShiftConfig::default(),
        }
    }
}

/// Everything the planning round derived from the transmitted payloads.
#[derive(Debug, Clone)]
pub struct Scene {
    pub grid: TriStateGrid,
    pub frontiers: FrontierSet,
    pub clusters: Vec<Cluster>,
    pub dists: DistanceMatrix,
    pub termination: Option<TerminationReason>,
}

/// Pick the fill seed a robot transmits: its own cell, unless that cell is a
/// frontier cell (part of the fill barrier), in which case the nearest free
/// non-frontier cell is substituted via breadth-first search over free
/// cells. Falls back to the pose when no interior cell exists.
fn choose_fill_seed(classified: &TriStateGrid, frontiers: &FrontierSet, pose: Cell) -> Cell {
    let (w, h) = (classified.width(), classified.height());
    let mut barrier = vec![false; w * h];
    for fc in frontiers.iter() {
        barrier[fc.cell.y * w + fc.cell.x] = true;
    }
    if !barrier[pose.y * w + pose.x] {
        return pose;
    }
    let mut visited = vec![false; w * h];
    visited[pose.y * w + pose.x] = true;
    let mut level = vec![pose];
    while !level.is_empty() {
        let mut found: Option<Cell> = None;
        for c in &level {
            if !barrier[c.y * w + c.x] {
                found = Some(match found {
                    Some(best) if best <= *c => best,
                    _ => *c,
                });
            }
        }
        if let Some(best) = found {
            return best;
        }
        let mut next = Vec::new();
        for c in &level {
            for (dx, dy) in [(0isize, -1isize), (-1, 0), (1, 0), (0, 1)] {
                let nx = c.x as isize + dx;
                let ny = c.y as isize + dy;
                if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if visited[ny * w + nx] || classified.get(nx, ny) != CellState::Free {
                    continue;
                }
                visited[ny * w + nx] = true;
                next.push(Cell::new(nx, ny));
            }
        }
        level = next;
    }
    pose
}

/// Per-robot assignment of cluster indices; `None` leaves a robot idle.
pub type Assignment = Vec<Option<usize>>;

/// Chooses cluster targets for all robots each planning round.
pub trait AssignPolicy {
    fn assign(&mut self, poses: &[Pose], scene: &Scene) -> Assignment;
    fn name(&self) -> &'static str;
}

/// Robots in index order each take the nearest unclaimed reachable cluster.
pub fn greedy_assign(dists: &DistanceMatrix) -> Assignment {
    let mut taken = vec![false; dists.clusters()];
    let mut out = Vec::with_capacity(dists.robots());
    for i in 0..dists.robots() {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..dists.clusters() {
            if taken[j] {
                continue;
            }
            if let Some(d) = dists.get(i, j) {
                let better = match best {
                    Some((bd, _)) => d < bd,
                    None => true,
                };
                if better {
                    best = Some((d, j));
                }
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
            out.push(Some(j));
        } else {
            out.push(None);
        }
    }
    out
}

/// Distance-ranked sequential baseline.
#[derive(Debug, Default, Clone, Copy)]
pub struct GreedyPolicy;

impl AssignPolicy for GreedyPolicy {
    fn assign(&mut self, _poses: &[Pose], scene: &Scene) -> Assignment {
        greedy_assign(&scene.dists)
    }

    fn name(&self) -> &'static str {
        "greedy"
    }
}

/// Attention-model policy; assigns through the trained affinity head.
pub struct LearnedPolicy {
    pub model: Model,
}

impl AssignPolicy for LearnedPolicy {
    fn assign(&mut self, poses: &[Pose], scene: &Scene) -> Assignment {
        if scene.clusters.is_empty() {
            return vec![None; poses.len()];
        }
        let inputs = GraphInputs::new(
            scene.grid.width(),
            scene.grid.height(),
            poses,
            &scene.clusters,
            &scene.dists,
        );
        self.model.assign_targets(&inputs)
    }

    fn name(&self) -> &'static str {
        "learned"
    }
}

/// Episode driver: owns the world, the robots, and the byte counters.
pub struct Simulator {
    pub world: World,
    pub config: SimConfig,
    pub sensor: SensorModel,
    pub robots: Vec<RobotSim>,
    pub steps: usize,
    pub sparse_bytes: usize,
    pub dense_bytes: usize,
}

impl Simulator {
    pub fn new(world: World, config: SimConfig) -> Result<Simulator, SimError> {
        if config.robots == 0 {
            return Err(SimError::NoRobots);
        }
        if config.robots > world.spawns.len() {
            return Err(SimError::TooManyRobots {
                got: config.robots,
                have: world.spawns.len(),
            });
        }
        let sensor = SensorModel { range: config.sensor_range, ..SensorModel::default() };
        let (w, h) = (world.truth.width(), world.truth.height());
        let mut robots = Vec::with_capacity(config.robots);
        for i in 0..config.robots {
            let spawn = world.spawns[i];
            let mut robot = RobotSim {
                pose: Pose::new(spawn.x, spawn.y, i),
                belief: OccupancyGrid::new(w, h, config.resolution, sensor.prior),
                plan: VecDeque::new(),
                trail: vec![spawn],
                needs_replan: false,
            };
            scan_and_fuse(&mut robot, &world, &sensor)?;
            robots.push(robot);
        }
        Ok(Simulator {
            world,
            config,
            sensor,
            robots,
            steps: 0,
            sparse_bytes: 0,
            dense_bytes: 0,
        })
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.robots.iter().map(|r| r.pose).collect()
    }

    /// One communication-and-fusion round: every robot transmits its frontier
    /// payload, the center decodes, reconstructs, merges, clusters, and
    /// checks termination. Byte counters grow by the actual payload sizes
    /// and by the dense-grid baseline.
    pub fn preprocess(&mut self) -> Result<Scene, SimError> {
        let (w, h) = (self.world.truth.width(), self.world.truth.height());
        let mut reconstructions = Vec::with_capacity(self.robots.len());
        let mut decoded_sets = Vec::with_capacity(self.robots.len());

        for robot in &self.robots {
            let classified = classify(&robot.belief, FREE_THRESHOLD, OCCUPIED_THRESHOLD)?;
            let frontiers = detect_frontiers(&classified);
            let seed = choose_fill_seed(&classified, &frontiers, robot.pose.cell());
            let map = SparseFrontierMap {
                width: w,
                height: h,
                resolution: self.config.resolution,
                pose: Pose::new(seed.x, seed.y, robot.pose.robot_id),
                frontiers,
            };
            let payload = encode_sparse(&map)?;
            self.sparse_bytes += payload.len();
            self.dense_bytes += HEADER_LEN + w * h;

            let received = decode_sparse(&payload)?;
            let recon = if received.frontiers.is_empty() {
                let mut g = TriStateGrid::new(received.width, received.height, CellState::Unknown);
                g.set(received.pose.x, received.pose.y, CellState::Free);
                g
            } else {
                reconstruct_grid(
                    &received.frontiers,
                    received.pose.cell(),
                    received.width,
                    received.height,
                    self.config.closing_radius,
                )?
            };
            reconstructions.push(recon);
            decoded_sets.push(received.frontiers);
        }

        let grid = overlay_grids(&reconstructions)?;
        let merged = merge_frontiers(&decoded_sets);
        let frontiers = prune_interior(&merged, &grid);
        let clusters =
            mean_shift(frontiers.cells(FrontierLabel::UnknownFacing), &self.config.cluster)?;

        let centers: Vec<Cell> = clusters.iter().map(|c| c.center).collect();
        let dists = distance_matrix(&grid, &self.poses(), &centers)?;

        let termination = if clusters.is_empty() {
            Some(TerminationReason::NoReachableTarget)
        } else if clusters
            .iter()
            .all(|c| c.members.len() < self.config.termination_cluster_size)
        {
            Some(TerminationReason::AllClustersSmall)
        } else if !dists.any_reachable() {
            Some(TerminationReason::NoReachableTarget)
        } else {
            None
        };

        Ok(Scene { grid, frontiers, clusters, dists, termination })
    }

    /// Route every assigned robot toward its cluster, then move all robots
    /// for one motion budget. Unassigned robots idle in place (they still
    /// scan).
    pub fn execute(
        &mut self,
        scene: &Scene,
        assignments: &Assignment,
        params: &UtilityParams,
    ) -> Result<(), SimError> {
        let plan_locally = should_plan_locally(&scene.clusters, params.activation_threshold);
        for (robot, assigned) in self.robots.iter_mut().zip(assignments) {
            robot.plan.clear();
            let Some(j) = *assigned else { continue };
            let cluster = &scene.clusters[j];
            let start = robot.pose.cell();
            // The robot trusts its own wall memories over the center's lossy
            // reconstruction, so routes never cross cells it knows are
            // blocked.
            let mut plan_grid = scene.grid.clone();
            let own = classify(&robot.belief, FREE_THRESHOLD, OCCUPIED_THRESHOLD)?;
            for y in 0..own.height() {
                for x in 0..own.width() {
                    if own.get(x, y) == CellState::Occupied {
                        plan_grid.set(x, y, CellState::Occupied);
                    }
                }
            }
            let stops = if plan_locally {
                let subs = subcluster(&cluster.members, &self.config.cluster)?;
                optimize_route(start, &subs, &plan_grid, params)?.sequence
            } else {
                vec![start, cluster.center]
            };
            let mut cells = Vec::new();
            let mut at = start;
            for &stop in stops.iter().skip(1) {
                let leg = if plan_grid.get(stop.x, stop.y) == CellState::Free {
                    astar(&plan_grid, at, stop)?
                } else {
                    None
                };
                match leg {
                    Some(path) => {
                        cells.extend_from_slice(&path.cells[1..]);
                        at = stop;
                    }
                    None => {
                        // The merged map can promise corridors the robot
                        // knows are blocked. Walking as close to the stop
                        // as believed-safe space allows keeps it observing
                        // until the maps agree.
                        if let Some(path) = astar_toward(&plan_grid, at, stop)? {
                            cells.extend_from_slice(&path.cells[1..]);
                        }
                        break;
                    }
                }
            }
            robot.plan = cells.into();
            robot.needs_replan = false;
        }
        for robot in &mut self.robots {
            advance(robot, &self.world, &self.sensor, self.config.motion_budget)?;
        }
        self.steps += 1;
        Ok(())
    }
}

/// Run one full episode: plan, move, repeat until a termination criterion or
/// the step limit fires. Coverage is measured on the merged reconstructed
/// grid after the final transmission round.
pub fn run_episode(
    world: &World,
    config: &SimConfig,
    params: &UtilityParams,
    policy: &mut dyn AssignPolicy,
) -> Result<EpisodeMetrics, SimError> {
    let mut sim = Simulator::new(world.clone(), config.clone())?;
    loop {
        let scene = sim.preprocess()?;
        let cov = coverage(&scene.grid, &sim.world.truth)?;
        if let Some(reason) = scene.termination {
            return Ok(EpisodeMetrics {
                steps: sim.steps,
                coverage: cov,
                dense_bytes: sim.dense_bytes,
                sparse_bytes: sim.sparse_bytes,
                reason,
            });
        }
        if sim.steps >= config.max_steps {
            return Ok(EpisodeMetrics {
                steps: sim.steps,
                coverage: cov,
                dense_bytes: sim.dense_bytes,
                sparse_bytes: sim.sparse_bytes,
                reason: TerminationReason::StepLimit,
            });
        }
        let assignments = policy.assign(&sim.poses(), &scene);
        sim.execute(&scene, &assignments, params)?;
    }
}
