//! Hybrid A* kinematic search.
//!
//! Produces the coarse collision-free reference path consumed by the
//! smoother: bicycle-model arc primitives over a discretized
//! (x, y, heading) state space, forward and backward gears with switch
//! penalties, Euclidean heuristic, and deterministic tie-breaking.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::geometry::{
    normalize_angle, CollisionChecker, ConvexPolygon, Gear, Pose, VehicleParams,
};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("start pose is in collision or outside bounds")]
    StartInCollision,
    #[error("goal pose is in collision or outside bounds")]
    GoalInCollision,
    #[error("no collision-free path found (open set exhausted after {expansions} expansions)")]
    NoPath { expansions: usize },
    #[error("expansion budget of {budget} exhausted before reaching the goal")]
    BudgetExhausted { budget: usize },
    #[error("invalid search config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Arc length of one motion primitive, meters.
    pub step_size: f64,
    /// Spacing of the steering set, radians.
    pub steering_resolution: f64,
    /// Largest steering angle; 0 means "derive from the vehicle" as
    /// atan(wheelbase * max_curvature).
    #[serde(skip)]
    pub max_steering: f64,
    pub xy_bin: f64,
    pub theta_bin: f64,
    /// Cost multiplier for backward motion, >= 1.
    pub reverse_penalty: f64,
    /// Extra cost (meter-equivalent) for changing direction.
    pub gear_switch_penalty: f64,
    pub max_expansions: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            step_size: 0.2,
            steering_resolution: 0.026,
            max_steering: 0.0,
            xy_bin: 0.3,
            theta_bin: 0.1,
            reverse_penalty: 2.0,
            gear_switch_penalty: 1.0,
            max_expansions: 1_000_000,
        }
    }
}

impl SearchConfig {
    /// Fills the derived steering limit so the search stays kinematically
    /// admissible for this vehicle.
    pub fn resolved_for(&self, vehicle: &VehicleParams) -> Self {
        let mut config = self.clone();
        if config.max_steering <= 0.0 {
            config.max_steering = (vehicle.wheelbase * vehicle.max_curvature).atan();
        }
        config
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.step_size > 0.0) {
            return Err(SearchError::BadConfig("step_size must be positive"));
        }
        if !(self.steering_resolution > 0.0) {
            return Err(SearchError::BadConfig("steering_resolution must be positive"));
        }
        if !(self.xy_bin > 0.0) || !(self.theta_bin > 0.0) {
            return Err(SearchError::BadConfig("bins must be positive"));
        }
        if self.reverse_penalty < 1.0 {
            return Err(SearchError::BadConfig("reverse_penalty must be >= 1"));
        }
        if self.gear_switch_penalty < 0.0 {
            return Err(SearchError::BadConfig("gear_switch_penalty must be >= 0"));
        }
        Ok(())
    }
}

/// Search output: poses with the gear used to arrive at each pose.
#[derive(Debug, Clone)]
pub struct ReferencePath {
    pub poses: Vec<Pose>,
    pub gears: Vec<Gear>,
}

impl ReferencePath {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

struct Node {
    pose: Pose,
    gear: Gear,
    g: f64,
    parent: usize,
    /// Primitive that produced this node, for path reconstruction.
    primitive: u32,
}

#[derive(PartialEq)]
struct HeapEntry {
    f: f64,
    seq: u64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (f, seq): reverse the comparison.
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Primitive {
    gear: Gear,
    curvature: f64,
    delta_theta: f64,
    sin_dt: f64,
    cos_dt: f64,
}

/// One bicycle-model step of `step` arc length (signed by gear) under a
/// fixed curvature.
pub fn advance(pose: Pose, curvature: f64, gear: Gear, step: f64) -> Pose {
    let (sin_t, cos_t) = pose.heading.sin_cos();
    let delta_theta = gear.sign() * step * curvature;
    let (dx, dy) = if curvature.abs() < 1e-12 {
        (gear.sign() * step * cos_t, gear.sign() * step * sin_t)
    } else {
        let (sin_dt, cos_dt) = delta_theta.sin_cos();
        let sin_new = sin_t * cos_dt + cos_t * sin_dt;
        let cos_new = cos_t * cos_dt - sin_t * sin_dt;
        ((sin_new - sin_t) / curvature, (cos_t - cos_new) / curvature)
    };
    Pose {
        position: crate::geometry::Point2::new(pose.position.x + dx, pose.position.y + dy),
        heading: normalize_angle(pose.heading + delta_theta),
    }
}

struct BinGrid {
    min_x: f64,
    min_y: f64,
    nx: usize,
    ny: usize,
    ntheta: usize,
    xy_bin: f64,
    theta_bin: f64,
    best_g: Vec<f64>,
}

impl BinGrid {
    fn new(bounds: &ConvexPolygon, config: &SearchConfig) -> Self {
        let (min, max) = bounds.aabb();
        let nx = ((max.x - min.x) / config.xy_bin).ceil() as usize + 2;
        let ny = ((max.y - min.y) / config.xy_bin).ceil() as usize + 2;
        let ntheta = (2.0 * std::f64::consts::PI / config.theta_bin).ceil() as usize;
        Self {
            min_x: min.x,
            min_y: min.y,
            nx,
            ny,
            ntheta,
            xy_bin: config.xy_bin,
            theta_bin: config.theta_bin,
            best_g: vec![f64::INFINITY; nx * ny * ntheta],
        }
    }

    fn index(&self, pose: Pose) -> Option<usize> {
        let ix = ((pose.position.x - self.min_x) / self.xy_bin).floor();
        let iy = ((pose.position.y - self.min_y) / self.xy_bin).floor();
        if ix < 0.0 || iy < 0.0 {
            return None;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        if ix >= self.nx || iy >= self.ny {
            return None;
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let wrapped = pose.heading.rem_euclid(two_pi);
        let it = ((wrapped / self.theta_bin) as usize).min(self.ntheta - 1);
        Some((ix * self.ny + iy) * self.ntheta + it)
    }
}

/// Searches a collision-free kinematic path from start to goal.
pub fn search(
    start: Pose,
    goal: Pose,
    obstacles: &[ConvexPolygon],
    bounds: &ConvexPolygon,
    vehicle: &VehicleParams,
    config: &SearchConfig,
) -> Result<ReferencePath, SearchError> {
    let config = config.resolved_for(vehicle);
    config.validate()?;
    let checker = CollisionChecker::new(vehicle, obstacles, bounds);
    if !checker.pose_free(start) {
        return Err(SearchError::StartInCollision);
    }
    if !checker.pose_free(goal) {
        return Err(SearchError::GoalInCollision);
    }

    if start.position.distance(goal.position) < 1e-9
        && normalize_angle(start.heading - goal.heading).abs() < 1e-9
    {
        return Ok(ReferencePath {
            poses: vec![start],
            gears: vec![Gear::Forward],
        });
    }

    let primitives = build_primitives(vehicle, &config);
    // Each expansion chains enough step_size sub-steps that the endpoint
    // always leaves the parent's closed-set cell; intermediate poses are
    // collision-checked and emitted into the final path.
    let substeps = expansion_substeps(&config);
    let mut grid = BinGrid::new(bounds, &config);
    let mut arena: Vec<Node> = Vec::with_capacity(4096);
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(4096);
    let mut seq: u64 = 0;

    let heuristic = |pose: &Pose| pose.position.distance(goal.position);

    arena.push(Node {
        pose: start,
        gear: Gear::Forward,
        g: 0.0,
        parent: usize::MAX,
        primitive: u32::MAX,
    });
    if let Some(bin) = grid.index(start) {
        grid.best_g[bin] = 0.0;
    }
    heap.push(HeapEntry {
        f: heuristic(&start),
        seq,
        node: 0,
    });

    let goal_reached = |pose: &Pose| {
        (pose.position.x - goal.position.x).abs() <= config.xy_bin
            && (pose.position.y - goal.position.y).abs() <= config.xy_bin
            && normalize_angle(pose.heading - goal.heading).abs() <= config.theta_bin
    };

    let mut expansions = 0usize;
    while let Some(entry) = heap.pop() {
        let node_idx = entry.node;
        let (pose, gear, g) = {
            let node = &arena[node_idx];
            (node.pose, node.gear, node.g)
        };
        if let Some(bin) = grid.index(pose) {
            if g > grid.best_g[bin] + 1e-12 {
                continue; // stale entry
            }
        }
        if goal_reached(&pose) {
            return Ok(reconstruct(&arena, node_idx, &primitives, substeps, &config, start, goal));
        }

        expansions += 1;
        if expansions > config.max_expansions {
            return Err(SearchError::BudgetExhausted {
                budget: config.max_expansions,
            });
        }

        let first_move = node_idx == 0;
        for (prim_idx, prim) in primitives.iter().enumerate() {
            // Advance the whole primitive first; bin-gate on the endpoint
            // before paying for collision checks.
            let mut next = pose;
            for _ in 0..substeps {
                next = advance_with(next, prim, config.step_size);
            }
            let Some(bin) = grid.index(next) else { continue };
            let mut cost = substeps as f64
                * config.step_size
                * if prim.gear == Gear::Forward {
                    1.0
                } else {
                    config.reverse_penalty
                };
            if !first_move && prim.gear != gear {
                cost += config.gear_switch_penalty;
            }
            let g_next = g + cost;
            if g_next >= grid.best_g[bin] - 1e-12 {
                continue;
            }
            let mut free = true;
            let mut probe = pose;
            for _ in 0..substeps {
                probe = advance_with(probe, prim, config.step_size);
                if !checker.pose_free(probe) {
                    free = false;
                    break;
                }
            }
            if !free {
                continue;
            }
            grid.best_g[bin] = g_next;
            seq += 1;
            arena.push(Node {
                pose: next,
                gear: prim.gear,
                g: g_next,
                parent: node_idx,
                primitive: prim_idx as u32,
            });
            heap.push(HeapEntry {
                f: g_next + heuristic(&next),
                seq,
                node: arena.len() - 1,
            });
        }
    }

    Err(SearchError::NoPath { expansions })
}

fn expansion_substeps(config: &SearchConfig) -> usize {
    let cell_diagonal = config.xy_bin * std::f64::consts::SQRT_2;
    ((cell_diagonal / config.step_size) + 1e-9).ceil().max(1.0) as usize
}

fn advance_with(pose: Pose, prim: &Primitive, step: f64) -> Pose {
    let (sin_t, cos_t) = pose.heading.sin_cos();
    let dir = prim.gear.sign();
    let (dx, dy) = if prim.curvature.abs() < 1e-12 {
        (dir * step * cos_t, dir * step * sin_t)
    } else {
        let sin_new = sin_t * prim.cos_dt + cos_t * prim.sin_dt;
        let cos_new = cos_t * prim.cos_dt - sin_t * prim.sin_dt;
        ((sin_new - sin_t) / prim.curvature, (cos_t - cos_new) / prim.curvature)
    };
    Pose {
        position: crate::geometry::Point2::new(pose.position.x + dx, pose.position.y + dy),
        heading: normalize_angle(pose.heading + prim.delta_theta),
    }
}

fn build_primitives(vehicle: &VehicleParams, config: &SearchConfig) -> Vec<Primitive> {
    // Full steering range at the configured spacing, endpoint included so
    // the maximum-curvature arcs are available to the search.
    let steps = (config.max_steering / config.steering_resolution + 1e-9).floor() as i64;
    let mut steerings: Vec<f64> = (-steps..=steps)
        .map(|k| k as f64 * config.steering_resolution)
        .collect();
    if (config.max_steering - steps as f64 * config.steering_resolution).abs() > 1e-9 {
        steerings.insert(0, -config.max_steering);
        steerings.push(config.max_steering);
    }
    let mut primitives = Vec::with_capacity(steerings.len() * 2);
    for gear in [Gear::Forward, Gear::Backward] {
        for &steering in &steerings {
            let curvature = steering.tan() / vehicle.wheelbase;
            let delta_theta = gear.sign() * config.step_size * curvature;
            primitives.push(Primitive {
                gear,
                curvature,
                delta_theta,
                sin_dt: delta_theta.sin(),
                cos_dt: delta_theta.cos(),
            });
        }
    }
    primitives
}

fn reconstruct(
    arena: &[Node],
    last: usize,
    primitives: &[Primitive],
    substeps: usize,
    config: &SearchConfig,
    start: Pose,
    goal: Pose,
) -> ReferencePath {
    let mut chain = Vec::new();
    let mut idx = last;
    while idx != usize::MAX {
        chain.push(idx);
        idx = arena[idx].parent;
    }
    chain.reverse();

    let mut poses = vec![start];
    let mut gears = vec![Gear::Forward];
    for &node_idx in &chain[1..] {
        let node = &arena[node_idx];
        let prim = &primitives[node.primitive as usize];
        let mut pose = arena[node.parent].pose;
        for _ in 0..substeps {
            pose = advance_with(pose, prim, config.step_size);
            poses.push(pose);
            gears.push(node.gear);
        }
    }
    if poses.len() >= 2 {
        gears[0] = gears[1];
    }
    // Snap the final pose to the exact goal; the smoother's endpoint
    // constraints need exact endpoints.
    *poses.last_mut().unwrap() = goal;
    ReferencePath { poses, gears }
}
