//! Planar primitives: poses, convex polygons, vehicle footprints, exact
//! collision tests and discrete curvature.
//!
//! Everything here is an immutable value type; all operations are pure.

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("coordinate is not finite: ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon is not strictly convex at vertex {0}")]
    NotConvex(usize),
    #[error("polygon has repeated vertex at index {0}")]
    RepeatedVertex(usize),
    #[error("vehicle parameter {0} must be positive, got {1}")]
    BadVehicleParam(&'static str, f64),
    #[error("point ({0}, {1}) lies outside the bounds polygon")]
    OutsideBounds(f64, f64),
    #[error("curvature is undefined for coincident points")]
    CoincidentPoints,
}

/// Planar point, meters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Normalize an angle to (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Position plus heading. Heading is kept normalized to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Point2,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            position: Point2::new(x, y),
            heading: normalize_angle(heading),
        }
    }

    /// Unit vector along the heading.
    pub fn direction(&self) -> Point2 {
        Point2::new(self.heading.cos(), self.heading.sin())
    }
}

/// Driving direction of a path piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Gear {
    Forward,
    Backward,
}

impl Gear {
    /// +1 for forward, -1 for backward.
    pub fn sign(self) -> f64 {
        match self {
            Gear::Forward => 1.0,
            Gear::Backward => -1.0,
        }
    }
}

/// Strictly convex polygon with counter-clockwise vertex order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

impl ConvexPolygon {
    /// Builds a polygon from vertices in either winding order. Rejects
    /// non-convex or degenerate input instead of repairing it, so bad
    /// scenario data surfaces early.
    pub fn new(mut vertices: Vec<Point2>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::TooFewVertices(vertices.len()));
        }
        for v in &vertices {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite(v.x, v.y));
            }
        }
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if a.distance(b) < 1e-12 {
                return Err(GeometryError::RepeatedVertex(i));
            }
            if (b - a).cross(c - b) <= 0.0 {
                return Err(GeometryError::NotConvex((i + 1) % n));
            }
        }
        Ok(Self { vertices })
    }

    /// Axis-aligned rectangle helper.
    pub fn rectangle(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        Self::new(vec![
            Point2::new(x_min, y_min),
            Point2::new(x_max, y_min),
            Point2::new(x_max, y_max),
            Point2::new(x_min, y_max),
        ])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    /// True iff the point lies inside or on the boundary.
    pub fn contains(&self, p: Point2) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if (b - a).cross(p - a) < 0.0 {
                return false;
            }
        }
        true
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn aabb(&self) -> (Point2, Point2) {
        let mut min = self.vertices[0];
        let mut max = self.vertices[0];
        for v in &self.vertices[1..] {
            min.x = min.x.min(v.x);
            min.y = min.y.min(v.y);
            max.x = max.x.max(v.x);
            max.y = max.y.max(v.y);
        }
        (min, max)
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }
}

fn signed_area(vertices: &[Point2]) -> f64 {
    let n = vertices.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += vertices[i].cross(vertices[(i + 1) % n]);
    }
    0.5 * acc
}

/// Rectangular vehicle described in the rear-axle frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub front_overhang: f64,
    pub rear_overhang: f64,
    pub width: f64,
    /// 1 / minimum turning radius.
    pub max_curvature: f64,
}

impl VehicleParams {
    pub fn new(
        wheelbase: f64,
        front_overhang: f64,
        rear_overhang: f64,
        width: f64,
        max_curvature: f64,
    ) -> Result<Self, GeometryError> {
        let params = Self {
            wheelbase,
            front_overhang,
            rear_overhang,
            width,
            max_curvature,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let checks = [
            ("wheelbase", self.wheelbase),
            ("front_overhang", self.front_overhang),
            ("rear_overhang", self.rear_overhang),
            ("width", self.width),
            ("max_curvature", self.max_curvature),
        ];
        for (name, value) in checks {
            if !(value > 0.0) || !value.is_finite() {
                return Err(GeometryError::BadVehicleParam(name, value));
            }
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.wheelbase + self.front_overhang + self.rear_overhang
    }

    pub fn min_turning_radius(&self) -> f64 {
        1.0 / self.max_curvature
    }
}

/// Disk-shaped feasible region around a path point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bubble {
    pub center: Point2,
    pub radius: f64,
}

/// Vehicle body rectangle at the given pose. The pose point is the rear-axle
/// center: the body spans `rear_overhang` behind it and
/// `wheelbase + front_overhang` ahead of it, `width/2` to each side.
pub fn footprint(pose: Pose, vehicle: &VehicleParams) -> ConvexPolygon {
    ConvexPolygon {
        vertices: footprint_corners(pose, vehicle).to_vec(),
    }
}

/// Vehicle body corners at a pose without the polygon wrapper; CCW order.
pub fn footprint_corners(pose: Pose, vehicle: &VehicleParams) -> [Point2; 4] {
    let (sin, cos) = pose.heading.sin_cos();
    let x_back = -vehicle.rear_overhang;
    let x_front = vehicle.wheelbase + vehicle.front_overhang;
    let half_w = 0.5 * vehicle.width;
    let corner = |lx: f64, ly: f64| {
        Point2::new(
            pose.position.x + lx * cos - ly * sin,
            pose.position.y + lx * sin + ly * cos,
        )
    };
    [
        corner(x_back, -half_w),
        corner(x_front, -half_w),
        corner(x_front, half_w),
        corner(x_back, half_w),
    ]
}

/// Separating-axis intersection test. Boundary contact counts as a
/// collision, so a separating axis must leave a strict gap.
pub fn polygons_intersect(a: &ConvexPolygon, b: &ConvexPolygon) -> bool {
    !has_separating_axis(a.vertices(), b.vertices()) && !has_separating_axis(b.vertices(), a.vertices())
}

/// Reusable footprint collision tester: caches obstacle bounding boxes so
/// the hot path (search expansion, smoothing collision loop, validation)
/// can reject far-away obstacles cheaply before running the exact SAT.
pub struct CollisionChecker<'a> {
    vehicle: &'a VehicleParams,
    obstacles: &'a [ConvexPolygon],
    obstacle_aabbs: Vec<(Point2, Point2)>,
    bounds: &'a ConvexPolygon,
}

impl<'a> CollisionChecker<'a> {
    pub fn new(
        vehicle: &'a VehicleParams,
        obstacles: &'a [ConvexPolygon],
        bounds: &'a ConvexPolygon,
    ) -> Self {
        Self {
            vehicle,
            obstacles,
            obstacle_aabbs: obstacles.iter().map(|o| o.aabb()).collect(),
            bounds,
        }
    }

    /// True iff the footprint at `pose` stays inside the bounds and clear
    /// of every obstacle (boundary contact counts as collision).
    pub fn pose_free(&self, pose: Pose) -> bool {
        let corners = footprint_corners(pose, self.vehicle);
        if !corners.iter().all(|&c| self.bounds.contains(c)) {
            return false;
        }
        let mut min = corners[0];
        let mut max = corners[0];
        for c in &corners[1..] {
            min.x = min.x.min(c.x);
            min.y = min.y.min(c.y);
            max.x = max.x.max(c.x);
            max.y = max.y.max(c.y);
        }
        for (obstacle, (omin, omax)) in self.obstacles.iter().zip(&self.obstacle_aabbs) {
            if max.x < omin.x || omax.x < min.x || max.y < omin.y || omax.y < min.y {
                continue;
            }
            if !has_separating_axis(&corners, obstacle.vertices())
                && !has_separating_axis(obstacle.vertices(), &corners)
            {
                return false;
            }
        }
        true
    }

    pub fn vehicle(&self) -> &VehicleParams {
        self.vehicle
    }
}

fn has_separating_axis(reference: &[Point2], other: &[Point2]) -> bool {
    let n = reference.len();
    for i in 0..n {
        let edge = reference[(i + 1) % n] - reference[i];
        let normal = Point2::new(-edge.y, edge.x);
        let (min_a, max_a) = project(reference, normal);
        let (min_b, max_b) = project(other, normal);
        if max_a < min_b || max_b < min_a {
            return true;
        }
    }
    false
}

fn project(points: &[Point2], axis: Point2) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for p in points {
        let q = p.dot(axis);
        min = min.min(q);
        max = max.max(q);
    }
    (min, max)
}

fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 <= 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Euclidean distance from a point to the polygon (0 if inside or on the
/// boundary).
pub fn distance_point_polygon(p: Point2, poly: &ConvexPolygon) -> f64 {
    if poly.contains(p) {
        return 0.0;
    }
    let verts = poly.vertices();
    let n = verts.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        best = best.min(point_segment_distance(p, verts[i], verts[(i + 1) % n]));
    }
    best
}

/// Distance from an interior point to the boundary of a convex polygon.
fn distance_to_boundary_from_inside(p: Point2, poly: &ConvexPolygon) -> f64 {
    let verts = poly.vertices();
    let n = verts.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        best = best.min(point_segment_distance(p, verts[i], verts[(i + 1) % n]));
    }
    best
}

/// Free distance around `p`: the minimum of the distance to every obstacle
/// and the distance to the bounds boundary. Zero when `p` sits inside an
/// obstacle. Errors when `p` is not inside the bounds.
pub fn clearance(
    p: Point2,
    obstacles: &[ConvexPolygon],
    bounds: &ConvexPolygon,
) -> Result<f64, GeometryError> {
    if !bounds.contains(p) {
        return Err(GeometryError::OutsideBounds(p.x, p.y));
    }
    let mut best = distance_to_boundary_from_inside(p, bounds);
    for obstacle in obstacles {
        best = best.min(distance_point_polygon(p, obstacle));
        if best == 0.0 {
            break;
        }
    }
    Ok(best)
}

/// Signed curvature of the circumcircle through three consecutive points.
/// Positive for left turns along the p0 -> p1 -> p2 travel direction.
pub fn menger_curvature(p0: Point2, p1: Point2, p2: Point2) -> Result<f64, GeometryError> {
    let d01 = p1.distance(p0);
    let d12 = p2.distance(p1);
    let d02 = p2.distance(p0);
    if d01 < 1e-12 || d12 < 1e-12 || d02 < 1e-12 {
        return Err(GeometryError::CoincidentPoints);
    }
    Ok(2.0 * (p1 - p0).cross(p2 - p1) / (d01 * d12 * d02))
}
