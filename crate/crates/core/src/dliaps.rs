//! Dual-loop iterative anchoring path smoothing.
//!
//! Inner loop: sequential convex programming with slack-penalized
//! curvature constraints and a trust region, solving one QP per candidate
//! step. Outer loop: exact footprint collision checks that shrink the
//! feasible bubble of any colliding point and re-run the inner loop, so
//! the path is pulled back toward the collision-free reference only where
//! it has to be.

use std::time::Instant;

use thiserror::Error;

use crate::geometry::{
    clearance, menger_curvature, normalize_angle, Bubble, CollisionChecker, ConvexPolygon, Gear,
    Point2, Pose, VehicleParams,
};
use crate::hybrid_astar::ReferencePath;
use crate::qp::{self, QpError, QpProblem, QpSettings, QpStatus};

#[derive(Debug, Error)]
pub enum SmoothError {
    #[error("reference path is empty")]
    EmptyPath,
    #[error("QP solver failed during {context}: {source}")]
    Qp {
        context: String,
        #[source]
        source: QpError,
    },
    #[error("QP returned {status:?} during {context}")]
    QpNotSolved { context: String, status: QpStatus },
}

/// Curvature handling of the convex subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothMode {
    /// Linearize the quartic constraint around the previous iterate and
    /// penalize violations through slack variables (the full method).
    DlIaps,
    /// Replace the quartic segment-length term with the constant reference
    /// spacing, turning the constraint into a convex quadratic that is kept
    /// as its inscribed box. Comparison mode; can violate the true
    /// curvature limit when the smoothed path shrinks.
    Ces,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherConfig {
    /// Resample spacing along the reference, meters.
    pub delta_s: f64,
    /// Penalty scaling factor (> 1).
    pub alpha: f64,
    /// Trust-region acceptance threshold in (0, 1).
    pub rho: f64,
    /// Trust-region growth on accepted steps (> 1).
    pub gamma_plus: f64,
    /// Trust-region shrink on rejected steps, in (0, 1).
    pub gamma_minus: f64,
    /// Merit convergence threshold.
    pub f_tol: f64,
    /// Step-size / trust-radius abandon threshold, meters.
    pub x_tol: f64,
    /// Constraint satisfaction threshold for the penalty loop.
    pub c_tol: f64,
    /// Bubble shrink ratio in (0, 1).
    pub beta: f64,
    /// Initial penalty coefficient.
    pub mu0: f64,
    /// Initial trust radius, meters.
    pub t0: f64,
    /// Clearance subtracted before sizing a bubble, meters.
    pub bubble_margin: f64,
    /// Bubble floor; below it a point is effectively anchored.
    pub bubble_min: f64,
    /// Bubble cap in open space.
    pub bubble_max: f64,
    pub max_collision_iters: usize,
    pub max_penalty_iters: usize,
    pub max_subproblem_iters: usize,
    pub max_trust_iters: usize,
    /// Whole-call wall clock budget, seconds.
    pub wall_clock_budget: f64,
    /// Per-iteration trace log destination (not part of scenario files).
    #[serde(skip)]
    pub trace_path: Option<std::path::PathBuf>,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            delta_s: 0.1,
            alpha: 10.0,
            rho: 0.25,
            gamma_plus: 1.5,
            gamma_minus: 0.5,
            f_tol: 1e-6,
            x_tol: 1e-8,
            c_tol: 1e-4,
            beta: 0.5,
            mu0: 10.0,
            t0: 0.5,
            bubble_margin: 0.3,
            bubble_min: 0.01,
            bubble_max: 1.0,
            max_collision_iters: 20,
            max_penalty_iters: 5,
            max_subproblem_iters: 30,
            max_trust_iters: 20,
            wall_clock_budget: 5.0,
            trace_path: None,
        }
    }
}

/// One smoothed gear segment.
#[derive(Debug, Clone)]
pub struct SmoothedSegment {
    pub points: Vec<Point2>,
    pub headings: Vec<f64>,
    pub curvatures: Vec<f64>,
    pub gear: Gear,
    /// False when the segment was too short to smooth and passed through.
    pub smoothed: bool,
    /// Largest curvature-constraint residual at the final iterate.
    pub max_constraint_residual: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoopCounts {
    pub collision: usize,
    pub penalty: usize,
    pub subproblem: usize,
    pub trust: usize,
    pub qp_solves: usize,
}

#[derive(Debug, Clone)]
pub struct SmoothResult {
    pub segments: Vec<SmoothedSegment>,
    pub converged: bool,
    pub collision_free: bool,
    pub iterations: LoopCounts,
    pub seconds: f64,
    /// Largest merit increase over all accepted trust-region steps;
    /// non-positive when the merit never increased.
    pub max_merit_increase: f64,
}

impl SmoothResult {
    pub fn max_abs_curvature(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.curvatures.iter())
            .fold(0.0f64, |acc, k| acc.max(k.abs()))
    }

    pub fn max_constraint_residual(&self) -> f64 {
        self.segments
            .iter()
            .fold(f64::NEG_INFINITY, |acc, s| acc.max(s.max_constraint_residual))
    }
}

/// Resampled gear segment, either ready to smooth or passed through.
#[derive(Debug, Clone)]
pub struct ResampledSegment {
    pub points: Vec<Point2>,
    /// Too short to smooth (< 4 * delta_s); points are the raw poses.
    pub too_short: bool,
}

/// Uniform arc-length resampling of a polyline at `delta_s`. Endpoints are
/// preserved exactly; every interval is `delta_s` except the final one,
/// which absorbs the remainder (merged into the previous interval when the
/// remainder is shorter than half a step).
pub fn resample(positions: &[Point2], delta_s: f64) -> ResampledSegment {
    assert!(delta_s > 0.0);
    let mut cumulative = Vec::with_capacity(positions.len());
    let mut total = 0.0;
    cumulative.push(0.0);
    for pair in positions.windows(2) {
        total += pair[0].distance(pair[1]);
        cumulative.push(total);
    }
    if total < 4.0 * delta_s - 1e-12 {
        return ResampledSegment {
            points: positions.to_vec(),
            too_short: true,
        };
    }

    let m = (total / delta_s + 1e-9).floor() as usize;
    let remainder = total - m as f64 * delta_s;
    // Regular samples at k * delta_s; the exact endpoint is appended.
    // A remainder shorter than half a step merges into the final interval.
    let regular_points = if remainder >= 0.5 * delta_s { m + 1 } else { m };

    let mut points = Vec::with_capacity(regular_points + 2);
    let mut cursor = 0usize;
    for k in 0..regular_points {
        let target = k as f64 * delta_s;
        while cursor + 1 < cumulative.len() - 1 && cumulative[cursor + 1] < target {
            cursor += 1;
        }
        let span = cumulative[cursor + 1] - cumulative[cursor];
        let tt = if span > 0.0 {
            (target - cumulative[cursor]) / span
        } else {
            0.0
        };
        points.push(positions[cursor] + (positions[cursor + 1] - positions[cursor]) * tt);
    }
    points.push(*positions.last().unwrap());
    ResampledSegment {
        points,
        too_short: false,
    }
}

/// Constraint-value and analytic gradient of the quartic curvature
/// constraint `g = |2p - a - c|^2 - |p - a|^4 / r_min^2` with respect to
/// the six coordinates (a, p, c).
pub fn curvature_constraint_eval(
    p_prev: Point2,
    p: Point2,
    p_next: Point2,
    r_min: f64,
) -> (f64, [f64; 6]) {
    debug_assert!(r_min > 0.0);
    let a = Point2::new(2.0 * p.x - p_prev.x - p_next.x, 2.0 * p.y - p_prev.y - p_next.y);
    let v = p - p_prev;
    let v2 = v.dot(v);
    let inv_r2 = 1.0 / (r_min * r_min);
    let value = a.dot(a) - v2 * v2 * inv_r2;
    let grad = [
        -2.0 * a.x + 4.0 * v2 * v.x * inv_r2,
        -2.0 * a.y + 4.0 * v2 * v.y * inv_r2,
        4.0 * a.x - 4.0 * v2 * v.x * inv_r2,
        4.0 * a.y - 4.0 * v2 * v.y * inv_r2,
        -2.0 * a.x,
        -2.0 * a.y,
    ];
    (value, grad)
}

/// Sizes the feasible bubble of each reference point from its clearance.
/// The first and last two points are pinned by the endpoint constraints
/// and get zero-radius bubbles.
pub fn init_bubbles(
    points: &[Point2],
    obstacles: &[ConvexPolygon],
    bounds: &ConvexPolygon,
    config: &SmootherConfig,
) -> Vec<Bubble> {
    let n = points.len();
    points
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let radius = if k < 2 || k + 2 >= n {
                0.0
            } else {
                let free = clearance(p, obstacles, bounds).unwrap_or(config.bubble_min);
                (free - config.bubble_margin).clamp(config.bubble_min, config.bubble_max)
            };
            Bubble { center: p, radius }
        })
        .collect()
}

/// Full smoother state for one gear segment.
struct SegmentProblem<'a> {
    reference: &'a [Point2],
    bubbles: &'a [Bubble],
    /// Pinned values for points 0, 1, n-2, n-1.
    pins: [Point2; 4],
    r_min: f64,
    mode: SmoothMode,
}

impl SegmentProblem<'_> {
    fn n(&self) -> usize {
        self.reference.len()
    }

    fn smoothness_cost(&self, points: &[Point2]) -> f64 {
        let n = points.len();
        let mut acc = 0.0;
        for k in 1..n - 1 {
            let a = Point2::new(
                2.0 * points[k].x - points[k - 1].x - points[k + 1].x,
                2.0 * points[k].y - points[k - 1].y - points[k + 1].y,
            );
            acc += a.dot(a);
        }
        acc
    }

    fn constraint_values(&self, points: &[Point2]) -> Vec<f64> {
        (1..points.len() - 1)
            .map(|k| curvature_constraint_eval(points[k - 1], points[k], points[k + 1], self.r_min).0)
            .collect()
    }

    fn merit(&self, points: &[Point2], mu: f64) -> f64 {
        let penalty: f64 = self
            .constraint_values(points)
            .iter()
            .map(|g| g.max(0.0))
            .sum();
        self.smoothness_cost(points) + mu * penalty
    }

    /// Merit of the convexified model: constraint values come from the
    /// linearization around `base` evaluated at `points`.
    fn model_merit(&self, base: &[Point2], lin: &Linearization, points: &[Point2], mu: f64) -> f64 {
        let mut penalty = 0.0;
        for (idx, k) in (1..points.len() - 1).enumerate() {
            let g = &lin.grads[idx];
            let mut value = lin.values[idx];
            for (offset, point_idx) in [(0, k - 1), (2, k), (4, k + 1)] {
                value += g[offset] * (points[point_idx].x - base[point_idx].x)
                    + g[offset + 1] * (points[point_idx].y - base[point_idx].y);
            }
            penalty += value.max(0.0);
        }
        self.smoothness_cost(points) + mu * penalty
    }
}

/// Feasible interval per coordinate of point `k`: the endpoint pins, or the
/// inscribed bubble square intersected with the trust box.
fn point_box(
    problem: &SegmentProblem,
    current: &[Point2],
    k: usize,
    trust_radius: f64,
) -> ((f64, f64), (f64, f64)) {
    let n = problem.n();
    if k < 2 || k + 2 >= n {
        let pin = if k == 0 {
            problem.pins[0]
        } else if k == 1 {
            problem.pins[1]
        } else if k == n - 2 {
            problem.pins[2]
        } else {
            problem.pins[3]
        };
        return ((pin.x, pin.x), (pin.y, pin.y));
    }
    let half = problem.bubbles[k].radius * std::f64::consts::FRAC_1_SQRT_2;
    let center = problem.bubbles[k].center;
    let interval = |c: f64, cur: f64| {
        let mut lo = (c - half).max(cur - trust_radius);
        let mut hi = (c + half).min(cur + trust_radius);
        if lo > hi {
            let mid = 0.5 * (lo + hi);
            lo = mid;
            hi = mid;
        }
        (lo, hi)
    };
    (
        interval(center.x, current[k].x),
        interval(center.y, current[k].y),
    )
}

/// Snap the four pinned points exactly and clamp interior points into their
/// boxes: the splitting solver returns bound-feasible iterates only up to
/// its tolerance, and downstream invariants (exact endpoints, points inside
/// bubbles) are stated exactly.
fn restore_feasibility(
    problem: &SegmentProblem,
    base: &[Point2],
    trust_radius: f64,
    candidate: &mut [Point2],
) {
    let n = problem.n();
    for (k, point) in candidate.iter_mut().enumerate() {
        let ((lo_x, hi_x), (lo_y, hi_y)) = point_box(problem, base, k, trust_radius);
        point.x = point.x.clamp(lo_x, hi_x);
        point.y = point.y.clamp(lo_y, hi_y);
    }
    debug_assert!(n >= 4);
}

struct Linearization {
    values: Vec<f64>,
    grads: Vec<[f64; 6]>,
}

fn linearize(problem: &SegmentProblem, points: &[Point2]) -> Linearization {
    let mut values = Vec::with_capacity(points.len().saturating_sub(2));
    let mut grads = Vec::with_capacity(values.capacity());
    for k in 1..points.len() - 1 {
        let (v, g) = curvature_constraint_eval(points[k - 1], points[k], points[k + 1], problem.r_min);
        values.push(v);
        grads.push(g);
    }
    Linearization { values, grads }
}

/// Builds the convex subproblem around the current iterate.
fn build_subproblem(
    problem: &SegmentProblem,
    current: &[Point2],
    lin: &Linearization,
    mu: f64,
    trust_radius: f64,
) -> QpProblem {
    let n = problem.n();
    let n_slack = match problem.mode {
        SmoothMode::DlIaps => n - 2,
        SmoothMode::Ces => 0,
    };
    let n_vars = 2 * n + n_slack;

    // Quadratic smoothness cost: sum over interior k of
    // |2 P_k - P_{k-1} - P_{k+1}|^2, per coordinate.
    let mut p_upper: Vec<(usize, usize, f64)> = Vec::with_capacity(12 * n);
    for k in 1..n - 1 {
        let stencil = [(k - 1, -1.0), (k, 2.0), (k + 1, -1.0)];
        for (i, (pi, ci)) in stencil.iter().enumerate() {
            for (pj, cj) in stencil.iter().skip(i) {
                for d in 0..2 {
                    let (lo, hi) = (2 * pi.min(pj) + d, 2 * pi.max(pj) + d);
                    p_upper.push((lo, hi, 2.0 * ci * cj));
                }
            }
        }
    }
    let mut linear = vec![0.0; n_vars];
    for s in 0..n_slack {
        linear[2 * n + s] = mu;
    }

    let mut a: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * n + 8 * n_slack);
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut row = 0usize;

    // Per-coordinate bounds: equality pins for the two endpoint pairs,
    // inscribed bubble box intersected with the trust box elsewhere.
    for k in 0..n {
        let ((lo_x, hi_x), (lo_y, hi_y)) = point_box(problem, current, k, trust_radius);
        a.push((row, 2 * k, 1.0));
        lower.push(lo_x);
        upper.push(hi_x);
        row += 1;
        a.push((row, 2 * k + 1, 1.0));
        lower.push(lo_y);
        upper.push(hi_y);
        row += 1;
    }

    match problem.mode {
        SmoothMode::DlIaps => {
            // Linearized curvature constraints with slack:
            //   grad . P - s_k <= grad . current - g(current)
            for (idx, k) in (1..n - 1).enumerate() {
                let g = &lin.grads[idx];
                let mut rhs = -lin.values[idx];
                for (offset, point_idx) in [(0usize, k - 1), (2, k), (4, k + 1)] {
                    a.push((row, 2 * point_idx, g[offset]));
                    a.push((row, 2 * point_idx + 1, g[offset + 1]));
                    rhs += g[offset] * current[point_idx].x + g[offset + 1] * current[point_idx].y;
                }
                a.push((row, 2 * n + idx, -1.0));
                lower.push(-f64::INFINITY);
                upper.push(rhs);
                row += 1;
            }
            // Slack nonnegativity.
            for idx in 0..n_slack {
                a.push((row, 2 * n + idx, 1.0));
                lower.push(0.0);
                upper.push(f64::INFINITY);
                row += 1;
            }
        }
        SmoothMode::Ces => {
            // |2 P_k - P_{k-1} - P_{k+1}|^2 <= |ref_k - ref_{k-1}|^4 / r^2
            // kept as the inscribed box of the disk, per coordinate.
            for k in 1..n - 1 {
                let ref_len2 = {
                    let v = problem.reference[k] - problem.reference[k - 1];
                    v.dot(v)
                };
                let bound = (ref_len2 * ref_len2 / (problem.r_min * problem.r_min) * 0.5).sqrt();
                for d in 0..2 {
                    a.push((row, 2 * (k - 1) + d, -1.0));
                    a.push((row, 2 * k + d, 2.0));
                    a.push((row, 2 * (k + 1) + d, -1.0));
                    lower.push(-bound);
                    upper.push(bound);
                    row += 1;
                }
            }
        }
    }

    QpProblem::new(n_vars, &p_upper, linear, &a, lower, upper)
        .expect("subproblem construction is consistent by design")
}

struct InnerOutcome {
    points: Vec<Point2>,
    converged: bool,
    max_residual: f64,
}

struct Trace {
    writer: Option<std::io::BufWriter<std::fs::File>>,
}

impl Trace {
    fn new(path: Option<&std::path::PathBuf>) -> Self {
        let writer = path.and_then(|p| std::fs::File::create(p).ok().map(std::io::BufWriter::new));
        Self { writer }
    }

    fn emit(&mut self, line: std::fmt::Arguments) {
        if let Some(w) = self.writer.as_mut() {
            use std::io::Write;
            let _ = writeln!(w, "{line}");
        }
    }
}

struct InnerLoops<'a> {
    config: &'a SmootherConfig,
    counts: &'a mut LoopCounts,
    max_merit_increase: &'a mut f64,
    trace: &'a mut Trace,
    deadline: Instant,
}

impl InnerLoops<'_> {
    /// Penalty / subproblem / trust-region loops for one segment.
    fn smooth_inner(
        &mut self,
        problem: &SegmentProblem,
        segment_idx: usize,
        outer_iter: usize,
    ) -> Result<InnerOutcome, SmoothError> {
        let config = self.config;
        let n = problem.n();
        let mut points: Vec<Point2> = problem.reference.to_vec();
        points[0] = problem.pins[0];
        points[1] = problem.pins[1];
        points[n - 2] = problem.pins[2];
        points[n - 1] = problem.pins[3];

        if problem.mode == SmoothMode::Ces {
            return self.solve_ces(problem, points);
        }

        // The subproblem optimum hugs box bounds along the nearly-flat
        // modes of the smoothness cost; a tight splitting tolerance buys
        // nothing there. Candidates are evaluated on exact merit after
        // feasibility restoration, so a coarse solve is sufficient.
        let qp_settings = QpSettings {
            abs_tol: 1e-4,
            rel_tol: 1e-4,
            polish: false,
            ..QpSettings::default()
        };
        let mut mu = config.mu0;
        let mut trust_radius = config.t0;
        let mut converged = false;

        'penalty: for penalty_iter in 0..config.max_penalty_iters {
            self.counts.penalty += 1;
            for _sub_iter in 0..config.max_subproblem_iters {
                self.counts.subproblem += 1;
                let lin = linearize(problem, &points);
                let merit_base = problem.merit(&points, mu);

                let mut accepted: Option<(Vec<Point2>, f64)> = None;
                for _trust_iter in 0..config.max_trust_iters {
                    self.counts.trust += 1;
                    let qp_problem = build_subproblem(problem, &points, &lin, mu, trust_radius);
                    let guess = flatten(&points, &lin, qp_problem.n_vars());
                    let context = || {
                        format!(
                            "segment {segment_idx}, outer {outer_iter}, penalty {penalty_iter}, \
                             trust radius {trust_radius:.3e}"
                        )
                    };
                    self.counts.qp_solves += 1;
                    let solution = qp::solve_warm(&qp_problem, &qp_settings, Some(&guess))
                        .map_err(|source| SmoothError::Qp {
                            context: context(),
                            source,
                        })?;
                    if solution.status != QpStatus::Solved {
                        return Err(SmoothError::QpNotSolved {
                            context: context(),
                            status: solution.status,
                        });
                    }
                    let mut candidate = unflatten(&solution.primal, n);
                    restore_feasibility(problem, &points, trust_radius, &mut candidate);
                    let merit_candidate = problem.merit(&candidate, mu);
                    let model_candidate = problem.model_merit(&points, &lin, &candidate, mu);
                    let true_improve = merit_base - merit_candidate;
                    let model_improve = merit_base - model_candidate;

                    self.trace.emit(format_args!(
                        "segment={segment_idx} outer={outer_iter} penalty={penalty_iter} \
                         sub={_sub_iter} trust={_trust_iter} mu={mu:.3e} t={trust_radius:.3e} \
                         merit={merit_base:.9e} true_improve={true_improve:.3e} \
                         model_improve={model_improve:.3e}"
                    ));

                    if model_improve <= config.f_tol {
                        // The model cannot improve around this iterate; the
                        // linearization is at its optimum.
                        break;
                    }
                    let step_accepted = true_improve / model_improve > config.rho;
                    trust_radius = update_trust_radius(trust_radius, step_accepted, config);
                    if step_accepted {
                        *self.max_merit_increase =
                            self.max_merit_increase.max(merit_candidate - merit_base);
                        accepted = Some((candidate, merit_candidate));
                        break;
                    }
                    if trust_radius < config.x_tol {
                        break;
                    }
                }

                let Some((candidate, merit_candidate)) = accepted else {
                    // No acceptable step for this linearization.
                    break;
                };
                let step_norm = points
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| (a.x - b.x).abs().max((a.y - b.y).abs()))
                    .fold(0.0f64, f64::max);
                points = candidate;
                if step_norm < config.x_tol || (merit_base - merit_candidate).abs() < config.f_tol {
                    break;
                }
                if Instant::now() >= self.deadline {
                    break 'penalty;
                }
            }

            let max_g = problem
                .constraint_values(&points)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            if max_g <= config.c_tol {
                converged = true;
                break;
            }
            mu *= config.alpha;
            if Instant::now() >= self.deadline {
                break;
            }
        }

        let max_residual = problem
            .constraint_values(&points)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(InnerOutcome {
            points,
            converged: converged && max_residual <= config.c_tol,
            max_residual,
        })
    }

    /// CES mode: the subproblem is fully convex, one QP decides the segment.
    fn solve_ces(
        &mut self,
        problem: &SegmentProblem,
        points: Vec<Point2>,
    ) -> Result<InnerOutcome, SmoothError> {
        let lin = Linearization {
            values: Vec::new(),
            grads: Vec::new(),
        };
        // Bubble boxes only; a wide trust radius keeps them binding.
        let qp_settings = QpSettings {
            abs_tol: 1e-4,
            rel_tol: 1e-4,
            polish: false,
            ..QpSettings::default()
        };
        let qp_problem = build_subproblem(problem, &points, &lin, 0.0, 1e6);
        self.counts.subproblem += 1;
        self.counts.qp_solves += 1;
        let guess = flatten(&points, &lin, qp_problem.n_vars());
        let solution = qp::solve_warm(&qp_problem, &qp_settings, Some(&guess)).map_err(
            |source| SmoothError::Qp {
                context: "CES subproblem".to_string(),
                source,
            },
        )?;
        if solution.status != QpStatus::Solved {
            // Shrunken bubbles can make the hard CES constraints infeasible;
            // report the reference as an unconverged result.
            let max_residual = problem
                .constraint_values(&points)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            return Ok(InnerOutcome {
                points,
                converged: false,
                max_residual,
            });
        }
        let mut candidate = unflatten(&solution.primal, problem.n());
        restore_feasibility(problem, &points, 1e6, &mut candidate);
        let max_residual = problem
            .constraint_values(&candidate)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(InnerOutcome {
            points: candidate,
            converged: true,
            max_residual,
        })
    }
}

#[doc(hidden)]
pub fn debug_build_subproblem(
    reference: &[Point2],
    bubbles: &[Bubble],
    pins: [Point2; 4],
    r_min: f64,
    current: &[Point2],
    mu: f64,
    trust_radius: f64,
) -> QpProblem {
    let problem = SegmentProblem {
        reference,
        bubbles,
        pins,
        r_min,
        mode: SmoothMode::DlIaps,
    };
    let lin = linearize(&problem, current);
    build_subproblem(&problem, current, &lin, mu, trust_radius)
}

/// Grow the trust radius after an accepted step, shrink it after a
/// rejection.
fn update_trust_radius(t: f64, accepted: bool, config: &SmootherConfig) -> f64 {
    if accepted {
        t * config.gamma_plus
    } else {
        t * config.gamma_minus
    }
}

fn flatten(points: &[Point2], lin: &Linearization, n_vars: usize) -> Vec<f64> {
    let mut guess = Vec::with_capacity(n_vars);
    for p in points {
        guess.push(p.x);
        guess.push(p.y);
    }
    for v in &lin.values {
        guess.push(v.max(0.0));
    }
    guess.resize(n_vars, 0.0);
    guess
}

fn unflatten(primal: &[f64], n: usize) -> Vec<Point2> {
    (0..n).map(|k| Point2::new(primal[2 * k], primal[2 * k + 1])).collect()
}

/// Gear-aware headings from forward differences; the last point copies its
/// predecessor.
pub fn headings_from_points(points: &[Point2], gear: Gear) -> Vec<f64> {
    let n = points.len();
    let mut headings = Vec::with_capacity(n);
    for k in 0..n {
        let (from, to) = if k + 1 < n {
            (points[k], points[k + 1])
        } else {
            (points[n - 2], points[n - 1])
        };
        let mut heading = (to.y - from.y).atan2(to.x - from.x);
        if gear == Gear::Backward {
            heading = normalize_angle(heading + std::f64::consts::PI);
        }
        headings.push(heading);
    }
    headings
}

fn curvatures_from_points(points: &[Point2]) -> Vec<f64> {
    let n = points.len();
    if n < 3 {
        return vec![0.0; n];
    }
    let mut curvatures = vec![0.0; n];
    for k in 1..n - 1 {
        curvatures[k] = menger_curvature(points[k - 1], points[k], points[k + 1]).unwrap_or(0.0);
    }
    curvatures[0] = curvatures[1];
    curvatures[n - 1] = curvatures[n - 2];
    curvatures
}

/// Maximal runs of constant gear; adjacent segments share the switch pose.
pub fn gear_segments(path: &ReferencePath) -> Vec<(Vec<Pose>, Gear)> {
    if path.poses.len() <= 1 {
        return vec![(path.poses.clone(), Gear::Forward)];
    }
    let mut segments = Vec::new();
    let mut start = 0usize;
    let mut gear = path.gears[1];
    for i in 2..path.poses.len() {
        if path.gears[i] != gear {
            segments.push((path.poses[start..i].to_vec(), gear));
            start = i - 1;
            gear = path.gears[i];
        }
    }
    segments.push((path.poses[start..].to_vec(), gear));
    segments
}

/// Smooths every gear segment of the reference path; outer collision loop
/// shrinks bubbles of colliding points until the footprint checks pass,
/// the bubbles bottom out, or the wall-clock budget is exhausted.
pub fn smooth(
    path: &ReferencePath,
    obstacles: &[ConvexPolygon],
    bounds: &ConvexPolygon,
    vehicle: &VehicleParams,
    config: &SmootherConfig,
    mode: SmoothMode,
) -> Result<SmoothResult, SmoothError> {
    if path.poses.is_empty() {
        return Err(SmoothError::EmptyPath);
    }
    let started = Instant::now();
    let deadline = started + std::time::Duration::from_secs_f64(config.wall_clock_budget);
    let r_min = vehicle.min_turning_radius();
    let checker = CollisionChecker::new(vehicle, obstacles, bounds);
    let mut trace = Trace::new(config.trace_path.as_ref());

    let mut counts = LoopCounts::default();
    let mut max_merit_increase = f64::NEG_INFINITY;
    let mut segments = Vec::new();
    let mut all_collision_free = true;
    let mut all_converged = true;

    for (segment_idx, (poses, gear)) in gear_segments(path).into_iter().enumerate() {
        let positions: Vec<Point2> = poses.iter().map(|p| p.position).collect();
        let resampled = resample(&positions, config.delta_s);
        if resampled.too_short {
            // Pass-through: keep the original poses and their headings.
            let curvatures = curvatures_from_points(&resampled.points);
            let max_constraint_residual = if resampled.points.len() >= 3 {
                (1..resampled.points.len() - 1)
                    .map(|k| {
                        curvature_constraint_eval(
                            resampled.points[k - 1],
                            resampled.points[k],
                            resampled.points[k + 1],
                            r_min,
                        )
                        .0
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            } else {
                0.0
            };
            segments.push(SmoothedSegment {
                points: resampled.points,
                headings: poses.iter().map(|p| p.heading).collect(),
                curvatures,
                gear,
                smoothed: false,
                max_constraint_residual,
            });
            continue;
        }

        let reference = resampled.points;
        let n = reference.len();
        let dir_start = {
            let d = poses.first().unwrap().direction();
            d * gear.sign()
        };
        let dir_end = {
            let d = poses.last().unwrap().direction();
            d * gear.sign()
        };
        let len_first = reference[0].distance(reference[1]);
        let len_last = reference[n - 2].distance(reference[n - 1]);
        let pins = [
            reference[0],
            reference[0] + dir_start * len_first,
            reference[n - 1] - dir_end * len_last,
            reference[n - 1],
        ];

        let mut bubbles = init_bubbles(&reference, obstacles, bounds, config);
        let mut outcome: Option<InnerOutcome> = None;
        let mut collision_free = false;

        for outer_iter in 0..config.max_collision_iters {
            counts.collision += 1;
            let problem = SegmentProblem {
                reference: &reference,
                bubbles: &bubbles,
                pins,
                r_min,
                mode,
            };
            let mut loops = InnerLoops {
                config,
                counts: &mut counts,
                max_merit_increase: &mut max_merit_increase,
                trace: &mut trace,
                deadline,
            };
            let inner = loops.smooth_inner(&problem, segment_idx, outer_iter)?;

            let headings = headings_from_points(&inner.points, gear);
            let colliding: Vec<usize> = inner
                .points
                .iter()
                .zip(&headings)
                .enumerate()
                .filter(|(_, (p, h))| {
                    !checker.pose_free(Pose {
                        position: **p,
                        heading: **h,
                    })
                })
                .map(|(k, _)| k)
                .collect();

            if colliding.is_empty() {
                collision_free = true;
                outcome = Some(inner);
                break;
            }

            trace.emit(format_args!(
                "segment={segment_idx} outer={outer_iter} colliding={}",
                colliding.len()
            ));
            let mut shrunk_any = false;
            for k in colliding {
                if bubbles[k].radius > config.bubble_min + 1e-12 {
                    bubbles[k].radius = (bubbles[k].radius * config.beta).max(config.bubble_min);
                    shrunk_any = true;
                }
            }
            outcome = Some(inner);
            if !shrunk_any || Instant::now() >= deadline {
                break;
            }
        }

        let inner = outcome.expect("at least one outer iteration ran");
        all_collision_free &= collision_free;
        all_converged &= inner.converged;
        let headings = headings_from_points(&inner.points, gear);
        let curvatures = curvatures_from_points(&inner.points);
        segments.push(SmoothedSegment {
            max_constraint_residual: inner.max_residual,
            points: inner.points,
            headings,
            curvatures,
            gear,
            smoothed: true,
        });
    }

    Ok(SmoothResult {
        segments,
        converged: all_converged,
        collision_free: all_collision_free,
        iterations: counts,
        seconds: started.elapsed().as_secs_f64(),
        max_merit_increase: if max_merit_increase == f64::NEG_INFINITY {
            0.0
        } else {
            max_merit_increase
        },
    })
}

#[cfg(test)]
mod tests;
