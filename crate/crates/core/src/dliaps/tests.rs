use super::*;
use crate::geometry::{ConvexPolygon, Point2, Pose, VehicleParams};
use approx::assert_relative_eq;

fn vehicle() -> VehicleParams {
    VehicleParams::new(2.8, 0.9, 1.0, 2.0, 0.2).unwrap()
}

fn open_bounds() -> ConvexPolygon {
    ConvexPolygon::rectangle(-50.0, -50.0, 50.0, 50.0).unwrap()
}

fn straight_path(length: f64, step: f64) -> ReferencePath {
    let n = (length / step).round() as usize;
    let poses: Vec<Pose> = (0..=n).map(|k| Pose::new(k as f64 * step, 0.0, 0.0)).collect();
    let gears = vec![Gear::Forward; poses.len()];
    ReferencePath { poses, gears }
}

/// A jerky forward path: alternate heading wiggles around the x axis.
fn zigzag_path() -> ReferencePath {
    let mut poses = vec![Pose::new(0.0, 0.0, 0.0)];
    let mut x = 0.0;
    let mut y = 0.0;
    for k in 0..60 {
        let heading: f64 = if (k / 3) % 2 == 0 { 0.18 } else { -0.18 };
        x += 0.2 * heading.cos();
        y += 0.2 * heading.sin();
        poses.push(Pose::new(x, y, heading));
    }
    let gears = vec![Gear::Forward; poses.len()];
    ReferencePath { poses, gears }
}

mod resample_op {
    use super::*;

    #[test]
    fn straight_meter_gives_eleven_points() {
        let positions: Vec<Point2> = vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)];
        let out = resample(&positions, 0.1);
        assert!(!out.too_short);
        assert_eq!(out.points.len(), 11);
        for (k, p) in out.points.iter().enumerate() {
            assert_relative_eq!(p.x, 0.1 * k as f64, epsilon = 1e-9);
            assert_eq!(p.y, 0.0);
        }
    }

    #[test]
    fn l_shape_walks_arc_length() {
        let positions = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
        ];
        let out = resample(&positions, 0.1);
        assert_eq!(out.points.len(), 21);
        // Arc-length walk oracle: cumulative distance along the polyline
        // between consecutive samples must be 0.1 within 1e-9.
        for pair in out.points.windows(2) {
            let along = |p: Point2| if p.y <= 1e-12 { p.x } else { 1.0 + p.y };
            assert_relative_eq!(along(pair[1]) - along(pair[0]), 0.1, epsilon = 1e-9);
        }
        assert_eq!(*out.points.last().unwrap(), Point2::new(1.0, 1.0));
    }

    #[test]
    fn short_segment_passes_through() {
        let positions = vec![Point2::new(0.0, 0.0), Point2::new(0.3, 0.0)];
        let out = resample(&positions, 0.1);
        assert!(out.too_short);
        assert_eq!(out.points, positions);
    }

    #[test]
    fn sliver_remainder_merges_into_final_interval() {
        let positions = vec![Point2::new(0.0, 0.0), Point2::new(1.02, 0.0)];
        let out = resample(&positions, 0.1);
        // 0.02 remainder merges: intervals 0.1 ... 0.1, 0.12.
        let n = out.points.len();
        assert_eq!(n, 11);
        let last = out.points[n - 1].x - out.points[n - 2].x;
        assert_relative_eq!(last, 0.12, epsilon = 1e-9);
        for pair in out.points[..n - 1].windows(2) {
            assert_relative_eq!(pair[1].x - pair[0].x, 0.1, epsilon = 1e-9);
        }
    }
}

mod bubbles {
    use super::*;

    #[test]
    fn open_space_caps_at_maximum() {
        let config = SmootherConfig::default();
        let points: Vec<Point2> = (0..8).map(|k| Point2::new(k as f64 * 0.1, 0.0)).collect();
        let bubbles = init_bubbles(&points, &[], &open_bounds(), &config);
        for (k, b) in bubbles.iter().enumerate() {
            if k < 2 || k + 2 >= points.len() {
                assert_eq!(b.radius, 0.0);
            } else {
                assert_eq!(b.radius, config.bubble_max);
            }
            assert_eq!(b.center, points[k]);
        }
    }

    #[test]
    fn radius_is_clearance_minus_margin() {
        let config = SmootherConfig {
            bubble_margin: 0.3,
            bubble_min: 0.05,
            ..SmootherConfig::default()
        };
        // Obstacle 0.4 m above the middle point.
        let points: Vec<Point2> = (0..8).map(|k| Point2::new(k as f64 * 0.1, 0.0)).collect();
        let obstacle = ConvexPolygon::rectangle(-1.0, 0.4, 1.0, 1.0).unwrap();
        let bubbles = init_bubbles(&points, &[obstacle], &open_bounds(), &config);
        assert_relative_eq!(bubbles[3].radius, 0.1, epsilon = 1e-12);
    }
}

mod constraint {
    use super::*;

    #[test]
    fn collinear_points_satisfy() {
        let (g, _) = curvature_constraint_eval(
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(2.0, 0.0),
            5.0,
        );
        assert_relative_eq!(g, -0.04, epsilon = 1e-12);
    }

    #[test]
    fn right_angle_violates() {
        let (g, _) = curvature_constraint_eval(
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            5.0,
        );
        assert_relative_eq!(g, 1.96, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..200 {
            let coords: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let eval = |c: &[f64]| {
                curvature_constraint_eval(
                    Point2::new(c[0], c[1]),
                    Point2::new(c[2], c[3]),
                    Point2::new(c[4], c[5]),
                    5.0,
                )
            };
            let (_, grad) = eval(&coords);
            for i in 0..6 {
                let mut plus = coords.clone();
                plus[i] += h;
                let mut minus = coords.clone();
                minus[i] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let scale = grad[i].abs().max(fd.abs()).max(1.0);
                assert!(
                    (grad[i] - fd).abs() / scale <= 1e-4,
                    "coord {i}: analytic {} vs fd {}",
                    grad[i],
                    fd
                );
            }
        }
    }
}

mod subproblem {
    use super::*;
    use crate::geometry::Bubble;
    use crate::qp;

    fn straight_problem_parts(n: usize) -> (Vec<Point2>, Vec<Bubble>) {
        let points: Vec<Point2> = (0..n).map(|k| Point2::new(k as f64 * 0.1, 0.0)).collect();
        let bubbles: Vec<Bubble> = points
            .iter()
            .enumerate()
            .map(|(k, &p)| Bubble {
                center: p,
                radius: if k < 2 || k + 2 >= n { 0.0 } else { 0.2 },
            })
            .collect();
        (points, bubbles)
    }

    #[test]
    fn straight_state_is_a_fixed_point() {
        let (points, bubbles) = straight_problem_parts(9);
        let pins = [points[0], points[1], points[7], points[8]];
        let problem = SegmentProblem {
            reference: &points,
            bubbles: &bubbles,
            pins,
            r_min: 5.0,
            mode: SmoothMode::DlIaps,
        };
        let lin = linearize(&problem, &points);
        let qp_problem = build_subproblem(&problem, &points, &lin, 10.0, 0.5);
        let solution = qp::solve(&qp_problem, &qp::QpSettings::default()).unwrap();
        let candidate = unflatten(&solution.primal, points.len());
        for (a, b) in candidate.iter().zip(&points) {
            assert_relative_eq!(a.x, b.x, epsilon = 1e-6);
            assert_relative_eq!(a.y, b.y, epsilon = 1e-6);
        }
    }

    #[test]
    fn bubble_box_is_inscribed_square() {
        let (points, bubbles) = straight_problem_parts(9);
        let pins = [points[0], points[1], points[7], points[8]];
        let problem = SegmentProblem {
            reference: &points,
            bubbles: &bubbles,
            pins,
            r_min: 5.0,
            mode: SmoothMode::DlIaps,
        };
        let lin = linearize(&problem, &points);
        // Huge trust radius: only the bubble box binds.
        let qp_problem = build_subproblem(&problem, &points, &lin, 10.0, 1e9);
        // Row 2k is the x-bound of point k.
        let k = 4;
        let half = 0.2 / std::f64::consts::SQRT_2;
        assert_relative_eq!(qp_problem.lower()[2 * k], points[k].x - half, epsilon = 1e-12);
        assert_relative_eq!(qp_problem.upper()[2 * k], points[k].x + half, epsilon = 1e-12);
    }

    #[test]
    fn doubling_mu_doubles_slack_cost_only() {
        let (points, bubbles) = straight_problem_parts(9);
        let pins = [points[0], points[1], points[7], points[8]];
        let problem = SegmentProblem {
            reference: &points,
            bubbles: &bubbles,
            pins,
            r_min: 5.0,
            mode: SmoothMode::DlIaps,
        };
        let lin = linearize(&problem, &points);
        let a = build_subproblem(&problem, &points, &lin, 10.0, 0.5);
        let b = build_subproblem(&problem, &points, &lin, 20.0, 0.5);
        let n = points.len();
        for j in 0..2 * n {
            assert_eq!(a.linear()[j], b.linear()[j]);
        }
        for s in 2 * n..a.n_vars() {
            assert_relative_eq!(b.linear()[s], 2.0 * a.linear()[s], epsilon = 1e-12);
        }
        assert_eq!(a.quadratic().values, b.quadratic().values);
    }

    #[test]
    fn ces_rhs_uses_reference_spacing() {
        let (points, bubbles) = straight_problem_parts(9);
        let pins = [points[0], points[1], points[7], points[8]];
        let problem = SegmentProblem {
            reference: &points,
            bubbles: &bubbles,
            pins,
            r_min: 5.0,
            mode: SmoothMode::Ces,
        };
        let lin = Linearization {
            values: Vec::new(),
            grads: Vec::new(),
        };
        let qp_problem = build_subproblem(&problem, &points, &lin, 0.0, 1e6);
        // Constant right-hand side 0.1^4 / 25 = 4e-6, inscribed box bound
        // sqrt(c/2) per coordinate.
        let expected = (4e-6f64 / 2.0).sqrt();
        let n = points.len();
        let first_ces_row = 2 * n;
        assert_relative_eq!(qp_problem.upper()[first_ces_row], expected, epsilon = 1e-15);
        assert_relative_eq!(qp_problem.lower()[first_ces_row], -expected, epsilon = 1e-15);
    }
}

mod trust_region_rule {
    use super::*;

    #[test]
    fn rejected_step_shrinks_radius() {
        let config = SmootherConfig {
            gamma_minus: 0.5,
            gamma_plus: 1.5,
            ..SmootherConfig::default()
        };
        assert_eq!(update_trust_radius(1.0, false, &config), 0.5);
        assert_eq!(update_trust_radius(1.0, true, &config), 1.5);
    }
}

mod smoothing {
    use super::*;

    #[test]
    fn straight_input_returned_unchanged() {
        let path = straight_path(3.0, 0.2);
        let result = smooth(
            &path,
            &[],
            &open_bounds(),
            &vehicle(),
            &SmootherConfig::default(),
            SmoothMode::DlIaps,
        )
        .unwrap();
        assert!(result.converged);
        assert!(result.collision_free);
        assert_eq!(result.iterations.collision, 1);
        let segment = &result.segments[0];
        for p in &segment.points {
            assert!(p.y.abs() < 1e-9);
        }
        assert_relative_eq!(segment.points[0].x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(segment.points.last().unwrap().x, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn zigzag_is_smoothed_under_curvature_limit() {
        let path = zigzag_path();
        let config = SmootherConfig::default();
        let result =
            smooth(&path, &[], &open_bounds(), &vehicle(), &config, SmoothMode::DlIaps).unwrap();
        assert!(result.converged, "inner loops did not converge");
        assert!(result.collision_free);
        assert!(result.max_constraint_residual() <= config.c_tol);
        assert!(
            result.max_abs_curvature() <= 0.2 + 1e-3,
            "max curvature {}",
            result.max_abs_curvature()
        );
        // Accepted steps never increase the exact merit.
        assert!(result.max_merit_increase <= 1e-9);

        // Endpoints pinned to the reference exactly.
        let segment = &result.segments[0];
        let first = path.poses.first().unwrap().position;
        let last = path.poses.last().unwrap().position;
        assert!(segment.points[0].distance(first) <= 1e-9);
        assert!(segment.points.last().unwrap().distance(last) <= 1e-9);

        // Endpoint headings preserved within 1e-6 rad.
        let n = segment.points.len();
        let dir0 = segment.points[1] - segment.points[0];
        let angle0 = dir0.y.atan2(dir0.x);
        assert!(
            normalize_angle(angle0 - path.poses[0].heading).abs() <= 1e-6,
            "start heading drifted: {angle0}"
        );
        let dir_end = segment.points[n - 1] - segment.points[n - 2];
        let angle_end = dir_end.y.atan2(dir_end.x);
        assert!(normalize_angle(angle_end - path.poses.last().unwrap().heading).abs() <= 1e-6);
    }

    #[test]
    fn points_stay_inside_bubbles() {
        let path = zigzag_path();
        let config = SmootherConfig::default();
        let result =
            smooth(&path, &[], &open_bounds(), &vehicle(), &config, SmoothMode::DlIaps).unwrap();
        let segment = &result.segments[0];
        // Rebuild the reference resample to compare against bubble boxes.
        let positions: Vec<Point2> = path.poses.iter().map(|p| p.position).collect();
        let reference = resample(&positions, config.delta_s);
        let bubbles = init_bubbles(&reference.points, &[], &open_bounds(), &config);
        for (k, p) in segment.points.iter().enumerate().skip(2).take(segment.points.len() - 4) {
            let half = bubbles[k].radius / std::f64::consts::SQRT_2 + 1e-6;
            assert!((p.x - bubbles[k].center.x).abs() <= half);
            assert!((p.y - bubbles[k].center.y).abs() <= half);
        }
    }

    /// Quarter arc of radius 6 turning left from heading 0 to pi/2.
    fn arc_path() -> ReferencePath {
        let radius = 6.0;
        let center = Point2::new(0.0, radius);
        let steps = (radius * std::f64::consts::FRAC_PI_2 / 0.2).floor() as usize;
        let mut poses = Vec::new();
        for k in 0..=steps {
            let angle = -std::f64::consts::FRAC_PI_2 + k as f64 * 0.2 / radius;
            poses.push(Pose::new(
                center.x + radius * angle.cos(),
                center.y + radius * angle.sin(),
                angle + std::f64::consts::FRAC_PI_2,
            ));
        }
        let gears = vec![Gear::Forward; poses.len()];
        ReferencePath { poses, gears }
    }

    #[test]
    fn collision_loop_shrinks_until_clear() {
        // The vehicle sweeps the annulus [5.0, 7.x] around the arc center;
        // the obstacle sits in the inner pocket at radius 4.92, clear of the
        // reference but inside the corner-cutting region the smoother would
        // otherwise use. The outer loop must shrink bubbles there.
        let path = arc_path();
        // Small square at mid-arc, radius ~4.61..4.89 from the arc center.
        let obstacle = ConvexPolygon::rectangle(3.259, 2.541, 3.459, 2.741).unwrap();
        let bounds = open_bounds();
        let config = SmootherConfig::default();
        let v = vehicle();
        let checker = CollisionChecker::new(&v, std::slice::from_ref(&obstacle), &bounds);
        for pose in &path.poses {
            assert!(checker.pose_free(*pose), "reference precondition violated at {pose:?}");
        }
        let result =
            smooth(&path, &[obstacle.clone()], &bounds, &v, &config, SmoothMode::DlIaps).unwrap();
        assert!(result.collision_free);
        assert!(
            result.iterations.collision > 1,
            "expected the outer loop to actually shrink bubbles"
        );
        let segment = &result.segments[0];
        for (p, h) in segment.points.iter().zip(&segment.headings) {
            assert!(checker.pose_free(Pose {
                position: *p,
                heading: *h
            }));
        }
    }

    #[test]
    fn smoothing_is_deterministic() {
        let path = zigzag_path();
        let config = SmootherConfig::default();
        let a = smooth(&path, &[], &open_bounds(), &vehicle(), &config, SmoothMode::DlIaps).unwrap();
        let b = smooth(&path, &[], &open_bounds(), &vehicle(), &config, SmoothMode::DlIaps).unwrap();
        for (sa, sb) in a.segments.iter().zip(&b.segments) {
            assert_eq!(sa.points.len(), sb.points.len());
            for (pa, pb) in sa.points.iter().zip(&sb.points) {
                assert_eq!(pa.x.to_bits(), pb.x.to_bits());
                assert_eq!(pa.y.to_bits(), pb.y.to_bits());
            }
        }
    }

    #[test]
    fn gear_segments_split_and_share_switch_pose() {
        let mut poses = Vec::new();
        let mut gears = Vec::new();
        for k in 0..10 {
            poses.push(Pose::new(k as f64 * 0.2, 0.0, 0.0));
            gears.push(Gear::Forward);
        }
        for k in 1..6 {
            poses.push(Pose::new(1.8 - k as f64 * 0.2, 0.0, 0.0));
            gears.push(Gear::Backward);
        }
        let path = ReferencePath { poses, gears };
        let segments = gear_segments(&path);
        assert_eq!(segments.len(), 2);
        assert_eq!(segments[0].1, Gear::Forward);
        assert_eq!(segments[1].1, Gear::Backward);
        // Shared switch pose.
        let last_fwd = segments[0].0.last().unwrap();
        let first_bwd = segments[1].0.first().unwrap();
        assert_eq!(last_fwd.position, first_bwd.position);
    }

    #[test]
    fn ces_mode_matches_dliaps_on_straight_input() {
        let path = straight_path(3.0, 0.2);
        let config = SmootherConfig::default();
        let a = smooth(&path, &[], &open_bounds(), &vehicle(), &config, SmoothMode::DlIaps).unwrap();
        let b = smooth(&path, &[], &open_bounds(), &vehicle(), &config, SmoothMode::Ces).unwrap();
        for (pa, pb) in a.segments[0].points.iter().zip(&b.segments[0].points) {
            assert!(pa.distance(*pb) < 1e-6);
        }
    }

    #[test]
    fn empty_path_is_an_error() {
        let path = ReferencePath {
            poses: Vec::new(),
            gears: Vec::new(),
        };
        let result = smooth(
            &path,
            &[],
            &open_bounds(),
            &vehicle(),
            &SmootherConfig::default(),
            SmoothMode::DlIaps,
        );
        assert!(matches!(result, Err(SmoothError::EmptyPath)));
    }
}
