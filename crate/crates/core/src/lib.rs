//! Free-space trajectory planning toolkit.
//!
//! The pipeline decouples trajectory generation into three stages:
//! a kinematic Hybrid A* search producing a coarse collision-free
//! reference path, a dual-loop iterative anchoring path smoother that
//! enforces the vehicle's curvature limit while staying collision free,
//! and a piece-wise jerk speed optimizer producing a comfortable,
//! minimum-time-leaning speed profile per gear segment. A scenario
//! harness wires the stages into a CLI and a batch benchmark.

pub mod dliaps;
pub mod geometry;
pub mod hybrid_astar;
pub mod qp;
