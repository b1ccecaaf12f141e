//! Randomized equivalence of the ADMM solver against brute-force
//! active-set enumeration on small strictly convex problems.

mod support;

use fsplan::qp::{solve, QpSettings, QpStatus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{brute_force_qp_minimum, random_strictly_convex_qp, DenseQp};

#[test]
fn admm_matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51ab5);
    let settings = QpSettings::default();
    let mut checked = 0;
    while checked < 200 {
        let problem = random_strictly_convex_qp(&mut rng, 6, 8);
        let dense = DenseQp::from_problem(&problem);
        let expected = brute_force_qp_minimum(&dense).expect("problems are feasible by construction");
        let got = solve(&problem, &settings).unwrap();
        assert_eq!(
            got.status,
            QpStatus::Solved,
            "solver failed on a feasible strictly convex QP"
        );
        for (i, (a, b)) in got.primal.iter().zip(&expected).enumerate() {
            assert!(
                (a - b).abs() <= 1e-5,
                "case {checked}: primal[{i}] solver {a} vs oracle {b}"
            );
        }
        checked += 1;
    }
}
