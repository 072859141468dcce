mod common;

use common::{enumeration_oracle, hildreth_oracle, random_qp};
use deeplcc::qp::{solve, QpSettings, QpStatus, QuadraticProgram};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_instances_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let settings = QpSettings::default();
    for case in 0..100 {
        let d = rng.gen_range(2..=30);
        let p = rng.gen_range(0..=3.min(d - 1));
        let r = rng.gen_range(0..=20);
        let small = r <= 12;
        let qp = random_qp(&mut rng, d, p, if small { r.min(12) } else { r }, small);
        let sol = solve(&qp, &settings).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        let reference = if small { enumeration_oracle(&qp).expect("feasible by construction") } else { hildreth_oracle(&qp, 200_000) };
        assert!(
            (sol.objective - reference).abs() <= 1e-6 * (1.0 + reference.abs()),
            "case {case}: solver {} vs oracle {}",
            sol.objective,
            reference
        );
    }
}

#[test]
fn two_sided_small_instances_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..30 {
        let d = rng.gen_range(2..=12);
        let (p, r) = (rng.gen_range(0..2), rng.gen_range(1..=7));
        let qp = random_qp(&mut rng, d, p, r, false);
        let sol = solve(&qp, &QpSettings::default()).unwrap();
        let reference = enumeration_oracle(&qp).unwrap();
        assert!((sol.objective - reference).abs() <= 1e-8 * (1.0 + reference.abs()), "case {case}");
    }
}

fn scaled(qp: &QuadraticProgram, c: f64) -> QuadraticProgram {
    QuadraticProgram { p: &qp.p * c, q: &qp.q * c, ..qp.clone() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn argmin_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = random_qp(&mut rng, 8, 2, 6, false);
        let a = solve(&qp, &QpSettings::default()).unwrap();
        let b = solve(&scaled(&qp, c), &QpSettings::default()).unwrap();
        prop_assert!((&a.x - &b.x).amax() <= 1e-8);
    }

    #[test]
    fn repeated_solves_are_bitwise_identical(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = random_qp(&mut rng, 10, 1, 8, false);
        let a = solve(&qp, &QpSettings::default()).unwrap();
        let b = solve(&qp, &QpSettings::default()).unwrap();
        prop_assert_eq!(a.x, b.x);
    }

    #[test]
    fn optimal_status_implies_small_residual(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = random_qp(&mut rng, 15, 3, 10, false);
        let s = QpSettings::default();
        let sol = solve(&qp, &s).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        let scale = (&qp.p * &sol.x).amax().max(qp.q.amax()).max(qp.b_eq.amax());
        prop_assert!(sol.kkt_residual <= s.abs_tol + s.rel_tol * scale.max(1.0) * 10.0);
        let ax = &qp.a_in * &sol.x;
        for i in 0..ax.len() {
            prop_assert!(ax[i] >= qp.lo[i] - s.abs_tol && ax[i] <= qp.hi[i] + s.abs_tol);
        }
    }
}

#[test]
fn prepared_solver_reuses_factorization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let qp = random_qp(&mut rng, 12, 2, 8, false);
    let mut prep = deeplcc::qp::PreparedQp::new(&qp.p, &qp.a_eq, &qp.a_in).unwrap();
    for k in 0..5 {
        let q = &qp.q * (1.0 + k as f64);
        let once = solve(&QuadraticProgram { q: q.clone(), ..qp.clone() }, &QpSettings::default()).unwrap();
        let reused = prep.solve(&q, &qp.b_eq, &qp.lo, &qp.hi, &QpSettings::default());
        assert_eq!(once.x, reused.x);
    }
}
