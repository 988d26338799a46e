use countmix::rotation::{gradient_projection, oblimin_criterion, oblimin_rotate};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_loadings(p: usize, q: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(p, q, |_, _| rng.gen_range(-1.2..1.2))
}

/// Unit-column mixing matrix with moderate correlations.
fn oblique_basis(q: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = DMatrix::from_fn(q, q, |i, j| if i == j { 1.0 } else { rng.gen_range(-0.4..0.4) });
    for mut c in t.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rotation_identities(p in 4usize..10, q in 2usize..4, seed in any::<u64>()) {
        prop_assume!(p > q);
        let l = random_loadings(p, q, seed);
        let r = oblimin_rotate(&l, 0.0, seed).unwrap();
        let back = &r.rotated_loadings * r.rotation_matrix.transpose();
        prop_assert!((&back - &l).amax() < 1e-8);
        let phi = &r.factor_correlation;
        prop_assert!((phi - phi.transpose()).amax() < 1e-12);
        for c in 0..q {
            prop_assert_eq!(phi[(c, c)], 1.0);
        }
        prop_assert!(phi.clone().cholesky().is_some());
        let comm_rot = (&r.rotated_loadings * phi * r.rotated_loadings.transpose()).diagonal();
        let comm = (&l * l.transpose()).diagonal();
        prop_assert!((comm_rot - comm).amax() < 1e-8);
        // Canonical signs: the largest entry of each column is positive.
        for c in 0..q {
            let col = r.rotated_loadings.column(c);
            let lead = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            prop_assert!(lead > 0.0);
        }
    }

    #[test]
    fn descent_never_increases_the_criterion(p in 4usize..10, q in 2usize..4, seed in any::<u64>()) {
        prop_assume!(p > q);
        let l = random_loadings(p, q, seed);
        let start = oblique_basis(q, seed ^ 7);
        let d = gradient_projection(&l, &start, 0.0).unwrap();
        for w in d.trace.windows(2) {
            prop_assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
        let d = gradient_projection(&l, &start, 0.5).unwrap();
        for w in d.trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn column_sign_flips_leave_the_criterion_unchanged(p in 4usize..9, q in 2usize..4, seed in any::<u64>(), col in 0usize..3) {
        prop_assume!(p > q && col < q);
        let l = random_loadings(p, q, seed);
        let mut flipped = l.clone();
        flipped.column_mut(col).neg_mut();
        prop_assert!((oblimin_criterion(&l, 0.0).0 - oblimin_criterion(&flipped, 0.0).0).abs() < 1e-12);
    }

    #[test]
    fn hidden_simple_structure_is_recovered(q in 2usize..4, seed in any::<u64>()) {
        let p = 4 * q;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let simple = DMatrix::from_fn(p, q, |j, c| if j % q == c { rng.gen_range(0.5..1.0) } else { 0.0 });
        let t0 = oblique_basis(q, seed ^ 11);
        let mixed = &simple * t0.transpose();
        let r = oblimin_rotate(&mixed, 0.0, seed).unwrap();
        prop_assert!(r.criterion_value < 1e-10, "criterion {}", r.criterion_value);
        // Every recovered column matches a simple-structure column.
        for c in 0..q {
            let col = r.rotated_loadings.column(c);
            let best = (0..q)
                .map(|s| (col - simple.column(s)).amax().min((col + simple.column(s)).amax()))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(best < 1e-5, "column {c} off by {best}");
        }
    }
}

#[test]
fn seeded_rotation_is_deterministic() {
    let l = random_loadings(7, 3, 5);
    assert_eq!(oblimin_rotate(&l, 0.0, 1).unwrap(), oblimin_rotate(&l, 0.0, 1).unwrap());
}
