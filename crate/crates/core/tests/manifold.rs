use manipdiff::spd::{
    distance, exp_map, frechet_mean_detailed, geodesic, inner_product, log_map, parallel_transport,
    spd_objective, SpdMatrix, TangentMatrix,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> SpdMatrix {
    let a = random_matrix(rng, d);
    SpdMatrix::new(&a * a.transpose() + DMatrix::identity(d, d) * 0.2).unwrap()
}

fn random_tangent(rng: &mut ChaCha8Rng, base: &SpdMatrix) -> TangentMatrix {
    let a = random_matrix(rng, base.dim());
    TangentMatrix::new(base.clone(), (&a + a.transpose()) * 0.5).unwrap()
}

fn invertible(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    loop {
        let a = random_matrix(rng, d);
        if a.determinant().abs() > 0.2 {
            return a;
        }
    }
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn exp_inverts_log(seed in any::<u64>(), d in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (base, target) = (random_spd(&mut rng, d), random_spd(&mut rng, d));
        let back = exp_map(&base, &log_map(&base, &target).unwrap()).unwrap();
        prop_assert!(rel(back.as_matrix(), target.as_matrix()) <= 1e-8);
    }

    #[test]
    fn transport_preserves_inner_products(seed in any::<u64>(), d in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (from, to) = (random_spd(&mut rng, d), random_spd(&mut rng, d));
        let (u, v) = (random_tangent(&mut rng, &from), random_tangent(&mut rng, &from));
        let before = inner_product(&from, &u, &v).unwrap();
        let tu = parallel_transport(&from, &to, &u).unwrap();
        let tv = parallel_transport(&from, &to, &v).unwrap();
        let after = inner_product(&to, &tu, &tv).unwrap();
        prop_assert!((after - before).abs() <= 1e-8 * before.abs().max(1.0));
    }

    #[test]
    fn distance_is_congruence_invariant(seed in any::<u64>(), d in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_spd(&mut rng, d), random_spd(&mut rng, d));
        let g = invertible(&mut rng, d);
        let act = |m: &SpdMatrix| SpdMatrix::new(&g * m.as_matrix() * g.transpose()).unwrap();
        let before = distance(&a, &b).unwrap();
        let after = distance(&act(&a), &act(&b)).unwrap();
        prop_assert!((after - before).abs() <= 1e-8 * before.max(1.0));
    }

    #[test]
    fn frechet_mean_is_a_fixed_point(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<_> = (0..n).map(|_| random_spd(&mut rng, 2)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mean = frechet_mean_detailed(&points, &weights).unwrap().mean;
        // Weighted sum of log maps at the mean, recomputed from scratch.
        let mut grad = DMatrix::zeros(2, 2);
        for (p, w) in points.iter().zip(&weights) {
            grad += log_map(&mean, p).unwrap().entries() * *w;
        }
        prop_assert!(grad.norm() <= 1e-9, "residual {}", grad.norm());
    }

    #[test]
    fn geodesic_midpoint_is_equidistant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_spd(&mut rng, 2), random_spd(&mut rng, 2));
        let mid = geodesic(&a, &b, 0.5).unwrap();
        let (da, db) = (distance(&a, &mid).unwrap(), distance(&mid, &b).unwrap());
        prop_assert!((da - db).abs() <= 1e-9 * da.max(1.0));
        prop_assert!((da + db - distance(&a, &b).unwrap()).abs() <= 1e-9 * da.max(1.0));
    }

    #[test]
    fn objective_is_zero_only_at_the_target(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_spd(&mut rng, 2), random_spd(&mut rng, 2));
        prop_assert!(spd_objective(&a, &a).unwrap() <= 1e-20);
        prop_assert!(spd_objective(&a, &b).unwrap() > 0.0);
    }
}
