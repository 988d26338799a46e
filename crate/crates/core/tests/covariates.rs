use countmix::covariates::{fit_logit_weights, logit_objective, DesignMatrix, LogitCoefficients};
use countmix::em::{fit, FitConfig};
use countmix::model::ModelDims;
use countmix::simulation::{fixture_q2k3, simulate_dataset};
use proptest::prelude::*;

#[test]
fn intercept_only_design_matches_constant_weights() {
    let data = simulate_dataset(&fixture_q2k3(), 400, 8).unwrap();
    let dims = ModelDims::new(400, 10, 2, 3, 0);
    let cfg = FitConfig { epsilon: 1e-9, ..FitConfig::default() };
    let plain = fit(&data.counts, dims, &cfg, None).unwrap();
    let design = DesignMatrix::intercept_only(400);
    let with = fit(&data.counts, dims, &cfg, Some(&design)).unwrap();
    assert!((plain.loglik() - with.loglik()).abs() < 1e-6, "{} vs {}", plain.loglik(), with.loglik());
    assert_eq!(plain.h, with.h);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn newton_does_not_lower_the_objective(seed in any::<u64>(), k in 2usize..4) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0)]).collect();
        let x = DesignMatrix::with_intercept(&rows, &["a", "b"]).unwrap();
        let mut resp = Vec::with_capacity(n * k);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            resp.extend(raw.iter().map(|v| v / s));
        }
        let start = LogitCoefficients::zeros(k, 3);
        let res = fit_logit_weights(&resp, &x, &start).unwrap();
        prop_assert!(res.objective >= logit_objective(&resp, &x, &start) - 1e-12);
        prop_assert!(!res.separated);
    }
}
