mod common;

use jcas::noise::{class_distribution, empirical_ntm};
use jcas::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rows_stochastic(data: &[f64], k: usize, tol: f64) -> bool {
    data.chunks_exact(k)
        .all(|r| r.iter().all(|&v| (0.0..=1.0 + tol).contains(&v)) && (r.iter().sum::<f64>() - 1.0).abs() < tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affinity_and_reverse_rows_sum_to_one(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, d in 1usize..6) {
        let f = common::random_features(&mut rng(seed), h, w, d);
        let a = affinity_map(&f).unwrap();
        prop_assert!(rows_stochastic(a.data(), h * w, 1e-12));
        if h * w > 1 {
            let r = reverse_affinity(&a).unwrap();
            prop_assert!(rows_stochastic(r.data(), h * w, 1e-12));
        }
    }

    #[test]
    fn dar_output_is_on_the_simplex(seed in any::<u64>(), n in 2usize..10, c in 2usize..5) {
        let mut r = rng(seed);
        let q = common::random_prob_map(&mut r, 1, n, c);
        let p = common::random_affinity(&mut r, n);
        let out = dar_refine(&q, &p).unwrap();
        prop_assert!(rows_stochastic(out.data(), c, 1e-12));
    }

    #[test]
    fn ntm_params_rows_sum_to_one(raw in prop::collection::vec(-20.0f64..20.0, 16)) {
        let p = NtmParams::new(4, raw).unwrap();
        prop_assert!(rows_stochastic(&p.matrix(), 4, 1e-12));
    }

    #[test]
    fn translation_is_row_stochastic(seed in any::<u64>(), c in 2usize..7) {
        let mut r = rng(seed);
        let t = common::random_ntm(&mut r, c);
        let n = common::random_distribution(&mut r, c);
        let a = translate_exact(&t, &n).unwrap();
        prop_assert!(rows_stochastic(a.data(), 2, 1e-12));
    }

    #[test]
    fn measured_matrices_are_stochastic(seed in any::<u64>(), c in 2usize..5) {
        let mut r = rng(seed);
        let clean = common::random_labels(&mut r, 6, 7, c);
        let noisy = corrupt(&clean, c, &NoiseSpec::Symmetric { rate: 0.3 }, seed).unwrap();
        let e = empirical_ntm::<f64>(&clean, &noisy, c).unwrap();
        prop_assert!(rows_stochastic(e.data(), c, 1e-12));
        let d = class_distribution::<f64>(&[clean, noisy], c).unwrap();
        prop_assert!((d.proportions().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corruption_is_deterministic(seed in any::<u64>()) {
        let clean = common::random_labels(&mut rng(seed), 8, 8, 3);
        let spec = NoiseSpec::Asymmetric { rate: 0.4 };
        prop_assert_eq!(corrupt(&clean, 3, &spec, seed).unwrap(), corrupt(&clean, 3, &spec, seed).unwrap());
    }
}
