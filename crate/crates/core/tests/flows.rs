mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn logdet_matches_numeric_jacobian(dim in 1usize..=3, seed in any::<u64>()) {
        let (label, err) = common::flow_logdet_error(dim, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(err < 1e-6, "{label}: |Δ| = {err:.3e}");
    }
}
