mod common;

use platevi::family::Scheme;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn primitives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for prim in common::primitives() {
        for _ in 0..5 {
            let err = common::primitive_error(&prim, &mut rng);
            assert!(err < 1e-5, "{}: relative error {err:.3e}", prim.name);
        }
    }
}

#[test]
fn reduced_elbo_gradients_for_every_scheme() {
    for scheme in [Scheme::PaviF, Scheme::PaviE, Scheme::SviBaseline] {
        for seed in 0..2 {
            let err = common::reduced_elbo_error(scheme, seed);
            assert!(
                err < 1e-5,
                "{scheme:?} seed {seed}: relative error {err:.3e}"
            );
        }
    }
}
