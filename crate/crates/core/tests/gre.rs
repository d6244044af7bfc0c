//! Range-encoding weights stay normalised while their parameters train.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigver_core::autodiff::nn::Init;
use sigver_core::autodiff::{Adam, AdamConfig, Graph, Mode, ParamStore, Real};
use sigver_core::model::GaussianRangeEncoding;

const WIDTH: usize = 8;

fn max_row_error<F: Real>(store: &ParamStore<F>, gre: &GaussianRangeEncoding) -> f64 {
    let mut g = Graph::new(store, Mode::Eval);
    let w = gre.weights(&mut g).unwrap();
    let w = g.value(w);
    assert_eq!(w.shape(), [gre.positions, gre.ranges]);
    (0..gre.positions)
        .map(|i| {
            let row: f64 = (0..gre.ranges).map(|j| w.get(i, j).as_f64()).sum();
            assert!((0..gre.ranges).all(|j| w.get(i, j).as_f64() >= 0.0));
            (row - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Trains mu, rho and the range embeddings against a random linear target
/// with a large step, so centres and widths move far from their start.
fn check<F: Real>(ranges: usize, positions: usize, seed: u64) {
    let mut store = ParamStore::<F>::new();
    let gre = GaussianRangeEncoding::new(&mut store, &mut Init::new(seed), "gre", positions, WIDTH, ranges).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target: Vec<F> = (0..positions * WIDTH).map(|_| F::of(rng.random_range(-1.0..1.0))).collect();
    let before = max_row_error(&store, &gre);
    assert!(before <= 1e-6, "K {ranges} T {positions}: {before} before training");

    let mu0 = store.value(gre.mu).clone();
    let mut adam = Adam::new(AdamConfig { lr: 0.5, ..AdamConfig::default() }, &store);
    for step in 0..100 {
        let grads = {
            let mut g = Graph::new(&store, Mode::Train { seed: step });
            let e = gre.encoding(&mut g).unwrap();
            let l = g.weighted_sum(e, &target).unwrap();
            g.backward(l).unwrap()
        };
        store.zero_grad();
        store.accumulate(&grads);
        adam.step(&mut store);
        let err = max_row_error(&store, &gre);
        assert!(err <= 1e-6, "K {ranges} T {positions}: {err} after step {}", step + 1);
    }
    assert_ne!(store.value(gre.mu), &mu0, "centres never moved");
}

#[test]
fn weights_sum_to_one_in_double_precision() {
    for ranges in [2, 5, 20] {
        for positions in [64, 250] {
            check::<f64>(ranges, positions, ranges as u64 * 1000 + positions as u64);
        }
    }
}

#[test]
fn weights_sum_to_one_in_single_precision() {
    for ranges in [2, 5, 20] {
        for positions in [64, 250] {
            check::<f32>(ranges, positions, ranges as u64 * 1000 + positions as u64);
        }
    }
}
