use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use freqtrack::autodiff::Tape;
use freqtrack::params::{Graph, ParamStore};
use freqtrack::spectral::dft::{dft_1d, idft_1d};
use freqtrack::spectral::{DffConfig, SpectralFilterBank};
use freqtrack::{Error, Tensor};

fn random(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new([n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bank(dim: usize, len: usize, k: usize, seed: u64) -> (ParamStore, SpectralFilterBank) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = DffConfig {
        heads: 2,
        k,
        router_hidden: 6,
    };
    let b = SpectralFilterBank::new(&mut store, "dff", dim, len, &cfg, &mut rng).unwrap();
    (store, b)
}

fn forward(store: &ParamStore, b: &SpectralFilterBank, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let g = Graph::frozen(&tape, store);
    (*b.forward(&g, g.constant(x.clone())).unwrap().value()).clone()
}

fn alpha(store: &ParamStore, b: &SpectralFilterBank, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let g = Graph::frozen(&tape, store);
    (*b.routing_weights(&g, g.constant(x.clone())).unwrap().value()).clone()
}

fn signal() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..70).prop_flat_map(|n| (Just(n), prop::collection::vec(-10.0f64..10.0, n)))
}

proptest! {
    #[test]
    fn round_trip_any_length((n, x) in signal()) {
        let t = Tensor::new([n, 1], x).unwrap();
        let back = idft_1d(&dft_1d(&t), n).unwrap();
        prop_assert!(back.max_abs_diff(&t).unwrap() < 1e-10 * n as f64);
    }

    #[test]
    fn weighted_parseval((n, x) in signal()) {
        let t = Tensor::new([n, 1], x).unwrap();
        let s = dft_1d(&t);
        let spec: f64 = (0..s.re.rows())
            .map(|k| {
                let w = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
                w * (s.re.data()[k].powi(2) + s.im.data()[k].powi(2))
            })
            .sum::<f64>() / n as f64;
        let energy: f64 = t.data().iter().map(|v| v * v).sum();
        prop_assert!((spec - energy).abs() <= 1e-10 * energy.max(1.0));
    }

    #[test]
    fn routing_weights_are_a_distribution(seed in 0u64..1000, n in 1usize..30) {
        let (mut store, b) = bank(8, 30, 4, seed);
        store.get_mut(b.router.w2).data_mut().iter_mut().for_each(|v| *v *= 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = alpha(&store, &b, &random(n, 8, &mut rng));
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        prop_assert!((a.sum() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn identity_filter_reproduces_input() {
    let (mut store, b) = bank(8, 16, 1, 1);
    b.set_identity(&mut store).unwrap();
    let x = random(16, 8, &mut ChaCha8Rng::seed_from_u64(2));
    assert!(forward(&store, &b, &x).max_abs_diff(&x).unwrap() <= 1e-9);
}

#[test]
fn zero_router_output_layer_gives_uniform_weights() {
    let (mut store, b) = bank(8, 16, 4, 3);
    store.set(b.router.w2, Tensor::zeros([6, 4])).unwrap();
    store.set(b.router.b2, Tensor::zeros([4])).unwrap();
    let a = alpha(&store, &b, &random(5, 8, &mut ChaCha8Rng::seed_from_u64(4)));
    assert!(a.data().iter().all(|&v| v == 0.25));
}

#[test]
fn token_order_does_not_change_routing() {
    let (mut store, b) = bank(8, 32, 4, 5);
    store.get_mut(b.router.w1).data_mut().iter_mut().for_each(|v| *v *= 100.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(32, 8, &mut rng);
    let base = alpha(&store, &b, &x);
    for _ in 0..10 {
        let mut order: Vec<usize> = (0..32).collect();
        order.shuffle(&mut rng);
        let data = order.iter().flat_map(|&r| x.row(r).to_vec()).collect();
        assert_eq!(alpha(&store, &b, &Tensor::new([32, 8], data).unwrap()), base);
    }
}

#[test]
fn one_hot_routing_matches_single_filter_bank() {
    let (mut s2, b2) = bank(8, 20, 2, 7);
    let (mut s1, b1) = bank(8, 20, 1, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for id in [b2.basis_re, b2.basis_im] {
        s2.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    s2.set(b2.router.b2, Tensor::new([2], vec![-1e3, 1e3]).unwrap()).unwrap();
    let per = b2.max_bins() * 8;
    for (src, dst) in [(b2.basis_re, b1.basis_re), (b2.basis_im, b1.basis_im)] {
        let second = s2.get(src).data()[per..].to_vec();
        s1.set(dst, Tensor::new([1, b2.max_bins(), 8], second).unwrap()).unwrap();
    }
    for (src, dst) in [
        (b2.proj_in_w, b1.proj_in_w),
        (b2.proj_in_b, b1.proj_in_b),
        (b2.proj_out_w, b1.proj_out_w),
        (b2.proj_out_b, b1.proj_out_b),
    ] {
        s1.set(dst, s2.get(src).clone()).unwrap();
    }
    for n in [20, 11, 4] {
        let x = random(n, 8, &mut rng);
        let d = forward(&s1, &b1, &x).max_abs_diff(&forward(&s2, &b2, &x)).unwrap();
        assert!(d <= 1e-9, "n={n}: {d}");
    }
}

#[test]
fn spectrum_bin_count_mismatch_is_dimension_error() {
    let s = dft_1d(&Tensor::zeros([6, 2]));
    assert!(matches!(idft_1d(&s, 9), Err(Error::Dimension { .. })));
    assert!(idft_1d(&s, 6).is_ok() && idft_1d(&s, 7).is_ok());
}
