use super::*;
use crate::autodiff::Tape;
use crate::gradcheck::{grad_check_params, GradCheckConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn inputs(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> TrackInputs {
    let (t, s) = (cfg.template_side, cfg.search_side);
    let (et, es) = (cfg.event_side(t), cfg.event_side(s));
    TrackInputs {
        rgb_t: random(&[3, t, t], rng),
        ev_t: random(&[cfg.bins, et, et], rng),
        rgb_s: random(&[3, s, s], rng),
        ev_s: random(&[cfg.bins, es, es], rng),
    }
}

fn build(cfg: &BackboneConfig, seed: u64) -> (ParamStore, Backbone) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::new(&mut store, "bb", cfg, &mut rng).unwrap();
    (store, bb)
}

#[test]
fn token_counts() {
    let toy = BackboneConfig::toy();
    assert_eq!((toy.n_t(), toy.n_s(), toy.seq_len(), toy.grid_side()), (16, 64, 160, 8));
    assert_eq!(toy.event_side(64), 16);
    let tiny = BackboneConfig::tiny();
    assert_eq!((tiny.n_t(), tiny.n_s()), (4, 16));
    let img = Tensor::zeros([3, 32, 32]);
    assert_eq!(patchify(&img, 16).unwrap().shape(), &[4, 768]);
}

#[test]
fn bad_configs_rejected() {
    let mut c = BackboneConfig::tiny();
    c.set_layers = 13;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = BackboneConfig::tiny();
    c.template_side = 40;
    assert!(c.validate().is_err());
    let mut c = BackboneConfig::tiny();
    c.heads = 3;
    assert!(c.validate().is_err());
    assert!(patchify(&Tensor::zeros([1, 10, 10]), 4).is_err());
}

#[test]
fn patch_embedding_matches_dot_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let emb = PatchEmbed::new(&mut store, "e", 1, 16, 2, &mut rng);
    let img = random(&[1, 32, 16], &mut rng);
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &store);
    let out = emb.forward(&g, &img).unwrap();
    assert_eq!(out.shape(), vec![2, 2]);
    let w = store.get(emb.w);
    for tok in 0..2 {
        for d in 0..2 {
            let mut want = 0.0;
            for y in 0..16 {
                for x in 0..16 {
                    want += img.data()[(tok * 16 + y) * 16 + x] * w.at2(y * 16 + x, d);
                }
            }
            assert!((out.value().at2(tok, d) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_patch_gives_zero_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let emb = PatchEmbed::new(&mut store, "e", 3, 16, 8, &mut rng);
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &store);
    let out = emb.forward(&g, &Tensor::zeros([3, 32, 32])).unwrap();
    assert_eq!(out.shape(), vec![4, 8]);
    assert!(out.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_wer_assembles_by_concatenation() {
    let cfg = BackboneConfig::tiny();
    let (mut store, bb) = build(&cfg, 1);
    bb.input_wer.set_identity(&mut store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = inputs(&cfg, &mut rng);
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &store);
    let toks = bb.embed(&g, &x).unwrap();
    let seq = bb.assemble(&g, toks).unwrap();
    assert_eq!(seq.h.shape(), vec![40, 8]);
    let parts = [&seq.slices.rgb_t, &seq.slices.ev_t, &seq.slices.rgb_s, &seq.slices.ev_s];
    for (tok, range) in toks.iter().zip(parts) {
        let got = seq.h.slice_rows(range.start, range.len()).unwrap();
        assert!(got.value().max_abs_diff(&tok.value()).unwrap() < 1e-10);
    }
    // slices reassemble exactly
    let pieces: Vec<_> = parts.iter().map(|r| seq.h.slice_rows(r.start, r.len()).unwrap()).collect();
    let back = Var::concat_rows(&pieces).unwrap();
    assert_eq!(*back.value(), *seq.h.value());
}

#[test]
fn assemble_rejects_wrong_counts() {
    let cfg = BackboneConfig::tiny();
    let (store, bb) = build(&cfg, 1);
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &store);
    let a = g.constant(Tensor::zeros([4, 8]));
    let b = g.constant(Tensor::zeros([15, 8]));
    assert!(matches!(bb.assemble(&g, [a, a, b, b]), Err(Error::Dimension { .. })));
}

#[test]
fn slice_map_layout() {
    let s = SliceMap::new(16, 64);
    assert_eq!(s.len(), 160);
    assert_eq!((s.rgb_t.clone(), s.ev_t.clone(), s.rgb_s.clone(), s.ev_s.clone()), (0..16, 16..32, 32..96, 96..160));
}

fn layer(spectral: bool, seed: u64) -> (ParamStore, Layer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dff = DffConfig { heads: 2, k: 3, router_hidden: 4 };
    let l = Layer::new(&mut store, "l", 8, 2, 4, spectral.then_some((&dff, 12)), &mut rng).unwrap();
    (store, l)
}

#[test]
fn zeroed_residual_layers_are_identity() {
    for spectral in [true, false] {
        let (mut store, l) = layer(spectral, 5);
        l.zero_residual(&mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[12, 8], &mut rng);
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let y = l.forward(&g, g.constant(x.clone())).unwrap();
        assert!(y.value().max_abs_diff(&x).unwrap() <= 1e-9);
    }
}

#[test]
fn silent_spectral_branch_reduces_to_standard_layer() {
    let (mut store, l) = layer(true, 7);
    l.silence_spectral(&mut store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[12, 8], &mut rng);
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &store);
    let a = l.forward(&g, g.constant(x.clone())).unwrap();
    let b = l.forward_standard(&g, g.constant(x)).unwrap();
    assert!(a.value().max_abs_diff(&b.value()).unwrap() < 1e-12);
}

#[test]
fn standard_layer_is_permutation_equivariant() {
    let (store, l) = layer(false, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[12, 8], &mut rng);
    let perm: Vec<usize> = vec![3, 0, 11, 5, 1, 9, 2, 4, 10, 6, 8, 7];
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &store);
    let xv = g.constant(x);
    let y = l.forward(&g, xv).unwrap();
    let yp = l.forward(&g, xv.gather_rows(perm.iter().map(|&i| Some(i)).collect()).unwrap()).unwrap();
    for (r, &src) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((yp.value().at2(r, c) - y.value().at2(src, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_backbone_passes_h0_through() {
    let cfg = BackboneConfig::tiny();
    let (mut store, bb) = build(&cfg, 11);
    bb.set_identity(&mut store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = inputs(&cfg, &mut rng);
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &store);
    let out = bb.forward(&g, &x).unwrap();
    assert!(out.h.value().max_abs_diff(&out.h0.value()).unwrap() <= 1e-9);
}

#[test]
fn toy_forward_shapes_and_determinism() {
    let cfg = BackboneConfig::toy();
    let (store, bb) = build(&cfg, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = inputs(&cfg, &mut rng);
    let run = || {
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let out = bb.forward(&g, &x).unwrap();
        assert_eq!(out.h0.shape(), vec![160, 32]);
        assert_eq!(out.h.shape(), vec![160, 32]);
        assert_eq!(out.search.shape(), vec![64, 32]);
        (*out.h.value()).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn set_layer_gradients() {
    let (store, l) = layer(true, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&[12, 8], &mut rng);
    let r = random(&[12, 8], &mut rng);
    let ids = l.param_ids();
    let report = grad_check_params(
        &store,
        &ids,
        &[x],
        |g, v| Ok(l.forward(g, v[0])?.mul(g.constant(r.clone()))?.sum()),
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed, "{report}");
}

#[test]
fn tiny_backbone_end_to_end_gradients() {
    let cfg = BackboneConfig::tiny();
    let (store, bb) = build(&cfg, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = inputs(&cfg, &mut rng);
    let r = random(&[16, 8], &mut rng);
    let ids = bb.param_ids();
    assert_eq!(ids.len(), store.len());
    let cfg_gc = GradCheckConfig {
        max_coords_per_input: Some(3),
        ..GradCheckConfig::default()
    };
    let report = grad_check_params(
        &store,
        &ids,
        &[],
        |g, _| Ok(bb.forward(g, &x)?.search.mul(g.constant(r.clone()))?.sum()),
        &cfg_gc,
    )
    .unwrap();
    assert!(report.passed, "{report}");
    assert!(report.checked() > 200);
}
