//! Shape ledger, parameter counts and structural properties of the encoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigver_core::autodiff::nn::Init;
use sigver_core::autodiff::{Graph, Mode, ParamStore, Tensor};
use sigver_core::model::{GaussianRangeEncoding, ModelConfig, SiameseModel, Variant, HEAD_HIDDEN};

fn random_input(len: usize, channels: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[len, channels], (0..len * channels).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn shape_ledger_for_every_variant() {
    for variant in Variant::ALL {
        let model = SiameseModel::<f32>::new(ModelConfig::new(variant).with_seed(1)).unwrap();
        let t = model.trace_shapes(random_input(2000, 23, 2)).unwrap();
        assert_eq!(t.input, (2000, 23), "{variant}");
        assert_eq!(t.frontend_stage_lengths, vec![1000, 500, 250], "{variant}");
        assert_eq!(t.frontend, (250, 64), "{variant}");
        assert_eq!(t.temporal_tokens, Some((250, 64)), "{variant}");
        match variant {
            Variant::Vanilla | Variant::Gait => {
                assert_eq!(t.temporal_embedding, Some(92));
                assert_eq!(t.channel_tokens, None);
                assert_eq!(t.embedding, 92);
            }
            Variant::VanillaTc => {
                assert_eq!(t.temporal_embedding, Some(92));
                assert_eq!(t.channel_tokens, Some((64, 250)));
                assert_eq!(t.channel_embedding, Some(92));
                assert_eq!(t.embedding, 184);
            }
            Variant::That => {
                assert_eq!(t.channel_tokens, Some((64, 250)));
                assert_eq!(t.embedding, 128);
            }
        }
        let x = random_input(2000, 23, 3);
        let y = random_input(2000, 23, 4);
        let (ex, ey) = (model.embed(x, 2000).unwrap(), model.embed(y, 1500).unwrap());
        assert!(ex.is_finite() && ey.is_finite(), "{variant}");
        let s = model.score_embeddings(&ex, &ey).unwrap();
        assert!(s > 0.0 && s < 1.0, "{variant}: {s}");
    }
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn conv(k: usize, i: usize, o: usize) -> usize {
    k * i * o + o
}

fn gru(i: usize, h: usize) -> usize {
    3 * h * (i + h) + 6 * h
}

enum Ffn {
    Dense,
    MultiScale,
    Conv,
}

/// Attention has q, v and output projections with bias and a bias-free key
/// projection.
fn block(w: usize, ffn_dim: usize, ffn: &Ffn) -> usize {
    let attn = 3 * linear(w, w) + w * w;
    let norms = 4 * w;
    let ffn = match ffn {
        Ffn::Dense => linear(w, ffn_dim) + linear(ffn_dim, w),
        Ffn::MultiScale => [1, 3, 5].iter().map(|&k| conv(k, w, w)).sum(),
        Ffn::Conv => conv(3, w, ffn_dim) + conv(3, ffn_dim, w),
    };
    attn + norms + ffn
}

fn stack(width: usize, c: &ModelConfig, ffn: Ffn) -> usize {
    let gre = 2 * c.gre_ranges + c.gre_ranges * width;
    gre + c.num_blocks * block(width, c.ffn_dim, &ffn)
}

fn expected_parameters(c: &ModelConfig) -> usize {
    let (t, d) = (c.frontend_out_length, c.d_model);
    let frontend = conv(5, c.input_channels, d) + conv(5, d, d) + conv(3, d, d);
    let body = match c.variant {
        Variant::Vanilla => stack(d, c, Ffn::Dense) + gru(d, c.rnn_hidden),
        Variant::Gait => stack(d, c, Ffn::Conv) + gru(d, c.rnn_hidden),
        Variant::VanillaTc => {
            stack(d, c, Ffn::Dense) + gru(d, c.rnn_hidden) + stack(t, c, Ffn::Dense) + linear(t, c.channel_branch_out)
        }
        Variant::That => stack(d, c, Ffn::MultiScale) + stack(t, c, Ffn::MultiScale) + linear(d, d) + linear(t, d),
    };
    let head = linear(2 * c.embedding_size(), HEAD_HIDDEN) + linear(HEAD_HIDDEN, 1);
    frontend + body + head
}

#[test]
fn parameter_counts_match_the_layer_arithmetic() {
    let golden = [
        (Variant::Vanilla, 163_969),
        (Variant::That, 1_821_193),
        (Variant::Gait, 229_505),
        (Variant::VanillaTc, 836_133),
    ];
    for (variant, count) in golden {
        let c = ModelConfig::new(variant);
        let model = SiameseModel::<f32>::new(c.clone()).unwrap();
        assert_eq!(model.num_parameters(), expected_parameters(&c), "{variant}");
        assert_eq!(model.num_parameters(), count, "{variant}");
        let r = ModelConfig::reduced(variant, 64);
        assert_eq!(SiameseModel::<f32>::new(r.clone()).unwrap().num_parameters(), expected_parameters(&r));
    }
}

#[test]
fn frontend_of_zero_input_with_zero_biases_is_zero() {
    let model = SiameseModel::<f64>::new(ModelConfig::new(Variant::Vanilla)).unwrap();
    let mut g = Graph::new(model.params(), Mode::Eval);
    let x = g.input(Tensor::zeros(&[2000, 23]));
    let (h, lengths) = model.net().frontend.forward(&mut g, x).unwrap();
    assert_eq!(lengths, vec![1000, 500, 250]);
    assert!(g.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn channel_branch_ignores_channel_order_without_range_encoding() {
    let mut model = SiameseModel::<f64>::new(ModelConfig::reduced(Variant::VanillaTc, 128).with_seed(4)).unwrap();
    let emb = model.params().find("channel.gre.emb").unwrap();
    let zeros = Tensor::zeros(model.params().value(emb).shape());
    model.params_mut().set_value(emb, zeros).unwrap();
    let (t, d) = (16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let perm = [3, 7, 0, 5, 1, 6, 2, 4];
    let permuted: Vec<f64> = (0..t).flat_map(|r| perm.iter().map(move |&c| (r, c))).map(|(r, c)| x[r * d + c]).collect();
    let out = |values: Vec<f64>| {
        let mut g = Graph::new(model.params(), Mode::Eval);
        let v = g.input(Tensor::new(&[t, d], values).unwrap());
        let e = model.net().channel_branch(&mut g, v).unwrap();
        g.value(e).data().to_vec()
    };
    let (a, b) = (out(x), out(permuted));
    assert_eq!(a.len(), 6);
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() <= 1e-6, "{a:?} vs {b:?}");
    }
}

#[test]
fn channel_branch_output_is_ninety_two_wide() {
    let model = SiameseModel::<f32>::new(ModelConfig::new(Variant::VanillaTc)).unwrap();
    let mut g = Graph::new(model.params(), Mode::Eval);
    let v = g.input(random_input(250, 64, 5));
    let e = model.net().channel_branch(&mut g, v).unwrap();
    assert_eq!(g.value(e).len(), 92);
}

#[test]
fn range_encoding_of_identical_ranges_is_that_vector() {
    let mut store = ParamStore::<f64>::new();
    let gre = GaussianRangeEncoding::new(&mut store, &mut Init::new(0), "gre", 40, 3, 5).unwrap();
    let u = [0.25, -1.5, 2.0];
    let emb: Vec<f64> = (0..5).flat_map(|_| u).collect();
    store.set_value(gre.emb, Tensor::new(&[5, 3], emb).unwrap()).unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let e = gre.encoding(&mut g).unwrap();
    for row in 0..40 {
        for (c, want) in u.iter().enumerate() {
            assert!((g.value(e).get(row, c) - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn symmetric_score_is_swap_invariant() {
    for variant in Variant::ALL {
        let model = SiameseModel::<f64>::new(ModelConfig::reduced(variant, 64).with_seed(9)).unwrap();
        let a = model.embed(random_input(64, 23, 1).cast(), 64).unwrap();
        let b = model.embed(random_input(64, 23, 2).cast(), 40).unwrap();
        let ab = model.symmetric_score_embeddings(&a, &b).unwrap();
        let ba = model.symmetric_score_embeddings(&b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-9);
    }
}

#[test]
fn encoder_stays_finite_for_zero_input_and_zero_parameters() {
    let mut model = SiameseModel::<f64>::new(ModelConfig::reduced(Variant::Vanilla, 64)).unwrap();
    for p in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v = 0.0;
        }
    }
    let e = model.embed(Tensor::zeros(&[64, 23]), 64).unwrap();
    assert!(e.is_finite());
}
