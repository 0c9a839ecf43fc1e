use crome_autodiff::Tensor;
use crome_core::config::{ModelConfig, QFormerConfig, ToyLmConfig};
use crome_core::nn::lm::{lm_specs, llm_forward};
use crome_core::nn::projection::ProjectionLayer;
use crome_core::nn::qformer::{qformer_forward, qformer_specs};
use crome_core::nn::vision::{encode_image, encode_layers, patchify, vision_specs};
use crome_core::params::ParamStore;
use crome_core::session::Session;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> ModelConfig {
    ModelConfig::toy()
}

fn small_qformer() -> QFormerConfig {
    QFormerConfig { n_queries: 3, hidden_dim: 8, n_layers: 3, n_heads: 2, cross_attn_every: 2, max_instruction_len: 5, mlp_ratio: 2 }
}

fn qformer_out(store: &ParamStore, cfg: &QFormerConfig, instr: &[usize], feats: &Tensor) -> Tensor {
    let mut s = Session::frozen(store);
    let f = s.graph.constant(feats.clone());
    let y = qformer_forward(&mut s, cfg, instr, f).unwrap();
    s.graph.value(y).clone()
}

#[test]
fn vision_encoder_emits_one_feature_per_patch() {
    let cfg = toy().vision;
    let store = ParamStore::from_specs(&vision_specs(&cfg), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Tensor::randn(&[16, 16, 3], 1.0, &mut rng);
    let f = encode_image(&store, &img, &cfg).unwrap();
    assert_eq!(f.shape(), &[16, cfg.embed_dim]);
    assert!(encode_image(&store, &Tensor::zeros(&[8, 8, 3]), &cfg).is_err());
}

#[test]
fn zero_image_embeds_to_positions() {
    let cfg = toy().vision;
    let store = ParamStore::from_specs(&vision_specs(&cfg), 2).unwrap();
    let mut s = Session::frozen(&store);
    let layers = encode_layers(&mut s, &Tensor::zeros(&[16, 16, 3]), &cfg).unwrap();
    assert_eq!(s.graph.value(layers[0]).data(), store.require("vision.pos_embed").unwrap().data());
}

#[test]
fn features_come_from_the_penultimate_layer() {
    let cfg = toy().vision;
    let store = ParamStore::from_specs(&vision_specs(&cfg), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Tensor::randn(&[16, 16, 3], 1.0, &mut rng);
    let mut s = Session::frozen(&store);
    let layers = encode_layers(&mut s, &img, &cfg).unwrap();
    assert_eq!(layers.len(), cfg.n_layers + 1);
    let feats = encode_image(&store, &img, &cfg).unwrap();
    assert_eq!(feats.data(), s.graph.value(layers[cfg.n_layers - 1]).data());
    assert_ne!(feats.data(), s.graph.value(layers[cfg.n_layers]).data());
}

#[test]
fn patchify_orders_patches_row_major() {
    let mut cfg = toy().vision;
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.channels = 1;
    let img = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn cross_attention_every_other_block() {
    let cfg = toy().qformer;
    let names: Vec<String> = qformer_specs(&cfg, 10, 32).into_iter().map(|s| s.name).collect();
    for i in 0..cfg.n_layers {
        let has = names.iter().any(|n| n.starts_with(&format!("qformer.block{i}.cross.")));
        assert_eq!(has, i % 2 == 0, "block {i}");
    }
}

#[test]
fn qformer_ignores_image_when_cross_values_are_zero() {
    let cfg = small_qformer();
    let mut store = ParamStore::from_specs(&qformer_specs(&cfg, 9, 6), 4).unwrap();
    for i in 0..cfg.n_layers {
        if let Some(v) = store.get_mut(&format!("qformer.block{i}.cross.v_proj")) {
            *v = Tensor::zeros(v.shape());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::randn(&[7, 6], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 6], 5.0, &mut rng);
    assert_eq!(qformer_out(&store, &cfg, &[1, 2], &a).data(), qformer_out(&store, &cfg, &[1, 2], &b).data());
}

#[test]
fn qformer_rejects_bad_inputs() {
    let cfg = small_qformer();
    let store = ParamStore::from_specs(&qformer_specs(&cfg, 9, 6), 4).unwrap();
    let mut s = Session::frozen(&store);
    let f = s.graph.constant(Tensor::zeros(&[3, 6]));
    assert!(qformer_forward(&mut s, &cfg, &[0; 6], f).is_err());
    let empty = s.graph.constant(Tensor::zeros(&[0, 6]));
    assert!(qformer_forward(&mut s, &cfg, &[0], empty).is_err());
}

fn lm_cfg() -> ToyLmConfig {
    ToyLmConfig { vocab_size: 11, embed_dim: 8, n_layers: 2, n_heads: 2, max_seq_len: 10, mlp_ratio: 2 }
}

fn lm_logits(store: &ParamStore, cfg: &ToyLmConfig, x: &Tensor) -> crome_core::Result<Tensor> {
    let mut s = Session::frozen(store);
    let e = s.graph.constant(x.clone());
    let y = llm_forward(&mut s, cfg, e)?;
    Ok(s.graph.value(y).clone())
}

#[test]
fn lm_is_causal() {
    let cfg = lm_cfg();
    let store = ParamStore::from_specs(&lm_specs(&cfg), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[7, 8], 1.0, &mut rng);
    let mut y = x.clone();
    for v in &mut y.data_mut()[4 * 8..] {
        *v += 1.0;
    }
    let (a, b) = (lm_logits(&store, &cfg, &x).unwrap(), lm_logits(&store, &cfg, &y).unwrap());
    assert_eq!(a.shape(), &[7, 11]);
    assert_eq!(&a.data()[..4 * 11], &b.data()[..4 * 11]);
    assert_ne!(&a.data()[4 * 11..], &b.data()[4 * 11..]);
}

#[test]
fn lm_single_token_and_length_limit() {
    let cfg = lm_cfg();
    let store = ParamStore::from_specs(&lm_specs(&cfg), 6).unwrap();
    let one = lm_logits(&store, &cfg, &Tensor::filled(&[1, 8], 0.3)).unwrap();
    assert_eq!(one.shape(), &[1, 11]);
    assert!(one.all_finite());
    assert!(lm_logits(&store, &cfg, &Tensor::zeros(&[11, 8])).is_err());
}

#[test]
fn projections() {
    let cfg = toy();
    let p = ProjectionLayer::text(&cfg);
    assert_eq!((p.in_dim, p.out_dim), (cfg.qformer.hidden_dim, cfg.d_llm()));
    assert_eq!(p.param_count(), 32 * 64);
    assert_eq!(ProjectionLayer::image(&cfg).in_dim, cfg.vision.embed_dim);

    let eye = ProjectionLayer { name: "proj.txt", in_dim: 4, out_dim: 4 };
    let mut store = ParamStore::new();
    store.insert("proj.txt", Tensor::eye(4));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let mut s = Session::frozen(&store);
    let xv = s.graph.constant(x.clone());
    let y = eye.apply(&mut s, xv).unwrap();
    assert_eq!(s.graph.value(y).data(), x.data());
    drop(s);

    store.insert("proj.txt", Tensor::zeros(&[4, 4]));
    let mut s = Session::frozen(&store);
    let xv = s.graph.constant(x);
    let y = eye.apply(&mut s, xv).unwrap();
    assert!(s.graph.value(y).data().iter().all(|v| *v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn qformer_shape_and_patch_order_invariance(seed in 0u64..500, n_feats in 1usize..9, instr_len in 0usize..6) {
        let cfg = small_qformer();
        let store = ParamStore::from_specs(&qformer_specs(&cfg, 9, 6), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = Tensor::randn(&[n_feats, 6], 1.0, &mut rng);
        let instr: Vec<usize> = (0..instr_len).map(|i| (i * 7 + seed as usize) % 9).collect();
        let a = qformer_out(&store, &cfg, &instr, &feats);
        prop_assert_eq!(a.shape(), &[3, 8]);

        let mut order: Vec<usize> = (0..n_feats).collect();
        order.shuffle(&mut rng);
        let rows: Vec<&[f64]> = order.iter().map(|&i| feats.row(i)).collect();
        let b = qformer_out(&store, &cfg, &instr, &Tensor::from_rows(&rows));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }
}
