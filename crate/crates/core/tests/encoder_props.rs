//! Fusion and encoder properties over random inputs.

mod common;

use common::{rng, uniform};
use fastslow::data::{BOS, EOS};
use fastslow::encoders::{
    fuse_normalized, DualEncoder, DualEncoderConfig, ImageEncoder, ImageEncoderConfig,
};
use fastslow::params::ParamStore;
use fastslow::{Eval, Tensor};
use proptest::prelude::*;

fn encoder(seed: u64) -> (ImageEncoder, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = ImageEncoderConfig {
        raster: 16,
        widths: [3, 4, 5],
        width: 4,
        eps: 1e-4,
        fuse_blocks: 2,
    };
    let enc = ImageEncoder::init(&cfg, &mut store, "", &mut rng(seed)).unwrap();
    (enc, store)
}

fn set(store: &mut ParamStore, name: &str, value: f64) {
    let i = store.names().iter().position(|n| n == name).unwrap();
    store.tensors_mut()[i] = Tensor::scalar(value);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_second_weight_ignores_previous_map(seed in any::<u64>(), h in 1usize..5, d in 1usize..5, w1 in 0.01f64..5.0) {
        let mut r = rng(seed);
        let p_in = uniform(&mut r, &[h, h, d], 2.0);
        let a = uniform(&mut r, &[2 * h, 2 * h, d], 2.0);
        let b = uniform(&mut r, &[2 * h, 2 * h, d], 50.0);
        let mut e = Eval;
        let (w1, w2) = (Tensor::scalar(w1), Tensor::scalar(0.0));
        let x = fuse_normalized(&mut e, &p_in, &a, &w1, &w2, 1e-4).unwrap();
        let y = fuse_normalized(&mut e, &p_in, &b, &w1, &w2, 1e-4).unwrap();
        prop_assert_eq!(x.shape(), &[2 * h, 2 * h, d][..]);
        prop_assert_eq!(x.data(), y.data());
    }

    #[test]
    fn zero_second_weight_ignores_previous_map_through_sepconv(seed in any::<u64>()) {
        let (enc, mut store) = encoder(seed % 4);
        set(&mut store, "fuse0.w2", 0.0);
        let mut r = rng(seed);
        let p_in = uniform(&mut r, &[2, 2, 4], 1.0);
        let a = uniform(&mut r, &[4, 4, 4], 1.0);
        let b = uniform(&mut r, &[4, 4, 4], 1.0);
        let mut e = Eval;
        let p = store.bind(&mut e);
        let x = enc.fuse_block(&mut e, &p, 0, &p_in, &a).unwrap();
        let y = enc.fuse_block(&mut e, &p, 0, &p_in, &b).unwrap();
        prop_assert_eq!(x.data(), y.data());
    }

    #[test]
    fn weight_scale_cancels_without_eps(seed in any::<u64>(), w1 in 0.01f64..4.0, w2 in 0.01f64..4.0, k in -6i32..7, c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let p_in = uniform(&mut r, &[2, 2, 3], 1.0);
        let p_prev = uniform(&mut r, &[4, 4, 3], 1.0);
        let mut e = Eval;
        let fuse = |e: &mut Eval, s: f64| {
            fuse_normalized(e, &p_in, &p_prev, &Tensor::scalar(s * w1), &Tensor::scalar(s * w2), 0.0).unwrap()
        };
        let base = fuse(&mut e, 1.0);
        // Powers of two scale exactly.
        let pow2 = fuse(&mut e, 2f64.powi(k));
        prop_assert_eq!(base.data(), pow2.data());
        // Any other factor agrees up to a few rounding steps.
        let scaled = fuse(&mut e, c);
        for (x, y) in base.data().iter().zip(scaled.data()) {
            prop_assert!((x - y).abs() <= 8.0 * f64::EPSILON * x.abs().max(1.0));
        }
    }

    #[test]
    fn unit_weights_on_ones_and_zeros(h in 1usize..5, d in 1usize..4) {
        let mut e = Eval;
        let out = fuse_normalized(
            &mut e,
            &Tensor::ones(&[h, h, d]),
            &Tensor::zeros(&[2 * h, 2 * h, d]),
            &Tensor::scalar(1.0),
            &Tensor::scalar(1.0),
            1e-4,
        )
        .unwrap();
        let expect = 1.0 / (2.0 + 1e-4);
        prop_assert!(out.data().iter().all(|&v| v == expect));
    }

    #[test]
    fn each_block_doubles_resolution_and_encoding_is_deterministic(seed in any::<u64>()) {
        let (enc, store) = encoder(seed % 3);
        let img = uniform(&mut rng(seed), &[16, 16, 3], 1.0);
        let mut prev = None;
        for target in [2usize, 4, 8] {
            let (m, trace) = enc.encode_image_traced(&store, &img, target).unwrap();
            prop_assert_eq!(m.tensor.shape(), &[target, target, 4][..]);
            prop_assert_eq!(trace.fuse_calls, target.trailing_zeros() as usize - 1);
            let again = enc.encode_image(&store, &img, target).unwrap();
            prop_assert_eq!(m.tensor.data(), again.tensor.data());
            prop_assert!(m.tensor.data().iter().all(|v| v.is_finite()));
            if let Some(p) = prev { prop_assert!(target == 2 * p); }
            prev = Some(target);
        }
    }

    #[test]
    fn bag_of_words_ignores_token_order(seed in any::<u64>(), mut words in proptest::collection::vec(4u32..20, 1..8)) {
        let cfg = DualEncoderConfig { image: ImageEncoderConfig::default(), embed_dim: 6, vocab_size: 20 };
        let (de, store) = DualEncoder::init(&cfg, &mut rng(seed)).unwrap();
        let mut cap = vec![BOS];
        cap.extend(&words);
        cap.push(EOS);
        let a = de.embed_text(&store, &cap).unwrap();
        words.reverse();
        let n = words.len();
        words.rotate_left(seed as usize % n);
        let mut cap2 = vec![BOS];
        cap2.extend(&words);
        cap2.push(EOS);
        prop_assert_eq!(a, de.embed_text(&store, &cap2).unwrap());
    }
}

#[test]
fn image_text_score_equals_recomputed_dot_product() {
    let cfg = DualEncoderConfig {
        image: ImageEncoderConfig::default(),
        embed_dim: 8,
        vocab_size: 12,
    };
    let (de, store) = DualEncoder::init(&cfg, &mut rng(0)).unwrap();
    let img = uniform(&mut rng(1), &[32, 32, 3], 1.0);
    let f = de.embed_image(&store, &img).unwrap();
    let g = de.embed_text(&store, &[BOS, 5, 9, 4, EOS]).unwrap();
    assert_eq!(f.len(), g.len());
    let mut e = Eval;
    let p = store.bind(&mut e);
    let fv = de.embed_image_v(&mut e, &p, &img).unwrap();
    let gv = de.embed_text_v(&mut e, &p, &[BOS, 5, 9, 4, EOS]).unwrap();
    let s = fastslow::tensor::gemm(&fv, false, &gv, true)
        .unwrap()
        .item();
    let manual: f64 = f.iter().zip(&g).map(|(a, b)| a * b).sum();
    assert!((s - manual).abs() <= 1e-12);
}
