#![allow(dead_code)]

pub mod grads;

use fastslow::encoders::{DualEncoderConfig, ImageEncoderConfig};
use fastslow::slow::{DecoderConfig, SlowConfig};
use fastslow::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// 8×8 raster, one fusion block, feature width 2.
pub fn toy_image() -> ImageEncoderConfig {
    ImageEncoderConfig {
        raster: 8,
        widths: [1, 2, 2],
        width: 2,
        eps: 1e-4,
        fuse_blocks: 1,
    }
}

/// Slow model with fewer than 500 parameters.
pub fn toy_slow(vocab: usize) -> SlowConfig {
    SlowConfig {
        image: toy_image(),
        resolution: 2,
        decoder: DecoderConfig {
            vocab_size: vocab,
            width: 2,
            heads: 2,
            layers: 1,
            max_len: 4,
        },
        share_embeddings: false,
    }
}

pub fn toy_dual(vocab: usize) -> DualEncoderConfig {
    DualEncoderConfig {
        image: ImageEncoderConfig {
            fuse_blocks: 0,
            ..toy_image()
        },
        embed_dim: 3,
        vocab_size: vocab,
    }
}

/// Parameters shifted by small uniform noise, which moves zero-initialized
/// biases off ReLU kinks.
pub fn jitter(params: &[Tensor], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    params
        .iter()
        .map(|t| {
            let n = uniform(rng, t.shape(), 0.05);
            fastslow::tensor::add(t, &n).unwrap()
        })
        .collect()
}

/// A small corpus with untrained fast and slow models over its test split.
pub struct World {
    pub data: fastslow::data::Dataset,
    pub slow: fastslow::slow::SlowModel,
    pub slow_store: fastslow::params::ParamStore,
    pub fast: fastslow::encoders::DualEncoder,
    pub fast_store: fastslow::params::ParamStore,
    pub emb: fastslow::fast::Embeddings,
}

pub fn world(test_scenes: usize, seed: u64) -> World {
    use fastslow::data::{generate_dataset, DataConfig, Split};
    let cfg = DataConfig {
        train_scenes: 10,
        val_scenes: 5,
        test_scenes,
        raster: 16,
        ..DataConfig::default()
    };
    let data = generate_dataset(&cfg, seed).unwrap();
    let v = data.vocab.len();
    let image = ImageEncoderConfig {
        raster: 16,
        widths: [4, 6, 8],
        width: 8,
        eps: 1e-4,
        fuse_blocks: 1,
    };
    let slow_cfg = SlowConfig {
        image: image.clone(),
        resolution: 4,
        decoder: DecoderConfig {
            vocab_size: v,
            width: 8,
            heads: 2,
            layers: 1,
            max_len: DataConfig::caption_len(cfg.max_objects) + 1,
        },
        share_embeddings: false,
    };
    let (slow, slow_store) = fastslow::slow::SlowModel::init(&slow_cfg, seed).unwrap();
    let fast_cfg = DualEncoderConfig {
        image: ImageEncoderConfig {
            fuse_blocks: 0,
            ..image
        },
        embed_dim: 8,
        vocab_size: v,
    };
    let (fast, fast_store) = fastslow::fast::init_fast(&fast_cfg, seed).unwrap();
    let emb = fastslow::fast::embed_corpus(&fast, &fast_store, &data, Split::Test).unwrap();
    World {
        data,
        slow,
        slow_store,
        fast,
        fast_store,
        emb,
    }
}

/// Run configuration small enough to script every subcommand in seconds.
pub const TINY_RUN: &str = r#"
[run]
record_timings = false

[data]
train_scenes = 40
val_scenes = 10
test_scenes = 20
raster = 16

[slow]
resolution = 4
width = 8
heads = 2
layers = 1

[slow.image]
raster = 16
widths = [4, 6, 8]
width = 8
fuse_blocks = 1

[slow.train]
steps = 6
batch_size = 4

[fast]
embed_dim = 8

[fast.image]
raster = 16
widths = [4, 6, 8]
width = 8
fuse_blocks = 0

[fast.train]
steps = 6
batch_size = 4

[distill]
block_size = 10

[pipeline]
k = 5

[eval]
curve_ks = [1, 5, 20]
curve_betas = [0.0, 1.0]
bench_ks = [1, 5]
bench_queries = 2
bench_warmup = 0
bench_exhaustive_queries = 1
"#;
