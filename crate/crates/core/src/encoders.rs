//! Convolutional image encoder with gradual upsampling by normalized fusion,
//! and the dual-encoder heads f (image) and g (bag-of-words text).
//!
//! Backbone: three stride-2 3×3 convolutions take the `G'×G'×3` render to
//! maps at G'/2, G'/4 and G'/8. Each level gets a 1×1 lateral projection to
//! width `d`. A fusion block upsamples the current map 2× (nearest
//! neighbour), blends it with the next-higher-resolution lateral using
//! rectified weights normalized by `w1 + w2 + eps`, and applies a separable
//! convolution (depthwise 3×3, pointwise 1×1, normalization, ReLU).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eval};
use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    pub raster: usize,
    /// Backbone widths d1 < d2 < d3.
    pub widths: [usize; 3],
    /// Feature width `d` after lateral projection.
    pub width: usize,
    /// Fusion epsilon.
    pub eps: f64,
    /// Number of fusion blocks built (0, 1 or 2).
    pub fuse_blocks: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            raster: 32,
            widths: [16, 32, 64],
            width: 64,
            eps: 1e-4,
            fuse_blocks: 2,
        }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.raster.is_multiple_of(8) || self.raster < 8 {
            return Err(Error::Config(format!(
                "raster {} must be a positive multiple of 8",
                self.raster
            )));
        }
        if self.fuse_blocks > 2 {
            return Err(Error::Config("at most 2 fusion blocks".into()));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config("fusion eps must be non-negative".into()));
        }
        Ok(())
    }

    /// Side length of the deepest backbone map.
    pub fn deepest(&self) -> usize {
        self.raster / 8
    }

    /// Resolutions reachable with the built fusion blocks, deepest first.
    pub fn reachable(&self) -> Vec<usize> {
        (0..=self.fuse_blocks)
            .map(|j| self.deepest() << j)
            .collect()
    }
}

/// A spatial feature map `[H, H, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub resolution: usize,
}

impl FeatureMap {
    pub fn width(&self) -> usize {
        self.tensor.cols()
    }

    /// `[H·H, d]` view: one row per spatial position.
    pub fn flattened(&self) -> Tensor {
        let d = self.width();
        crate::tensor::reshape(&self.tensor, &[self.resolution * self.resolution, d])
            .expect("square map")
    }
}

#[derive(Debug, Clone)]
struct FuseIds {
    w1: ParamId,
    w2: ParamId,
    dw: ParamId,
    pw: ParamId,
    pb: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Parameter layout of the image encoder inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    conv: [(ParamId, ParamId); 3],
    lateral: Vec<(ParamId, ParamId)>,
    fuse: Vec<FuseIds>,
}

/// Counts of structural work done by one encode call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeTrace {
    pub fuse_calls: usize,
}

impl ImageEncoder {
    pub fn init<R: Rng>(
        cfg: &ImageEncoderConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut cin = 3;
        let mut conv = Vec::new();
        for (i, &cout) in cfg.widths.iter().enumerate() {
            let w = store.add(
                format!("{prefix}conv{}.w", i + 1),
                glorot(rng, &[9 * cin, cout], 9 * cin, cout),
            );
            let b = store.add(format!("{prefix}conv{}.b", i + 1), Tensor::zeros(&[cout]));
            conv.push((w, b));
            cin = cout;
        }
        let d = cfg.width;
        // laterals for the deepest level first, then one per fusion block
        let mut lateral = Vec::new();
        for level in (0..3).rev().take(cfg.fuse_blocks + 1) {
            let c = cfg.widths[level];
            let w = store.add(
                format!("{prefix}lat{}.w", level + 1),
                glorot(rng, &[c, d], c, d),
            );
            let b = store.add(format!("{prefix}lat{}.b", level + 1), Tensor::zeros(&[d]));
            lateral.push((w, b));
        }
        let mut fuse = Vec::new();
        for j in 0..cfg.fuse_blocks {
            let p = |n: &str| format!("{prefix}fuse{j}.{n}");
            fuse.push(FuseIds {
                w1: store.add(p("w1"), Tensor::scalar(1.0)),
                w2: store.add(p("w2"), Tensor::scalar(1.0)),
                dw: store.add(p("dw"), glorot(rng, &[3, 3, d], 9, 9)),
                pw: store.add(p("pw"), glorot(rng, &[d, d], d, d)),
                pb: store.add(p("pb"), Tensor::zeros(&[d])),
                gamma: store.add(p("gamma"), Tensor::ones(&[d])),
                beta: store.add(p("beta"), Tensor::zeros(&[d])),
            });
        }
        Ok(ImageEncoder {
            cfg: cfg.clone(),
            conv: [conv[0], conv[1], conv[2]],
            lateral,
            fuse,
        })
    }

    /// Backbone maps at G'/2, G'/4, G'/8 (`[H, H, widths[i]]`).
    pub fn backbone<B: Backend>(&self, b: &mut B, p: &[B::V], render: &B::V) -> Result<[B::V; 3]> {
        let mut x = render.clone();
        let mut out = Vec::with_capacity(3);
        for &(w, bias) in &self.conv {
            let h = b.value(&x).shape()[0];
            let cols = b.im2col(&x, 3, 2, 1)?;
            let y = b.linear(&cols, &p[w.0], &p[bias.0])?;
            let y = b.relu(&y)?;
            let c = b.value(&y).cols();
            x = b.reshape(&y, &[h / 2, h / 2, c])?;
            out.push(x.clone());
        }
        Ok([out[0].clone(), out[1].clone(), out[2].clone()])
    }

    fn project<B: Backend>(&self, b: &mut B, p: &[B::V], map: &B::V, lat: usize) -> Result<B::V> {
        let s = b.value(map).shape().to_vec();
        let flat = b.reshape(map, &[s[0] * s[1], s[2]])?;
        let (w, bias) = self.lateral[lat];
        let y = b.linear(&flat, &p[w.0], &p[bias.0])?;
        b.reshape(&y, &[s[0], s[1], self.cfg.width])
    }

    /// φ(x) at `target` resolution; `target == deepest()` applies no fusion.
    pub fn encode<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::V],
        render: &B::V,
        target: usize,
    ) -> Result<(B::V, EncodeTrace)> {
        let reachable = self.cfg.reachable();
        let Some(blocks) = reachable.iter().position(|&r| r == target) else {
            return Err(Error::invalid(
                "encode_image",
                format!("resolution {target} unreachable; reachable: {reachable:?}"),
            ));
        };
        let maps = self.backbone(b, p, render)?;
        let mut cur = self.project(b, p, &maps[2], 0)?;
        let mut trace = EncodeTrace::default();
        for j in 0..blocks {
            let prev = self.project(b, p, &maps[1 - j], j + 1)?;
            cur = self.fuse_block(b, p, j, &cur, &prev)?;
            trace.fuse_calls += 1;
        }
        Ok((cur, trace))
    }

    /// Deepest projected map (no fusion), pooled and unpooled callers share it.
    pub fn deepest_map<B: Backend>(&self, b: &mut B, p: &[B::V], render: &B::V) -> Result<B::V> {
        Ok(self.encode(b, p, render, self.cfg.deepest())?.0)
    }

    /// Full fusion block `j`: normalized fusion followed by SepConv.
    pub fn fuse_block<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::V],
        j: usize,
        p_in: &B::V,
        p_prev: &B::V,
    ) -> Result<B::V> {
        let ids = &self.fuse[j];
        let fused = fuse_normalized(b, p_in, p_prev, &p[ids.w1.0], &p[ids.w2.0], self.cfg.eps)?;
        self.sep_conv(b, p, ids, &fused)
    }

    fn sep_conv<B: Backend>(&self, b: &mut B, p: &[B::V], ids: &FuseIds, x: &B::V) -> Result<B::V> {
        let s = b.value(x).shape().to_vec();
        let y = b.depthwise_conv(x, &p[ids.dw.0])?;
        let y = b.reshape(&y, &[s[0] * s[1], s[2]])?;
        let y = b.linear(&y, &p[ids.pw.0], &p[ids.pb.0])?;
        let y = b.layer_norm(&y, NORM_EPS)?;
        let y = b.mul_row(&y, &p[ids.gamma.0])?;
        let y = b.add_row(&y, &p[ids.beta.0])?;
        let y = b.relu(&y)?;
        b.reshape(&y, &s)
    }

    /// Tape-free φ(x).
    pub fn encode_image(
        &self,
        store: &ParamStore,
        render: &Tensor,
        target: usize,
    ) -> Result<FeatureMap> {
        Ok(self.encode_image_traced(store, render, target)?.0)
    }

    pub fn encode_image_traced(
        &self,
        store: &ParamStore,
        render: &Tensor,
        target: usize,
    ) -> Result<(FeatureMap, EncodeTrace)> {
        let mut e = Eval;
        let p = store.bind(&mut e);
        let (t, trace) = self.encode(&mut e, &p, render, target)?;
        Ok((
            FeatureMap {
                tensor: t,
                resolution: target,
            },
            trace,
        ))
    }
}

/// `(relu(w1)·Resize(p_in) + relu(w2)·p_prev) / (relu(w1) + relu(w2) + eps)`,
/// the fused map before SepConv. `p_prev` must be exactly twice the
/// resolution of `p_in`.
pub fn fuse_normalized<B: Backend>(
    b: &mut B,
    p_in: &B::V,
    p_prev: &B::V,
    w1: &B::V,
    w2: &B::V,
    eps: f64,
) -> Result<B::V> {
    let (si, sp) = (
        b.value(p_in).shape().to_vec(),
        b.value(p_prev).shape().to_vec(),
    );
    if si.len() != 3 || sp.len() != 3 || sp[0] != 2 * si[0] || sp[1] != 2 * si[1] || sp[2] != si[2]
    {
        return Err(Error::Shape {
            op: "fuse",
            lhs: si,
            rhs: sp,
        });
    }
    let r1 = b.relu(w1)?;
    let r2 = b.relu(w2)?;
    let up = b.upsample2x(p_in)?;
    let a = b.mul_scalar(&up, &r1)?;
    let c = b.mul_scalar(p_prev, &r2)?;
    let num = b.add(&a, &c)?;
    let den = b.add(&r1, &r2)?;
    let den = b.add_scalar(&den, eps)?;
    if b.value(&den).item() == 0.0 {
        return Err(Error::invalid(
            "fuse",
            "fusion weights rectify to zero and eps is 0; normalizer would divide by zero",
        ));
    }
    let inv = b.recip(&den)?;
    b.mul_scalar(&num, &inv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualEncoderConfig {
    pub image: ImageEncoderConfig,
    /// Embedding dimension e shared by f and g.
    pub embed_dim: usize,
    pub vocab_size: usize,
}

/// The Fast model: f(x) = linear(GAP(deepest map)), g(y) = mean of word rows.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub cfg: DualEncoderConfig,
    pub image: ImageEncoder,
    head_w: ParamId,
    head_b: ParamId,
    table: ParamId,
}

impl DualEncoder {
    pub fn init<R: Rng>(cfg: &DualEncoderConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let img_cfg = ImageEncoderConfig {
            fuse_blocks: 0,
            ..cfg.image.clone()
        };
        let image = ImageEncoder::init(&img_cfg, &mut store, "img.", rng)?;
        let (d, e) = (img_cfg.width, cfg.embed_dim);
        let head_w = store.add("head.w", glorot(rng, &[d, e], d, e));
        let head_b = store.add("head.b", Tensor::zeros(&[e]));
        let table = store.add(
            "text.table",
            glorot(rng, &[cfg.vocab_size, e], cfg.vocab_size, e),
        );
        Ok((
            DualEncoder {
                cfg: cfg.clone(),
                image,
                head_w,
                head_b,
                table,
            },
            store,
        ))
    }

    /// f(x) as a `[1, e]` row.
    pub fn embed_image_v<B: Backend>(&self, b: &mut B, p: &[B::V], render: &B::V) -> Result<B::V> {
        let map = self.image.deepest_map(b, p, render)?;
        let s = b.value(&map).shape().to_vec();
        let flat = b.reshape(&map, &[s[0] * s[1], s[2]])?;
        let pooled = b.mean_rows(&flat)?;
        b.linear(&pooled, &p[self.head_w.0], &p[self.head_b.0])
    }

    /// g(y) as a `[1, e]` row.
    pub fn embed_text_v<B: Backend>(&self, b: &mut B, p: &[B::V], tokens: &[u32]) -> Result<B::V> {
        let content = content_ids(tokens)?;
        let rows = b.embedding(&p[self.table.0], &content)?;
        b.mean_rows(&rows)
    }

    pub fn embed_image(&self, store: &ParamStore, render: &Tensor) -> Result<Vec<f64>> {
        let mut e = Eval;
        let p = store.bind(&mut e);
        Ok(self.embed_image_v(&mut e, &p, render)?.into_vec())
    }

    pub fn embed_text(&self, store: &ParamStore, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut e = Eval;
        let p = store.bind(&mut e);
        Ok(self.embed_text_v(&mut e, &p, tokens)?.into_vec())
    }

    pub fn table<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.get(self.table)
    }
}

/// Content token ids in ascending order (drops BOS/EOS/PAD); errors when
/// nothing remains.
pub fn content_ids(tokens: &[u32]) -> Result<Vec<usize>> {
    let mut c: Vec<usize> = tokens
        .iter()
        .filter(|&&t| t != BOS && t != EOS && t != PAD)
        .map(|&t| t as usize)
        .collect();
    if c.is_empty() {
        return Err(Error::Data("caption has no content tokens".into()));
    }
    c.sort_unstable();
    Ok(c)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eval;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, h: usize, d: usize) -> Tensor {
        Tensor::new(
            &[h, h, d],
            (0..h * h * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn closed_form_unit_weights() {
        let mut e = Eval;
        let p_in = Tensor::ones(&[2, 2, 3]);
        let p_prev = Tensor::zeros(&[4, 4, 3]);
        let out = fuse_normalized(
            &mut e,
            &p_in,
            &p_prev,
            &Tensor::scalar(1.0),
            &Tensor::scalar(1.0),
            1e-4,
        )
        .unwrap();
        assert_eq!(out.shape(), &[4, 4, 3]);
        let expect = 1.0 / (2.0 + 1e-4);
        assert!(out.data().iter().all(|&v| v == expect));
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let mut e = Eval;
        let r = fuse_normalized(
            &mut e,
            &Tensor::ones(&[2, 2, 3]),
            &Tensor::ones(&[2, 2, 3]),
            &Tensor::scalar(1.0),
            &Tensor::scalar(1.0),
            1e-4,
        );
        assert!(matches!(r, Err(Error::Shape { op: "fuse", .. })));
    }

    #[test]
    fn zero_weights_with_zero_eps_guarded() {
        let mut e = Eval;
        let r = fuse_normalized(
            &mut e,
            &Tensor::ones(&[2, 2, 3]),
            &Tensor::ones(&[4, 4, 3]),
            &Tensor::scalar(-1.0),
            &Tensor::scalar(0.0),
            0.0,
        );
        assert!(matches!(r, Err(Error::Invalid { op: "fuse", .. })));
    }

    #[test]
    fn negative_weights_rectify() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut e = Eval;
        let (a, b) = (rand_map(&mut rng, 2, 4), rand_map(&mut rng, 4, 4));
        let neg = fuse_normalized(
            &mut e,
            &a,
            &b,
            &Tensor::scalar(-3.0),
            &Tensor::scalar(1.0),
            1e-4,
        )
        .unwrap();
        let zero = fuse_normalized(
            &mut e,
            &a,
            &b,
            &Tensor::scalar(0.0),
            &Tensor::scalar(1.0),
            1e-4,
        )
        .unwrap();
        assert_eq!(neg, zero);
    }

    #[test]
    fn encode_resolutions_and_call_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc =
            ImageEncoder::init(&ImageEncoderConfig::default(), &mut store, "", &mut rng).unwrap();
        let img = rand_map(&mut rng, 32, 3);
        let (deep, t0) = enc.encode_image_traced(&store, &img, 4).unwrap();
        assert_eq!(t0.fuse_calls, 0);
        assert_eq!(deep.tensor.shape(), &[4, 4, 64]);
        let (mid, t1) = enc.encode_image_traced(&store, &img, 8).unwrap();
        assert_eq!(t1.fuse_calls, 1);
        assert_eq!(mid.flattened().shape(), &[64, 64]);
        let (_, t2) = enc.encode_image_traced(&store, &img, 16).unwrap();
        assert_eq!(t2.fuse_calls, 2);
        let err = enc.encode_image(&store, &img, 32).unwrap_err().to_string();
        assert!(err.contains("[4, 8, 16]"), "{err}");
    }

    #[test]
    fn deepest_target_equals_projected_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc =
            ImageEncoder::init(&ImageEncoderConfig::default(), &mut store, "", &mut rng).unwrap();
        let img = rand_map(&mut rng, 32, 3);
        let mut e = Eval;
        let p = store.bind(&mut e);
        let maps = enc.backbone(&mut e, &p, &img).unwrap();
        let direct = enc.project(&mut e, &p, &maps[2], 0).unwrap();
        assert_eq!(enc.encode_image(&store, &img, 4).unwrap().tensor, direct);
    }

    #[test]
    fn bag_of_words_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DualEncoderConfig {
            image: ImageEncoderConfig::default(),
            embed_dim: 16,
            vocab_size: 20,
        };
        let (de, store) = DualEncoder::init(&cfg, &mut rng).unwrap();
        let rep = de.embed_text(&store, &[BOS, 7, 7, 7, EOS]).unwrap();
        for (x, y) in rep.iter().zip(de.table(&store).row(7)) {
            assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
        let a = de.embed_text(&store, &[BOS, 5, 9, 11, EOS]).unwrap();
        let b = de.embed_text(&store, &[BOS, 11, 5, 9, EOS]).unwrap();
        assert_eq!(a, b);
        assert!(de.embed_text(&store, &[BOS, EOS]).is_err());
        assert_eq!(
            de.embed_image(&store, &rand_map(&mut rng, 32, 3))
                .unwrap()
                .len(),
            16
        );
    }
}
