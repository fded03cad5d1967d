//! The Slow scorer: bidirectional caption log-likelihood under two
//! transformer decoders that cross-attend to the flattened feature map.
//!
//! h(x, y) = h_fwd(x, y) + h_bwd(x, y). Each direction sums the
//! log-probabilities of the L content tokens and EOS, each conditioned on
//! BOS and the true prefix. The backward decoder reads the content tokens
//! in reverse order; BOS and EOS stay in place.
//!
//! Blocks are pre-norm: masked self-attention, cross-attention over the
//! visual memory, then a GELU feed-forward of width `4·dm`, each wrapped in
//! a residual connection.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eval, Tape, Var};
use crate::data::{Dataset, Split, BOS, EOS};
use crate::encoders::{FeatureMap, ImageEncoder, ImageEncoderConfig};
use crate::error::{Error, Result};
use crate::optim::{check_loss, Adam, TrainConfig, TrainLog};
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::{self, causal_mask, Tensor};
use crate::train::EpochSampler;

const LN_EPS: f64 = 1e-5;
/// Fill value for masked attention scores; its exponential underflows to 0.
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    /// Model width dm.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Longest decoder input (BOS plus content tokens).
    pub max_len: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.layers == 0 || self.max_len == 0 || self.vocab_size < 4 {
            return Err(Error::Config(
                "decoder needs layers, max_len and a vocabulary".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowConfig {
    pub image: ImageEncoderConfig,
    /// Side of φ(x) the decoders attend over.
    pub resolution: usize,
    pub decoder: DecoderConfig,
    /// Backward decoder reuses the forward token table.
    pub share_embeddings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            w: store.add(
                format!("{name}.w"),
                glorot(rng, &[fan_in, fan_out], fan_in, fan_out),
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    fn apply<B: Backend>(&self, b: &mut B, p: &[B::V], x: &B::V) -> Result<B::V> {
        b.linear(x, &p[self.w.0], &p[self.b.0])
    }
}

#[derive(Debug, Clone)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            g: store.add(format!("{name}.g"), Tensor::ones(&[d])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    fn apply<B: Backend>(&self, b: &mut B, p: &[B::V], x: &B::V) -> Result<B::V> {
        let y = b.layer_norm(x, LN_EPS)?;
        let y = b.mul_row(&y, &p[self.g.0])?;
        b.add_row(&y, &p[self.b.0])
    }
}

#[derive(Debug, Clone)]
struct Layer {
    ln_self: Norm,
    q_self: Linear,
    k_self: Linear,
    v_self: Linear,
    o_self: Linear,
    ln_cross: Norm,
    q_cross: Linear,
    k_cross: Linear,
    v_cross: Linear,
    o_cross: Linear,
    ln_ff: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// One decoder's parameter layout.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    tok: ParamId,
    pos: ParamId,
    vis_proj: Linear,
    vis_pos: ParamId,
    layers: Vec<Layer>,
    ln_out: Norm,
    out: Linear,
}

/// Cross-attention keys and values for one item, per layer.
#[derive(Debug, Clone)]
pub struct VisualKv<V> {
    pub layers: Vec<(V, V)>,
}

/// Cross-attention of one head: pre-softmax scores and weights, `[T, H·H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub scores: Tensor,
    pub weights: Tensor,
}

/// Cross-attention maps for every layer and head, plus the head flagged for
/// display at each (layer, token): the one with the highest mean
/// pre-softmax score over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<HeadMaps>>,
    pub flagged: Vec<Vec<usize>>,
}

impl Decoder {
    fn init<R: Rng>(
        cfg: &DecoderConfig,
        feature_width: usize,
        visual_positions: usize,
        store: &mut ParamStore,
        prefix: &str,
        shared_tok: Option<ParamId>,
        rng: &mut R,
    ) -> Self {
        let (d, v) = (cfg.width, cfg.vocab_size);
        let tok = shared_tok
            .unwrap_or_else(|| store.add(format!("{prefix}tok"), glorot(rng, &[v, d], v, d)));
        let pos = store.add(
            format!("{prefix}pos"),
            glorot(rng, &[cfg.max_len, d], cfg.max_len, d),
        );
        let vis_proj = Linear::init(store, &format!("{prefix}vis_proj"), feature_width, d, rng);
        let vis_pos = store.add(
            format!("{prefix}vis_pos"),
            glorot(rng, &[visual_positions, d], visual_positions, d),
        );
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}l{l}.{s}");
                Layer {
                    ln_self: Norm::init(store, &n("ln_self"), d),
                    q_self: Linear::init(store, &n("q_self"), d, d, rng),
                    k_self: Linear::init(store, &n("k_self"), d, d, rng),
                    v_self: Linear::init(store, &n("v_self"), d, d, rng),
                    o_self: Linear::init(store, &n("o_self"), d, d, rng),
                    ln_cross: Norm::init(store, &n("ln_cross"), d),
                    q_cross: Linear::init(store, &n("q_cross"), d, d, rng),
                    k_cross: Linear::init(store, &n("k_cross"), d, d, rng),
                    v_cross: Linear::init(store, &n("v_cross"), d, d, rng),
                    o_cross: Linear::init(store, &n("o_cross"), d, d, rng),
                    ln_ff: Norm::init(store, &n("ln_ff"), d),
                    ff1: Linear::init(store, &n("ff1"), d, 4 * d, rng),
                    ff2: Linear::init(store, &n("ff2"), 4 * d, d, rng),
                }
            })
            .collect();
        Decoder {
            cfg: cfg.clone(),
            tok,
            pos,
            vis_proj,
            vis_pos,
            layers,
            ln_out: Norm::init(store, &format!("{prefix}ln_out"), d),
            out: Linear::init(store, &format!("{prefix}out"), d, v, rng),
        }
    }

    /// Projects flattened φ(x) (`[S, d]`) into per-layer cross-attention K, V.
    pub fn visual_kv<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::V],
        features: &B::V,
    ) -> Result<VisualKv<B::V>> {
        let s = b.value(features).rows();
        let vp = b.value(&p[self.vis_pos.0]).rows();
        if s != vp {
            return Err(Error::Shape {
                op: "visual_kv",
                lhs: b.value(features).shape().to_vec(),
                rhs: b.value(&p[self.vis_pos.0]).shape().to_vec(),
            });
        }
        let mem = self.vis_proj.apply(b, p, features)?;
        let mem = b.add(&mem, &p[self.vis_pos.0])?;
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((l.k_cross.apply(b, p, &mem)?, l.v_cross.apply(b, p, &mem)?)))
            .collect::<Result<_>>()?;
        Ok(VisualKv { layers })
    }

    /// Next-token logits `[T, V]` for input tokens `input` (BOS first).
    pub fn logits<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::V],
        kv: &VisualKv<B::V>,
        input: &[u32],
        record: Option<&mut Vec<Vec<HeadMaps>>>,
    ) -> Result<B::V> {
        self.logits_batch(b, p, &[kv], &[input], record)
    }

    /// Logits for `n` equal-length inputs, each attending to its own item,
    /// stacked as `[n·T, V]`. Attention maps are recorded for the first
    /// sequence only.
    pub fn logits_batch<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::V],
        kvs: &[&VisualKv<B::V>],
        inputs: &[&[u32]],
        mut record: Option<&mut Vec<Vec<HeadMaps>>>,
    ) -> Result<B::V> {
        let n = inputs.len();
        if n == 0 || kvs.len() != n {
            return Err(Error::invalid(
                "decoder_logits",
                format!("{n} sequences for {} items", kvs.len()),
            ));
        }
        let t = inputs[0].len();
        if inputs.iter().any(|s| s.len() != t) {
            return Err(Error::invalid(
                "decoder_logits",
                "batched sequences differ in length",
            ));
        }
        if t == 0 || t > self.cfg.max_len {
            return Err(Error::invalid(
                "decoder_logits",
                format!(
                    "sequence of {t} tokens exceeds max_len {}",
                    self.cfg.max_len
                ),
            ));
        }
        let ids: Vec<usize> = inputs
            .iter()
            .flat_map(|s| s.iter())
            .map(|&i| i as usize)
            .collect();
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::invalid(
                "decoder_logits",
                format!(
                    "token id {bad} out of vocabulary of {}",
                    self.cfg.vocab_size
                ),
            ));
        }
        let tok = b.embedding(&p[self.tok.0], &ids)?;
        let pos = b.slice_rows(&p[self.pos.0], 0, t)?;
        let pos = if n == 1 {
            pos
        } else {
            b.concat_rows(&vec![pos; n])?
        };
        let mut x = b.add(&tok, &pos)?;
        let mask = causal_mask(t);
        let heads = self.cfg.heads;
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.ln_self.apply(b, p, &x)?;
            let q = layer.q_self.apply(b, p, &h)?;
            let k = layer.k_self.apply(b, p, &h)?;
            let v = layer.v_self.apply(b, p, &h)?;
            let mut outs = Vec::with_capacity(n);
            for i in 0..n {
                let (qi, ki, vi) = (rows(b, &q, i, t)?, rows(b, &k, i, t)?, rows(b, &v, i, t)?);
                outs.push(attention(b, &qi, &ki, &vi, heads, Some(&mask), None)?);
            }
            let a = stack(b, outs)?;
            let a = layer.o_self.apply(b, p, &a)?;
            x = b.add(&x, &a)?;

            let h = layer.ln_cross.apply(b, p, &x)?;
            let q = layer.q_cross.apply(b, p, &h)?;
            let mut outs = Vec::with_capacity(n);
            for (i, kv) in kvs.iter().enumerate() {
                let maps = match (i, record.as_deref_mut()) {
                    (0, Some(r)) => {
                        r.push(Vec::new());
                        r.last_mut()
                    }
                    _ => None,
                };
                let (k_mem, v_mem) = &kv.layers[l];
                let qi = rows(b, &q, i, t)?;
                outs.push(attention(b, &qi, k_mem, v_mem, heads, None, maps)?);
            }
            let a = stack(b, outs)?;
            let a = layer.o_cross.apply(b, p, &a)?;
            x = b.add(&x, &a)?;

            let h = layer.ln_ff.apply(b, p, &x)?;
            let f = layer.ff1.apply(b, p, &h)?;
            let f = b.gelu(&f)?;
            let f = layer.ff2.apply(b, p, &f)?;
            x = b.add(&x, &f)?;
        }
        let h = self.ln_out.apply(b, p, &x)?;
        self.out.apply(b, p, &h)
    }

    /// Σ log p(target | prefix) over all positions of `tokens` after BOS.
    pub fn sequence_logprob<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::V],
        kv: &VisualKv<B::V>,
        tokens: &[u32],
    ) -> Result<B::V> {
        let picked = self.token_logprobs(b, p, &[kv], &[tokens])?;
        b.sum(&picked)
    }

    /// Per-position log-probabilities of the true next tokens for `n`
    /// equal-length captions, flattened sequence-major (`[n·(T-1)]`).
    pub fn token_logprobs<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::V],
        kvs: &[&VisualKv<B::V>],
        captions: &[&[u32]],
    ) -> Result<B::V> {
        for c in captions {
            check_caption(c)?;
        }
        let inputs: Vec<&[u32]> = captions.iter().map(|c| &c[..c.len() - 1]).collect();
        let logits = self.logits_batch(b, p, kvs, &inputs, None)?;
        let logp = b.log_softmax(&logits, 1)?;
        let targets: Vec<usize> = captions
            .iter()
            .flat_map(|c| c[1..].iter())
            .map(|&t| t as usize)
            .collect();
        b.pick(&logp, &targets)
    }
}

fn rows<B: Backend>(b: &mut B, x: &B::V, i: usize, t: usize) -> Result<B::V> {
    if b.value(x).rows() == t {
        return Ok(x.clone());
    }
    b.slice_rows(x, i * t, (i + 1) * t)
}

fn stack<B: Backend>(b: &mut B, mut parts: Vec<B::V>) -> Result<B::V> {
    if parts.len() == 1 {
        return Ok(parts.pop().unwrap());
    }
    b.concat_rows(&parts)
}

/// Multi-head scaled dot-product attention; `mask` marks entries to drop.
fn attention<B: Backend>(
    b: &mut B,
    q: &B::V,
    k: &B::V,
    v: &B::V,
    heads: usize,
    mask: Option<&[bool]>,
    mut record: Option<&mut Vec<HeadMaps>>,
) -> Result<B::V> {
    let dm = b.value(q).cols();
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = b.slice_cols(q, lo, hi)?;
        let kh = b.slice_cols(k, lo, hi)?;
        let vh = b.slice_cols(v, lo, hi)?;
        let s = b.matmul_t(&qh, &kh, true)?;
        let mut s = b.scale(&s, scale)?;
        if let Some(m) = mask {
            s = b.masked_fill(&s, m, MASKED)?;
        }
        let w = b.softmax(&s, 1)?;
        if let Some(r) = record.as_deref_mut() {
            r.push(HeadMaps {
                scores: b.value(&s).clone(),
                weights: b.value(&w).clone(),
            });
        }
        outs.push(b.matmul(&w, &vh)?);
    }
    if heads == 1 {
        return Ok(outs.pop().unwrap());
    }
    b.concat_cols(&outs)
}

fn check_caption(tokens: &[u32]) -> Result<()> {
    if tokens.len() < 2 || tokens[0] != BOS || *tokens.last().unwrap() != EOS {
        return Err(Error::invalid(
            "caption_score",
            "caption must start with BOS and end with EOS",
        ));
    }
    Ok(())
}

/// Reverses the content tokens, keeping BOS first and EOS last.
pub fn reverse_caption(tokens: &[u32]) -> Vec<u32> {
    let mut r = tokens.to_vec();
    if r.len() > 2 {
        let n = r.len();
        r[1..n - 1].reverse();
    }
    r
}

/// Visual encoder plus forward and backward decoders.
#[derive(Debug, Clone)]
pub struct SlowModel {
    pub cfg: SlowConfig,
    pub image: ImageEncoder,
    pub fwd: Decoder,
    pub bwd: Decoder,
}

/// Precomputed per-item state for repeated scoring: φ(x) and both
/// decoders' cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct ItemCache {
    pub features: FeatureMap,
    fwd: VisualKv<Tensor>,
    bwd: VisualKv<Tensor>,
}

impl SlowModel {
    pub fn init(cfg: &SlowConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.decoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let image = ImageEncoder::init(&cfg.image, &mut store, "img.", &mut rng)?;
        if !cfg.image.reachable().contains(&cfg.resolution) {
            return Err(Error::Config(format!(
                "slow resolution {} unreachable; reachable: {:?}",
                cfg.resolution,
                cfg.image.reachable()
            )));
        }
        let s = cfg.resolution * cfg.resolution;
        let fwd = Decoder::init(
            &cfg.decoder,
            cfg.image.width,
            s,
            &mut store,
            "fwd.",
            None,
            &mut rng,
        );
        let shared = cfg.share_embeddings.then_some(fwd.tok);
        let bwd = Decoder::init(
            &cfg.decoder,
            cfg.image.width,
            s,
            &mut store,
            "bwd.",
            shared,
            &mut rng,
        );
        Ok((
            SlowModel {
                cfg: cfg.clone(),
                image,
                fwd,
                bwd,
            },
            store,
        ))
    }

    pub fn decoder(&self, dir: Direction) -> &Decoder {
        match dir {
            Direction::Forward => &self.fwd,
            Direction::Backward => &self.bwd,
        }
    }

    pub fn encode(&self, store: &ParamStore, render: &Tensor) -> Result<FeatureMap> {
        self.image.encode_image(store, render, self.cfg.resolution)
    }

    /// Loss-side score on a tape: h(x, y) from the render.
    pub fn score_v<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::V],
        render: &B::V,
        tokens: &[u32],
    ) -> Result<B::V> {
        let (phi, _) = self.image.encode(b, p, render, self.cfg.resolution)?;
        let s = self.cfg.resolution * self.cfg.resolution;
        let flat = b.reshape(&phi, &[s, self.cfg.image.width])?;
        let kf = self.fwd.visual_kv(b, p, &flat)?;
        let kb = self.bwd.visual_kv(b, p, &flat)?;
        let hf = self.fwd.sequence_logprob(b, p, &kf, tokens)?;
        let hb = self
            .bwd
            .sequence_logprob(b, p, &kb, &reverse_caption(tokens))?;
        b.add(&hf, &hb)
    }

    /// Σ h(x_i, y_i) over a batch of (render, caption) pairs. Captions of
    /// equal length share one decoder pass.
    pub fn total_score_v<B: Backend>(
        &self,
        b: &mut B,
        p: &[B::V],
        renders: &[B::V],
        captions: &[&[u32]],
    ) -> Result<B::V> {
        let s = self.cfg.resolution * self.cfg.resolution;
        let mut kf = Vec::with_capacity(renders.len());
        let mut kb = Vec::with_capacity(renders.len());
        for r in renders {
            let (phi, _) = self.image.encode(b, p, r, self.cfg.resolution)?;
            let flat = b.reshape(&phi, &[s, self.cfg.image.width])?;
            kf.push(self.fwd.visual_kv(b, p, &flat)?);
            kb.push(self.bwd.visual_kv(b, p, &flat)?);
        }
        let mut lengths: Vec<usize> = captions.iter().map(|c| c.len()).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let mut parts = Vec::new();
        for len in lengths {
            let idx: Vec<usize> = (0..captions.len())
                .filter(|&i| captions[i].len() == len)
                .collect();
            let fwd_caps: Vec<&[u32]> = idx.iter().map(|&i| captions[i]).collect();
            let rev: Vec<Vec<u32>> = fwd_caps.iter().map(|c| reverse_caption(c)).collect();
            let bwd_caps: Vec<&[u32]> = rev.iter().map(Vec::as_slice).collect();
            let f_kv: Vec<&VisualKv<B::V>> = idx.iter().map(|&i| &kf[i]).collect();
            let b_kv: Vec<&VisualKv<B::V>> = idx.iter().map(|&i| &kb[i]).collect();
            let lf = self.fwd.token_logprobs(b, p, &f_kv, &fwd_caps)?;
            let lb = self.bwd.token_logprobs(b, p, &b_kv, &bwd_caps)?;
            parts.push(b.sum(&lf)?);
            parts.push(b.sum(&lb)?);
        }
        let mut total = parts[0].clone();
        for part in &parts[1..] {
            total = b.add(&total, part)?;
        }
        Ok(total)
    }

    /// h(x, y) of one caption against many prepared items, in item order.
    /// Items are scored in chunks that share each decoder pass.
    pub fn score_items(
        &self,
        store: &ParamStore,
        items: &[&ItemCache],
        tokens: &[u32],
    ) -> Result<Vec<f64>> {
        const CHUNK: usize = 32;
        let mut e = Eval;
        let p = store.bind(&mut e);
        let rev = reverse_caption(tokens);
        let per = tokens.len() - 1;
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(CHUNK) {
            let n = chunk.len();
            let f_kv: Vec<&VisualKv<Tensor>> = chunk.iter().map(|i| &i.fwd).collect();
            let b_kv: Vec<&VisualKv<Tensor>> = chunk.iter().map(|i| &i.bwd).collect();
            let lf = self
                .fwd
                .token_logprobs(&mut e, &p, &f_kv, &vec![tokens; n])?;
            let lb = self
                .bwd
                .token_logprobs(&mut e, &p, &b_kv, &vec![rev.as_slice(); n])?;
            for i in 0..n {
                let f: f64 = lf.data()[i * per..(i + 1) * per].iter().sum();
                let b: f64 = lb.data()[i * per..(i + 1) * per].iter().sum();
                out.push(f + b);
            }
        }
        Ok(out)
    }

    /// Next-token logits of one decoder for a token prefix, tape-free.
    pub fn decoder_logits(
        &self,
        store: &ParamStore,
        features: &FeatureMap,
        tokens: &[u32],
        dir: Direction,
    ) -> Result<Tensor> {
        let mut e = Eval;
        let p = store.bind(&mut e);
        let dec = self.decoder(dir);
        let kv = dec.visual_kv(&mut e, &p, &features.flattened())?;
        dec.logits(&mut e, &p, &kv, tokens, None)
    }

    /// h_fwd(x, y) under the given decoder, for a full BOS…EOS caption.
    pub fn caption_score_dir(
        &self,
        store: &ParamStore,
        features: &FeatureMap,
        tokens: &[u32],
        dir: Direction,
    ) -> Result<f64> {
        let mut e = Eval;
        let p = store.bind(&mut e);
        let dec = self.decoder(dir);
        let kv = dec.visual_kv(&mut e, &p, &features.flattened())?;
        Ok(dec.sequence_logprob(&mut e, &p, &kv, tokens)?.item())
    }

    pub fn caption_score_fwd(
        &self,
        store: &ParamStore,
        features: &FeatureMap,
        tokens: &[u32],
    ) -> Result<f64> {
        self.caption_score_dir(store, features, tokens, Direction::Forward)
    }

    /// h(x, y) = h_fwd(θ_fwd, y) + h_fwd(θ_bwd, reverse(y)).
    pub fn caption_score(
        &self,
        store: &ParamStore,
        features: &FeatureMap,
        tokens: &[u32],
    ) -> Result<f64> {
        let f = self.caption_score_dir(store, features, tokens, Direction::Forward)?;
        let b = self.caption_score_dir(
            store,
            features,
            &reverse_caption(tokens),
            Direction::Backward,
        )?;
        Ok(f + b)
    }

    pub fn prepare(&self, store: &ParamStore, features: FeatureMap) -> Result<ItemCache> {
        let mut e = Eval;
        let p = store.bind(&mut e);
        let flat = features.flattened();
        Ok(ItemCache {
            fwd: self.fwd.visual_kv(&mut e, &p, &flat)?,
            bwd: self.bwd.visual_kv(&mut e, &p, &flat)?,
            features,
        })
    }

    /// h(x, y) from a prepared item; equals [`Self::caption_score`].
    pub fn score_cached(
        &self,
        store: &ParamStore,
        item: &ItemCache,
        tokens: &[u32],
    ) -> Result<f64> {
        let mut e = Eval;
        let p = store.bind(&mut e);
        self.score_cached_bound(&p, item, tokens)
    }

    pub(crate) fn score_cached_bound(
        &self,
        p: &[Tensor],
        item: &ItemCache,
        tokens: &[u32],
    ) -> Result<f64> {
        let mut e = Eval;
        let f = self
            .fwd
            .sequence_logprob(&mut e, p, &item.fwd, tokens)?
            .item();
        let b = self
            .bwd
            .sequence_logprob(&mut e, p, &item.bwd, &reverse_caption(tokens))?
            .item();
        Ok(f + b)
    }

    /// Cross-attention maps of one decoder for a full caption.
    pub fn attention_maps(
        &self,
        store: &ParamStore,
        features: &FeatureMap,
        tokens: &[u32],
        dir: Direction,
    ) -> Result<AttentionRecord> {
        check_caption(tokens)?;
        let mut e = Eval;
        let p = store.bind(&mut e);
        let dec = self.decoder(dir);
        let kv = dec.visual_kv(&mut e, &p, &features.flattened())?;
        let input = match dir {
            Direction::Forward => tokens.to_vec(),
            Direction::Backward => reverse_caption(tokens),
        };
        let mut layers = Vec::new();
        dec.logits(
            &mut e,
            &p,
            &kv,
            &input[..input.len() - 1],
            Some(&mut layers),
        )?;
        let flagged = layers.iter().map(|heads| flag_heads(heads)).collect();
        Ok(AttentionRecord { layers, flagged })
    }
}

/// Per token, the head whose pre-softmax scores have the highest mean.
fn flag_heads(heads: &[HeadMaps]) -> Vec<usize> {
    let t = heads[0].scores.rows();
    (0..t)
        .map(|row| {
            let mut best = (0, f64::NEG_INFINITY);
            for (h, m) in heads.iter().enumerate() {
                let r = m.scores.row(row);
                let mean = r.iter().sum::<f64>() / r.len() as f64;
                if mean > best.1 {
                    best = (h, mean);
                }
            }
            best.0
        })
        .collect()
}

/// Slow-model training: minimizes L_CA = −Σ h(x_i, y_i) over batches of
/// distinct training scenes.
pub fn train_slow(
    data: &Dataset,
    cfg: &SlowConfig,
    train: &TrainConfig,
    init_seed: u64,
) -> Result<(SlowModel, ParamStore, TrainLog)> {
    let (model, mut store) = SlowModel::init(cfg, init_seed)?;
    if cfg.decoder.vocab_size != data.vocab.len() {
        return Err(Error::Config(format!(
            "decoder vocabulary {} does not match dataset vocabulary {}",
            cfg.decoder.vocab_size,
            data.vocab.len()
        )));
    }
    let mut log = TrainLog::new(&["step", "loss", "lr", "seconds"]);
    if train.steps == 0 {
        return Ok((model, store, log));
    }
    let mut opt = Adam::new(train, &store);
    let mut sampler = EpochSampler::new(data, Split::Train, train.batch_size, train.seed)?;
    let renders: Vec<Tensor> = (0..data.scenes.len() as u64)
        .map(|i| data.render(i))
        .collect();
    let start = Instant::now();
    for step in 0..train.steps {
        let batch = sampler.next_batch();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let r: Vec<Var> = batch
            .iter()
            .map(|&(scene, _)| tape.constant(renders[scene as usize].clone()))
            .collect();
        let caps: Vec<&[u32]> = batch
            .iter()
            .map(|&(_, c)| data.captions[c as usize].tokens.as_slice())
            .collect();
        let total = model.total_score_v(&mut tape, &p, &r, &caps)?;
        let loss = tape.scale(&total, -1.0)?;
        let value = tape.value(&loss).item();
        check_loss(value, step, &batch.iter().map(|b| b.0).collect::<Vec<_>>())?;
        let grads = tape.backward(loss)?;
        let g: Vec<Vec<f64>> = p.iter().map(|v| grads.get(*v).into_vec()).collect();
        let lr = train.lr_at(step);
        opt.step(&mut store, &g, lr);
        log.push(vec![
            step as f64,
            value / batch.len() as f64,
            lr,
            start.elapsed().as_secs_f64(),
        ]);
    }
    if !log.decreases_over("loss", 500) {
        log::warn!("slow training loss did not decrease over every 500-step window");
    }
    Ok((model, store, log))
}

/// Test-side helper: the score of `tokens` through explicit indexing of
/// `decoder_logits`, used to cross-check the fused path.
pub fn enumerate_logprob(logits: &Tensor, tokens: &[u32]) -> Result<f64> {
    let logp = tensor::log_softmax(logits, 1)?;
    Ok(tokens[1..]
        .iter()
        .enumerate()
        .map(|(i, &t)| logp.at(i, t as usize))
        .sum())
}
