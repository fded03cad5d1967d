//! The Fast dual encoder: NCE training over in-batch negatives and corpus
//! embedding.
//!
//! For anchor i the negatives are every cross pair in the batch that
//! involves x_i or y_i: (x_i, y_j) and (x_j, y_i) for j ≠ i.
//!
//! Embedding file `FSEMB1`: magic, u64 row count, u32 dimension, the u64
//! scene ids, float32 rows, and a trailing u64 FNV-1a of every byte after
//! the magic.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Backend, Tape, Var};
use crate::data::{Dataset, Split};
use crate::encoders::{DualEncoder, DualEncoderConfig};
use crate::error::{Error, Result};
use crate::io::{fnv1a64, verify_trailer, write_atomic, Reader, Writer};
use crate::optim::{check_loss, Adam, TrainConfig, TrainLog};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::EpochSampler;

pub const EMBEDDING_MAGIC: &[u8; 6] = b"FSEMB1";
const MASKED: f64 = -1e30;

/// Score matrix `S[i, j] = f(x_i)ᵀ g(y_j)` from stacked `[n, e]` rows.
pub fn score_matrix<B: Backend>(b: &mut B, f: &B::V, g: &B::V) -> Result<B::V> {
    b.matmul_t(f, g, true)
}

/// L_DE over a batch given its score matrix. Row i of the logits holds
/// the positive `S[i,i]`, then `S[i,:]` and `S[:,i]` with the duplicate
/// positive masked out. With `negatives` off every negative is masked.
pub fn nce_loss<B: Backend>(b: &mut B, scores: &B::V, negatives: bool) -> Result<B::V> {
    let (n, m) = match b.value(scores).shape() {
        &[n, m] => (n, m),
        s => {
            return Err(Error::invalid(
                "nce_loss",
                format!("expected square scores, got {s:?}"),
            ))
        }
    };
    if n == 0 || n != m {
        return Err(Error::invalid(
            "nce_loss",
            format!("batch must hold at least one pair, got scores {n}×{m}"),
        ));
    }
    let st = b.transpose(scores)?;
    let both = b.concat_cols(&[scores.clone(), st])?;
    let mut mask = vec![false; n * 2 * n];
    for i in 0..n {
        for j in 0..2 * n {
            let positive = j == i;
            let duplicate = j == n + i;
            mask[i * 2 * n + j] = duplicate || (!negatives && !positive);
        }
    }
    let logits = b.masked_fill(&both, &mask, MASKED)?;
    let logp = b.log_softmax(&logits, 1)?;
    let pos = b.pick(&logp, &(0..n).collect::<Vec<_>>())?;
    let total = b.sum(&pos)?;
    b.scale(&total, -1.0)
}

/// Stacked f(x) rows `[n, e]` for a list of renders.
pub fn embed_images_v<B: Backend>(
    m: &DualEncoder,
    b: &mut B,
    p: &[B::V],
    renders: &[B::V],
) -> Result<B::V> {
    let rows = renders
        .iter()
        .map(|r| m.embed_image_v(b, p, r))
        .collect::<Result<Vec<_>>>()?;
    b.concat_rows(&rows)
}

/// Stacked g(y) rows `[n, e]`.
pub fn embed_texts_v<B: Backend>(
    m: &DualEncoder,
    b: &mut B,
    p: &[B::V],
    captions: &[&[u32]],
) -> Result<B::V> {
    let rows = captions
        .iter()
        .map(|c| m.embed_text_v(b, p, c))
        .collect::<Result<Vec<_>>>()?;
    b.concat_rows(&rows)
}

pub fn init_fast(cfg: &DualEncoderConfig, seed: u64) -> Result<(DualEncoder, ParamStore)> {
    DualEncoder::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Trains the dual encoder with L_DE on batches of distinct training scenes.
pub fn train_fast(
    data: &Dataset,
    cfg: &DualEncoderConfig,
    train: &TrainConfig,
    init_seed: u64,
) -> Result<(DualEncoder, ParamStore, TrainLog)> {
    let (model, mut store) = init_fast(cfg, init_seed)?;
    check_vocab(cfg, data)?;
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
            .map(|&(s, _)| tape.constant(renders[s as usize].clone()))
            .collect();
        let caps: Vec<&[u32]> = batch
            .iter()
            .map(|&(_, c)| data.captions[c as usize].tokens.as_slice())
            .collect();
        let f = embed_images_v(&model, &mut tape, &p, &r)?;
        let g = embed_texts_v(&model, &mut tape, &p, &caps)?;
        let s = score_matrix(&mut tape, &f, &g)?;
        let loss = nce_loss(&mut tape, &s, true)?;
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
    Ok((model, store, log))
}

pub(crate) fn check_vocab(cfg: &DualEncoderConfig, data: &Dataset) -> Result<()> {
    if cfg.vocab_size != data.vocab.len() {
        return Err(Error::Config(format!(
            "text table has {} rows but the dataset vocabulary has {}",
            cfg.vocab_size,
            data.vocab.len()
        )));
    }
    Ok(())
}

/// Item embeddings f(x) in float32, one row per scene in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub ids: Vec<u64>,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Embeddings {
    pub fn new(ids: Vec<u64>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Shape {
                op: "embeddings",
                lhs: vec![ids.len(), dim],
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "embeddings" });
        }
        Ok(Embeddings { ids, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn checksum(&self) -> u64 {
        let mut w = Writer::default();
        for &v in &self.data {
            w.f32(v);
        }
        fnv1a64(&w.buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(EMBEDDING_MAGIC);
        w.u64(self.ids.len() as u64);
        w.u32(self.dim as u32);
        for &id in &self.ids {
            w.u64(id);
        }
        for &v in &self.data {
            w.f32(v);
        }
        let sum = fnv1a64(&w.buf[EMBEDDING_MAGIC.len()..]);
        w.u64(sum);
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "embeddings");
        r.magic(EMBEDDING_MAGIC)?;
        verify_trailer(buf, EMBEDDING_MAGIC.len(), "embeddings")?;
        let n = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let data = (0..n * dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if r.remaining() != 8 {
            return Err(Error::Data(
                "embeddings: length does not match header".into(),
            ));
        }
        Embeddings::new(ids, dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// f(x) for every scene of `split`, rows in ascending scene id.
pub fn embed_corpus(
    model: &DualEncoder,
    store: &ParamStore,
    data: &Dataset,
    split: Split,
) -> Result<Embeddings> {
    let ids = data.split_ids(split);
    let mut rows = Vec::with_capacity(ids.len() * model.cfg.embed_dim);
    for &id in &ids {
        let f = model.embed_image(store, &data.render(id))?;
        rows.extend(f.iter().map(|&v| v as f32));
    }
    Embeddings::new(ids, model.cfg.embed_dim, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eval;

    #[test]
    fn single_pair_without_negatives_is_zero() {
        let s = Tensor::new(&[1, 1], vec![3.7]).unwrap();
        assert_eq!(nce_loss(&mut Eval, &s, false).unwrap().item(), 0.0);
        assert_eq!(nce_loss(&mut Eval, &s, true).unwrap().item(), 0.0);
        let empty = Tensor::new(&[0, 0], vec![]).unwrap();
        assert!(nce_loss(&mut Eval, &empty, true).is_err());
    }

    #[test]
    fn equal_scores_give_log_of_candidate_count() {
        let s = Tensor::full(&[2, 2], 0.5);
        let l = nce_loss(&mut Eval, &s, true).unwrap().item();
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn embedding_file_round_trip() {
        let e = Embeddings::new(vec![3, 5], 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let bytes = e.to_bytes();
        assert_eq!(Embeddings::from_bytes(&bytes).unwrap(), e);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(Embeddings::from_bytes(&bad).is_err());
        let empty = Embeddings::new(vec![], 4, vec![]).unwrap();
        assert_eq!(Embeddings::from_bytes(&empty.to_bytes()).unwrap(), empty);
    }
}
