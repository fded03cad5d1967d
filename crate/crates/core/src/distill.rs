//! Distilling the Slow scorer into the Fast dual encoder.
//!
//! For the caption y_i of anchor i the candidate set is every image of the
//! batch. The teacher distribution p and the student distribution q are
//! temperature softmaxes of h(x, y_i) and f(x)ᵀg(y_i) over those images;
//! the loss is Σ_i H(p_i, q_i), optionally plus α·L_DE.
//!
//! Score matrices are laid out image-major: entry `[j, i]` scores image j
//! against caption i.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Tape, Var};
use crate::data::{Dataset, Split};
use crate::encoders::{DualEncoder, DualEncoderConfig};
use crate::error::{Error, Result};
use crate::fast::{check_vocab, embed_images_v, embed_texts_v, init_fast, nce_loss, score_matrix};
use crate::optim::{check_loss, Adam, TrainConfig, TrainLog};
use crate::params::ParamStore;
use crate::slow::{ItemCache, SlowModel};
use crate::tensor::{self, Tensor};
use crate::train::EpochSampler;

/// Temperatures and loss weights of the ablation grid.
pub const SWEEP_TAUS: [f64; 2] = [1.0, 10.0];
pub const SWEEP_ALPHA_OVER_TAU2: [f64; 4] = [0.0, 0.1, 1.0, 10.0];

/// Significant bits kept in teacher logits.
const TEACHER_BITS: u32 = 30;
const Q_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau: f64,
    /// α/τ²; the NCE weight is α = alpha_over_tau2 · τ².
    pub alpha_over_tau2: f64,
    /// Scenes per sampling block; batches are drawn inside one block so the
    /// teacher scores only within-block pairs.
    pub block_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 10.0,
            alpha_over_tau2: 0.001,
            block_size: 100,
        }
    }
}

impl DistillConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha_over_tau2 * self.tau * self.tau
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.alpha_over_tau2 >= 0.0) || !self.alpha_over_tau2.is_finite() {
            return Err(Error::Config(format!(
                "alpha_over_tau2 must be ≥ 0, got {}",
                self.alpha_over_tau2
            )));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(
            "distill",
            format!("temperature must be > 0, got {tau}"),
        ));
    }
    Ok(())
}

/// Rounds to `TEACHER_BITS` significant bits (round half away from zero).
fn round_significand(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let drop = 52 - (TEACHER_BITS - 1);
    let bits = x.to_bits();
    let half = 1u64 << (drop - 1);
    let mask = !((1u64 << drop) - 1);
    f64::from_bits((bits + half) & mask)
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Teacher distribution p over candidates: softmax(h / τ). The logits
/// `h / τ` are rounded to 30 significant bits first, so p is unchanged
/// when scores and τ are scaled by the same factor.
pub fn teacher_dist(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    check_scores(scores)?;
    let z: Vec<f64> = scores.iter().map(|&h| round_significand(h / tau)).collect();
    Ok(softmax_vec(&z))
}

/// Student distribution q over candidates: softmax(fᵀg / τ).
pub fn student_dist(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    check_scores(scores)?;
    let z: Vec<f64> = scores.iter().map(|&s| s / tau).collect();
    Ok(softmax_vec(&z))
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("distill", "empty candidate set"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "distill" });
    }
    Ok(())
}

/// H(p, q) = −Σ p log q. A zero q where p > 0 is clamped to 1e-300.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    let mut h = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            let qc = if qi < Q_FLOOR {
                log::warn!("student probability {qi:e} clamped to {Q_FLOOR:e}");
                Q_FLOOR
            } else {
                qi
            };
            h -= pi * qc.ln();
        }
    }
    Ok(h)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Row i holds p over the images of the batch for caption i, from an
/// image-major teacher matrix.
pub fn teacher_targets(teacher: &Tensor, tau: f64) -> Result<Tensor> {
    let t = tensor::transpose(teacher)?;
    let rows = (0..t.rows())
        .map(|i| teacher_dist(t.row(i), tau))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// L_distill = Σ_i H(p_i, q_i) from image-major student scores and the
/// per-caption targets of [`teacher_targets`]. Targets enter as constants.
pub fn distill_loss<B: Backend>(
    b: &mut B,
    scores: &B::V,
    targets: &Tensor,
    tau: f64,
) -> Result<B::V> {
    check_tau(tau)?;
    let st = b.transpose(scores)?;
    let z = b.scale(&st, 1.0 / tau)?;
    let logq = b.log_softmax(&z, 1)?;
    let p = b.constant(targets.clone());
    let prod = b.mul(&p, &logq)?;
    let total = b.sum(&prod)?;
    b.scale(&total, -1.0)
}

/// Components of the combined objective L = L_distill + α·L_DE.
pub struct Objective<V> {
    pub total: V,
    pub distill: V,
    pub nce: V,
}

pub fn combined_objective<B: Backend>(
    b: &mut B,
    scores: &B::V,
    targets: &Tensor,
    tau: f64,
    alpha: f64,
) -> Result<Objective<B::V>> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(
            "combined_objective",
            format!("alpha must be ≥ 0, got {alpha}"),
        ));
    }
    let distill = distill_loss(b, scores, targets, tau)?;
    let nce = nce_loss(b, scores, true)?;
    let total = if alpha == 0.0 {
        distill.clone()
    } else {
        let weighted = b.scale(&nce, alpha)?;
        b.add(&distill, &weighted)?
    };
    Ok(Objective {
        total,
        distill,
        nce,
    })
}

/// Frozen teacher with per-item feature caches and a score cache keyed by
/// (scene id, caption id).
pub struct TeacherCache<'a> {
    model: &'a SlowModel,
    store: &'a ParamStore,
    data: &'a Dataset,
    items: HashMap<u64, ItemCache>,
    scores: HashMap<(u64, u64), f64>,
    pub hits: u64,
    pub misses: u64,
}

impl<'a> TeacherCache<'a> {
    pub fn new(model: &'a SlowModel, store: &'a ParamStore, data: &'a Dataset) -> Result<Self> {
        if model.cfg.decoder.vocab_size != data.vocab.len() {
            return Err(Error::Config(format!(
                "teacher vocabulary {} incompatible with dataset vocabulary {}",
                model.cfg.decoder.vocab_size,
                data.vocab.len()
            )));
        }
        Ok(TeacherCache {
            model,
            store,
            data,
            items: HashMap::new(),
            scores: HashMap::new(),
            hits: 0,
            misses: 0,
        })
    }

    /// Image-major matrix `[j, i] = h(x_j, y_i)` for a batch of
    /// (scene, caption) pairs.
    pub fn batch_scores(&mut self, batch: &[(u64, u64)]) -> Result<Tensor> {
        let n = batch.len();
        for &(scene, _) in batch {
            if !self.items.contains_key(&scene) {
                let f = self.model.encode(self.store, &self.data.render(scene))?;
                self.items.insert(scene, self.model.prepare(self.store, f)?);
            }
        }
        for &(_, caption) in batch {
            let missing: Vec<u64> = batch
                .iter()
                .map(|&(s, _)| s)
                .filter(|&s| !self.scores.contains_key(&(s, caption)))
                .collect();
            self.hits += (n - missing.len()) as u64;
            if missing.is_empty() {
                continue;
            }
            self.misses += missing.len() as u64;
            let items: Vec<&ItemCache> = missing.iter().map(|s| &self.items[s]).collect();
            let tokens = &self.data.captions[caption as usize].tokens;
            let h = self.model.score_items(self.store, &items, tokens)?;
            for (s, v) in missing.into_iter().zip(h) {
                self.scores.insert((s, caption), v);
            }
        }
        let mut out = Vec::with_capacity(n * n);
        for &(scene, _) in batch {
            for &(_, caption) in batch {
                out.push(self.scores[&(scene, caption)]);
            }
        }
        Tensor::new(&[n, n], out)
    }
}

/// Trains a fresh dual encoder on L_distill + α·L_DE. Batches are drawn
/// inside fixed blocks of the training split so teacher scores are reused
/// across epochs.
pub fn train_distilled(
    data: &Dataset,
    cfg: &DualEncoderConfig,
    train: &TrainConfig,
    distill: &DistillConfig,
    teacher: &mut TeacherCache,
    init_seed: u64,
) -> Result<(DualEncoder, ParamStore, TrainLog)> {
    distill.validate()?;
    let (model, mut store) = init_fast(cfg, init_seed)?;
    check_vocab(cfg, data)?;
    let mut log = TrainLog::new(&["step", "loss", "distill", "nce", "lr", "seconds"]);
    if train.steps == 0 {
        return Ok((model, store, log));
    }
    let alpha = distill.alpha();
    let mut opt = Adam::new(train, &store);
    let mut sampler = EpochSampler::blocked(
        data,
        Split::Train,
        train.batch_size,
        train.seed,
        distill.block_size,
    )?;
    let renders: Vec<Tensor> = (0..data.scenes.len() as u64)
        .map(|i| data.render(i))
        .collect();
    let start = Instant::now();
    for step in 0..train.steps {
        let batch = sampler.next_batch();
        let targets = teacher_targets(&teacher.batch_scores(&batch)?, distill.tau)?;
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
        let obj = combined_objective(&mut tape, &s, &targets, distill.tau, alpha)?;
        let value = tape.value(&obj.total).item();
        check_loss(value, step, &batch.iter().map(|b| b.0).collect::<Vec<_>>())?;
        let (ld, ln) = (tape.value(&obj.distill).item(), tape.value(&obj.nce).item());
        let grads = tape.backward(obj.total)?;
        let g: Vec<Vec<f64>> = p.iter().map(|v| grads.get(*v).into_vec()).collect();
        let lr = train.lr_at(step);
        opt.step(&mut store, &g, lr);
        let n = batch.len() as f64;
        log.push(vec![
            step as f64,
            value / n,
            ld / n,
            ln / n,
            lr,
            start.elapsed().as_secs_f64(),
        ]);
    }
    Ok((model, store, log))
}

/// One cell of the τ × α/τ² grid with validation recalls.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub alpha_over_tau2: f64,
    pub r1: f64,
    pub r5: f64,
}

/// Trains one distilled student per grid cell (same seeds throughout) and
/// scores it on the validation split with the fast model alone.
pub fn sweep_distill(
    data: &Dataset,
    cfg: &DualEncoderConfig,
    train: &TrainConfig,
    base: &DistillConfig,
    teacher: &mut TeacherCache,
    taus: &[f64],
    ratios: &[f64],
    init_seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &tau in taus {
        for &ratio in ratios {
            let d = DistillConfig {
                tau,
                alpha_over_tau2: ratio,
                ..base.clone()
            };
            let (m, store, _) = train_distilled(data, cfg, train, &d, teacher, init_seed)?;
            let (r1, r5) = crate::pipeline::fast_recall(&m, &store, data, Split::Val)?;
            log::info!("sweep tau={tau} alpha/tau^2={ratio}: R@1={r1:.4} R@5={r5:.4}");
            rows.push(SweepRow {
                tau,
                alpha_over_tau2: ratio,
                r1,
                r5,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("tau,alpha_over_tau2,R1_val,R5_val\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.tau, r.alpha_over_tau2, r.r1, r.r5);
    }
    s
}
