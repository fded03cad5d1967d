//! Gradient checks of the four training objectives on toy models.

use super::{jitter, rng, toy_dual, toy_slow, uniform};
use fastslow::distill::{combined_objective, distill_loss, teacher_targets};
use fastslow::encoders::DualEncoder;
use fastslow::fast::{embed_images_v, embed_texts_v, nce_loss, score_matrix};
use fastslow::gradcheck::{grad_check, GradReport};
use fastslow::slow::SlowModel;
use fastslow::{Backend, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn captions() -> Vec<Vec<u32>> {
    vec![vec![1, 4, 3, 2], vec![1, 3, 4, 2], vec![1, 4, 4, 2]]
}

/// Report and parameter count.
pub fn contrastive() -> (GradReport, usize) {
    let mut r = rng(11);
    let (m, store) = DualEncoder::init(&toy_dual(5), &mut r).unwrap();
    let n = store.num_scalars();
    let renders: Vec<_> = (0..3).map(|_| uniform(&mut r, &[8, 8, 3], 1.0)).collect();
    let caps = captions();
    let report = grad_check(
        |t, p| {
            let imgs: Vec<_> = renders.iter().map(|x| t.constant(x.clone())).collect();
            let c: Vec<&[u32]> = caps.iter().map(|c| c.as_slice()).collect();
            let f = embed_images_v(&m, t, p, &imgs)?;
            let g = embed_texts_v(&m, t, p, &c)?;
            let s = score_matrix(t, &f, &g)?;
            nce_loss(t, &s, true)
        },
        &jitter(store.tensors(), &mut r),
        STEP,
        TOL,
    )
    .unwrap();
    (report, n)
}

/// Report and parameter count.
pub fn captioning() -> (GradReport, usize) {
    let mut r = rng(12);
    let (m, store) = SlowModel::init(&toy_slow(5), 3).unwrap();
    let n = store.num_scalars();
    let renders = [
        uniform(&mut r, &[8, 8, 3], 1.0),
        uniform(&mut r, &[8, 8, 3], 1.0),
    ];
    let caps = &captions()[..2];
    let report = grad_check(
        |t, p| {
            let imgs: Vec<_> = renders.iter().map(|x| t.constant(x.clone())).collect();
            let c: Vec<&[u32]> = caps.iter().map(|c| c.as_slice()).collect();
            let h = m.total_score_v(t, p, &imgs, &c)?;
            t.scale(&h, -1.0)
        },
        &jitter(store.tensors(), &mut r),
        STEP,
        TOL,
    )
    .unwrap();
    (report, n)
}

/// Report and parameter count.
pub fn distillation() -> (GradReport, usize) {
    let mut r = rng(13);
    let scores = uniform(&mut r, &[4, 4], 2.0);
    let teacher = uniform(&mut r, &[4, 4], 5.0);
    let targets = teacher_targets(&teacher, 2.0).unwrap();
    let n = 16;
    let report = grad_check(
        |t, p| distill_loss(t, &p[0], &targets, 2.0),
        &[scores],
        STEP,
        TOL,
    )
    .unwrap();
    (report, n)
}

/// Report and parameter count.
pub fn combined() -> (GradReport, usize) {
    let mut r = rng(14);
    let (m, store) = DualEncoder::init(&toy_dual(5), &mut r).unwrap();
    let n = store.num_scalars();
    let renders = [
        uniform(&mut r, &[8, 8, 3], 1.0),
        uniform(&mut r, &[8, 8, 3], 1.0),
    ];
    let caps = &captions()[..2];
    let teacher = Tensor::new(&[2, 2], vec![-3.0, -9.0, -7.5, -2.0]).unwrap();
    let targets = teacher_targets(&teacher, 10.0).unwrap();
    let report = grad_check(
        |t, p| {
            let imgs: Vec<_> = renders.iter().map(|x| t.constant(x.clone())).collect();
            let c: Vec<&[u32]> = caps.iter().map(|c| c.as_slice()).collect();
            let f = embed_images_v(&m, t, p, &imgs)?;
            let g = embed_texts_v(&m, t, p, &c)?;
            let s = score_matrix(t, &f, &g)?;
            Ok(combined_objective(t, &s, &targets, 10.0, 0.1)?.total)
        },
        &jitter(store.tensors(), &mut r),
        STEP,
        TOL,
    )
    .unwrap();
    (report, n)
}
