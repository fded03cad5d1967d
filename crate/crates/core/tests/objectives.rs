//! Contrastive and distillation objectives against explicit loop oracles.

mod common;

use common::{rng, uniform};
use fastslow::distill::{
    combined_objective, cross_entropy, distill_loss, entropy, student_dist, teacher_dist,
    teacher_targets,
};
use fastslow::fast::nce_loss;
use fastslow::{Backend, Eval, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Σ_i −S_ii + log(e^{S_ii} + Σ_{j≠i} e^{S_ij} + Σ_{j≠i} e^{S_ji}).
fn nce_oracle(s: &Tensor) -> f64 {
    let n = s.rows();
    (0..n)
        .map(|i| {
            let mut z = s.at(i, i).exp();
            for j in (0..n).filter(|&j| j != i) {
                z += s.at(i, j).exp() + s.at(j, i).exp();
            }
            z.ln() - s.at(i, i)
        })
        .sum()
}

/// Σ_i Σ_j p_ij · −log q_ij with q_i = softmax over images j of S[j, i] / τ.
fn distill_oracle(s: &Tensor, teacher: &Tensor, tau: f64) -> f64 {
    let n = s.rows();
    let mut total = 0.0;
    for i in 0..n {
        let t: Vec<f64> = (0..n).map(|j| teacher.at(j, i) / tau).collect();
        let tz: f64 = t.iter().map(|v| v.exp()).sum();
        let z: f64 = (0..n).map(|j| (s.at(j, i) / tau).exp()).sum();
        for j in 0..n {
            let p = t[j].exp() / tz;
            let logq = s.at(j, i) / tau - z.ln();
            total -= p * logq;
        }
    }
    total
}

fn permute(s: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm
        .iter()
        .map(|&i| perm.iter().map(|&j| s.at(i, j)).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn nce_matches_oracle_on_three_pairs() {
    let s = Tensor::from_rows(&[
        vec![2.0, -1.0, 0.5],
        vec![0.3, 1.5, -0.2],
        vec![-0.7, 0.9, 3.0],
    ])
    .unwrap();
    let mut e = Eval;
    let l = nce_loss(&mut e, &s, true).unwrap().item();
    assert!((l - nce_oracle(&s)).abs() <= 1e-12);
    assert_eq!(nce_loss(&mut e, &s, false).unwrap().item(), 0.0);
}

#[test]
fn distill_matches_oracle_exactly_on_representable_logits() {
    let s = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
    let t = Tensor::from_rows(&[vec![-3.0, -8.0], vec![-6.5, -2.0]]).unwrap();
    let targets = teacher_targets(&t, 2.0).unwrap();
    let l = distill_loss(&mut Eval, &s, &targets, 2.0).unwrap().item();
    assert!((l - distill_oracle(&s, &t, 2.0)).abs() <= 1e-12);
}

#[test]
fn distill_matches_oracle() {
    let mut r = rng(3);
    for n in 1..6 {
        let s = uniform(&mut r, &[n, n], 4.0);
        let t = uniform(&mut r, &[n, n], 30.0);
        for tau in [1.0, 10.0] {
            let targets = teacher_targets(&t, tau).unwrap();
            let l = distill_loss(&mut Eval, &s, &targets, tau).unwrap().item();
            // Teacher logits carry 30 significant bits.
            let o = distill_oracle(&s, &t, tau);
            assert!(
                (l - o).abs() <= 1e-7 * o.abs().max(1.0),
                "n={n} tau={tau}: {l} vs {o}"
            );
        }
    }
}

#[test]
fn distributions_normalize_and_obey_gibbs() {
    let mut r = rng(11);
    for _ in 0..1000 {
        let n = r.gen_range(1..12);
        let tau = r.gen_range(0.1..20.0);
        let a: Vec<f64> = (0..n).map(|_| r.gen_range(-40.0..40.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.gen_range(-40.0..40.0)).collect();
        let p = teacher_dist(&a, tau).unwrap();
        let q = student_dist(&b, tau).unwrap();
        for d in [&p, &q] {
            assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(d.iter().all(|&v| v > 0.0));
        }
        let h_pq = cross_entropy(&p, &q).unwrap();
        let h_pp = entropy(&p);
        assert!(h_pq >= h_pp - 1e-12, "{h_pq} < {h_pp}");
        assert!((cross_entropy(&p, &p).unwrap() - h_pp).abs() <= 1e-12);
    }
}

#[test]
fn teacher_distribution_survives_common_scaling() {
    let mut r = rng(5);
    for _ in 0..1000 {
        let n = r.gen_range(2..10);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(-60.0..0.0)).collect();
        let tau = [1.0, 10.0, r.gen_range(0.5..20.0)][r.gen_range(0..3)];
        let c = r.gen_range(0.001..1000.0);
        let scaled: Vec<f64> = scores.iter().map(|h| c * h).collect();
        assert_eq!(
            teacher_dist(&scores, tau).unwrap(),
            teacher_dist(&scaled, c * tau).unwrap()
        );
    }
}

#[test]
fn teacher_never_receives_gradient() {
    let mut r = rng(2);
    let s = uniform(&mut r, &[3, 3], 1.0);
    let teacher = uniform(&mut r, &[3, 3], 10.0);
    let mut t = Tape::new();
    let sv = t.param(&s);
    let tv = t.param(&teacher);
    let targets = teacher_targets(t.value(&tv), 10.0).unwrap();
    let obj = combined_objective(&mut t, &sv, &targets, 10.0, 0.1).unwrap();
    let g = t.backward(obj.total).unwrap();
    assert!(g.reached(sv));
    assert!(!g.reached(tv));
}

#[test]
fn zero_alpha_is_pure_distillation() {
    let mut r = rng(8);
    let s = uniform(&mut r, &[4, 4], 2.0);
    let targets = teacher_targets(&uniform(&mut r, &[4, 4], 5.0), 10.0).unwrap();
    let mut e = Eval;
    let o = combined_objective(&mut e, &s, &targets, 10.0, 0.0).unwrap();
    assert_eq!(o.total, distill_loss(&mut e, &s, &targets, 10.0).unwrap());
    let o = combined_objective(&mut e, &s, &targets, 10.0, 0.5).unwrap();
    assert!((o.total.item() - o.distill.item() - 0.5 * o.nce.item()).abs() <= 1e-12);
}

#[test]
fn equal_teacher_scores_pull_student_to_uniform() {
    let n = 4;
    let tau = 2.0;
    let targets = teacher_targets(&Tensor::full(&[n, n], -3.0), tau).unwrap();
    let mut s = uniform(&mut rng(1), &[n, n], 3.0);
    for _ in 0..4000 {
        let mut t = Tape::new();
        let v = t.param(&s);
        let l = distill_loss(&mut t, &v, &targets, tau).unwrap();
        let g = t.backward(l).unwrap().get(v);
        for (x, d) in s.data_mut().iter_mut().zip(g.data()) {
            *x -= 1.0 * d;
        }
    }
    for i in 0..n {
        let col: Vec<f64> = (0..n).map(|j| s.at(j, i)).collect();
        let q = student_dist(&col, tau).unwrap();
        assert!(
            q.iter().all(|&v| (v - 1.0 / n as f64).abs() <= 1e-3),
            "{q:?}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nce_is_positive_and_matches_oracle(seed in any::<u64>(), n in 2usize..7, scale in 0.1f64..10.0) {
        let s = uniform(&mut rng(seed), &[n, n], scale);
        let l = nce_loss(&mut Eval, &s, true).unwrap().item();
        prop_assert!(l > 0.0);
        prop_assert!((l - nce_oracle(&s)).abs() <= 1e-10 * l.max(1.0));
    }

    #[test]
    fn nce_ignores_pair_order(seed in any::<u64>(), n in 2usize..7) {
        let mut r = rng(seed);
        let s = uniform(&mut r, &[n, n], 3.0);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let a = nce_loss(&mut Eval, &s, true).unwrap().item();
        let b = nce_loss(&mut Eval, &permute(&s, &perm), true).unwrap().item();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
