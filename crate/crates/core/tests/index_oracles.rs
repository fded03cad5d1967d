//! Exact and product-quantized search against brute-force oracles.

mod common;

use common::rng;
use fastslow::fast::Embeddings;
use fastslow::index::{errors_non_increasing, ExactIndex, Hit, Index, PqConfig, PqIndex};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(r: &mut ChaCha8Rng, n: usize, e: usize) -> Vec<f32> {
    (0..n * e).map(|_| StandardNormal.sample(r)).collect()
}

/// Scores every row with a plain loop and orders by (score desc, id asc)
/// using insertion sort.
fn brute_force(ids: &[u64], data: &[f32], e: usize, q: &[f32]) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64)> = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        let mut s = 0.0f64;
        for k in 0..e {
            s += data[i * e + k] as f64 * q[k] as f64;
        }
        let before = |a: &(u64, f64)| a.1 > s || (a.1 == s && a.0 < id);
        let pos = out.iter().take_while(|a| before(a)).count();
        out.insert(pos, (id, s));
    }
    out
}

fn pairs(hits: &[Hit]) -> Vec<(u64, f64)> {
    hits.iter().map(|h| (h.id, h.score)).collect()
}

#[test]
fn exact_topk_matches_brute_force_for_every_k() {
    let (n, e) = (1000, 16);
    let mut r = rng(0);
    let mut data = gaussian(&mut r, n, e);
    // Duplicate rows create exact score ties.
    for i in 0..50 {
        let src = data[i * e..(i + 1) * e].to_vec();
        data[(500 + i) * e..(501 + i) * e].copy_from_slice(&src);
    }
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
    ids.shuffle(&mut r);
    let emb = Embeddings::new(ids.clone(), e, data.clone()).unwrap();
    let index = ExactIndex::build(emb).unwrap();
    for qi in 0..3 {
        let q = gaussian(&mut rng(100 + qi), 1, e);
        let oracle = brute_force(&ids, &data, e, &q);
        for k in 1..=n {
            assert_eq!(pairs(&index.topk(&q, k).unwrap()), oracle[..k], "k = {k}");
        }
    }
}

/// Mean over queries of |PQ top-k ∩ exact top-k| / k.
fn overlap_recall(exact: &ExactIndex, pq: &PqIndex, queries: &[Vec<f32>], k: usize) -> f64 {
    let mut total = 0.0;
    for q in queries {
        let truth: Vec<u64> = exact.topk(q, k).unwrap().iter().map(|h| h.id).collect();
        let got = pq.topk(q, k).unwrap();
        total += got.iter().filter(|h| truth.contains(&h.id)).count() as f64 / k as f64;
    }
    total / queries.len() as f64
}

#[test]
fn pq_distortion_near_gaussian_bound_and_recall_grows_with_m() {
    let (n, e) = (4000, 32);
    let mut r = rng(0);
    let data = gaussian(&mut r, n, e);
    let emb = Embeddings::new((0..n as u64).collect(), e, data.clone()).unwrap();
    let exact = ExactIndex::build(emb.clone()).unwrap();
    let queries: Vec<Vec<f32>> = (0..50).map(|_| gaussian(&mut r, 1, e)).collect();
    let mut last = 0.0;
    for m in [4, 8, 16] {
        let pq = PqIndex::build(
            &emb,
            &PqConfig {
                m,
                kc: 256,
                iters: 15,
                seed: 0,
            },
        )
        .unwrap();
        assert!(errors_non_increasing(&pq.codebooks));
        let mse: f64 = (0..n)
            .map(|i| {
                let rec = pq.reconstruct(i);
                rec.iter()
                    .zip(&data[i * e..(i + 1) * e])
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / (n * e) as f64;
        // 8 bits per sub-space of e/m dims: distortion bound 2^(-16m/e).
        let bound = 2f64.powf(-16.0 * m as f64 / e as f64);
        assert!(
            mse <= 1.3 * bound.max(0.004) + 0.01,
            "m={m}: mse {mse} vs bound {bound}"
        );
        let rec = overlap_recall(&exact, &pq, &queries, 10);
        assert!(rec >= last, "m={m}: recall {rec} < {last}");
        last = rec;
    }
}

#[test]
fn per_point_centroids_search_exactly() {
    let (n, e) = (300, 12);
    let mut r = rng(4);
    let data = gaussian(&mut r, n, e);
    let emb = Embeddings::new((0..n as u64).map(|i| 1000 - i).collect(), e, data).unwrap();
    let pq = PqIndex::build(
        &emb,
        &PqConfig {
            m: 1,
            kc: n,
            iters: 0,
            seed: 0,
        },
    )
    .unwrap();
    let exact = ExactIndex::build(emb).unwrap();
    for qi in 0..20 {
        let q = gaussian(&mut rng(50 + qi), 1, e);
        assert_eq!(pq.topk(&q, n).unwrap(), exact.topk(&q, n).unwrap());
    }
}

#[test]
fn table_scores_equal_reconstruct_and_dot() {
    let (n, e) = (500, 16);
    let mut r = rng(6);
    let emb = Embeddings::new((0..n as u64).collect(), e, gaussian(&mut r, n, e)).unwrap();
    let pq = PqIndex::build(
        &emb,
        &PqConfig {
            m: 4,
            kc: 16,
            iters: 5,
            seed: 1,
        },
    )
    .unwrap();
    let q = gaussian(&mut r, 1, e);
    let (hits, stats) = pq.scores(&q).unwrap();
    assert_eq!(stats.table_entries, 4 * 16);
    assert_eq!(stats.lookups, n * 4);
    for (i, h) in hits.iter().enumerate() {
        let rec = pq.reconstruct(i);
        let direct: f64 = rec.iter().zip(&q).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((h.score - direct).abs() <= 1e-9, "{} vs {direct}", h.score);
    }
    // Reconstructions are encoded to themselves.
    let recon: Vec<f32> = (0..n).flat_map(|i| pq.reconstruct(i)).collect();
    let again = PqIndex::with_codebooks(
        &Embeddings::new((0..n as u64).collect(), e, recon).unwrap(),
        pq.codebooks.clone(),
    );
    for i in 0..n {
        assert_eq!(again.reconstruct(i), pq.reconstruct(i));
    }
}

#[test]
fn query_cost_is_independent_of_dimension() {
    let mut r = rng(9);
    let mut lookups = Vec::new();
    for e in [16, 64] {
        let emb = Embeddings::new((0..400).collect(), e, gaussian(&mut r, 400, e)).unwrap();
        let pq = PqIndex::build(
            &emb,
            &PqConfig {
                m: 4,
                kc: 32,
                iters: 2,
                seed: 0,
            },
        )
        .unwrap();
        let (_, stats) = pq.topk_with_stats(&gaussian(&mut r, 1, e), 10).unwrap();
        lookups.push((stats.table_entries, stats.lookups));
    }
    assert_eq!(lookups[0], lookups[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn topk_is_a_prefix_of_topk_plus_one(seed in any::<u64>(), n in 2usize..80, dup in 0usize..20) {
        let e = 4;
        let mut r = rng(seed);
        let mut data = gaussian(&mut r, n, e);
        for i in 0..dup.min(n / 2) {
            let src = data[i * e..(i + 1) * e].to_vec();
            data[(n - 1 - i) * e..(n - i) * e].copy_from_slice(&src);
        }
        let mut ids: Vec<u64> = (0..n as u64).collect();
        ids.shuffle(&mut r);
        let index = Index::Exact(ExactIndex::build(Embeddings::new(ids, e, data).unwrap()).unwrap());
        let q = gaussian(&mut r, 1, e);
        let full = index.topk(&q, n).unwrap();
        for k in 1..n {
            prop_assert_eq!(&index.topk(&q, k).unwrap()[..], &full[..k]);
        }
        prop_assert!(index.topk(&q, n + 1).is_err());
    }

    #[test]
    fn index_bytes_round_trip(seed in any::<u64>(), pq in any::<bool>()) {
        let mut r = rng(seed);
        let emb = Embeddings::new((0..64).collect(), 8, gaussian(&mut r, 64, 8)).unwrap();
        let index = if pq {
            Index::Pq(PqIndex::build(&emb, &PqConfig { m: 2, kc: 8, iters: 3, seed }).unwrap())
        } else {
            Index::Exact(ExactIndex::build(emb).unwrap())
        };
        let back = Index::from_bytes(&index.to_bytes()).unwrap();
        match (&back, &index) {
            // The Lloyd error trace is a training log and is not stored.
            (Index::Pq(a), Index::Pq(b)) => {
                prop_assert_eq!(&a.ids, &b.ids);
                prop_assert_eq!(&a.codes, &b.codes);
                prop_assert_eq!(&a.codebooks.centroids, &b.codebooks.centroids);
            }
            _ => prop_assert_eq!(&back, &index),
        }
        let q = gaussian(&mut r, 1, 8);
        prop_assert_eq!(back.topk(&q, 64).unwrap(), index.topk(&q, 64).unwrap());
    }
}
