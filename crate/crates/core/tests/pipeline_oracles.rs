//! Re-ranking pipeline against hand-computed cases, exhaustive slow scoring
//! and Monte-Carlo recall.

mod common;

use common::{rng, world};
use fastslow::data::Split;
use fastslow::index::{ExactIndex, Hit, Index};
use fastslow::pipeline::{
    mean_recall, recall_at_k, rerank, rerank_curve, split_queries, CurveKind, PipelineConfig,
    RetrievalPipeline, SlowCorpus, Stage,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashMap;

fn hits(v: &[(u64, f64)]) -> Vec<Hit> {
    v.iter().map(|&(id, score)| Hit { id, score }).collect()
}

#[test]
fn five_items_by_hand() {
    // Fast order: 10 (4.0), 11 (3.0), 12 (2.0), 13 (1.0), 14 (0.0).
    let fast = hits(&[(10, 4.0), (11, 3.0), (12, 2.0), (13, 1.0), (14, 0.0)]);
    // Slow scores of the first three; combined = h + 0.5·fast:
    //   10: -9 + 2.0 = -7.0
    //   11: -6 + 1.5 = -4.5
    //   12: -5 + 1.0 = -4.0
    let list = rerank(&fast, &[-9.0, -6.0, -5.0], 0.5).unwrap();
    assert_eq!(list.ids(), vec![12, 11, 10, 13, 14]);
    let combined: Vec<Option<f64>> = list.items.iter().map(|c| c.combined).collect();
    assert_eq!(
        combined,
        vec![Some(-4.0), Some(-4.5), Some(-7.0), None, None]
    );
    for c in &list.items {
        assert_eq!(c.slow.is_some(), c.combined.is_some());
        assert_eq!(c.stage == Stage::Slow, c.slow.is_some());
    }
    // K = 1 leaves the fast order untouched.
    assert_eq!(
        rerank(&fast, &[-100.0], 0.5).unwrap().ids(),
        vec![10, 11, 12, 13, 14]
    );
    // β = 0, K = N: pure slow order, ties by id.
    let all = rerank(&fast, &[-3.0, -1.0, -3.0, -2.0, -1.0], 0.0).unwrap();
    assert_eq!(all.ids(), vec![11, 14, 13, 10, 12]);
}

#[test]
fn full_budget_equals_exhaustive_slow_ranking() {
    let w = world(40, 3);
    let ids = w.data.split_ids(Split::Test);
    // Items 1 and 2 share their features with item 0: exact slow ties.
    let mut items: HashMap<u64, _> = HashMap::new();
    for &id in &ids {
        let src = if id == ids[1] || id == ids[2] {
            ids[0]
        } else {
            id
        };
        let phi = w.slow.encode(&w.slow_store, &w.data.render(src)).unwrap();
        items.insert(id, w.slow.prepare(&w.slow_store, phi).unwrap());
    }
    let slow = SlowCorpus::from_items(&w.slow, &w.slow_store, items);
    let index = Index::Exact(ExactIndex::build(w.emb.clone()).unwrap());
    let cfg = PipelineConfig {
        k: ids.len(),
        beta: 0.0,
        precompute: true,
    };
    let p = RetrievalPipeline::new(&w.fast, &w.fast_store, &index, &slow, cfg).unwrap();
    for (_, tokens) in split_queries(&w.data, Split::Test).iter().take(8) {
        let (list, stats) = p.query(tokens).unwrap();
        assert_eq!(stats.slow_invocations, ids.len() as u64);
        // Independent oracle: score each item directly, sort by (h desc, id asc).
        let mut oracle: Vec<(u64, f64)> = ids
            .iter()
            .map(|&id| {
                let src = if id == ids[1] || id == ids[2] {
                    ids[0]
                } else {
                    id
                };
                let phi = w.slow.encode(&w.slow_store, &w.data.render(src)).unwrap();
                (
                    id,
                    w.slow.caption_score(&w.slow_store, &phi, tokens).unwrap(),
                )
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        assert_eq!(list.ids(), oracle.iter().map(|o| o.0).collect::<Vec<_>>());
        for (c, o) in list.items.iter().zip(&oracle) {
            assert_eq!(c.slow, Some(o.1));
        }
    }
}

#[test]
fn slow_calls_equal_min_k_n_and_queries_repeat() {
    let w = world(12, 5);
    let ids = w.data.split_ids(Split::Test);
    let slow = SlowCorpus::precompute(&w.slow, &w.slow_store, &w.data, &ids).unwrap();
    let lazy = SlowCorpus::on_demand(&w.slow, &w.slow_store, &w.data);
    let index = Index::Exact(ExactIndex::build(w.emb.clone()).unwrap());
    let queries = split_queries(&w.data, Split::Test);
    for k in [1, 3, 12, 20] {
        let p = RetrievalPipeline::new(
            &w.fast,
            &w.fast_store,
            &index,
            &slow,
            PipelineConfig {
                k,
                ..Default::default()
            },
        )
        .unwrap();
        let q = RetrievalPipeline::new(
            &w.fast,
            &w.fast_store,
            &index,
            &lazy,
            PipelineConfig {
                k,
                ..Default::default()
            },
        )
        .unwrap();
        for (_, t) in queries.iter().take(4) {
            let (a, sa) = p.query(t).unwrap();
            let (b, sb) = p.query(t).unwrap();
            let (c, sc) = q.query(t).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
            for s in [sa, sb, sc] {
                assert_eq!(s.slow_invocations, k.min(ids.len()) as u64);
            }
        }
    }
    let p = RetrievalPipeline::new(
        &w.fast,
        &w.fast_store,
        &index,
        &slow,
        PipelineConfig::default(),
    )
    .unwrap();
    let rows = rerank_curve(&p, &queries, &[1, 2, 5, 12], &[0.0, 1.0]).unwrap();
    for r in &rows {
        match r.kind {
            CurveKind::Rerank(k) => assert_eq!(r.mean_slow_calls, k as f64),
            CurveKind::FastOnly => assert_eq!(r.mean_slow_calls, 0.0),
            CurveKind::SlowOnly => assert_eq!(r.mean_slow_calls, ids.len() as f64),
        }
    }
    assert!(rerank_curve(&p, &queries, &[13], &[0.0]).is_err());
    assert!(RetrievalPipeline::new(
        &w.fast,
        &w.fast_store,
        &index,
        &slow,
        PipelineConfig {
            k: 0,
            ..Default::default()
        }
    )
    .is_err());
}

#[test]
fn thread_count_does_not_change_scores() {
    let w = world(20, 7);
    let ids = w.data.split_ids(Split::Test);
    let slow = SlowCorpus::precompute(&w.slow, &w.slow_store, &w.data, &ids).unwrap();
    let t = &w.data.gold_caption(ids[3]).tokens;
    let one = slow.score_threads(&ids, t, 1).unwrap();
    for threads in [2, 3, 8] {
        assert_eq!(slow.score_threads(&ids, t, threads).unwrap(), one);
    }
    assert_eq!(slow.calls(), 4 * ids.len() as u64);
}

#[test]
fn random_rankings_recall_at_chance() {
    let n = 50usize;
    let mut r = rng(42);
    let mut ranking: Vec<u64> = (0..n as u64).collect();
    let mut results = Vec::new();
    for _ in 0..10_000 {
        ranking.shuffle(&mut r);
        results.push((ranking.clone(), r.gen_range(0..n as u64)));
    }
    for k in [1, 5, 10, 25] {
        let got = mean_recall(&results, k).unwrap();
        let expect = k as f64 / n as f64;
        // Four standard errors of a Bernoulli mean over 10,000 draws.
        let se = (expect * (1.0 - expect) / 10_000.0).sqrt();
        assert!((got - expect).abs() <= 4.0 * se, "k={k}: {got} vs {expect}");
    }
    assert!(recall_at_k(&[1, 2], 3, 1).is_err());
    assert!(recall_at_k(&[1, 2], 1, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn huge_beta_keeps_fast_order(seed in any::<u64>(), n in 2usize..30, k in 1usize..30) {
        let mut r = rng(seed);
        let mut fast: Vec<Hit> = (0..n as u64).map(|id| Hit { id, score: r.gen_range(-5.0..5.0) }).collect();
        fast.sort_by(fastslow::index::rank_order);
        let k = k.min(n);
        let slow: Vec<f64> = (0..k).map(|_| r.gen_range(-50.0..0.0)).collect();
        let list = rerank(&fast, &slow, 1e12).unwrap();
        prop_assert_eq!(list.ids(), fast.iter().map(|h| h.id).collect::<Vec<_>>());
    }

    #[test]
    fn tail_keeps_fast_order_and_head_is_sorted(seed in any::<u64>(), n in 1usize..30, k in 1usize..30, beta in 0.0f64..2.0) {
        let mut r = rng(seed);
        let mut fast: Vec<Hit> = (0..n as u64).map(|id| Hit { id, score: (r.gen_range(-3..3)) as f64 }).collect();
        fast.sort_by(fastslow::index::rank_order);
        let k = k.min(n);
        let slow: Vec<f64> = (0..k).map(|_| r.gen_range(-4..0) as f64).collect();
        let list = rerank(&fast, &slow, beta).unwrap();
        prop_assert_eq!(list.items.len(), n);
        let tail: Vec<u64> = list.items[k..].iter().map(|c| c.id).collect();
        prop_assert_eq!(tail, fast[k..].iter().map(|h| h.id).collect::<Vec<_>>());
        for w in list.items[..k].windows(2) {
            let (a, b) = (w[0].combined.unwrap(), w[1].combined.unwrap());
            prop_assert!(a > b || (a == b && w[0].id < w[1].id));
        }
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), n in 1usize..40) {
        let mut r = rng(seed);
        let mut ranking: Vec<u64> = (0..n as u64).collect();
        ranking.shuffle(&mut r);
        let gold = r.gen_range(0..n as u64);
        let mut last = 0.0;
        for k in 1..=n {
            let v = recall_at_k(&ranking, gold, k).unwrap();
            prop_assert!(v >= last);
            last = v;
        }
        prop_assert_eq!(last, 1.0);
    }
}
