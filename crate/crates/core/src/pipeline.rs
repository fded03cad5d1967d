//! The Fast & Slow query path, recall metrics, re-rank curves and the
//! latency benchmark.
//!
//! A query embeds the caption with g, ranks the corpus through the index,
//! re-scores the top K with the Slow model and orders that block by
//! h + β·fᵀg (ties by ascending id). The rest of the corpus follows in
//! fast order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, Dataset, Split, Vocabulary};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::fast::{embed_corpus, Embeddings};
use crate::index::{ExactIndex, Hit, Index};
use crate::params::ParamStore;
use crate::slow::{ItemCache, SlowModel};

/// Environment variable capping query-path threads.
pub const THREADS_ENV: &str = "FASTSLOW_THREADS";

/// Threads used by the slow stage: `FASTSLOW_THREADS` when set, else the
/// available parallelism.
pub fn query_threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(n) if n >= 1 => n,
        _ => avail,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Re-rank budget K.
    pub k: usize,
    /// Weight β of the fast score in h + β·fᵀg.
    pub beta: f64,
    /// Keep φ(x) and cross-attention keys for the whole corpus in memory.
    pub precompute: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 10,
            beta: 0.0,
            precompute: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Fast,
    Slow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: u64,
    pub fast: f64,
    pub slow: Option<f64>,
    pub combined: Option<f64>,
    pub stage: Stage,
}

/// Final ordering; the re-ranked block (stage `Slow`) comes first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    pub items: Vec<Candidate>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<u64> {
        self.items.iter().map(|c| c.id).collect()
    }

    /// Fast order only.
    pub fn from_fast(hits: &[Hit]) -> Self {
        RankedList {
            items: hits
                .iter()
                .map(|h| Candidate {
                    id: h.id,
                    fast: h.score,
                    slow: None,
                    combined: None,
                    stage: Stage::Fast,
                })
                .collect(),
        }
    }
}

/// Re-ranks the first `slow.len()` entries of a full fast ranking by
/// h + β·fᵀg; the tail keeps its fast order.
pub fn rerank(fast: &[Hit], slow: &[f64], beta: f64) -> Result<RankedList> {
    if slow.len() > fast.len() {
        return Err(Error::invalid("rerank", "more slow scores than candidates"));
    }
    if !beta.is_finite() {
        return Err(Error::invalid(
            "rerank",
            format!("beta must be finite, got {beta}"),
        ));
    }
    let mut head: Vec<Candidate> = fast
        .iter()
        .zip(slow)
        .map(|(h, &s)| Candidate {
            id: h.id,
            fast: h.score,
            slow: Some(s),
            combined: Some(s + beta * h.score),
            stage: Stage::Slow,
        })
        .collect();
    head.sort_by(|a, b| {
        let (x, y) = (a.combined.unwrap(), b.combined.unwrap());
        y.total_cmp(&x).then(a.id.cmp(&b.id))
    });
    let mut list = RankedList::from_fast(&fast[slow.len()..]);
    head.append(&mut list.items);
    Ok(RankedList { items: head })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QueryStats {
    pub slow_invocations: u64,
    pub probe_secs: f64,
    pub rerank_secs: f64,
    pub total_secs: f64,
}

enum Source<'a> {
    Cached(HashMap<u64, ItemCache>),
    OnDemand(&'a Dataset),
}

/// The Slow model bound to a corpus, counting every item it scores.
pub struct SlowCorpus<'a> {
    model: &'a SlowModel,
    store: &'a ParamStore,
    source: Source<'a>,
    calls: AtomicU64,
}

impl<'a> SlowCorpus<'a> {
    /// Encodes and caches every listed scene.
    pub fn precompute(
        model: &'a SlowModel,
        store: &'a ParamStore,
        data: &Dataset,
        ids: &[u64],
    ) -> Result<Self> {
        let mut items = HashMap::with_capacity(ids.len());
        for &id in ids {
            let f = model.encode(store, &data.render(id))?;
            items.insert(id, model.prepare(store, f)?);
        }
        Ok(Self::from_items(model, store, items))
    }

    pub fn from_items(
        model: &'a SlowModel,
        store: &'a ParamStore,
        items: HashMap<u64, ItemCache>,
    ) -> Self {
        SlowCorpus {
            model,
            store,
            source: Source::Cached(items),
            calls: AtomicU64::new(0),
        }
    }

    /// Re-encodes items from their renders on every call.
    pub fn on_demand(model: &'a SlowModel, store: &'a ParamStore, data: &'a Dataset) -> Self {
        SlowCorpus {
            model,
            store,
            source: Source::OnDemand(data),
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// h(x, y) for each listed item, in order.
    pub fn score(&self, ids: &[u64], tokens: &[u32]) -> Result<Vec<f64>> {
        self.score_threads(ids, tokens, 1)
    }

    /// As [`Self::score`], split over up to `threads` scoped threads.
    pub fn score_threads(&self, ids: &[u64], tokens: &[u32], threads: usize) -> Result<Vec<f64>> {
        self.calls.fetch_add(ids.len() as u64, Ordering::Relaxed);
        let threads = threads.clamp(1, ids.len().max(1));
        if threads == 1 {
            return self.score_serial(ids, tokens);
        }
        let chunk = ids.len().div_ceil(threads);
        let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
            let handles: Vec<_> = ids
                .chunks(chunk)
                .map(|c| s.spawn(move || self.score_serial(c, tokens)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scoring thread panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(ids.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn score_serial(&self, ids: &[u64], tokens: &[u32]) -> Result<Vec<f64>> {
        match &self.source {
            Source::Cached(items) => {
                let refs = ids
                    .iter()
                    .map(|id| {
                        items.get(id).ok_or_else(|| {
                            Error::Data(format!("scene {id} is not in the slow corpus"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.model.score_items(self.store, &refs, tokens)
            }
            Source::OnDemand(data) => {
                let mut out = Vec::with_capacity(ids.len());
                for &id in ids {
                    let f = self.model.encode(self.store, &data.render(id))?;
                    let item = self.model.prepare(self.store, f)?;
                    out.push(self.model.score_cached(self.store, &item, tokens)?);
                }
                Ok(out)
            }
        }
    }

    /// All listed items ranked by h alone (descending, ties by id).
    pub fn exhaustive(&self, ids: &[u64], tokens: &[u32]) -> Result<RankedList> {
        let h = self.score(ids, tokens)?;
        let mut items: Vec<Candidate> = ids
            .iter()
            .zip(h)
            .map(|(&id, s)| Candidate {
                id,
                fast: 0.0,
                slow: Some(s),
                combined: Some(s),
                stage: Stage::Slow,
            })
            .collect();
        items.sort_by(|a, b| {
            b.slow
                .unwrap()
                .total_cmp(&a.slow.unwrap())
                .then(a.id.cmp(&b.id))
        });
        Ok(RankedList { items })
    }
}

/// Fast model, index and slow corpus wired into one query path.
pub struct RetrievalPipeline<'a> {
    pub fast: &'a DualEncoder,
    pub fast_store: &'a ParamStore,
    pub index: &'a Index,
    pub slow: &'a SlowCorpus<'a>,
    pub cfg: PipelineConfig,
    pub threads: usize,
}

impl<'a> RetrievalPipeline<'a> {
    pub fn new(
        fast: &'a DualEncoder,
        fast_store: &'a ParamStore,
        index: &'a Index,
        slow: &'a SlowCorpus<'a>,
        cfg: PipelineConfig,
    ) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::Config("re-rank budget K must be at least 1".into()));
        }
        if !cfg.beta.is_finite() {
            return Err(Error::Config(format!(
                "beta must be finite, got {}",
                cfg.beta
            )));
        }
        if index.dim() != fast.cfg.embed_dim {
            return Err(Error::Config(format!(
                "index dimension {} differs from embedding dimension {}",
                index.dim(),
                fast.cfg.embed_dim
            )));
        }
        Ok(RetrievalPipeline {
            fast,
            fast_store,
            index,
            slow,
            cfg,
            threads: query_threads(),
        })
    }

    pub fn with_k_beta(&self, k: usize, beta: f64) -> Result<RetrievalPipeline<'a>> {
        let mut p = RetrievalPipeline::new(
            self.fast,
            self.fast_store,
            self.index,
            self.slow,
            PipelineConfig {
                k,
                beta,
                ..self.cfg.clone()
            },
        )?;
        p.threads = self.threads;
        Ok(p)
    }

    /// The whole corpus in fast order.
    pub fn fast_ranking(&self, tokens: &[u32]) -> Result<Vec<Hit>> {
        let g: Vec<f32> = self
            .fast
            .embed_text(self.fast_store, tokens)?
            .iter()
            .map(|&v| v as f32)
            .collect();
        self.index.topk(&g, self.index.len())
    }

    pub fn query(&self, tokens: &[u32]) -> Result<(RankedList, QueryStats)> {
        let start = Instant::now();
        let fast = self.fast_ranking(tokens)?;
        let probe = start.elapsed().as_secs_f64();
        let n = fast.len();
        let mut k = self.cfg.k;
        if k > n {
            log::warn!("K = {k} exceeds corpus size {n}; clamped to {n}");
            k = n;
        }
        let t = Instant::now();
        let before = self.slow.calls();
        let ids: Vec<u64> = fast[..k].iter().map(|h| h.id).collect();
        let h = self.slow.score_threads(&ids, tokens, self.threads)?;
        let list = rerank(&fast, &h, self.cfg.beta)?;
        let rerank_secs = t.elapsed().as_secs_f64();
        let stats = QueryStats {
            slow_invocations: self.slow.calls() - before,
            probe_secs: probe,
            rerank_secs,
            total_secs: start.elapsed().as_secs_f64(),
        };
        Ok((list, stats))
    }

    pub fn query_text(&self, text: &str, vocab: &Vocabulary) -> Result<(RankedList, QueryStats)> {
        self.query(&tokenize(text, vocab)?)
    }
}

/// 1 when `gold` is among the first `k` of `ranking`, else 0.
pub fn recall_at_k(ranking: &[u64], gold: u64, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("recall_at_k", "k must be at least 1"));
    }
    let pos = ranking.iter().position(|&id| id == gold).ok_or_else(|| {
        Error::invalid("recall_at_k", format!("gold id {gold} not in the ranking"))
    })?;
    Ok(if pos < k { 1.0 } else { 0.0 })
}

/// Mean R@k over (ranking, gold) pairs.
pub fn mean_recall(results: &[(Vec<u64>, u64)], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("recall_at_k", "empty query set"));
    }
    let mut total = 0.0;
    for (r, g) in results {
        total += recall_at_k(r, *g, k)?;
    }
    Ok(total / results.len() as f64)
}

/// Evaluation queries: the first caption of every scene in `split`.
pub fn split_queries(data: &Dataset, split: Split) -> Vec<(u64, Vec<u32>)> {
    data.split_ids(split)
        .into_iter()
        .map(|id| (id, data.gold_caption(id).tokens.clone()))
        .collect()
}

/// (R@1, R@5) of the fast model alone over one split.
pub fn fast_recall(
    model: &DualEncoder,
    store: &ParamStore,
    data: &Dataset,
    split: Split,
) -> Result<(f64, f64)> {
    let index = Index::Exact(ExactIndex::build(embed_corpus(model, store, data, split)?)?);
    let mut results = Vec::new();
    for (gold, tokens) in split_queries(data, split) {
        let g: Vec<f32> = model
            .embed_text(store, &tokens)?
            .iter()
            .map(|&v| v as f32)
            .collect();
        let ids = index.topk(&g, index.len())?.iter().map(|h| h.id).collect();
        results.push((ids, gold));
    }
    Ok((
        mean_recall(&results, 1)?,
        mean_recall(&results, 5.min(index.len()))?,
    ))
}

/// (R@1, R@5) of exhaustive slow ranking over `ids`.
pub fn slow_recall(
    slow: &SlowCorpus,
    ids: &[u64],
    queries: &[(u64, Vec<u32>)],
) -> Result<(f64, f64)> {
    let mut results = Vec::new();
    for (gold, tokens) in queries {
        results.push((slow.exhaustive(ids, tokens)?.ids(), *gold));
    }
    Ok((
        mean_recall(&results, 1)?,
        mean_recall(&results, 5.min(ids.len()))?,
    ))
}

/// Label of a re-rank curve row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Rerank(usize),
    FastOnly,
    SlowOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub kind: CurveKind,
    pub beta: f64,
    pub r1: f64,
    pub r5: f64,
    pub mean_slow_calls: f64,
    pub mean_wall_ms: f64,
}

/// R@1, R@5, slow calls and latency for every (K, β), plus a fast-only row
/// and an exhaustive slow-only row.
pub fn rerank_curve(
    pipeline: &RetrievalPipeline,
    queries: &[(u64, Vec<u32>)],
    ks: &[usize],
    betas: &[f64],
) -> Result<Vec<CurveRow>> {
    let n = pipeline.index.len();
    let mut rows = Vec::new();
    let summarize =
        |kind, beta, results: &[(Vec<u64>, u64)], calls: u64, secs: f64| -> Result<CurveRow> {
            let q = results.len() as f64;
            Ok(CurveRow {
                kind,
                beta,
                r1: mean_recall(results, 1)?,
                r5: mean_recall(results, 5.min(n))?,
                mean_slow_calls: calls as f64 / q,
                mean_wall_ms: secs * 1000.0 / q,
            })
        };

    let mut results = Vec::new();
    let t = Instant::now();
    for (gold, tokens) in queries {
        results.push((
            pipeline
                .fast_ranking(tokens)?
                .iter()
                .map(|h| h.id)
                .collect(),
            *gold,
        ));
    }
    rows.push(summarize(
        CurveKind::FastOnly,
        0.0,
        &results,
        0,
        t.elapsed().as_secs_f64(),
    )?);

    for &k in ks {
        if k > n {
            return Err(Error::invalid(
                "rerank_curve",
                format!("K = {k} exceeds corpus size {n}"),
            ));
        }
        for &beta in betas {
            let p = pipeline.with_k_beta(k, beta)?;
            let mut results = Vec::new();
            let (mut calls, mut secs) = (0, 0.0);
            for (gold, tokens) in queries {
                let (list, stats) = p.query(tokens)?;
                calls += stats.slow_invocations;
                secs += stats.total_secs;
                results.push((list.ids(), *gold));
            }
            rows.push(summarize(
                CurveKind::Rerank(k),
                beta,
                &results,
                calls,
                secs,
            )?);
        }
    }

    let ids = pipeline.index.ids().to_vec();
    let before = pipeline.slow.calls();
    let t = Instant::now();
    let mut results = Vec::new();
    for (gold, tokens) in queries {
        results.push((pipeline.slow.exhaustive(&ids, tokens)?.ids(), *gold));
    }
    let calls = pipeline.slow.calls() - before;
    rows.push(summarize(
        CurveKind::SlowOnly,
        0.0,
        &results,
        calls,
        t.elapsed().as_secs_f64(),
    )?);
    Ok(rows)
}

/// Smallest K whose R@1 reaches the slow-only R@1, if any.
pub fn smallest_sufficient_k(rows: &[CurveRow]) -> Option<usize> {
    let slow = rows.iter().find(|r| r.kind == CurveKind::SlowOnly)?.r1;
    rows.iter()
        .filter_map(|r| match r.kind {
            CurveKind::Rerank(k) if r.r1 >= slow => Some(k),
            _ => None,
        })
        .min()
}

/// CSV `K,beta,R1,R5,mean_slow_calls,mean_wall_ms`; reference rows carry
/// `fast_only` / `slow_only` in the K column. With `timings` off the
/// latency column is written as 0.
pub fn curve_csv(rows: &[CurveRow], timings: bool) -> String {
    let mut s = String::from("K,beta,R1,R5,mean_slow_calls,mean_wall_ms\n");
    for r in rows {
        let k = match r.kind {
            CurveKind::Rerank(k) => k.to_string(),
            CurveKind::FastOnly => "fast_only".into(),
            CurveKind::SlowOnly => "slow_only".into(),
        };
        let ms = if timings { r.mean_wall_ms } else { 0.0 };
        let _ = writeln!(
            s,
            "{k},{},{},{},{},{ms}",
            r.beta, r.r1, r.r5, r.mean_slow_calls
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latency {
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl Latency {
    pub fn from_secs(samples: &[f64]) -> Self {
        let mut ms: Vec<f64> = samples.iter().map(|s| s * 1000.0).collect();
        ms.sort_by(f64::total_cmp);
        if ms.is_empty() {
            return Latency {
                median_ms: 0.0,
                p95_ms: 0.0,
            };
        }
        let pick = |q: f64| ms[((q * (ms.len() - 1) as f64).round() as usize).min(ms.len() - 1)];
        let median_ms = if ms.len() % 2 == 1 {
            ms[ms.len() / 2]
        } else {
            0.5 * (ms[ms.len() / 2 - 1] + ms[ms.len() / 2])
        };
        Latency {
            median_ms,
            p95_ms: pick(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastSlowLatency {
    pub k: usize,
    pub total: Latency,
    pub slow_stage: Latency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub n: usize,
    pub queries: usize,
    pub warmup: usize,
    pub fast_only: Latency,
    pub slow_exhaustive: Latency,
    pub fast_slow: Vec<FastSlowLatency>,
}

impl BenchReport {
    /// slow-exhaustive median / fast&slow median at budget `k`.
    pub fn speedup(&self, k: usize) -> Option<f64> {
        let fs = self.fast_slow.iter().find(|r| r.k == k)?;
        Some(self.slow_exhaustive.median_ms / fs.total.median_ms)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "corpus N = {}, {} timed queries after {} warm-up",
            self.n, self.queries, self.warmup
        );
        let _ = writeln!(s, "{:<22} {:>12} {:>12}", "path", "median ms", "p95 ms");
        let mut row = |name: String, l: &Latency| {
            let _ = writeln!(s, "{:<22} {:>12.4} {:>12.4}", name, l.median_ms, l.p95_ms);
        };
        row("fast only".into(), &self.fast_only);
        row("slow exhaustive".into(), &self.slow_exhaustive);
        for fs in &self.fast_slow {
            row(format!("fast&slow K={}", fs.k), &fs.total);
            row(format!("  slow stage K={}", fs.k), &fs.slow_stage);
        }
        for fs in &self.fast_slow {
            if let Some(x) = self.speedup(fs.k) {
                let _ = writeln!(
                    s,
                    "speedup slow-exhaustive / fast&slow K={}: {:.1}x",
                    fs.k, x
                );
            }
        }
        s
    }
}

/// Times fast-only ranking, exhaustive slow ranking and the two-stage path
/// at each K. The first `warmup` queries of each path are run untimed.
/// `exhaustive_queries` caps how many queries the exhaustive path runs.
pub fn benchmark(
    pipeline: &RetrievalPipeline,
    queries: &[Vec<u32>],
    ks: &[usize],
    warmup: usize,
    exhaustive_queries: usize,
) -> Result<BenchReport> {
    if queries.is_empty() {
        return Err(Error::invalid("benchmark", "no queries"));
    }
    let cycle = |i: usize| &queries[i % queries.len()];
    let mut fast = Vec::new();
    for i in 0..warmup + queries.len() {
        let t = Instant::now();
        pipeline.fast_ranking(cycle(i))?;
        if i >= warmup {
            fast.push(t.elapsed().as_secs_f64());
        }
    }
    let ids = pipeline.index.ids().to_vec();
    let mut slow = Vec::new();
    for i in 0..warmup + exhaustive_queries.clamp(1, queries.len()) {
        let t = Instant::now();
        pipeline.slow.exhaustive(&ids, cycle(i))?;
        if i >= warmup {
            slow.push(t.elapsed().as_secs_f64());
        }
    }
    let mut fast_slow = Vec::new();
    for &k in ks {
        let p = pipeline.with_k_beta(k, pipeline.cfg.beta)?;
        let (mut total, mut stage) = (Vec::new(), Vec::new());
        for i in 0..warmup + queries.len() {
            let (_, st) = p.query(cycle(i))?;
            if i >= warmup {
                total.push(st.total_secs);
                stage.push(st.rerank_secs);
            }
        }
        fast_slow.push(FastSlowLatency {
            k,
            total: Latency::from_secs(&total),
            slow_stage: Latency::from_secs(&stage),
        });
    }
    Ok(BenchReport {
        n: ids.len(),
        queries: queries.len(),
        warmup,
        fast_only: Latency::from_secs(&fast),
        slow_exhaustive: Latency::from_secs(&slow),
        fast_slow,
    })
}

/// A corpus of `n` items for latency runs: float32 embeddings uniform in
/// [-1, 1) with ids `0..n`, and slow-stage items cycled from `pool`.
pub fn synthetic_corpus(
    n: usize,
    dim: usize,
    pool: &[ItemCache],
    seed: u64,
) -> Result<(Embeddings, HashMap<u64, ItemCache>)> {
    if pool.is_empty() {
        return Err(Error::invalid("synthetic_corpus", "empty item pool"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let ids: Vec<u64> = (0..n as u64).collect();
    let items = ids
        .iter()
        .map(|&id| (id, pool[id as usize % pool.len()].clone()))
        .collect();
    Ok((Embeddings::new(ids, dim, data)?, items))
}

/// Least-squares fit y = a + b·x; returns (a, b, r²).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let b = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    (my - b * mx, b, r2)
}
