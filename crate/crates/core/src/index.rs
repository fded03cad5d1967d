//! Maximum inner-product search over item embeddings: an exact scan and a
//! product-quantization index scored by asymmetric table lookups.
//!
//! Vectors are stored as float32. Dot products multiply float32 pairs
//! exactly in float64 and accumulate in float64, so scores are a pure
//! function of the stored data. Ties rank by ascending scene id.
//!
//! Index file `FSIDX1`: magic, u8 kind (0 exact, 1 pq), u64 count, u32
//! dimension, u64 ids; exact then stores float32 rows, pq stores u32 M,
//! u32 Kc, float32 centroids (sub-space major) and codes (u8 when Kc ≤ 256,
//! else u16). A trailing u64 FNV-1a covers every byte after the magic.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fast::Embeddings;
use crate::io::{fnv1a64, verify_trailer, write_atomic, Reader, Writer};

pub const INDEX_MAGIC: &[u8; 6] = b"FSIDX1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub score: f64,
}

/// Descending score, then ascending id.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

/// The `k` best hits in rank order.
pub fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    let k = k.min(hits.len());
    if k == 0 {
        return Vec::new();
    }
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_unstable_by(rank_order);
    hits
}

pub fn dot32(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        s += x as f64 * y as f64;
    }
    s
}

fn check_dim(op: &'static str, query: &[f32], dim: usize) -> Result<()> {
    if query.len() != dim {
        return Err(Error::Shape {
            op,
            lhs: vec![query.len()],
            rhs: vec![dim],
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactIndex {
    pub vectors: Embeddings,
}

impl ExactIndex {
    pub fn build(vectors: Embeddings) -> Result<Self> {
        check_unique(&vectors.ids)?;
        Ok(ExactIndex { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim
    }

    /// qᵀf(x) for every item, in storage order.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<Hit>> {
        check_dim("topk_exact", query, self.dim())?;
        Ok((0..self.len())
            .map(|i| Hit {
                id: self.vectors.ids[i],
                score: dot32(query, self.vectors.row(i)),
            })
            .collect())
    }

    pub fn topk(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        check_k(k, self.len())?;
        Ok(top_k(self.scores(query)?, k))
    }
}

fn check_unique(ids: &[u64]) -> Result<()> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data("index ids must be unique".into()));
    }
    Ok(())
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::invalid(
            "topk",
            format!("k = {k} exceeds corpus size {n}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PqConfig {
    /// Number of sub-spaces M.
    pub m: usize,
    /// Centroids per sub-space Kc.
    pub kc: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for PqConfig {
    fn default() -> Self {
        PqConfig {
            m: 8,
            kc: 256,
            iters: 25,
            seed: 0,
        }
    }
}

/// Per-sub-space codebooks and the k-means error trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub m: usize,
    pub kc: usize,
    pub dsub: usize,
    /// `[m][kc][dsub]`, flattened.
    pub centroids: Vec<f32>,
    /// `errors[s][t]`: mean squared distance to the nearest centroid of
    /// sub-space s after t Lloyd iterations (t = 0 is the seeding).
    pub errors: Vec<Vec<f64>>,
}

impl Codebooks {
    pub fn centroid(&self, s: usize, c: usize) -> &[f32] {
        let off = (s * self.kc + c) * self.dsub;
        &self.centroids[off..off + self.dsub]
    }

    /// Mean quantization error per sub-space after the last iteration.
    pub fn final_errors(&self) -> Vec<f64> {
        self.errors.iter().map(|e| *e.last().unwrap()).collect()
    }

    pub fn encode(&self, v: &[f32]) -> Vec<u16> {
        (0..self.m)
            .map(|s| nearest(&v[s * self.dsub..(s + 1) * self.dsub], self, s).0 as u16)
            .collect()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn nearest(x: &[f32], cb: &Codebooks, s: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..cb.kc {
        let d = sq_dist(x, cb.centroid(s, c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn sub_rows(v: &Embeddings, s: usize, dsub: usize) -> Vec<&[f32]> {
    (0..v.len())
        .map(|i| &v.row(i)[s * dsub..(s + 1) * dsub])
        .collect()
}

/// k-means++ seeding: first centroid uniform, then proportional to the
/// squared distance to the closest chosen centroid.
fn seed_centroids(points: &[&[f32]], kc: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while centroids.len() < kc {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.push(points[pick].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points[pick]));
        }
    }
    centroids
}

/// Product-quantization codebooks: per sub-space, k-means++ seeding from
/// `seed` followed by `iters` Lloyd iterations. Empty clusters keep their
/// centroid.
pub fn train_pq(vectors: &Embeddings, cfg: &PqConfig) -> Result<Codebooks> {
    let (n, e) = (vectors.len(), vectors.dim);
    if cfg.m == 0 || e % cfg.m != 0 {
        return Err(Error::Config(format!(
            "M = {} must divide the dimension {e}",
            cfg.m
        )));
    }
    if cfg.kc == 0 || cfg.kc > 65536 {
        return Err(Error::Config(format!(
            "Kc = {} out of range 1..=65536",
            cfg.kc
        )));
    }
    if n < cfg.kc {
        return Err(Error::invalid(
            "train_pq",
            format!("{n} vectors cannot seed {} centroids", cfg.kc),
        ));
    }
    let dsub = e / cfg.m;
    let mut cb = Codebooks {
        m: cfg.m,
        kc: cfg.kc,
        dsub,
        centroids: vec![0.0; cfg.m * cfg.kc * dsub],
        errors: Vec::with_capacity(cfg.m),
    };
    for s in 0..cfg.m {
        let points = sub_rows(vectors, s, dsub);
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (s as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut cents: Vec<Vec<f64>> = seed_centroids(&points, cfg.kc, &mut rng)
            .into_iter()
            .map(|c| c.into_iter().map(f64::from).collect())
            .collect();
        let mut trace = Vec::with_capacity(cfg.iters + 1);
        let mut assign = vec![0usize; n];
        let assign_all = |cents: &[Vec<f64>], assign: &mut [usize]| -> f64 {
            let mut total = 0.0;
            for (i, p) in points.iter().enumerate() {
                let mut best = (0, f64::INFINITY);
                for (c, cen) in cents.iter().enumerate() {
                    let d: f64 = p
                        .iter()
                        .zip(cen)
                        .map(|(&x, &y)| (x as f64 - y) * (x as f64 - y))
                        .sum();
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                assign[i] = best.0;
                total += best.1;
            }
            total / n as f64
        };
        trace.push(assign_all(&cents, &mut assign));
        for _ in 0..cfg.iters {
            let mut sums = vec![vec![0.0f64; dsub]; cfg.kc];
            let mut counts = vec![0usize; cfg.kc];
            for (i, p) in points.iter().enumerate() {
                counts[assign[i]] += 1;
                for (a, &x) in sums[assign[i]].iter_mut().zip(p.iter()) {
                    *a += x as f64;
                }
            }
            for c in 0..cfg.kc {
                if counts[c] > 0 {
                    cents[c] = sums[c].iter().map(|v| v / counts[c] as f64).collect();
                }
            }
            trace.push(assign_all(&cents, &mut assign));
        }
        for (c, cen) in cents.iter().enumerate() {
            let off = (s * cfg.kc + c) * dsub;
            for (dst, &v) in cb.centroids[off..off + dsub].iter_mut().zip(cen) {
                *dst = v as f32;
            }
        }
        log::debug!("pq sub-space {s}: error {:?}", trace);
        cb.errors.push(trace);
    }
    Ok(cb)
}

/// Whether every error trace is non-increasing up to float64 rounding of
/// the centroid means.
pub fn errors_non_increasing(cb: &Codebooks) -> bool {
    cb.errors.iter().all(|t| {
        t.windows(2)
            .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1e-300))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqIndex {
    pub ids: Vec<u64>,
    pub dim: usize,
    pub codebooks: Codebooks,
    /// `[n][m]` centroid indices.
    pub codes: Vec<u16>,
}

/// Work done by one PQ query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PqQueryStats {
    /// Inner products computed to fill the lookup tables (M·Kc).
    pub table_entries: usize,
    /// Table reads while scoring items (N·M).
    pub lookups: usize,
}

impl PqIndex {
    pub fn build(vectors: &Embeddings, cfg: &PqConfig) -> Result<Self> {
        check_unique(&vectors.ids)?;
        let codebooks = train_pq(vectors, cfg)?;
        Ok(Self::with_codebooks(vectors, codebooks))
    }

    pub fn with_codebooks(vectors: &Embeddings, codebooks: Codebooks) -> Self {
        let codes = (0..vectors.len())
            .flat_map(|i| codebooks.encode(vectors.row(i)))
            .collect();
        PqIndex {
            ids: vectors.ids.clone(),
            dim: vectors.dim,
            codebooks,
            codes,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Decoded vector of item `i`.
    pub fn reconstruct(&self, i: usize) -> Vec<f32> {
        let m = self.codebooks.m;
        (0..m)
            .flat_map(|s| {
                self.codebooks
                    .centroid(s, self.codes[i * m + s] as usize)
                    .to_vec()
            })
            .collect()
    }

    /// `M` tables of query-sub-vector · centroid inner products.
    pub fn tables(&self, query: &[f32]) -> Result<Vec<f64>> {
        check_dim("topk_pq", query, self.dim)?;
        let cb = &self.codebooks;
        let mut t = Vec::with_capacity(cb.m * cb.kc);
        for s in 0..cb.m {
            let q = &query[s * cb.dsub..(s + 1) * cb.dsub];
            for c in 0..cb.kc {
                t.push(dot32(q, cb.centroid(s, c)));
            }
        }
        Ok(t)
    }

    pub fn scores(&self, query: &[f32]) -> Result<(Vec<Hit>, PqQueryStats)> {
        let t = self.tables(query)?;
        let (m, kc) = (self.codebooks.m, self.codebooks.kc);
        let mut stats = PqQueryStats {
            table_entries: t.len(),
            lookups: 0,
        };
        let hits = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let code = &self.codes[i * m..(i + 1) * m];
                let mut s = 0.0;
                for (sub, &c) in code.iter().enumerate() {
                    s += t[sub * kc + c as usize];
                }
                Hit { id, score: s }
            })
            .collect();
        stats.lookups = self.len() * m;
        Ok((hits, stats))
    }

    pub fn topk(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        Ok(self.topk_with_stats(query, k)?.0)
    }

    pub fn topk_with_stats(&self, query: &[f32], k: usize) -> Result<(Vec<Hit>, PqQueryStats)> {
        check_k(k, self.len())?;
        let (hits, stats) = self.scores(query)?;
        Ok((top_k(hits, k), stats))
    }
}

/// An index of either kind behind one search interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Index {
    Exact(ExactIndex),
    Pq(PqIndex),
}

impl Index {
    pub fn len(&self) -> usize {
        match self {
            Index::Exact(x) => x.len(),
            Index::Pq(x) => x.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Index::Exact(x) => x.dim(),
            Index::Pq(x) => x.dim,
        }
    }

    pub fn ids(&self) -> &[u64] {
        match self {
            Index::Exact(x) => &x.vectors.ids,
            Index::Pq(x) => &x.ids,
        }
    }

    pub fn topk(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        match self {
            Index::Exact(x) => x.topk(query, k),
            Index::Pq(x) => x.topk(query, k),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(INDEX_MAGIC);
        w.u8(matches!(self, Index::Pq(_)) as u8);
        w.u64(self.len() as u64);
        w.u32(self.dim() as u32);
        for &id in self.ids() {
            w.u64(id);
        }
        match self {
            Index::Exact(x) => x.vectors.data.iter().for_each(|&v| w.f32(v)),
            Index::Pq(x) => {
                w.u32(x.codebooks.m as u32);
                w.u32(x.codebooks.kc as u32);
                x.codebooks.centroids.iter().for_each(|&v| w.f32(v));
                for &c in &x.codes {
                    if x.codebooks.kc <= 256 {
                        w.u8(c as u8);
                    } else {
                        w.bytes(&c.to_le_bytes());
                    }
                }
            }
        }
        let sum = fnv1a64(&w.buf[INDEX_MAGIC.len()..]);
        w.u64(sum);
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "index");
        r.magic(INDEX_MAGIC)?;
        verify_trailer(buf, INDEX_MAGIC.len(), "index")?;
        let kind = r.u8()?;
        let n = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let index = match kind {
            0 => {
                let data = (0..n * dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                Index::Exact(ExactIndex::build(Embeddings::new(ids, dim, data)?)?)
            }
            1 => {
                let m = r.u32()? as usize;
                let kc = r.u32()? as usize;
                if m == 0 || !dim.is_multiple_of(m) || kc == 0 || kc > 65536 {
                    return Err(Error::Data(format!(
                        "index: invalid PQ parameters M={m} Kc={kc}"
                    )));
                }
                let dsub = dim / m;
                let centroids = (0..m * kc * dsub)
                    .map(|_| r.f32())
                    .collect::<Result<Vec<_>>>()?;
                let codes = (0..n * m)
                    .map(|_| {
                        if kc <= 256 {
                            r.u8().map(u16::from)
                        } else {
                            r.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                if codes.iter().any(|&c| c as usize >= kc) {
                    return Err(Error::Data("index: code out of range".into()));
                }
                Index::Pq(PqIndex {
                    ids,
                    dim,
                    codebooks: Codebooks {
                        m,
                        kc,
                        dsub,
                        centroids,
                        errors: Vec::new(),
                    },
                    codes,
                })
            }
            k => return Err(Error::Data(format!("index: unknown kind tag {k}"))),
        };
        if r.remaining() != 8 {
            return Err(Error::Data("index: length does not match header".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(n: usize, e: usize, seed: u64) -> Embeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * e).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Embeddings::new((0..n as u64).collect(), e, data).unwrap()
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let v = Embeddings::new(vec![7, 3, 5], 1, vec![1.0, 1.0, 2.0]).unwrap();
        let idx = ExactIndex::build(v).unwrap();
        let ids: Vec<u64> = idx.topk(&[1.0], 3).unwrap().iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![5, 3, 7]);
        assert!(idx.topk(&[1.0, 2.0], 1).is_err());
        assert!(idx.topk(&[1.0], 4).is_err());
    }

    #[test]
    fn iters_zero_keeps_seeding_and_lossless_capacity() {
        let v = gaussian(12, 4, 1);
        let cfg = PqConfig {
            m: 1,
            kc: 12,
            iters: 0,
            seed: 3,
        };
        let cb = train_pq(&v, &cfg).unwrap();
        assert_eq!(cb.errors[0], vec![0.0]);
        let more = train_pq(&v, &PqConfig { iters: 4, ..cfg }).unwrap();
        assert_eq!(more.centroids, cb.centroids);
        assert!(train_pq(&v, &PqConfig { kc: 13, ..cfg }).is_err());
        assert!(train_pq(&v, &PqConfig { m: 3, ..cfg }).is_err());
    }

    #[test]
    fn lloyd_error_trace_non_increasing() {
        let v = gaussian(300, 8, 2);
        let cb = train_pq(
            &v,
            &PqConfig {
                m: 2,
                kc: 16,
                iters: 10,
                seed: 0,
            },
        )
        .unwrap();
        assert!(errors_non_increasing(&cb));
        assert!(cb
            .final_errors()
            .iter()
            .zip(&cb.errors)
            .all(|(f, t)| *f < t[0]));
    }

    #[test]
    fn index_file_round_trip() {
        let v = gaussian(40, 8, 4);
        let exact = Index::Exact(ExactIndex::build(v.clone()).unwrap());
        assert_eq!(Index::from_bytes(&exact.to_bytes()).unwrap(), exact);
        let mut pq = PqIndex::build(
            &v,
            &PqConfig {
                m: 2,
                kc: 8,
                iters: 3,
                seed: 1,
            },
        )
        .unwrap();
        let bytes = Index::Pq(pq.clone()).to_bytes();
        pq.codebooks.errors.clear();
        assert_eq!(Index::from_bytes(&bytes).unwrap(), Index::Pq(pq));
        let mut bad = bytes;
        bad[30] ^= 4;
        assert!(Index::from_bytes(&bad).is_err());
    }
}
