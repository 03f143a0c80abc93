//! First-stage dense retrieval: a k-means coarse quantizer with flat
//! per-cluster posting lists (IVF-flat), probe-limited search, and an
//! exhaustive scan used as the exact oracle.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, expect_magic};
use crate::embed::{cosine_with_norms, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

pub const IVF_MAGIC: &[u8; 5] = b"CRIV1";

/// Similarity used to score documents (and to rank centroids at probe time).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Dot,
    Cosine,
}

impl Metric {
    #[inline]
    fn score<T: Scalar>(self, q: &[T], q_norm: f64, v: &[T], v_norm: f64) -> f64 {
        match self {
            Metric::Dot => scalar::dot(q, v),
            Metric::Cosine => cosine_with_norms(q, v, q_norm, v_norm),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Dot => "dot",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" | "ip" => Ok(Metric::Dot),
            "cosine" | "cos" => Ok(Metric::Cosine),
            other => Err(Error::invalid(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDoc {
    pub id: u32,
    pub score: f64,
    /// 1-based.
    pub rank: u32,
}

/// A ranked candidate list: scores non-increasing, ties by ascending id,
/// ranks contiguous from 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ranking {
    entries: Vec<ScoredDoc>,
}

/// Order used everywhere a ranking is produced: higher score first, then
/// lower id.
#[inline]
pub fn rank_order(a: (u32, f64), b: (u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

impl Ranking {
    /// Sort `(id, score)` pairs into a ranking.
    pub fn from_scores(mut scored: Vec<(u32, f64)>) -> Self {
        scored.sort_by(|&a, &b| rank_order(a, b));
        Self::from_sorted(scored)
    }

    /// Wrap pairs that are already in rank order.
    pub fn from_sorted(sorted: Vec<(u32, f64)>) -> Self {
        debug_assert!(sorted.windows(2).all(|w| rank_order(w[0], w[1]) != Ordering::Greater));
        let entries = sorted
            .into_iter()
            .enumerate()
            .map(|(i, (id, score))| ScoredDoc { id, score, rank: i as u32 + 1 })
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[ScoredDoc] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    pub fn truncated(&self, k: usize) -> Ranking {
        Ranking { entries: self.entries[..k.min(self.entries.len())].to_vec() }
    }
}

#[derive(Debug, Clone, Copy)]
struct HeapItem {
    id: u32,
    score: f64,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    // Greater means worse ranked, so the max-heap top is the weakest kept item.
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order((self.id, self.score), (other.id, other.score))
    }
}

/// Bounded top-k accumulator with the ranking tie rule.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<HeapItem>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    #[inline]
    pub(crate) fn push(&mut self, id: u32, score: f64) {
        let item = HeapItem { id, score };
        if self.heap.len() < self.k {
            self.heap.push(item);
        } else if let Some(top) = self.heap.peek() {
            if item < *top {
                self.heap.pop();
                self.heap.push(item);
            }
        }
    }

    pub(crate) fn into_ranking(self) -> Ranking {
        let sorted = self.heap.into_sorted_vec().into_iter().map(|h| (h.id, h.score)).collect();
        Ranking::from_sorted(sorted)
    }
}

/// k-means cluster centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> Centroids<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::invalid("centroids need k >= 1 rows of dim >= 1"));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dim, data })
    }

    pub fn k(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, c: usize) -> &[T] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    /// Nearest centroid by Euclidean distance, ties to the lowest index.
    pub fn nearest(&self, v: &[T]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (c, cent) in self.iter().enumerate() {
            let d = scalar::sq_dist(v, cent);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }
}

/// Output of [`train_kmeans_traced`].
#[derive(Debug, Clone)]
pub struct KmeansTrace {
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn train_kmeans<T: Scalar>(
    vectors: &EmbeddingMatrix<T>,
    nlist: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Centroids<T>> {
    train_kmeans_traced(vectors, nlist, max_iters, seed).map(|(c, _)| c)
}

/// Lloyd's algorithm with k-means++ seeding under Euclidean distance.
///
/// Empty clusters are reseeded with the point farthest from its current
/// centroid. Stops after `max_iters` assignment steps or once an assignment
/// step changes nothing.
pub fn train_kmeans_traced<T: Scalar>(
    vectors: &EmbeddingMatrix<T>,
    nlist: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Centroids<T>, KmeansTrace)> {
    let n = vectors.rows();
    let dim = vectors.dim();
    if nlist == 0 || nlist > n {
        return Err(Error::invalid(format!("nlist must be in 1..={n}, got {nlist}")));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(vectors, nlist, &mut rng);

    let mut assign = vec![usize::MAX; n];
    let mut trace = KmeansTrace { objective: Vec::new(), iterations: 0, converged: false };
    for _ in 0..max_iters {
        let nearest: Vec<(usize, f64)> = (0..n).into_par_iter().map(|i| centroids.nearest(vectors.row(i))).collect();
        let mut changed = false;
        let mut objective = 0.0;
        let mut dist = vec![0.0f64; n];
        for (i, &(c, d)) in nearest.iter().enumerate() {
            changed |= assign[i] != c;
            assign[i] = c;
            dist[i] = d;
            objective += d;
        }
        trace.objective.push(objective);
        trace.iterations += 1;
        if !changed {
            trace.converged = true;
            break;
        }

        let mut counts = vec![0usize; nlist];
        for &c in &assign {
            counts[c] += 1;
        }
        for c in 0..nlist {
            if counts[c] > 0 {
                continue;
            }
            // Farthest point among clusters that can spare one.
            let far =
                (0..n).filter(|&i| counts[assign[i]] > 1).max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[assign[i]] -= 1;
                assign[i] = c;
                counts[c] = 1;
                dist[i] = 0.0;
            }
        }

        let mut sums = vec![0.0f64; nlist * dim];
        for (i, row) in vectors.iter().enumerate() {
            let s = &mut sums[assign[i] * dim..(assign[i] + 1) * dim];
            for (a, x) in s.iter_mut().zip(row) {
                *a += x.widen();
            }
        }
        for c in 0..nlist {
            if counts[c] == 0 {
                continue;
            }
            let inv = counts[c] as f64;
            for j in 0..dim {
                centroids.data[c * dim + j] = T::narrow(sums[c * dim + j] / inv);
            }
        }
    }
    Ok((centroids, trace))
}

fn kmeans_pp<T: Scalar>(vectors: &EmbeddingMatrix<T>, k: usize, rng: &mut ChaCha8Rng) -> Centroids<T> {
    let n = vectors.rows();
    let dim = vectors.dim();
    let mut chosen = vec![false; n];
    let mut data = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    chosen[first] = true;
    data.extend_from_slice(vectors.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| scalar::sq_dist(vectors.row(i), vectors.row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every remaining point coincides with a center.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = vectors.row(pick);
        data.extend_from_slice(c);
        let updates: Vec<f64> = (0..n).into_par_iter().map(|i| scalar::sq_dist(vectors.row(i), c)).collect();
        for (d, u) in d2.iter_mut().zip(updates) {
            if u < *d {
                *d = u;
            }
        }
    }
    Centroids { dim, data }
}

/// Sum of squared distances from each vector to its nearest centroid.
pub fn kmeans_objective<T: Scalar>(vectors: &EmbeddingMatrix<T>, centroids: &Centroids<T>) -> f64 {
    vectors.iter().map(|v| centroids.nearest(v).1).sum()
}

#[derive(Debug, Clone, PartialEq)]
struct PostingList<T> {
    ids: Vec<u32>,
    vectors: Vec<T>,
    norms: Vec<f64>,
}

/// IVF-flat index: every document lives in the list of its nearest centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex<T> {
    metric: Metric,
    centroids: Centroids<T>,
    centroid_norms: Vec<f64>,
    lists: Vec<PostingList<T>>,
    n_docs: usize,
}

/// Desk-scale default: `max(1, round(sqrt(n)))`.
pub fn default_nlist(n_docs: usize) -> usize {
    ((n_docs as f64).sqrt().round() as usize).max(1)
}

pub fn build_ivf<T: Scalar>(
    vectors: &EmbeddingMatrix<T>,
    centroids: Centroids<T>,
    metric: Metric,
) -> Result<IvfIndex<T>> {
    if vectors.dim() != centroids.dim() {
        return Err(Error::DimensionMismatch { expected: centroids.dim(), got: vectors.dim() });
    }
    let dim = vectors.dim();
    let assign: Vec<usize> = (0..vectors.rows()).into_par_iter().map(|i| centroids.nearest(vectors.row(i)).0).collect();
    let mut lists: Vec<PostingList<T>> =
        (0..centroids.k()).map(|_| PostingList { ids: Vec::new(), vectors: Vec::new(), norms: Vec::new() }).collect();
    for (i, &c) in assign.iter().enumerate() {
        let l = &mut lists[c];
        l.ids.push(i as u32);
        l.vectors.extend_from_slice(vectors.row(i));
        l.norms.push(vectors.norm(i));
    }
    debug_assert!(lists.iter().all(|l| l.vectors.len() == l.ids.len() * dim));
    let centroid_norms = centroids.iter().map(scalar::norm).collect();
    Ok(IvfIndex { metric, centroids, centroid_norms, lists, n_docs: vectors.rows() })
}

impl<T: Scalar> IvfIndex<T> {
    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn nlist(&self) -> usize {
        self.centroids.k()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn centroids(&self) -> &Centroids<T> {
        &self.centroids
    }

    pub fn list_ids(&self, c: usize) -> &[u32] {
        &self.lists[c].ids
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(|l| l.ids.len()).collect()
    }

    /// Centroids ordered by similarity to `q` under the index metric.
    pub fn probe_order(&self, q: &[T]) -> Vec<usize> {
        let qn = scalar::norm(q);
        let mut scored: Vec<(u32, f64)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(c, cent)| (c as u32, self.metric.score(q, qn, cent, self.centroid_norms[c])))
            .collect();
        scored.sort_by(|&a, &b| rank_order(a, b));
        scored.into_iter().map(|(c, _)| c as usize).collect()
    }

    /// Score every document in the `nprobe` closest lists and keep the top `k`.
    pub fn search(&self, q: &[T], k: usize, nprobe: usize) -> Result<Ranking> {
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: q.len() });
        }
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::invalid(format!("nprobe must be in 1..={}, got {nprobe}", self.nlist())));
        }
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        let dim = self.dim();
        let qn = scalar::norm(q);
        let mut top = TopK::new(k);
        for c in self.probe_order(q).into_iter().take(nprobe) {
            let list = &self.lists[c];
            for ((&id, v), &vn) in list.ids.iter().zip(list.vectors.chunks_exact(dim)).zip(&list.norms) {
                top.push(id, self.metric.score(q, qn, v, vn));
            }
        }
        Ok(top.into_ranking())
    }

    /// Search many queries; results are in query order regardless of thread
    /// count.
    pub fn search_batch(&self, queries: &EmbeddingMatrix<T>, k: usize, nprobe: usize) -> Result<Vec<Ranking>> {
        (0..queries.rows()).into_par_iter().map(|i| self.search(queries.row(i), k, nprobe)).collect()
    }
}

impl IvfIndex<f32> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(IVF_MAGIC)?;
        binio::write_u32(w, matches!(self.metric, Metric::Cosine) as u32)?;
        binio::write_u32(w, self.dim() as u32)?;
        binio::write_u32(w, self.nlist() as u32)?;
        binio::write_u32(w, self.n_docs as u32)?;
        for &x in &self.centroids.data {
            binio::write_f32(w, x)?;
        }
        for l in &self.lists {
            binio::write_u32(w, l.ids.len() as u32)?;
            for &id in &l.ids {
                binio::write_u32(w, id)?;
            }
            for &x in &l.vectors {
                binio::write_f32(w, x)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e| Error::Format(format!("CRIV1: {e}"));
        expect_magic(r, IVF_MAGIC).map_err(io)?;
        let metric = match binio::read_u32(r).map_err(io)? {
            0 => Metric::Dot,
            1 => Metric::Cosine,
            m => return Err(Error::Format(format!("CRIV1: unknown metric tag {m}"))),
        };
        let dim = binio::read_u32(r).map_err(io)? as usize;
        let nlist = binio::read_u32(r).map_err(io)? as usize;
        let n_docs = binio::read_u32(r).map_err(io)? as usize;
        let cdata = (0..nlist * dim).map(|_| binio::read_f32(r)).collect::<Result<Vec<_>, _>>().map_err(io)?;
        let centroids = Centroids::new(dim, cdata)?;
        let mut lists = Vec::with_capacity(nlist);
        for _ in 0..nlist {
            let len = binio::read_u32(r).map_err(io)? as usize;
            let ids = (0..len).map(|_| binio::read_u32(r)).collect::<Result<Vec<_>, _>>().map_err(io)?;
            let vectors = (0..len * dim).map(|_| binio::read_f32(r)).collect::<Result<Vec<_>, _>>().map_err(io)?;
            let norms = vectors.chunks_exact(dim).map(scalar::norm).collect();
            lists.push(PostingList { ids, vectors, norms });
        }
        let total: usize = lists.iter().map(|l| l.ids.len()).sum();
        if total != n_docs {
            return Err(Error::Format(format!("CRIV1: lists hold {total} docs, header says {n_docs}")));
        }
        let centroid_norms = centroids.iter().map(scalar::norm).collect();
        Ok(Self { metric, centroids, centroid_norms, lists, n_docs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Exact top-k over all rows.
pub fn exhaustive_search<T: Scalar>(
    vectors: &EmbeddingMatrix<T>,
    q: &[T],
    k: usize,
    metric: Metric,
) -> Result<Ranking> {
    if q.len() != vectors.dim() {
        return Err(Error::DimensionMismatch { expected: vectors.dim(), got: q.len() });
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let qn = scalar::norm(q);
    let mut top = TopK::new(k);
    for (i, v) in vectors.iter().enumerate() {
        top.push(i as u32, metric.score(q, qn, v, vectors.norm(i)));
    }
    Ok(top.into_ranking())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f32>>();
        EmbeddingMatrix::from_flat(dim, data).unwrap()
    }

    /// Independent O(N*D) linear scan: full sort, no heap.
    fn linear_scan(m: &EmbeddingMatrix<f32>, q: &[f32], k: usize, metric: Metric) -> Vec<(u32, f64)> {
        let qn: f64 = q.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let mut all: Vec<(u32, f64)> = (0..m.rows())
            .map(|i| {
                let v = m.row(i);
                let d: f64 = q.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
                let s = match metric {
                    Metric::Dot => d,
                    Metric::Cosine => {
                        let vn: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                        if qn == 0.0 || vn == 0.0 {
                            0.0
                        } else {
                            d / (qn * vn)
                        }
                    }
                };
                (i as u32, s)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn kmeans_nlist_equals_n() {
        let m = random_matrix(12, 3, 1);
        let (c, trace) = train_kmeans_traced(&m, 12, 10, 5).unwrap();
        assert_eq!(kmeans_objective(&m, &c), 0.0);
        assert_eq!(*trace.objective.last().unwrap(), 0.0);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let m = random_matrix(30, 4, 2).cast::<f64>();
        let c = train_kmeans(&m, 1, 5, 0).unwrap();
        for j in 0..4 {
            let mean = (0..30).map(|i| m.row(i)[j]).sum::<f64>() / 30.0;
            assert!((c.get(0)[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_rejects_bad_args() {
        let m = random_matrix(5, 2, 0);
        assert!(train_kmeans(&m, 6, 10, 0).is_err());
        assert!(train_kmeans(&m, 0, 10, 0).is_err());
        assert!(train_kmeans(&m, 2, 0, 0).is_err());
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        for blob in 0..2 {
            let center = if blob == 0 { -10.0 } else { 10.0 };
            for _ in 0..20 {
                let v: Vec<f64> =
                    (0..8).map(|_| center + Distribution::<f64>::sample(&StandardNormal, &mut rng) * 0.5).collect();
                rows.push(v);
            }
        }
        let m = EmbeddingMatrix::from_rows(8, rows).unwrap();
        let c = train_kmeans(&m, 2, 50, 3).unwrap();
        // Brute force: distance of every point to both returned centroids.
        let side = |i: usize| {
            let d0: f64 = m.row(i).iter().zip(c.get(0)).map(|(a, b)| (a - b).powi(2)).sum();
            let d1: f64 = m.row(i).iter().zip(c.get(1)).map(|(a, b)| (a - b).powi(2)).sum();
            d0 > d1
        };
        let first = side(0);
        assert!((0..20).all(|i| side(i) == first));
        assert!((20..40).all(|i| side(i) != first));
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        for seed in 0..5 {
            let m = random_matrix(300, 6, seed).cast::<f64>();
            let (_, trace) = train_kmeans_traced(&m, 17, 40, seed).unwrap();
            for w in trace.objective.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", trace.objective);
            }
        }
    }

    #[test]
    fn kmeans_handles_duplicate_points() {
        let m = EmbeddingMatrix::from_flat(2, vec![1.0f32, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0, 5.0]).unwrap();
        let c = train_kmeans(&m, 3, 10, 0).unwrap();
        assert_eq!(c.k(), 3);
        assert_eq!(kmeans_objective(&m, &c), 0.0);
    }

    #[test]
    fn build_partitions_docs() {
        let m = random_matrix(200, 8, 4);
        let c = train_kmeans(&m, 9, 20, 4).unwrap();
        let idx = build_ivf(&m, c.clone(), Metric::Dot).unwrap();
        assert_eq!(idx.list_sizes().iter().sum::<usize>(), 200);
        let mut seen = vec![0; 200];
        for l in 0..idx.nlist() {
            let ids = idx.list_ids(l);
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
            for &id in ids {
                seen[id as usize] += 1;
                assert_eq!(c.nearest(m.row(id as usize)).0, l);
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert_eq!(build_ivf(&m, c, Metric::Dot).unwrap(), idx);

        let one = build_ivf(&m, train_kmeans(&m, 1, 3, 0).unwrap(), Metric::Dot).unwrap();
        assert_eq!(one.list_sizes(), vec![200]);
    }

    #[test]
    fn build_rejects_dim_mismatch() {
        let m = random_matrix(10, 4, 0);
        let c = Centroids::new(3, vec![0.0f32; 6]).unwrap();
        assert!(matches!(build_ivf(&m, c, Metric::Dot), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn full_probe_equals_exhaustive() {
        for metric in [Metric::Dot, Metric::Cosine] {
            let m = random_matrix(300, 16, 9);
            let idx = build_ivf(&m, train_kmeans(&m, 16, 10, 9).unwrap(), metric).unwrap();
            let qs = random_matrix(10, 16, 99);
            for q in qs.iter() {
                let a = idx.search(q, 25, 16).unwrap();
                let b = exhaustive_search(&m, q, 25, metric).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn exhaustive_matches_linear_scan() {
        for seed in 0..8 {
            let m = random_matrix(150, 7, seed);
            let q = random_matrix(1, 7, 1000 + seed);
            for metric in [Metric::Dot, Metric::Cosine] {
                let got: Vec<(u32, f64)> = exhaustive_search(&m, q.row(0), 20, metric)
                    .unwrap()
                    .entries()
                    .iter()
                    .map(|e| (e.id, e.score))
                    .collect();
                let want = linear_scan(&m, q.row(0), 20, metric);
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    assert_eq!(g.0, w.0);
                    assert!((g.1 - w.1).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn exhaustive_small_cases() {
        let m = EmbeddingMatrix::from_flat(2, vec![0.5f32, 9.0, 2.0, -1.0, 1.0, 0.0]).unwrap();
        let r = exhaustive_search(&m, &[1.0, 0.0], 10, Metric::Dot).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec![1, 2, 0]);
        assert_eq!(r.entries().iter().map(|e| e.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
        // Ties go to the lower id.
        let t = EmbeddingMatrix::from_flat(1, vec![1.0f32, 1.0, 1.0]).unwrap();
        let r = exhaustive_search(&t, &[1.0], 2, Metric::Dot).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec![0, 1]);
        assert!(exhaustive_search(&t, &[1.0, 2.0], 2, Metric::Dot).is_err());
    }

    #[test]
    fn search_finds_stored_vector_with_cosine() {
        let m = random_matrix(100, 8, 21);
        let idx = build_ivf(&m, train_kmeans(&m, 10, 10, 21).unwrap(), Metric::Cosine).unwrap();
        let q = m.row(42);
        let r = idx.search(q, 1, 1).unwrap();
        // With a single probe the doc is found only if its list is the
        // closest under cosine.
        let r_all = idx.search(q, 1, 10).unwrap();
        assert_eq!(r_all.entries()[0].id, 42);
        assert!((r_all.entries()[0].score - 1.0).abs() < 1e-6);
        if r.entries()[0].id == 42 {
            assert!((r.entries()[0].score - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn search_rejects_bad_nprobe() {
        let m = random_matrix(40, 4, 0);
        let idx = build_ivf(&m, train_kmeans(&m, 4, 5, 0).unwrap(), Metric::Dot).unwrap();
        assert!(idx.search(m.row(0), 5, 0).is_err());
        assert!(idx.search(m.row(0), 5, 5).is_err());
        assert!(idx.search(m.row(0), 0, 1).is_err());
    }

    #[test]
    fn candidate_sets_nest_as_nprobe_grows() {
        let m = random_matrix(500, 16, 11);
        let idx = build_ivf(&m, train_kmeans(&m, 32, 20, 11).unwrap(), Metric::Dot).unwrap();
        let qs = random_matrix(20, 16, 12);
        for q in qs.iter() {
            let mut prev: Option<std::collections::HashSet<u32>> = None;
            for p in [1, 2, 4, 8, 16, 32] {
                let set: std::collections::HashSet<u32> = idx.search(q, 500, p).unwrap().ids().collect();
                if let Some(prev) = &prev {
                    assert!(prev.is_subset(&set));
                }
                prev = Some(set);
            }
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let m = random_matrix(64, 5, 3);
        let idx = build_ivf(&m, train_kmeans(&m, 6, 10, 3).unwrap(), Metric::Cosine).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.criv");
        idx.save(&p).unwrap();
        assert_eq!(IvfIndex::load(&p).unwrap(), idx);
    }

    #[test]
    fn default_nlist_rounds_sqrt() {
        assert_eq!(default_nlist(1), 1);
        assert_eq!(default_nlist(0), 1);
        assert_eq!(default_nlist(5000), 71);
        assert_eq!(default_nlist(50_000), 224);
    }
}
