//! Blended feature vectors: dense query/doc/delta blocks, cosine, cosine
//! rank, and a fixed catalog of lexical match features.
//!
//! Layout for embedding dimension `D` and `L` lexical features:
//!
//! ```text
//! [0, D)          dense query
//! [D, 2D)         dense doc
//! [2D, 3D)        dense delta (query - doc)
//! 3D              cosine(query, doc)
//! 3D + 1          rank of the doc by cosine among the candidates
//! [3D+2, 3D+2+L)  lexical
//! ```

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binio::fnv1a;
use crate::corpus::{InvertedIndex, TermEntry};
use crate::embed::{cosine_with_norms, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::ivf::{rank_order, Ranking};
use crate::scalar::{self, Scalar};

pub const BM25_K1: f64 = 0.9;
pub const BM25_B: f64 = 0.4;
pub const DIRICHLET_MU: f64 = 1000.0;
/// Two occurrences are "within the window" when `|p1 - p2| < PAIR_WINDOW`.
pub const PAIR_WINDOW: u32 = 8;

const TERM_STATS: [&str; 6] = ["tf", "tf_norm", "idf", "tfidf", "bm25", "lm_dir"];
const AGGREGATES: [&str; 4] = ["sum", "min", "max", "mean"];
const SCALARS: [&str; 8] = [
    "bm25_total",
    "lm_dir_total",
    "query_len",
    "doc_len",
    "matched_terms",
    "matched_ratio",
    "doc_unique_terms",
    "tfidf_cosine",
];
const PROXIMITY: [&str; 4] = ["min_cover_window", "mean_pair_min_dist", "ordered_bigrams", "unordered_pairs_w8"];
const PADDING: usize = 4;

/// Number of features in the canonical lexical catalog.
pub const LEXICAL_LEN: usize = TERM_STATS.len() * AGGREGATES.len() + SCALARS.len() + PROXIMITY.len() + PADDING;

pub fn lexical_catalog() -> Vec<String> {
    let mut names = Vec::with_capacity(LEXICAL_LEN);
    for s in TERM_STATS {
        for a in AGGREGATES {
            names.push(format!("{s}_{a}"));
        }
    }
    names.extend(SCALARS.iter().map(|s| s.to_string()));
    names.extend(PROXIMITY.iter().map(|s| s.to_string()));
    names.extend((0..PADDING).map(|i| format!("pad_{i}")));
    names
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    DenseQuery,
    DenseDoc,
    DenseDelta,
    Cosine,
    Rank,
    Lexical,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::DenseQuery => "dense_query",
            Family::DenseDoc => "dense_doc",
            Family::DenseDelta => "dense_delta",
            Family::Cosine => "cosine",
            Family::Rank => "rank",
            Family::Lexical => "lexical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub id: usize,
    pub name: String,
    pub family: Family,
}

/// Names and families of every feature position for a given `(D, L)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureRegistry {
    dim: usize,
    lexical: Vec<String>,
    hash: u64,
}

impl FeatureRegistry {
    /// Registry with the canonical lexical catalog.
    pub fn new(dim: usize) -> Self {
        Self::with_lexical(dim, lexical_catalog())
    }

    pub fn with_lexical(dim: usize, lexical: Vec<String>) -> Self {
        let mut reg = Self { dim, lexical, hash: 0 };
        let mut bytes = Vec::new();
        for e in reg.entries() {
            bytes.extend_from_slice(e.family.as_str().as_bytes());
            bytes.push(b':');
            bytes.extend_from_slice(e.name.as_bytes());
            bytes.push(b'\n');
        }
        reg.hash = fnv1a(&bytes);
        reg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lexical_len(&self) -> usize {
        self.lexical.len()
    }

    pub fn len(&self) -> usize {
        3 * self.dim + 2 + self.lexical.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cosine_id(&self) -> usize {
        3 * self.dim
    }

    pub fn rank_id(&self) -> usize {
        3 * self.dim + 1
    }

    pub fn lexical_start(&self) -> usize {
        3 * self.dim + 2
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn family(&self, id: usize) -> Family {
        let d = self.dim;
        match id {
            i if i < d => Family::DenseQuery,
            i if i < 2 * d => Family::DenseDoc,
            i if i < 3 * d => Family::DenseDelta,
            i if i == 3 * d => Family::Cosine,
            i if i == 3 * d + 1 => Family::Rank,
            _ => Family::Lexical,
        }
    }

    pub fn entry(&self, id: usize) -> FeatureEntry {
        assert!(id < self.len(), "feature id {id} out of range");
        let d = self.dim;
        let family = self.family(id);
        let name = match family {
            Family::DenseQuery => format!("q_{id}"),
            Family::DenseDoc => format!("d_{}", id - d),
            Family::DenseDelta => format!("delta_{}", id - 2 * d),
            Family::Cosine => "cosine".to_string(),
            Family::Rank => "rank".to_string(),
            Family::Lexical => self.lexical[id - self.lexical_start()].clone(),
        };
        FeatureEntry { id, name, family }
    }

    pub fn entries(&self) -> Vec<FeatureEntry> {
        (0..self.len()).map(|i| self.entry(i)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries())?)
    }
}

/// One (query, candidate) feature vector bound to the registry it was laid
/// out for.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendedVector {
    pub values: Vec<f64>,
    pub registry_hash: u64,
}

/// Concatenate the blocks of a blended vector.
pub fn blend<T: Scalar>(
    registry: &FeatureRegistry,
    q_vec: &[T],
    d_vec: &[T],
    cos: f64,
    rank: u32,
    lexical: &[f64],
) -> Result<BlendedVector> {
    let d = registry.dim();
    for len in [q_vec.len(), d_vec.len()] {
        if len != d {
            return Err(Error::DimensionMismatch { expected: d, got: len });
        }
    }
    if lexical.len() != registry.lexical_len() {
        return Err(Error::DimensionMismatch { expected: registry.lexical_len(), got: lexical.len() });
    }
    if rank == 0 {
        return Err(Error::invalid("rank is 1-based"));
    }
    let mut values = Vec::with_capacity(registry.len());
    values.extend(q_vec.iter().map(|x| x.widen()));
    values.extend(d_vec.iter().map(|x| x.widen()));
    values.extend(q_vec.iter().zip(d_vec).map(|(a, b)| a.widen() - b.widen()));
    values.push(cos);
    values.push(rank as f64);
    values.extend_from_slice(lexical);
    Ok(BlendedVector { values, registry_hash: registry.hash() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskVariant {
    #[default]
    Full,
    Lexical,
    Dense,
}

impl fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskVariant::Full => "full",
            MaskVariant::Lexical => "lexical",
            MaskVariant::Dense => "dense",
        })
    }
}

impl FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MaskVariant::Full),
            "lexical" => Ok(MaskVariant::Lexical),
            "dense" => Ok(MaskVariant::Dense),
            other => Err(Error::invalid(format!("unknown mask `{other}`"))),
        }
    }
}

/// The feature subset a model variant is trained on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub variant: MaskVariant,
    pub included: Vec<usize>,
    pub registry_hash: u64,
}

impl FeatureMask {
    pub fn new(variant: MaskVariant, registry: &FeatureRegistry) -> Self {
        let included = (0..registry.len())
            .filter(|&i| match variant {
                MaskVariant::Full => true,
                MaskVariant::Lexical => {
                    matches!(registry.family(i), Family::Rank | Family::Lexical)
                }
                MaskVariant::Dense => registry.family(i) != Family::Lexical,
            })
            .collect();
        Self { variant, included, registry_hash: registry.hash() }
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    /// Project a raw value slice without the hash check.
    pub fn project(&self, values: &[f64]) -> Vec<f64> {
        self.included.iter().map(|&i| values[i]).collect()
    }
}

pub fn apply_mask(vec: &BlendedVector, mask: &FeatureMask) -> Result<Vec<f64>> {
    if vec.registry_hash != mask.registry_hash {
        return Err(Error::RegistryMismatch { vector: vec.registry_hash, mask: mask.registry_hash });
    }
    Ok(mask.project(&vec.values))
}

struct QueryTerm<'a> {
    term: &'a str,
    /// Occurrences in the query.
    qtf: u32,
    idf: f64,
    /// Collection probability; 0 when the term is not in the index.
    p_coll: f64,
    entry: Option<&'a TermEntry>,
}

/// Lexical extractor bound to one analyzed query. Building it once per query
/// amortizes the term lookups over all candidates.
pub struct LexicalQuery<'a> {
    index: &'a InvertedIndex,
    tokens: &'a [String],
    terms: Vec<QueryTerm<'a>>,
    query_norm: f64,
}

impl<'a> LexicalQuery<'a> {
    pub fn new(index: &'a InvertedIndex, tokens: &'a [String]) -> Self {
        let mut order: Vec<&str> = Vec::new();
        let mut counts: HashMap<&str, u32> = HashMap::new();
        for t in tokens {
            let c = counts.entry(t.as_str()).or_insert(0);
            if *c == 0 {
                order.push(t.as_str());
            }
            *c += 1;
        }
        let total = index.total_tokens() as f64;
        let terms: Vec<QueryTerm> = order
            .into_iter()
            .map(|term| {
                let entry = index.term(term);
                let cf = entry.map_or(0, |e| e.cf);
                QueryTerm {
                    term,
                    qtf: counts[term],
                    idf: index.idf(term),
                    p_coll: if cf > 0 { cf as f64 / total } else { 0.0 },
                    entry,
                }
            })
            .collect();
        let query_norm = terms.iter().map(|t| (t.qtf as f64 * t.idf).powi(2)).sum::<f64>().sqrt();
        Self { index, tokens, terms, query_norm }
    }

    pub fn extract(&self, doc: u32) -> Vec<f64> {
        let index = self.index;
        let dl = index.doc_len(doc) as f64;
        let avgdl = index.avg_doc_len();
        let positions: Vec<Option<&[u32]>> =
            self.terms.iter().map(|t| t.entry.and_then(|e| e.posting(doc)).map(|p| p.positions.as_slice())).collect();

        let mut stats: [Vec<f64>; 6] = Default::default();
        let mut tfidf_dot = 0.0;
        for (t, pos) in self.terms.iter().zip(&positions) {
            let tf = pos.map_or(0, |p| p.len()) as f64;
            let tf_norm = if dl > 0.0 { tf / dl } else { 0.0 };
            let len_norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
            let bm25 = t.idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * len_norm));
            let lm = if t.p_coll > 0.0 { ((tf + DIRICHLET_MU * t.p_coll) / (dl + DIRICHLET_MU)).ln() } else { 0.0 };
            for (s, v) in stats.iter_mut().zip([tf, tf_norm, t.idf, tf * t.idf, bm25, lm]) {
                s.push(v);
            }
            tfidf_dot += t.qtf as f64 * tf * t.idf * t.idf;
        }

        let mut out = Vec::with_capacity(LEXICAL_LEN);
        for s in &stats {
            out.extend(aggregate(s));
        }

        let matched: Vec<&[u32]> = positions.iter().flatten().copied().collect();
        let n_terms = self.terms.len();
        let doc_norm = index.tfidf_norm(doc);
        out.push(stats[4].iter().sum());
        out.push(stats[5].iter().sum());
        out.push(self.tokens.len() as f64);
        out.push(dl);
        out.push(matched.len() as f64);
        out.push(if n_terms > 0 { matched.len() as f64 / n_terms as f64 } else { 0.0 });
        out.push(index.unique_terms(doc) as f64);
        out.push(if self.query_norm > 0.0 && doc_norm > 0.0 { tfidf_dot / (self.query_norm * doc_norm) } else { 0.0 });

        out.push(if matched.len() < 2 { dl + 1.0 } else { min_cover_window(&matched) as f64 });
        out.push(if matched.len() < 2 { dl } else { mean_pair_min_dist(&matched) });
        out.push(self.ordered_bigrams(&positions) as f64);
        out.push(unordered_pairs_within(&matched, PAIR_WINDOW) as f64);
        out.extend([0.0; PADDING]);
        debug_assert_eq!(out.len(), LEXICAL_LEN);
        out
    }

    /// Occurrences in the doc of each adjacent query-token pair, in order.
    fn ordered_bigrams(&self, positions: &[Option<&[u32]>]) -> u64 {
        let slot: HashMap<&str, usize> = self.terms.iter().enumerate().map(|(i, t)| (t.term, i)).collect();
        self.tokens
            .windows(2)
            .map(|w| {
                let (Some(a), Some(b)) = (positions[slot[w[0].as_str()]], positions[slot[w[1].as_str()]]) else {
                    return 0;
                };
                a.iter().filter(|&&p| b.binary_search(&(p + 1)).is_ok()).count() as u64
            })
            .sum()
    }
}

fn aggregate(xs: &[f64]) -> [f64; 4] {
    if xs.is_empty() {
        return [0.0; 4];
    }
    let sum: f64 = xs.iter().sum();
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [sum, min, max, sum / xs.len() as f64]
}

/// Shortest span (last - first + 1) containing at least one occurrence of
/// every term.
fn min_cover_window(terms: &[&[u32]]) -> u32 {
    let mut events: Vec<(u32, usize)> =
        terms.iter().enumerate().flat_map(|(t, ps)| ps.iter().map(move |&p| (p, t))).collect();
    events.sort_unstable();
    let mut counts = vec![0usize; terms.len()];
    let mut covered = 0;
    let mut best = u32::MAX;
    let mut lo = 0;
    for hi in 0..events.len() {
        let t = events[hi].1;
        counts[t] += 1;
        if counts[t] == 1 {
            covered += 1;
        }
        while covered == terms.len() {
            best = best.min(events[hi].0 - events[lo].0 + 1);
            let tl = events[lo].1;
            counts[tl] -= 1;
            if counts[tl] == 0 {
                covered -= 1;
            }
            lo += 1;
        }
    }
    best
}

fn min_distance(a: &[u32], b: &[u32]) -> u32 {
    let (mut i, mut j) = (0, 0);
    let mut best = u32::MAX;
    while i < a.len() && j < b.len() {
        best = best.min(a[i].abs_diff(b[j]));
        if a[i] < b[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    best
}

fn mean_pair_min_dist(terms: &[&[u32]]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..terms.len() {
        for j in i + 1..terms.len() {
            total += min_distance(terms[i], terms[j]) as f64;
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn unordered_pairs_within(terms: &[&[u32]], window: u32) -> u64 {
    let mut count = 0u64;
    for i in 0..terms.len() {
        for j in i + 1..terms.len() {
            for &p in terms[i] {
                let lo = p.saturating_sub(window - 1);
                let hi = p + (window - 1);
                let b = terms[j];
                let start = b.partition_point(|&x| x < lo);
                let end = b.partition_point(|&x| x <= hi);
                count += (end - start) as u64;
            }
        }
    }
    count
}

/// Lexical features for one (query, doc) pair.
pub fn extract_lexical(index: &InvertedIndex, query_tokens: &[String], doc: u32) -> Vec<f64> {
    LexicalQuery::new(index, query_tokens).extract(doc)
}

/// Everything the feature extractor reads.
pub struct FeatureContext<'a, T> {
    pub index: &'a InvertedIndex,
    pub doc_vectors: &'a EmbeddingMatrix<T>,
    pub registry: &'a FeatureRegistry,
}

impl<'a, T: Scalar> FeatureContext<'a, T> {
    /// One blended vector per candidate, in ranking order. The rank feature
    /// is the candidate's position when the list is re-sorted by cosine.
    pub fn candidate_features(
        &self,
        query_tokens: &[String],
        q_vec: &[T],
        ranking: &Ranking,
    ) -> Result<Vec<BlendedVector>> {
        let docs: Vec<u32> = ranking.ids().collect();
        self.features_for(query_tokens, q_vec, &docs, &docs)
    }

    /// Blended vectors for `docs`, ranking each by cosine against the
    /// `reference` candidate list. A doc outside the list gets the rank it
    /// would have if inserted, so training pairs sampled beyond the first
    /// stage are featurized consistently.
    pub fn features_for(
        &self,
        query_tokens: &[String],
        q_vec: &[T],
        reference: &[u32],
        docs: &[u32],
    ) -> Result<Vec<BlendedVector>> {
        let dim = self.registry.dim();
        if q_vec.len() != dim || self.doc_vectors.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: if q_vec.len() != dim { q_vec.len() } else { self.doc_vectors.dim() },
            });
        }
        let qn = scalar::norm(q_vec);
        let cos = |id: u32| {
            let i = id as usize;
            cosine_with_norms(q_vec, self.doc_vectors.row(i), qn, self.doc_vectors.norm(i))
        };
        let mut by_cos: Vec<(u32, f64)> = reference.iter().map(|&id| (id, cos(id))).collect();
        by_cos.sort_by(|&a, &b| rank_order(a, b));

        let lex = LexicalQuery::new(self.index, query_tokens);
        docs.iter()
            .map(|&id| {
                let c = cos(id);
                let ahead = by_cos.partition_point(|&other| rank_order(other, (id, c)).is_lt());
                blend(self.registry, q_vec, self.doc_vectors.row(id as usize), c, ahead as u32 + 1, &lex.extract(id))
            })
            .collect()
    }
}

/// Dump feature rows as TSV with a header of feature names.
pub fn write_feature_tsv<W: Write>(
    w: &mut W,
    registry: &FeatureRegistry,
    rows: &[(String, String, &BlendedVector)],
) -> std::io::Result<()> {
    write!(w, "query_id\tdoc_id")?;
    for e in registry.entries() {
        write!(w, "\t{}", e.name)?;
    }
    writeln!(w)?;
    for (q, d, v) in rows {
        write!(w, "{q}\t{d}")?;
        for x in &v.values {
            write!(w, "\t{x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_inverted_index, tokenize, Corpus, Document};
    use proptest::prelude::*;

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus::new(
            texts.iter().enumerate().map(|(i, t)| Document { id: format!("d{i}"), text: t.to_string() }).collect(),
        )
        .unwrap()
    }

    fn lex_id(name: &str) -> usize {
        lexical_catalog().iter().position(|n| n == name).unwrap()
    }

    #[test]
    fn catalog_has_forty_features() {
        assert_eq!(LEXICAL_LEN, 40);
        let names = lexical_catalog();
        assert_eq!(names.len(), 40);
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), 40);
    }

    #[test]
    fn registry_layout() {
        let r = FeatureRegistry::new(2);
        assert_eq!(r.len(), 3 * 2 + 2 + 40);
        assert_eq!(r.entry(0).family, Family::DenseQuery);
        assert_eq!(r.entry(2).name, "d_0");
        assert_eq!(r.entry(5).name, "delta_1");
        assert_eq!(r.entry(6).family, Family::Cosine);
        assert_eq!(r.entry(7).family, Family::Rank);
        assert_eq!(r.entry(8).name, "tf_sum");
        assert!(r.entries().iter().enumerate().all(|(i, e)| e.id == i));

        let wide = FeatureRegistry::with_lexical(768, (0..253).map(|i| format!("f{i}")).collect());
        assert_eq!(wide.len(), 2559);
        assert_ne!(wide.hash(), FeatureRegistry::new(768).hash());
        let json = r.to_json().unwrap();
        assert!(json.contains("\"family\": \"dense_delta\""));
    }

    #[test]
    fn blend_layout_example() {
        let r = FeatureRegistry::with_lexical(2, vec!["x".into()]);
        let v = blend(&r, &[1.0f64, 0.0], &[0.0, 1.0], 0.0, 3, &[5.0]).unwrap();
        assert_eq!(v.values, vec![1., 0., 0., 1., 1., -1., 0., 3., 5.]);
        assert_eq!(v.registry_hash, r.hash());

        let same = blend(&r, &[0.3f32, 0.4], &[0.3, 0.4], 1.0, 1, &[0.0]).unwrap();
        assert_eq!(&same.values[4..6], &[0.0, 0.0]);
        assert_eq!(same.values[6], 1.0);

        assert!(blend(&r, &[1.0f64], &[0.0, 1.0], 0.0, 1, &[5.0]).is_err());
        assert!(blend(&r, &[1.0f64, 0.0], &[0.0, 1.0], 0.0, 1, &[]).is_err());
    }

    #[test]
    fn mask_examples() {
        let r = FeatureRegistry::with_lexical(2, vec!["x".into()]);
        let v = blend(&r, &[1.0f64, 0.0], &[0.0, 1.0], 0.0, 3, &[5.0]).unwrap();
        let full = FeatureMask::new(MaskVariant::Full, &r);
        assert_eq!(apply_mask(&v, &full).unwrap(), v.values);
        let lex = FeatureMask::new(MaskVariant::Lexical, &r);
        assert_eq!(apply_mask(&v, &lex).unwrap(), vec![3.0, 5.0]);
        let dense = FeatureMask::new(MaskVariant::Dense, &r);
        assert_eq!(apply_mask(&v, &dense).unwrap(), vec![1., 0., 0., 1., 1., -1., 0., 3.]);

        let other = FeatureRegistry::with_lexical(2, vec!["y".into()]);
        let wrong = FeatureMask::new(MaskVariant::Full, &other);
        assert!(matches!(apply_mask(&v, &wrong), Err(Error::RegistryMismatch { .. })));
    }

    #[test]
    fn no_matched_terms() {
        let idx = build_inverted_index(&corpus(&["a b c", "d e"]));
        let q = tokenize("zzz yyy");
        let f = extract_lexical(&idx, &q, 0);
        for s in ["tf_sum", "tf_min", "tf_max", "tf_mean", "bm25_total", "matched_ratio", "matched_terms"] {
            assert_eq!(f[lex_id(s)], 0.0, "{s}");
        }
        assert_eq!(f[lex_id("min_cover_window")], 4.0);
        assert_eq!(f[lex_id("mean_pair_min_dist")], 3.0);
        assert!(f.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn two_term_exact_match() {
        let idx = build_inverted_index(&corpus(&["a b", "c"]));
        let f = extract_lexical(&idx, &tokenize("a b"), 0);
        assert_eq!(f[lex_id("matched_ratio")], 1.0);
        assert_eq!(f[lex_id("ordered_bigrams")], 1.0);
        assert_eq!(f[lex_id("min_cover_window")], 2.0);
        assert_eq!(f[lex_id("mean_pair_min_dist")], 1.0);
        assert_eq!(f[lex_id("unordered_pairs_w8")], 1.0);
        assert_eq!(f[lex_id("query_len")], 2.0);
        assert_eq!(f[lex_id("doc_unique_terms")], 2.0);
        // Reversed query: no ordered bigram.
        let r = extract_lexical(&idx, &tokenize("b a"), 0);
        assert_eq!(r[lex_id("ordered_bigrams")], 0.0);
    }

    #[test]
    fn bm25_one_term_two_docs() {
        // Docs: "x y x" (len 3), "y" (len 1). Query "x": df=1, N=2,
        // avgdl=2. Hand evaluation with k1=0.9, b=0.4:
        //   idf  = ln((2-1+0.5)/(1+0.5) + 1) = ln 2
        //   norm = 1 - 0.4 + 0.4 * 3/2 = 1.2
        //   bm25 = ln2 * 2 * 1.9 / (2 + 0.9*1.2) = ln2 * 3.8 / 3.08
        const EXPECTED: f64 = 0.855_181_586_405_127_3;
        let idx = build_inverted_index(&corpus(&["x y x", "y"]));
        let f = extract_lexical(&idx, &tokenize("x"), 0);
        assert!((f[lex_id("bm25_total")] - EXPECTED).abs() < 1e-12);
        assert!((EXPECTED - std::f64::consts::LN_2 * 3.8 / 3.08).abs() < 1e-15);
        assert_eq!(extract_lexical(&idx, &tokenize("x"), 1)[lex_id("bm25_total")], 0.0);
    }

    #[test]
    fn dirichlet_and_tfidf_cosine() {
        let idx = build_inverted_index(&corpus(&["x y x", "y"]));
        let f = extract_lexical(&idx, &tokenize("x"), 0);
        // p(x|C) = 2/4; (2 + 1000*0.5) / (3 + 1000)
        let want = ((2.0 + 500.0) / 1003.0f64).ln();
        assert!((f[lex_id("lm_dir_total")] - want).abs() < 1e-12);
        // tf-idf cosine between query {x} and doc {x:2, y:1}.
        let idf_x = (1.5f64 / 1.5 + 1.0).ln();
        let idf_y = (0.5f64 / 2.5 + 1.0).ln();
        let dn = ((2.0 * idf_x).powi(2) + idf_y.powi(2)).sqrt();
        let want = 2.0 * idf_x * idf_x / (idf_x * dn);
        assert!((f[lex_id("tfidf_cosine")] - want).abs() < 1e-12);
    }

    #[test]
    fn proximity_helpers() {
        let a: &[u32] = &[0, 10, 20];
        let b: &[u32] = &[13];
        let c: &[u32] = &[5, 22];
        assert_eq!(min_cover_window(&[a, b, c]), 9); // {5, 10, 13}
        assert_eq!(min_distance(a, b), 3);
        assert_eq!(unordered_pairs_within(&[a, b], 8), 2); // 10-13, 20-13
        assert_eq!(unordered_pairs_within(&[a, b], 3), 0);
        assert!((mean_pair_min_dist(&[a, b, c]) - (3.0 + 2.0 + 8.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn candidate_rank_follows_cosine() {
        let c = corpus(&["a", "b"]);
        let idx = build_inverted_index(&c);
        // Doc 0 has the larger dot product but doc 1 the larger cosine.
        let emb = EmbeddingMatrix::from_flat(2, vec![3.0f32, 3.0, 0.9, 0.1]).unwrap();
        let reg = FeatureRegistry::new(2);
        let ctx = FeatureContext { index: &idx, doc_vectors: &emb, registry: &reg };
        let q = [1.0f32, 0.0];
        let ranking = Ranking::from_scores(vec![(0, 6.0), (1, 0.9)]);
        let feats = ctx.candidate_features(&tokenize("a"), &q, &ranking).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[0].values[reg.rank_id()], 2.0);
        assert_eq!(feats[1].values[reg.rank_id()], 1.0);
        let cos0 = crate::embed::cosine(&q, emb.row(0)).unwrap();
        assert_eq!(feats[0].values[reg.cosine_id()], cos0);

        let single = ctx.candidate_features(&tokenize("a"), &q, &Ranking::from_scores(vec![(1, 0.0)])).unwrap();
        assert_eq!(single[0].values[reg.rank_id()], 1.0);
    }

    #[test]
    fn outside_doc_gets_insertion_rank() {
        let c = corpus(&["a", "b", "c"]);
        let idx = build_inverted_index(&c);
        let emb = EmbeddingMatrix::from_flat(1, vec![1.0f32, -1.0, 1.0]).unwrap();
        let reg = FeatureRegistry::new(1);
        let ctx = FeatureContext { index: &idx, doc_vectors: &emb, registry: &reg };
        let f = ctx.features_for(&tokenize("a"), &[1.0f32], &[1], &[2, 1]).unwrap();
        assert_eq!(f[0].values[reg.rank_id()], 1.0);
        assert_eq!(f[1].values[reg.rank_id()], 1.0);
    }

    fn doc_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop_oneof!["a", "b", "c", "d", "e", "f"], 0..25).prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn rank_multiset_and_finiteness(
            docs in proptest::collection::vec(doc_strategy(), 1..12),
            query in "[a-g ]{0,12}",
            seed in 0u64..1000,
        ) {
            let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
            let c = corpus(&refs);
            let idx = build_inverted_index(&c);
            let dim = 4;
            let emb = EmbeddingMatrix::from_rows(
                dim,
                docs.iter().map(|t| crate::embed::toy_encode::<f32>(t, dim, seed)),
            ).unwrap();
            let reg = FeatureRegistry::new(dim);
            let ctx = FeatureContext { index: &idx, doc_vectors: &emb, registry: &reg };
            let qv = crate::embed::toy_encode::<f32>(&query, dim, seed);
            let ranking = Ranking::from_scores((0..c.len() as u32).map(|i| (i, -(i as f64))).collect());
            let tokens = tokenize(&query);
            let feats = ctx.candidate_features(&tokens, &qv, &ranking).unwrap();
            let mut ranks: Vec<u32> = feats.iter().map(|f| f.values[reg.rank_id()] as u32).collect();
            ranks.sort_unstable();
            prop_assert_eq!(ranks, (1..=c.len() as u32).collect::<Vec<_>>());
            for f in &feats {
                prop_assert_eq!(f.values.len(), reg.len());
                prop_assert!(f.values.iter().all(|x| x.is_finite()));
            }
            // Lexical block is pointwise: the same with no other candidates.
            let last = ranking.len() - 1;
            let only = Ranking::from_scores(vec![(ranking.entries()[last].id, 0.0)]);
            let solo = ctx.candidate_features(&tokens, &qv, &only).unwrap();
            prop_assert_eq!(&feats[last].values[reg.lexical_start()..], &solo[0].values[reg.lexical_start()..]);
        }

        #[test]
        fn blend_is_injective(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let r = FeatureRegistry::with_lexical(2, vec!["x".into()]);
            let va = blend(&r, &a[0..2], &a[2..4], a[4], 1, &a[5..6]).unwrap();
            let vb = blend(&r, &b[0..2], &b[2..4], b[4], 1, &b[5..6]).unwrap();
            prop_assert_eq!(a == b, va == vb);
        }
    }
}
