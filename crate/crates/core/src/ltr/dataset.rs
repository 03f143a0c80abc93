//! Query-grouped training data: sampling from first-stage runs and
//! SVMlight-style persistence.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::fnv1a;
use crate::corpus::{Corpus, Qrels, Query, QuerySet};
use crate::error::{Error, Result};
use crate::ivf::Ranking;

pub const DEFAULT_NEGATIVES: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct LtrGroup {
    pub query_id: String,
    /// Internal doc ids; also the tie-break key when ranking the group.
    pub docs: Vec<u32>,
    pub labels: Vec<u32>,
    pub features: Vec<Vec<f64>>,
}

impl LtrGroup {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtrDataset {
    feature_count: usize,
    groups: Vec<LtrGroup>,
}

/// (query id, label, doc id, sparse features) of one SVMlight line.
type ParsedRow = (String, u32, u32, Vec<(usize, f64)>);

impl LtrDataset {
    pub fn new(feature_count: usize, groups: Vec<LtrGroup>) -> Result<Self> {
        for g in &groups {
            if g.is_empty() {
                return Err(Error::invalid(format!("query {} has an empty group", g.query_id)));
            }
            if g.labels.len() != g.docs.len() || g.features.len() != g.docs.len() {
                return Err(Error::invalid(format!("query {} has ragged columns", g.query_id)));
            }
            if let Some(row) = g.features.iter().find(|r| r.len() != feature_count) {
                return Err(Error::DimensionMismatch { expected: feature_count, got: row.len() });
            }
        }
        Ok(Self { feature_count, groups })
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn groups(&self) -> &[LtrGroup] {
        &self.groups
    }

    pub fn num_rows(&self) -> usize {
        self.groups.iter().map(LtrGroup::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|g| g.query_id.as_str())
    }

    /// Apply `f` to every feature row (e.g. a mask projection).
    pub fn map_features(&self, feature_count: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let groups = self
            .groups
            .iter()
            .map(|g| LtrGroup { features: g.features.iter().map(|r| f(r)).collect(), ..g.clone() })
            .collect();
        Self::new(feature_count, groups)
    }

    /// `label qid:<q> 1:<v> ... # <internal doc id>` per row.
    pub fn write_svmlight<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for g in &self.groups {
            for ((doc, label), row) in g.docs.iter().zip(&g.labels).zip(&g.features) {
                write!(w, "{label} qid:{}", g.query_id)?;
                for (i, v) in row.iter().enumerate() {
                    write!(w, " {}:{v}", i + 1)?;
                }
                writeln!(w, " # {doc}")?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_svmlight(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    /// Rows of one query must be contiguous. Features missing from a row
    /// are zero; `feature_count` is the largest index seen.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut rows: Vec<ParsedRow> = Vec::new();
        let mut width = 0;
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = n + 1;
            let (body, comment) = match line.split_once('#') {
                Some((b, c)) => (b, Some(c.trim())),
                None => (line.as_str(), None),
            };
            let mut fields = body.split_whitespace();
            let Some(label) = fields.next() else { continue };
            let label: u32 = label.parse().map_err(|_| Error::parse(path, lineno, format!("bad label `{label}`")))?;
            let qid = fields
                .next()
                .and_then(|f| f.strip_prefix("qid:"))
                .ok_or_else(|| Error::parse(path, lineno, "missing qid"))?
                .to_string();
            let mut feats = Vec::new();
            for f in fields {
                let (i, v) =
                    f.split_once(':').ok_or_else(|| Error::parse(path, lineno, format!("bad feature `{f}`")))?;
                let i: usize = i
                    .parse()
                    .ok()
                    .filter(|&i| i >= 1)
                    .ok_or_else(|| Error::parse(path, lineno, format!("bad feature index `{i}`")))?;
                let v: f64 = v.parse().map_err(|_| Error::parse(path, lineno, format!("bad feature value `{v}`")))?;
                width = width.max(i);
                feats.push((i - 1, v));
            }
            let doc = comment
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::parse(path, lineno, "missing `# <doc id>` comment"))?;
            rows.push((qid, label, doc, feats));
        }
        let mut groups: Vec<LtrGroup> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (qid, label, doc, feats) in rows {
            let mut dense = vec![0.0; width];
            for (i, v) in feats {
                dense[i] = v;
            }
            match groups.last_mut() {
                Some(g) if g.query_id == qid => {
                    g.docs.push(doc);
                    g.labels.push(label);
                    g.features.push(dense);
                }
                _ => {
                    if !seen.insert(qid.clone()) {
                        return Err(Error::invalid(format!("rows of query {qid} are not contiguous")));
                    }
                    groups.push(LtrGroup {
                        query_id: qid,
                        docs: vec![doc],
                        labels: vec![label],
                        features: vec![dense],
                    });
                }
            }
        }
        Self::new(width, groups)
    }
}

/// Docs and labels chosen for one query, before featurization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledGroup {
    pub query_id: String,
    pub docs: Vec<u32>,
    pub labels: Vec<u32>,
}

/// Per-query RNG derived from the global seed and the query id, so the
/// sample of one query does not depend on which other queries exist.
pub(crate) fn query_rng(seed: u64, query_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(query_id.as_bytes()))
}

/// All judged-relevant docs plus `n_neg` negatives drawn uniformly without
/// replacement from the first-stage ranking (relevants excluded). Queries
/// without a relevant doc in the collection are skipped.
pub fn sample_groups(
    queries: &QuerySet,
    qrels: &Qrels,
    corpus: &Corpus,
    first_stage: &BTreeMap<String, Ranking>,
    n_neg: usize,
    seed: u64,
) -> Vec<SampledGroup> {
    let mut out = Vec::new();
    for q in queries.iter() {
        let mut relevant: Vec<(u32, u32)> = qrels
            .for_query(&q.id)
            .into_iter()
            .flatten()
            .filter(|(_, &g)| g > 0)
            .filter_map(|(d, &g)| corpus.internal_id(d).map(|id| (id, g)))
            .collect();
        if relevant.is_empty() {
            continue;
        }
        relevant.sort_unstable();
        let pool: Vec<u32> = first_stage
            .get(&q.id)
            .into_iter()
            .flat_map(|r| r.ids())
            .filter(|id| relevant.binary_search_by_key(id, |&(d, _)| d).is_err())
            .collect();
        let mut picked = if n_neg >= pool.len() {
            (0..pool.len()).collect()
        } else {
            let mut rng = query_rng(seed, &q.id);
            rand::seq::index::sample(&mut rng, pool.len(), n_neg).into_vec()
        };
        picked.sort_unstable();
        let mut docs: Vec<u32> = relevant.iter().map(|&(d, _)| d).collect();
        let mut labels: Vec<u32> = relevant.iter().map(|&(_, g)| g).collect();
        docs.extend(picked.iter().map(|&i| pool[i]));
        labels.resize(docs.len(), 0);
        out.push(SampledGroup { query_id: q.id.clone(), docs, labels });
    }
    out
}

/// Sample groups and featurize them. `featurize` receives the query, its
/// first-stage ranking (empty if none) and the sampled docs, and returns one
/// row per doc.
#[allow(clippy::too_many_arguments)]
pub fn build_training_set<F>(
    queries: &QuerySet,
    qrels: &Qrels,
    corpus: &Corpus,
    first_stage: &BTreeMap<String, Ranking>,
    n_neg: usize,
    seed: u64,
    feature_count: usize,
    featurize: F,
) -> Result<LtrDataset>
where
    F: Fn(&Query, &Ranking, &[u32]) -> Result<Vec<Vec<f64>>> + Sync,
{
    use rayon::prelude::*;
    let by_id: BTreeMap<&str, &Query> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let empty = Ranking::default();
    let groups = sample_groups(queries, qrels, corpus, first_stage, n_neg, seed)
        .into_par_iter()
        .map(|s| {
            let q = by_id[s.query_id.as_str()];
            let ranking = first_stage.get(&s.query_id).unwrap_or(&empty);
            let features = featurize(q, ranking, &s.docs)?;
            Ok(LtrGroup { query_id: s.query_id, docs: s.docs, labels: s.labels, features })
        })
        .collect::<Result<Vec<_>>>()?;
    LtrDataset::new(feature_count, groups)
}
