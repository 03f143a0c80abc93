//! Seeded synthetic collections where lexical and dense evidence are both
//! needed to find the relevant documents.
//!
//! Documents belong to topics of uneven size. A document's embedding is its
//! topic vector plus noise, and its text mixes a few topic words with common
//! "generic" words. A query is built from an anchor document: its vector is
//! the topic vector plus noise, its text three generic key words taken from
//! the anchor. A document is relevant only if it is on the same topic AND
//! contains at least two of the key words (grade 2 for all three, else 1).
//! The dense side can find the topic but not the key words; the lexical side
//! finds key words everywhere.

use std::collections::BTreeSet;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::PipelineConfig;
use crate::corpus::{Corpus, Document, Qrels, Query, QuerySet};
use crate::embed::{toy_encode, EmbeddingMatrix};
use crate::error::{Error, Result};

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "de", "po", "lu", "fe"];
const GENERIC_VOCAB: usize = 1500;
const TOPIC_WORDS: usize = 12;
const KEY_WORDS: usize = 3;
const DOC_NOISE: f64 = 0.8;
const QUERY_NOISE: f64 = 0.5;
/// Key words are drawn from anchor words whose document frequency falls
/// in this band, so they are common enough to be ambiguous.
const KEY_DF_BAND: (f64, f64) = (0.04, 0.25);

fn word(i: usize) -> String {
    let mut i = i;
    let mut s = String::new();
    for _ in 0..3 {
        s.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
    }
    while i > 0 {
        s.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
    }
    s
}

fn topic_word(t: usize, j: usize) -> String {
    format!("{}x{}", word(t), word(j))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub queries: QuerySet,
    pub qrels: Qrels,
    pub doc_embeddings: EmbeddingMatrix<f32>,
    pub query_embeddings: EmbeddingMatrix<f32>,
    /// Topic of every document.
    pub doc_topics: Vec<usize>,
}

fn noisy_unit(center: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let d = center.len() as f64;
    let v: Vec<f64> = center
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + noise * z / d.sqrt()
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

pub fn make_synthetic(n_docs: usize, n_queries: usize, dim: usize, seed: u64) -> Result<SyntheticData> {
    if n_docs < 100 {
        return Err(Error::invalid("make_synthetic needs at least 100 documents"));
    }
    if dim == 0 {
        return Err(Error::invalid("dim must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_topics = ((n_docs as f64).sqrt() / 2.0).round().max(4.0) as usize;

    // Uneven topic sizes.
    let topic_w: Vec<f64> = (0..n_topics).map(|t| 1.0 / ((t + 1) as f64).powf(0.8)).collect();
    let topic_dist = WeightedIndex::new(&topic_w).expect("positive weights");
    let topic_vecs: Vec<Vec<f64>> = (0..n_topics)
        .map(|t| {
            let desc: Vec<String> = (0..TOPIC_WORDS).map(|j| topic_word(t, j)).collect();
            toy_encode::<f64>(&desc.join(" "), dim, seed)
        })
        .collect();

    let generic_w: Vec<f64> = (0..GENERIC_VOCAB).map(|r| 1.0 / (r + 10) as f64).collect();
    let generic_dist = WeightedIndex::new(&generic_w).expect("positive weights");
    let words: Vec<String> = (0..GENERIC_VOCAB).map(word).collect();

    let mut docs = Vec::with_capacity(n_docs);
    let mut doc_topics = Vec::with_capacity(n_docs);
    let mut doc_words: Vec<BTreeSet<usize>> = Vec::with_capacity(n_docs);
    let mut emb = Vec::with_capacity(n_docs * dim);
    for i in 0..n_docs {
        let t = topic_dist.sample(&mut rng);
        let len = rng.random_range(20..60);
        let mut toks = Vec::with_capacity(len);
        let mut seen = BTreeSet::new();
        for _ in 0..len {
            if rng.random_bool(0.2) {
                toks.push(topic_word(t, rng.random_range(0..TOPIC_WORDS)));
            } else {
                let w = generic_dist.sample(&mut rng);
                seen.insert(w);
                toks.push(words[w].clone());
            }
        }
        docs.push(Document { id: format!("D{i}"), text: toks.join(" ") });
        doc_topics.push(t);
        doc_words.push(seen);
        emb.extend(noisy_unit(&topic_vecs[t], DOC_NOISE, &mut rng));
    }

    let mut df = vec![0usize; GENERIC_VOCAB];
    for s in &doc_words {
        for &w in s {
            df[w] += 1;
        }
    }
    let (lo, hi) = KEY_DF_BAND;
    let in_band = |w: usize| {
        let f = df[w] as f64 / n_docs as f64;
        f >= lo && f <= hi
    };

    let mut queries = Vec::with_capacity(n_queries);
    let mut qrels = Qrels::default();
    let mut q_emb = Vec::with_capacity(n_queries * dim);
    for qi in 0..n_queries {
        let anchor = rng.random_range(0..n_docs);
        let t = doc_topics[anchor];
        let mut pool: Vec<usize> = doc_words[anchor].iter().copied().filter(|&w| in_band(w)).collect();
        if pool.len() < KEY_WORDS {
            pool = doc_words[anchor].iter().copied().collect();
        }
        pool.shuffle(&mut rng);
        let mut keys: Vec<usize> = pool.into_iter().take(KEY_WORDS).collect();
        keys.sort_unstable();
        let qid = format!("Q{qi}");
        queries.push(Query {
            id: qid.clone(),
            text: keys.iter().map(|&w| words[w].as_str()).collect::<Vec<_>>().join(" "),
        });
        for (d, words) in doc_words.iter().enumerate() {
            if doc_topics[d] != t {
                continue;
            }
            let overlap = keys.iter().filter(|k| words.contains(k)).count();
            let grade = if overlap == keys.len() {
                2
            } else if overlap >= 2 {
                1
            } else {
                0
            };
            if grade > 0 {
                qrels.insert(&qid, &docs[d].id, grade);
            }
        }
        debug_assert_eq!(qrels.grade(&qid, &docs[anchor].id), 2);
        q_emb.extend(noisy_unit(&topic_vecs[t], QUERY_NOISE, &mut rng));
    }

    Ok(SyntheticData {
        corpus: Corpus::new(docs)?,
        queries: QuerySet::new(queries)?,
        qrels,
        doc_embeddings: EmbeddingMatrix::from_flat(dim, emb)?,
        query_embeddings: EmbeddingMatrix::from_flat(dim, q_emb)?,
        doc_topics,
    })
}

impl SyntheticData {
    /// Split the queries in order into consecutive parts of the given sizes.
    pub fn split_queries(&self, sizes: &[usize]) -> Result<Vec<QuerySet>> {
        let all = self.queries.queries();
        if sizes.iter().sum::<usize>() > all.len() {
            return Err(Error::invalid("split sizes exceed the number of queries"));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&n| {
                let part = all[start..start + n].to_vec();
                start += n;
                QuerySet::new(part)
            })
            .collect()
    }

    /// Write `collection.tsv`, `queries.tsv`, `qrels.txt`, `docs.emb`,
    /// `queries.emb` and a `pipeline.conf` pointing at them (and at index
    /// and model paths in the same directory).
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<PipelineConfig> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.corpus.write_tsv(dir.join("collection.tsv"))?;
        self.queries.write_tsv(dir.join("queries.tsv"))?;
        self.qrels.write_trec(dir.join("qrels.txt"))?;
        self.doc_embeddings.save(dir.join("docs.emb"))?;
        self.query_embeddings.save(dir.join("queries.emb"))?;
        let rel = |s: &str| Some(s.into());
        let config = PipelineConfig {
            collection: rel("collection.tsv"),
            queries: rel("queries.tsv"),
            qrels: rel("qrels.txt"),
            doc_embeddings: rel("docs.emb"),
            query_embeddings: rel("queries.emb"),
            query_ids: rel("queries.tsv"),
            lexical_index: rel("lexical.crix"),
            dense_index: rel("dense.criv"),
            model: rel("model.json"),
            dim: self.doc_embeddings.dim(),
            ..PipelineConfig::default()
        };
        let path = dir.join("pipeline.conf");
        std::fs::write(&path, config.to_string()).map_err(|e| Error::io(&path, e))?;
        PipelineConfig::load(&path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_inverted_index;
    use crate::features::extract_lexical;

    #[test]
    fn seeded_and_every_query_has_a_grade_two_doc() {
        let a = make_synthetic(300, 20, 8, 5).unwrap();
        assert_eq!(a, make_synthetic(300, 20, 8, 5).unwrap());
        assert_ne!(a.corpus, make_synthetic(300, 20, 8, 6).unwrap().corpus);
        for q in a.queries.iter() {
            assert!(a.qrels.relevant(&q.id).iter().any(|d| a.qrels.grade(&q.id, d) == 2));
        }
        for i in 0..a.doc_embeddings.rows() {
            assert!((a.doc_embeddings.norm(i) - 1.0).abs() < 1e-5);
        }
        assert!(make_synthetic(99, 1, 8, 0).is_err());
    }

    #[test]
    fn words_are_unique() {
        let ws: BTreeSet<String> = (0..GENERIC_VOCAB).map(word).collect();
        assert_eq!(ws.len(), GENERIC_VOCAB);
    }

    #[test]
    fn bm25_and_cosine_disagree() {
        let data = make_synthetic(1000, 40, 16, 3).unwrap();
        let index = build_inverted_index(&data.corpus);
        let tok = index.tokenizer();
        let bm25 = crate::features::lexical_catalog().iter().position(|n| n == "bm25_sum").unwrap();
        let mut differing = 0;
        for (qi, q) in data.queries.iter().enumerate() {
            let toks = tok.tokenize(&q.text);
            let qv = data.query_embeddings.row(qi);
            let mut bm: Vec<(u32, f64)> = (0..1000u32).map(|d| (d, extract_lexical(&index, &toks, d)[bm25])).collect();
            let mut cs: Vec<(u32, f64)> = (0..1000u32)
                .map(|d| (d, crate::embed::cosine(qv, data.doc_embeddings.row(d as usize)).unwrap()))
                .collect();
            bm.sort_by(|&a, &b| crate::ivf::rank_order(a, b));
            cs.sort_by(|&a, &b| crate::ivf::rank_order(a, b));
            let a: BTreeSet<u32> = bm[..10].iter().map(|x| x.0).collect();
            let b: BTreeSet<u32> = cs[..10].iter().map(|x| x.0).collect();
            differing += (a != b) as usize;
        }
        assert!(differing * 10 > 40, "only {differing} of 40 top-10 sets differ");
    }
}
