//! The two-stage cascade: IVF candidate generation, blended features, and
//! LambdaMART re-ranking of the top candidates.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::PipelineConfig;
use crate::corpus::{load_collection, load_queries, Corpus, InvertedIndex, Qrels, Query, QuerySet, Tokenizer};
use crate::embed::{load_embeddings, toy_encode, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::evalstat::{evaluate_run, EvalConfig, Metric, MetricReport, RunList};
use crate::features::{apply_mask, FeatureContext, FeatureRegistry};
use crate::ivf::{IvfIndex, Ranking};
use crate::ltr::Ensemble;
use crate::scorer::{compile, CompiledEnsemble};

pub enum QueryEncoder {
    /// Precomputed vectors by query id.
    Lookup {
        rows: HashMap<String, usize>,
        vectors: EmbeddingMatrix<f32>,
    },
    Toy {
        dim: usize,
        seed: u64,
    },
}

impl QueryEncoder {
    pub fn lookup<S: Into<String>>(ids: impl IntoIterator<Item = S>, vectors: EmbeddingMatrix<f32>) -> Result<Self> {
        let rows: HashMap<String, usize> = ids.into_iter().enumerate().map(|(i, id)| (id.into(), i)).collect();
        if rows.len() != vectors.rows() {
            return Err(Error::DimensionMismatch { expected: vectors.rows(), got: rows.len() });
        }
        Ok(Self::Lookup { rows, vectors })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Lookup { vectors, .. } => vectors.dim(),
            Self::Toy { dim, .. } => *dim,
        }
    }

    pub fn encode(&self, q: &Query) -> Result<Vec<f32>> {
        match self {
            Self::Lookup { rows, vectors } => rows
                .get(&q.id)
                .map(|&r| vectors.row(r).to_vec())
                .ok_or_else(|| Error::invalid(format!("no embedding for query {}", q.id))),
            Self::Toy { dim, seed } => Ok(toy_encode(&q.text, *dim, *seed)),
        }
    }
}

pub struct Reranker {
    pub ensemble: Ensemble,
    compiled: CompiledEnsemble,
}

impl Reranker {
    pub fn new(ensemble: Ensemble) -> Result<Self> {
        let compiled = compile(&ensemble)?;
        Ok(Self { ensemble, compiled })
    }

    pub fn compiled(&self) -> &CompiledEnsemble {
        &self.compiled
    }
}

/// Cascade knobs for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchSettings {
    pub depth: usize,
    pub nprobe: usize,
    pub rerank_cutoff: usize,
    pub k_final: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct QueryLatency {
    pub encode_ms: f64,
    pub first_stage_ms: f64,
    pub feature_ms: f64,
    pub rerank_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        // Nearest-rank percentiles.
        let pct = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Self { mean: v.iter().sum::<f64>() / v.len() as f64, p50: pct(0.5), p95: pct(0.95) }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LatencyBreakdown {
    pub per_query: Vec<QueryLatency>,
}

impl LatencyBreakdown {
    fn stat(&self, f: impl Fn(&QueryLatency) -> f64) -> Stat {
        Stat::of(&self.per_query.iter().map(f).collect::<Vec<_>>())
    }

    pub fn encode(&self) -> Stat {
        self.stat(|q| q.encode_ms)
    }

    pub fn first_stage(&self) -> Stat {
        self.stat(|q| q.first_stage_ms)
    }

    pub fn features(&self) -> Stat {
        self.stat(|q| q.feature_ms)
    }

    pub fn rerank(&self) -> Stat {
        self.stat(|q| q.rerank_ms)
    }

    pub fn total(&self) -> Stat {
        self.stat(|q| q.total_ms)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{:<14}{:>10}{:>10}{:>10}\n", "stage (ms)", "mean", "p50", "p95");
        for (name, st) in [
            ("encode", self.encode()),
            ("first_stage", self.first_stage()),
            ("features", self.features()),
            ("rerank", self.rerank()),
            ("total", self.total()),
        ] {
            s.push_str(&format!("{name:<14}{:>10.4}{:>10.4}{:>10.4}\n", st.mean, st.p50, st.p95));
        }
        s
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Merged `(doc, score)` list, feature milliseconds, scoring milliseconds.
type Reranked = (Vec<(u32, f64)>, f64, f64);

pub struct Cascade {
    pub corpus: Corpus,
    pub index: InvertedIndex,
    pub doc_vectors: EmbeddingMatrix<f32>,
    pub ivf: IvfIndex<f32>,
    pub registry: FeatureRegistry,
    pub encoder: QueryEncoder,
    pub tokenizer: Tokenizer,
    pub reranker: Option<Reranker>,
}

pub struct BatchOutput {
    pub run: RunList,
    pub latency: LatencyBreakdown,
    pub report: Option<MetricReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub nprobe: usize,
    pub cutoff: usize,
    pub ndcg: f64,
    pub recall: f64,
    pub mrr: f64,
    pub latency_ms: f64,
    pub first_stage_ms: f64,
    pub rerank_ms: f64,
}

impl Cascade {
    pub fn new(
        corpus: Corpus,
        index: InvertedIndex,
        doc_vectors: EmbeddingMatrix<f32>,
        ivf: IvfIndex<f32>,
        encoder: QueryEncoder,
        reranker: Option<Reranker>,
    ) -> Result<Self> {
        let dim = doc_vectors.dim();
        if doc_vectors.rows() != corpus.len() || index.num_docs() != corpus.len() || ivf.n_docs() != corpus.len() {
            return Err(Error::invalid(format!(
                "artifact sizes disagree: {} docs, {} embeddings, {} indexed, {} in IVF",
                corpus.len(),
                doc_vectors.rows(),
                index.num_docs(),
                ivf.n_docs()
            )));
        }
        for got in [ivf.dim(), encoder.dim()] {
            if got != dim {
                return Err(Error::DimensionMismatch { expected: dim, got });
            }
        }
        let registry = FeatureRegistry::new(dim);
        let tokenizer = index.tokenizer();
        let mut c = Self { corpus, index, doc_vectors, ivf, registry, encoder, tokenizer, reranker: None };
        if let Some(r) = reranker {
            c.set_model(r.ensemble)?;
        }
        Ok(c)
    }

    /// Load every artifact named in the config. A missing `model` runs the
    /// first stage only.
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let corpus = load_collection(config.require(&config.collection, "collection")?)?;
        let index = InvertedIndex::load(config.require(&config.lexical_index, "lexical_index")?)?;
        let doc_vectors =
            load_embeddings(config.require(&config.doc_embeddings, "doc_embeddings")?, Some(corpus.len()))?;
        let ivf = IvfIndex::load(config.require(&config.dense_index, "dense_index")?)?;
        let encoder = match &config.query_embeddings {
            Some(p) => {
                let ids_path = config
                    .query_ids
                    .as_deref()
                    .or(config.queries.as_deref())
                    .ok_or_else(|| Error::invalid("query_embeddings needs query_ids or queries"))?;
                let ids = load_queries(ids_path)?;
                let vectors = load_embeddings(p, Some(ids.len()))?;
                QueryEncoder::lookup(ids.iter().map(|q| q.id.clone()), vectors)?
            }
            None => QueryEncoder::Toy { dim: doc_vectors.dim(), seed: config.seed },
        };
        let reranker = match &config.model {
            Some(p) if Path::new(p).exists() => Some(Reranker::new(Ensemble::load(p)?)?),
            Some(p) => {
                log::warn!("model {} not found; running first stage only", p.display());
                None
            }
            None => None,
        };
        Self::new(corpus, index, doc_vectors, ivf, encoder, reranker)
    }

    pub fn set_model(&mut self, ensemble: Ensemble) -> Result<()> {
        match &ensemble.mask {
            Some(m) if m.registry_hash != self.registry.hash() => {
                return Err(Error::RegistryMismatch { vector: self.registry.hash(), mask: m.registry_hash })
            }
            None if ensemble.feature_count != self.registry.len() => {
                return Err(Error::DimensionMismatch { expected: self.registry.len(), got: ensemble.feature_count })
            }
            _ => {}
        }
        self.reranker = Some(Reranker::new(ensemble)?);
        Ok(())
    }

    pub fn settings(&self, config: &PipelineConfig) -> Result<SearchSettings> {
        config.validate()?;
        let s = SearchSettings {
            depth: config.depth,
            nprobe: config.nprobe.unwrap_or(self.ivf.nlist()),
            rerank_cutoff: config.rerank_cutoff,
            k_final: config.k_final,
        };
        if s.nprobe > self.ivf.nlist() {
            return Err(Error::invalid(format!("nprobe {} exceeds nlist {}", s.nprobe, self.ivf.nlist())));
        }
        Ok(s)
    }

    pub fn tag(&self) -> String {
        match &self.reranker {
            Some(r) => match &r.ensemble.mask {
                Some(m) => format!("ltr-{}", m.variant),
                None => "ltr".to_string(),
            },
            None => "first-stage".to_string(),
        }
    }

    pub fn first_stage(&self, q_vec: &[f32], depth: usize, nprobe: usize) -> Result<Ranking> {
        self.ivf.search(q_vec, depth, nprobe)
    }

    /// Blended (and masked, when the model has a mask) feature rows for
    /// `docs`, with the rank feature taken against the whole first-stage list.
    pub fn model_features(
        &self,
        tokens: &[String],
        q_vec: &[f32],
        ranking: &Ranking,
        docs: &[u32],
    ) -> Result<Vec<Vec<f64>>> {
        let ctx = FeatureContext { index: &self.index, doc_vectors: &self.doc_vectors, registry: &self.registry };
        let reference: Vec<u32> = ranking.ids().collect();
        let blended = ctx.features_for(tokens, q_vec, &reference, docs)?;
        let mask = self.reranker.as_ref().and_then(|r| r.ensemble.mask.as_ref());
        blended
            .into_iter()
            .map(|b| match mask {
                Some(m) => apply_mask(&b, m),
                None => Ok(b.values),
            })
            .collect()
    }

    /// Re-rank the top `cutoff` candidates and append the rest in
    /// first-stage order. Returns the merged list plus feature and scoring
    /// times.
    fn rerank(&self, tokens: &[String], q_vec: &[f32], ranking: &Ranking, cutoff: usize) -> Result<Reranked> {
        let entries = ranking.entries();
        let cutoff = cutoff.min(entries.len());
        let reranker = match (&self.reranker, cutoff) {
            (Some(r), c) if c > 0 => r,
            _ => return Ok((entries.iter().map(|e| (e.id, e.score)).collect(), 0.0, 0.0)),
        };
        let t = Instant::now();
        let head: Vec<u32> = entries[..cutoff].iter().map(|e| e.id).collect();
        let rows = self.model_features(tokens, q_vec, ranking, &head)?;
        let feature_ms = ms(t);

        let t = Instant::now();
        let scores = reranker.compiled.score_batch(&rows)?;
        let mut block: Vec<(u32, f64)> = head.into_iter().zip(scores).collect();
        block.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let floor = block.last().map_or(0.0, |b| b.1);
        // Tail keeps first-stage order below the re-ranked block.
        let tail = entries[cutoff..].iter().enumerate().map(|(j, e)| (e.id, floor - (j + 1) as f64));
        block.extend(tail);
        Ok((block, feature_ms, ms(t)))
    }

    /// Run one query through the cascade.
    pub fn run_query(&self, s: &SearchSettings, query: &Query) -> Result<(Vec<(u32, f64)>, QueryLatency)> {
        let start = Instant::now();
        let q_vec = self.encoder.encode(query)?;
        let encode_ms = ms(start);
        let t = Instant::now();
        let ranking = self.first_stage(&q_vec, s.depth, s.nprobe)?;
        let first_stage_ms = ms(t);
        let tokens = self.tokenizer.tokenize(&query.text);
        let (mut merged, feature_ms, rerank_ms) = self.rerank(&tokens, &q_vec, &ranking, s.rerank_cutoff)?;
        merged.truncate(s.k_final);
        Ok((merged, QueryLatency { encode_ms, first_stage_ms, feature_ms, rerank_ms, total_ms: ms(start) }))
    }

    fn to_doc_ids(&self, ranked: Vec<(u32, f64)>) -> Vec<(String, f64)> {
        ranked.into_iter().map(|(id, s)| (self.corpus.doc(id).id.clone(), s)).collect()
    }

    /// Run every query; with `parallel` the queries are spread over the
    /// rayon pool (output order is unaffected).
    pub fn run_batch(
        &self,
        s: &SearchSettings,
        queries: &QuerySet,
        qrels: Option<&Qrels>,
        eval: &EvalConfig,
        parallel: bool,
    ) -> Result<BatchOutput> {
        let one = |q: &Query| self.run_query(s, q);
        let results: Vec<_> = if parallel {
            queries.queries().par_iter().map(one).collect::<Result<_>>()?
        } else {
            queries.iter().map(one).collect::<Result<_>>()?
        };
        let mut run = RunList::new(self.tag());
        let mut latency = LatencyBreakdown::default();
        for (q, (ranked, lat)) in queries.iter().zip(results) {
            run.insert(q.id.clone(), self.to_doc_ids(ranked));
            latency.per_query.push(lat);
        }
        let report = qrels.map(|qr| evaluate_run(&run, &restrict_qrels(qr, queries), eval, ""));
        Ok(BatchOutput { run, latency, report })
    }

    /// Metrics and latency for every `(nprobe, cutoff)`; cutoff 0 (first
    /// stage only) is always included. The first stage runs once per nprobe
    /// and its time is charged to every cutoff row.
    pub fn sweep(
        &self,
        base: &SearchSettings,
        probes: &[usize],
        cutoffs: &[usize],
        queries: &QuerySet,
        qrels: &Qrels,
        eval: &EvalConfig,
    ) -> Result<Vec<SweepRow>> {
        if probes.is_empty() {
            return Err(Error::invalid("probe list is empty"));
        }
        let mut cuts: Vec<usize> = cutoffs.iter().copied().chain([0]).collect();
        cuts.sort_unstable();
        cuts.dedup();
        if let Some(&c) = cuts.iter().find(|&&c| c > base.depth) {
            return Err(Error::invalid(format!("cutoff {c} exceeds depth {}", base.depth)));
        }
        if self.reranker.is_none() && cuts.len() > 1 {
            return Err(Error::invalid("re-ranking cutoffs need a model"));
        }
        let judged = restrict_qrels(qrels, queries);
        let tokens: Vec<Vec<String>> = queries.iter().map(|q| self.tokenizer.tokenize(&q.text)).collect();
        let mut rows = Vec::new();
        for &nprobe in probes {
            if nprobe == 0 || nprobe > self.ivf.nlist() {
                return Err(Error::invalid(format!("nprobe {nprobe} outside 1..={}", self.ivf.nlist())));
            }
            let mut first = Vec::with_capacity(queries.len());
            for q in queries.iter() {
                let t = Instant::now();
                let v = self.encoder.encode(q)?;
                let enc = ms(t);
                let t = Instant::now();
                let r = self.first_stage(&v, base.depth, nprobe)?;
                first.push((v, r, enc, ms(t)));
            }
            for &cutoff in &cuts {
                let mut run = RunList::new(self.tag());
                let mut lat = LatencyBreakdown::default();
                for ((q, toks), (v, ranking, enc, fs)) in queries.iter().zip(&tokens).zip(&first) {
                    let (mut merged, f_ms, r_ms) = self.rerank(toks, v, ranking, cutoff)?;
                    merged.truncate(base.k_final);
                    run.insert(q.id.clone(), self.to_doc_ids(merged));
                    lat.per_query.push(QueryLatency {
                        encode_ms: *enc,
                        first_stage_ms: *fs,
                        feature_ms: f_ms,
                        rerank_ms: r_ms,
                        total_ms: enc + fs + f_ms + r_ms,
                    });
                }
                let rep = evaluate_run(&run, &judged, eval, "");
                rows.push(SweepRow {
                    nprobe,
                    cutoff,
                    ndcg: rep.mean(Metric::Ndcg),
                    recall: rep.mean(Metric::Recall),
                    mrr: rep.mean(Metric::Mrr),
                    latency_ms: lat.total().mean,
                    first_stage_ms: lat.first_stage().mean,
                    rerank_ms: lat.features().mean + lat.rerank().mean,
                });
            }
        }
        Ok(rows)
    }
}

/// Judgments of the given queries only.
pub fn restrict_qrels(qrels: &Qrels, queries: &QuerySet) -> Qrels {
    let mut out = Qrels::default();
    for q in queries.iter() {
        for (d, &g) in qrels.for_query(&q.id).into_iter().flatten() {
            out.insert(&q.id, d, g);
        }
    }
    out
}

/// Deterministic sweep columns (no timings), with a header row.
pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], eval: &EvalConfig, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record([
        "nprobe".to_string(),
        "cutoff".to_string(),
        format!("ndcg@{}", eval.ndcg_k),
        format!("recall@{}", eval.recall_k),
        format!("mrr@{}", eval.mrr_k),
    ])
    .map_err(err)?;
    for r in rows {
        w.write_record([
            r.nprobe.to_string(),
            r.cutoff.to_string(),
            r.ndcg.to_string(),
            r.recall.to_string(),
            r.mrr.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Wall-clock columns of a sweep.
pub fn write_sweep_latency_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["nprobe", "cutoff", "mean_latency_ms", "first_stage_ms", "rerank_ms"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.nprobe.to_string(),
            r.cutoff.to_string(),
            format!("{:.6}", r.latency_ms),
            format!("{:.6}", r.first_stage_ms),
            format!("{:.6}", r.rerank_ms),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}
