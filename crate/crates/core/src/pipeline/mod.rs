//! End-to-end orchestration: index building, the retrieval cascade,
//! training, sweeps and synthetic data.

mod cascade;
mod config;
mod synthetic;
mod train;

pub use cascade::{
    restrict_qrels, write_sweep_csv, write_sweep_latency_csv, BatchOutput, Cascade, LatencyBreakdown, QueryEncoder,
    QueryLatency, Reranker, SearchSettings, Stat, SweepRow,
};
pub use config::PipelineConfig;
pub use synthetic::{make_synthetic, SyntheticData};
pub use train::{
    blended_dataset, check_disjoint, first_stage_runs, mask_dataset, train_masked, train_pipeline, TrainSpec,
};

use crate::corpus::{load_collection, Corpus, InvertedIndex, Tokenizer};
use crate::embed::{load_embeddings, EmbeddingMatrix};
use crate::error::Result;
use crate::ivf::{build_ivf, default_nlist, train_kmeans, IvfIndex, Metric};

pub fn build_lexical_index(corpus: &Corpus, stem: bool) -> InvertedIndex {
    InvertedIndex::build(corpus, &Tokenizer::new(stem))
}

pub fn build_dense_index(
    vectors: &EmbeddingMatrix<f32>,
    nlist: Option<usize>,
    metric: Metric,
    iters: usize,
    seed: u64,
) -> Result<IvfIndex<f32>> {
    let nlist = nlist.unwrap_or_else(|| default_nlist(vectors.rows()));
    build_ivf(vectors, train_kmeans(vectors, nlist, iters, seed)?, metric)
}

/// Build and save both indexes named in the config.
pub fn build_indexes(config: &PipelineConfig) -> Result<()> {
    let corpus = load_collection(config.require(&config.collection, "collection")?)?;
    build_lexical_index(&corpus, config.stem).save(config.require(&config.lexical_index, "lexical_index")?)?;
    let vectors = load_embeddings(config.require(&config.doc_embeddings, "doc_embeddings")?, Some(corpus.len()))?;
    build_dense_index(&vectors, config.nlist, config.metric, config.kmeans_iters, config.seed)?
        .save(config.require(&config.dense_index, "dense_index")?)
}

/// An in-memory cascade over synthetic data (no model yet).
pub fn synthetic_cascade(data: &SyntheticData, nlist: Option<usize>, metric: Metric, seed: u64) -> Result<Cascade> {
    let index = build_lexical_index(&data.corpus, false);
    let ivf = build_dense_index(&data.doc_embeddings, nlist, metric, 25, seed)?;
    let encoder = QueryEncoder::lookup(data.queries.iter().map(|q| q.id.clone()), data.query_embeddings.clone())?;
    Cascade::new(data.corpus.clone(), index, data.doc_embeddings.clone(), ivf, encoder, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalstat::{EvalConfig, Metric as M};
    use crate::features::MaskVariant;
    use crate::ltr::TrainParams;
    use std::collections::BTreeSet;

    fn params() -> TrainParams {
        TrainParams {
            learning_rate: 0.1,
            num_leaves: 16,
            min_sum_hessian_leaf: 10.0,
            min_data_leaf: 20,
            patience: 10,
            max_trees: 40,
            ..TrainParams::default()
        }
    }

    fn setup() -> (SyntheticData, Cascade, Vec<crate::corpus::QuerySet>) {
        let data = make_synthetic(600, 80, 16, 11).unwrap();
        let cascade = synthetic_cascade(&data, Some(12), Metric::Dot, 11).unwrap();
        let splits = data.split_queries(&[40, 20, 20]).unwrap();
        (data, cascade, splits)
    }

    #[test]
    fn cascade_invariants() {
        let (data, mut cascade, splits) = setup();
        let model = train_pipeline(
            &cascade,
            &splits[0],
            &splits[1],
            &data.qrels,
            200,
            12,
            30,
            1,
            MaskVariant::Full,
            &TrainSpec::Fixed(params()),
        )
        .unwrap();
        assert!(model.metadata.is_some());
        let eval = EvalConfig::default();
        let s = SearchSettings { depth: 200, nprobe: 4, rerank_cutoff: 0, k_final: 200 };

        // Without a model (or with cutoff 0) the output is the first stage.
        let fs = cascade.run_batch(&s, &splits[2], Some(&data.qrels), &eval, false).unwrap();
        assert_eq!(fs.run.tag, "first-stage");
        cascade.set_model(model).unwrap();
        let same = cascade.run_batch(&s, &splits[2], Some(&data.qrels), &eval, false).unwrap();
        assert_eq!(same.run.iter().collect::<Vec<_>>(), fs.run.iter().collect::<Vec<_>>());

        for cutoff in [20, 200] {
            let s = SearchSettings { rerank_cutoff: cutoff, ..s };
            let rr = cascade.run_batch(&s, &splits[2], Some(&data.qrels), &eval, true).unwrap();
            for (q, entries) in rr.run.iter() {
                let a: BTreeSet<&str> = entries.iter().map(|e| e.doc_id.as_str()).collect();
                let b: BTreeSet<&str> = fs.run.get(q).unwrap().iter().map(|e| e.doc_id.as_str()).collect();
                assert_eq!(a, b);
                assert!(entries.windows(2).all(|w| w[0].score >= w[1].score));
                // The tail below the cutoff keeps first-stage order.
                let tail: Vec<&str> = entries[cutoff.min(entries.len())..].iter().map(|e| e.doc_id.as_str()).collect();
                let fs_tail: Vec<&str> =
                    fs.run.get(q).unwrap()[cutoff.min(entries.len())..].iter().map(|e| e.doc_id.as_str()).collect();
                assert_eq!(tail, fs_tail);
            }
            let (a, b) = (rr.report.unwrap(), fs.report.as_ref().unwrap().clone());
            assert_eq!(a.mean(M::Recall), b.mean(M::Recall));
            for l in &rr.latency.per_query {
                assert!(l.total_ms + 1e-3 >= l.encode_ms + l.first_stage_ms + l.feature_ms + l.rerank_ms);
            }
        }
    }

    #[test]
    fn sweep_rows_and_recall_monotone() {
        let (data, mut cascade, splits) = setup();
        let model = train_pipeline(
            &cascade,
            &splits[0],
            &splits[1],
            &data.qrels,
            200,
            12,
            30,
            1,
            MaskVariant::Dense,
            &TrainSpec::Fixed(params()),
        )
        .unwrap();
        cascade.set_model(model).unwrap();
        let s = SearchSettings { depth: 200, nprobe: 12, rerank_cutoff: 100, k_final: 200 };
        let eval = EvalConfig { recall_k: 200, ..EvalConfig::default() };
        let rows = cascade.sweep(&s, &[1, 3, 12], &[20, 100], &splits[2], &data.qrels, &eval).unwrap();
        assert_eq!(rows.len(), 9);
        for cutoff in [0, 20, 100] {
            let r: Vec<f64> = rows.iter().filter(|r| r.cutoff == cutoff).map(|r| r.recall).collect();
            assert!(r.windows(2).all(|w| w[0] <= w[1]));
        }
        let mut a = Vec::new();
        write_sweep_csv(&rows, &eval, &mut a).unwrap();
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("nprobe,cutoff,ndcg@10,recall@200,mrr@10\n"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn train_rejects_overlapping_splits() {
        let (data, cascade, splits) = setup();
        let err = train_pipeline(
            &cascade,
            &splits[0],
            &splits[0],
            &data.qrels,
            100,
            4,
            10,
            1,
            MaskVariant::Full,
            &TrainSpec::Fixed(params()),
        );
        assert!(err.is_err());
    }

    #[test]
    fn files_round_trip_through_config() {
        let data = make_synthetic(200, 10, 8, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut config = data.write_to_dir(dir.path()).unwrap();
        config.nlist = Some(8);
        build_indexes(&config).unwrap();
        let cascade = Cascade::load(&config).unwrap();
        assert!(cascade.reranker.is_none());
        let s =
            cascade.settings(&PipelineConfig { depth: 50, rerank_cutoff: 50, k_final: 10, ..config.clone() }).unwrap();
        let out = cascade.run_batch(&s, &data.queries, Some(&data.qrels), &EvalConfig::default(), false).unwrap();
        assert_eq!(out.run.len(), 10);
        assert!(out.run.iter().all(|(_, e)| e.len() == 10));
    }
}
