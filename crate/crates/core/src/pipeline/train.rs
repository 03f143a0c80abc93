//! Training-set construction from the cascade and model training.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::cascade::Cascade;
use crate::corpus::{Qrels, QuerySet};
use crate::error::{Error, Result};
use crate::features::{FeatureMask, MaskVariant};
use crate::ivf::Ranking;
use crate::ltr::{build_training_set, random_search_tune, train, Ensemble, LtrDataset, SearchSpace, TrainParams};

/// Parameters, or a random search that picks them on the validation set.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainSpec {
    Fixed(TrainParams),
    Tune { base: TrainParams, space: SearchSpace, trials: usize },
}

/// First-stage rankings of every query (in parallel; keyed by query id).
pub fn first_stage_runs(
    cascade: &Cascade,
    queries: &QuerySet,
    depth: usize,
    nprobe: usize,
) -> Result<BTreeMap<String, Ranking>> {
    queries
        .queries()
        .par_iter()
        .map(|q| {
            let v = cascade.encoder.encode(q)?;
            Ok((q.id.clone(), cascade.first_stage(&v, depth, nprobe)?))
        })
        .collect()
}

/// Relevant docs plus `n_neg` sampled first-stage negatives per query,
/// featurized as full (unmasked) blended vectors.
pub fn blended_dataset(
    cascade: &Cascade,
    queries: &QuerySet,
    qrels: &Qrels,
    depth: usize,
    nprobe: usize,
    n_neg: usize,
    seed: u64,
) -> Result<LtrDataset> {
    let runs = first_stage_runs(cascade, queries, depth, nprobe)?;
    let registry = &cascade.registry;
    let ctx = crate::features::FeatureContext { index: &cascade.index, doc_vectors: &cascade.doc_vectors, registry };
    build_training_set(queries, qrels, &cascade.corpus, &runs, n_neg, seed, registry.len(), |q, ranking, docs| {
        let v = cascade.encoder.encode(q)?;
        let tokens = cascade.tokenizer.tokenize(&q.text);
        let reference: Vec<u32> = ranking.ids().collect();
        Ok(ctx.features_for(&tokens, &v, &reference, docs)?.into_iter().map(|b| b.values).collect())
    })
}

pub fn mask_dataset(ds: &LtrDataset, mask: &FeatureMask) -> Result<LtrDataset> {
    ds.map_features(mask.len(), |r| mask.project(r))
}

/// Train one masked model from full blended datasets.
pub fn train_masked(
    train_full: &LtrDataset,
    valid_full: &LtrDataset,
    mask: &FeatureMask,
    spec: &TrainSpec,
) -> Result<Ensemble> {
    let tr = mask_dataset(train_full, mask)?;
    let va = mask_dataset(valid_full, mask)?;
    let params = match spec {
        TrainSpec::Fixed(p) => p.clone(),
        TrainSpec::Tune { base, space, trials } => random_search_tune(&tr, &va, base, space, *trials, base.seed)?.best,
    };
    train(&tr, &va, &params)?.with_mask(mask.clone())
}

pub fn check_disjoint(train: &QuerySet, valid: &QuerySet) -> Result<()> {
    let ids: BTreeSet<&str> = train.iter().map(|q| q.id.as_str()).collect();
    if let Some(q) = valid.iter().find(|q| ids.contains(q.id.as_str())) {
        return Err(Error::invalid(format!("query {} is in both training and validation sets", q.id)));
    }
    Ok(())
}

/// Build training and validation data from the cascade and train a model
/// with the given mask.
#[allow(clippy::too_many_arguments)]
pub fn train_pipeline(
    cascade: &Cascade,
    train_queries: &QuerySet,
    valid_queries: &QuerySet,
    qrels: &Qrels,
    depth: usize,
    nprobe: usize,
    n_neg: usize,
    seed: u64,
    mask: MaskVariant,
    spec: &TrainSpec,
) -> Result<Ensemble> {
    check_disjoint(train_queries, valid_queries)?;
    let tr = blended_dataset(cascade, train_queries, qrels, depth, nprobe, n_neg, seed)?;
    let va = blended_dataset(cascade, valid_queries, qrels, depth, nprobe, n_neg, seed)?;
    train_masked(&tr, &va, &FeatureMask::new(mask, &cascade.registry), spec)
}
