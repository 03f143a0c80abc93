//! LambdaMART boosting with early stopping on validation nDCG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{LtrDataset, LtrGroup};
use super::lambda::{compute_lambdas, group_ndcg};
use super::tree::{ColumnMatrix, RegressionTree, SplitParams, TreeLearner};
use crate::error::{Error, Result};
use crate::features::FeatureMask;

pub const MODEL_FORMAT: &str = "blendrank-lambdamart";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub num_leaves: usize,
    pub min_sum_hessian_leaf: f64,
    pub min_data_leaf: usize,
    pub patience: usize,
    pub max_trees: usize,
    pub truncation: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            num_leaves: 64,
            min_sum_hessian_leaf: 10.0,
            min_data_leaf: 100,
            patience: 30,
            max_trees: 500,
            truncation: 10,
            sigma: 1.0,
            seed: 0,
        }
    }
}

impl TrainParams {
    pub const LEARNING_RATE_RANGE: (f64, f64) = (0.01, 0.2);
    pub const MIN_HESSIAN_RANGE: (f64, f64) = (10.0, 150.0);
    /// The upper end follows the published range; the lower end is relaxed
    /// from 100 so small datasets can still split.
    pub const MIN_DATA_RANGE: (usize, usize) = (1, 5000);

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !in_range(self.learning_rate, Self::LEARNING_RATE_RANGE) {
            return Err(Error::invalid(format!("learning_rate {} outside [0.01, 0.2]", self.learning_rate)));
        }
        if !in_range(self.min_sum_hessian_leaf, Self::MIN_HESSIAN_RANGE) {
            return Err(Error::invalid(format!(
                "min_sum_hessian_leaf {} outside [10, 150]",
                self.min_sum_hessian_leaf
            )));
        }
        let (lo, hi) = Self::MIN_DATA_RANGE;
        if self.min_data_leaf < lo || self.min_data_leaf > hi {
            return Err(Error::invalid(format!("min_data_leaf {} outside [{lo}, {hi}]", self.min_data_leaf)));
        }
        if !(1..=64).contains(&self.num_leaves) {
            return Err(Error::invalid("num_leaves must be in [1, 64]"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.truncation == 0 {
            return Err(Error::invalid("truncation must be at least 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma must be positive"));
        }
        Ok(())
    }

    fn split_params(&self) -> SplitParams {
        SplitParams {
            num_leaves: self.num_leaves,
            min_data_leaf: self.min_data_leaf,
            min_sum_hessian_leaf: self.min_sum_hessian_leaf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub valid_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub params: TrainParams,
    /// Iteration 0 is the empty model.
    pub train_log: Vec<LogRow>,
    pub best_iteration: usize,
    pub best_valid_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub format: String,
    pub version: u32,
    pub learning_rate: f64,
    pub feature_count: usize,
    /// Present when the model consumes masked blended vectors.
    pub mask: Option<FeatureMask>,
    pub registry_hash: Option<u64>,
    pub trees: Vec<RegressionTree>,
    pub metadata: Option<TrainMetadata>,
}

impl Ensemble {
    pub fn new(learning_rate: f64, feature_count: usize, trees: Vec<RegressionTree>) -> Result<Self> {
        let e = Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            learning_rate,
            feature_count,
            mask: None,
            registry_hash: None,
            trees,
            metadata: None,
        };
        e.check()?;
        Ok(e)
    }

    pub fn with_mask(mut self, mask: FeatureMask) -> Result<Self> {
        if mask.len() != self.feature_count {
            return Err(Error::DimensionMismatch { expected: self.feature_count, got: mask.len() });
        }
        self.registry_hash = Some(mask.registry_hash);
        self.mask = Some(mask);
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model {} v{}", self.format, self.version)));
        }
        for (t, tree) in self.trees.iter().enumerate() {
            let tree = RegressionTree::from_nodes(tree.nodes().to_vec())?;
            if let Some(f) = tree.max_feature().filter(|&f| f >= self.feature_count) {
                return Err(Error::invalid(format!("tree {t} uses feature {f} of {}", self.feature_count)));
            }
        }
        if let Some(m) = &self.mask {
            if m.len() != self.feature_count {
                return Err(Error::DimensionMismatch { expected: self.feature_count, got: m.len() });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    /// Naive traversal: `Σ_t learning_rate · tree_t(x)` in tree order.
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for t in &self.trees {
            s += self.learning_rate * t.predict(x);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: Self = serde_json::from_str(s)?;
        e.check()?;
        Ok(e)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = self.to_json()?;
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Training log as `iteration,valid_ndcg` CSV.
    pub fn write_log_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?));
        let rows = self.metadata.as_ref().map(|m| m.train_log.as_slice()).unwrap_or_default();
        let to_err = |e: csv::Error| Error::Format(e.to_string());
        for r in rows {
            w.serialize(r).map_err(to_err)?;
        }
        if rows.is_empty() {
            w.write_record(["iteration", "valid_ndcg"]).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Rows of every group in doc-id order, flattened.
struct Packed {
    matrix: ColumnMatrix,
    offsets: Vec<usize>,
    labels: Vec<u32>,
    keys: Vec<u32>,
}

fn canonical_order(g: &LtrGroup) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| {
        g.docs[a].cmp(&g.docs[b]).then(g.labels[a].cmp(&g.labels[b])).then_with(|| {
            g.features[a]
                .iter()
                .zip(&g.features[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    order
}

fn pack(ds: &LtrDataset) -> Result<Packed> {
    let mut rows: Vec<&[f64]> = Vec::with_capacity(ds.num_rows());
    let mut offsets = vec![0];
    let mut labels = Vec::new();
    let mut keys = Vec::new();
    for g in ds.groups() {
        for i in canonical_order(g) {
            rows.push(&g.features[i]);
            labels.push(g.labels[i]);
            keys.push(g.docs[i]);
        }
        offsets.push(rows.len());
    }
    Ok(Packed { matrix: ColumnMatrix::from_rows(&rows, ds.feature_count())?, offsets, labels, keys })
}

fn mean_ndcg(scores: &[f64], p: &Packed, truncation: usize) -> f64 {
    let n = p.offsets.len() - 1;
    let per: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|g| {
            let r = p.offsets[g]..p.offsets[g + 1];
            group_ndcg(&scores[r.clone()], &p.labels[r.clone()], &p.keys[r], truncation)
        })
        .collect();
    per.iter().sum::<f64>() / n as f64
}

/// Mean nDCG@truncation of `ensemble` on `ds` (ties broken by doc id).
pub fn evaluate(ensemble: &Ensemble, ds: &LtrDataset, truncation: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = pack(ds)?;
    let scores: Vec<f64> = (0..p.matrix.rows())
        .into_par_iter()
        .map(|r| {
            let mut s = 0.0;
            for t in &ensemble.trees {
                s += ensemble.learning_rate * t.predict_column(&p.matrix, r);
            }
            s
        })
        .collect();
    Ok(mean_ndcg(&scores, &p, truncation))
}

/// Boost until `max_trees` or `patience` trees without a strict validation
/// improvement, then keep the prefix ending at the best iteration.
pub fn train(train: &LtrDataset, valid: &LtrDataset, params: &TrainParams) -> Result<Ensemble> {
    params.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.feature_count() != valid.feature_count() {
        return Err(Error::DimensionMismatch { expected: train.feature_count(), got: valid.feature_count() });
    }
    let tp = pack(train)?;
    let vp = pack(valid)?;
    let learner = TreeLearner::new(&tp.matrix);
    let split = params.split_params();
    let lr = params.learning_rate;
    let n_groups = tp.offsets.len() - 1;

    let mut train_scores = vec![0.0; tp.matrix.rows()];
    let mut valid_scores = vec![0.0; vp.matrix.rows()];
    let mut trees = Vec::new();
    let mut best = mean_ndcg(&valid_scores, &vp, params.truncation);
    let mut best_iter = 0;
    let mut log = vec![LogRow { iteration: 0, valid_ndcg: best }];
    let mut stale = 0;

    for it in 1..=params.max_trees {
        let per_group: Vec<(Vec<f64>, Vec<f64>)> = (0..n_groups)
            .into_par_iter()
            .map(|g| {
                let r = tp.offsets[g]..tp.offsets[g + 1];
                compute_lambdas(
                    &train_scores[r.clone()],
                    &tp.labels[r.clone()],
                    &tp.keys[r],
                    params.sigma,
                    params.truncation,
                )
            })
            .collect();
        let mut lambdas = Vec::with_capacity(train_scores.len());
        let mut hessians = Vec::with_capacity(train_scores.len());
        for (l, h) in per_group {
            lambdas.extend(l);
            hessians.extend(h);
        }
        let tree = learner.fit(&lambdas, &hessians, &split);
        train_scores.par_iter_mut().enumerate().for_each(|(r, s)| {
            *s += lr * tree.predict_column(&tp.matrix, r);
        });
        valid_scores.par_iter_mut().enumerate().for_each(|(r, s)| {
            *s += lr * tree.predict_column(&vp.matrix, r);
        });
        trees.push(tree);

        let metric = mean_ndcg(&valid_scores, &vp, params.truncation);
        log.push(LogRow { iteration: it, valid_ndcg: metric });
        if metric > best {
            best = metric;
            best_iter = it;
            stale = 0;
        } else {
            stale += 1;
            if stale >= params.patience {
                break;
            }
        }
    }
    trees.truncate(best_iter);
    log::debug!("trained {} trees, best valid nDCG {best:.5}", trees.len());

    let mut e = Ensemble::new(lr, train.feature_count(), trees)?;
    e.metadata = Some(TrainMetadata {
        params: params.clone(),
        train_log: log,
        best_iteration: best_iter,
        best_valid_ndcg: best,
    });
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> TrainParams {
        TrainParams {
            learning_rate: 0.1,
            num_leaves: 8,
            min_sum_hessian_leaf: 10.0,
            min_data_leaf: 5,
            patience: 10,
            max_trees: 60,
            ..TrainParams::default()
        }
    }

    /// Label depends on feature 0 only; feature 1 is noise.
    fn dataset(seed: u64, n_groups: usize) -> LtrDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = (0..n_groups)
            .map(|q| {
                let n = 20;
                let features: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
                let labels = features
                    .iter()
                    .map(|f| {
                        if f[0] > 0.85 {
                            2
                        } else if f[0] > 0.6 {
                            1
                        } else {
                            0
                        }
                    })
                    .collect();
                LtrGroup { query_id: format!("q{q}"), docs: (0..n as u32).collect(), labels, features }
            })
            .collect();
        LtrDataset::new(2, groups).unwrap()
    }

    #[test]
    fn max_trees_zero_gives_empty_model() {
        let ds = dataset(1, 10);
        let e = train(&ds, &ds, &TrainParams { max_trees: 0, ..params() }).unwrap();
        assert!(e.is_empty());
        assert_eq!(e.score(&[0.3, 0.9]), 0.0);
    }

    #[test]
    fn learns_the_signal_and_keeps_best_prefix() {
        let tr = dataset(1, 60);
        let va = dataset(2, 30);
        let e = train(&tr, &va, &params()).unwrap();
        let meta = e.metadata.as_ref().unwrap();
        assert!(!e.is_empty());
        assert_eq!(e.len(), meta.best_iteration);
        assert!(meta.best_valid_ndcg > meta.train_log[0].valid_ndcg + 0.1);
        let logged = meta.train_log.iter().find(|r| r.iteration == meta.best_iteration).unwrap();
        assert_eq!(logged.valid_ndcg, meta.best_valid_ndcg);
        // Recomputing the metric from the saved prefix agrees bit-for-bit.
        assert_eq!(evaluate(&e, &va, 10).unwrap(), meta.best_valid_ndcg);
        assert!(e.score(&[0.95, 0.5]) > e.score(&[0.1, 0.5]));
    }

    #[test]
    fn early_stopping_bounds_tree_count() {
        let tr = dataset(3, 40);
        let va = dataset(4, 20);
        let p = TrainParams { patience: 3, max_trees: 200, ..params() };
        let e = train(&tr, &va, &p).unwrap();
        let meta = e.metadata.unwrap();
        let last = meta.train_log.last().unwrap().iteration;
        assert!(last == 200 || last == meta.best_iteration + 3);
    }

    #[test]
    fn training_is_reproducible_and_permutation_invariant() {
        let tr = dataset(5, 30);
        let va = dataset(6, 10);
        let a = train(&tr, &va, &params()).unwrap();
        assert_eq!(a.to_json().unwrap(), train(&tr, &va, &params()).unwrap().to_json().unwrap());

        let shuffled = LtrDataset::new(
            2,
            tr.groups()
                .iter()
                .map(|g| {
                    let mut idx: Vec<usize> = (0..g.len()).collect();
                    idx.reverse();
                    idx.rotate_left(3);
                    LtrGroup {
                        query_id: g.query_id.clone(),
                        docs: idx.iter().map(|&i| g.docs[i]).collect(),
                        labels: idx.iter().map(|&i| g.labels[i]).collect(),
                        features: idx.iter().map(|&i| g.features[i].clone()).collect(),
                    }
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(a.trees, train(&shuffled, &va, &params()).unwrap().trees);
    }

    #[test]
    fn adding_a_tree_adds_exactly_its_scaled_output() {
        let tr = dataset(7, 30);
        let e = train(&tr, &tr, &params()).unwrap();
        assert!(e.len() >= 2);
        let x = [0.7, 0.2];
        let mut prefix = e.clone();
        prefix.trees.pop();
        let last = e.trees.last().unwrap();
        assert_eq!(e.score(&x), prefix.score(&x) + e.learning_rate * last.predict(&x));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let tr = dataset(8, 20);
        let e = train(&tr, &tr, &params()).unwrap();
        let back = Ensemble::from_json(&e.to_json().unwrap()).unwrap();
        assert_eq!(back, e);
        let dir = tempfile::tempdir().unwrap();
        e.write_log_csv(dir.path().join("log.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert!(csv.starts_with("iteration,valid_ndcg\n0,"));
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = dataset(9, 5);
        let empty = LtrDataset::new(2, vec![]).unwrap();
        assert!(matches!(train(&empty, &ds, &params()), Err(Error::EmptyDataset)));
        assert!(train(&ds, &ds, &TrainParams { learning_rate: 0.5, ..params() }).is_err());
        assert!(train(&ds, &ds, &TrainParams { patience: 0, ..params() }).is_err());
        let other = ds.map_features(1, |r| vec![r[0]]).unwrap();
        assert!(train(&ds, &other, &params()).is_err());
        assert!(Ensemble::from_json(r#"{"format":"x","version":1,"learning_rate":0.1,"feature_count":1,"mask":null,"registry_hash":null,"trees":[],"metadata":null}"#).is_err());
    }
}
