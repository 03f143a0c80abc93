//! Seeded random search over the training hyper-parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::LtrDataset;
use super::train::{train, TrainParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: (f64, f64),
    pub min_sum_hessian_leaf: (f64, f64),
    pub min_data_leaf: (usize, usize),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            learning_rate: TrainParams::LEARNING_RATE_RANGE,
            min_sum_hessian_leaf: TrainParams::MIN_HESSIAN_RANGE,
            min_data_leaf: (100, 5000),
        }
    }
}

impl SearchSpace {
    fn sample(&self, base: &TrainParams, rng: &mut ChaCha8Rng) -> TrainParams {
        let (lr_lo, lr_hi) = self.learning_rate;
        let (h_lo, h_hi) = self.min_sum_hessian_leaf;
        let (d_lo, d_hi) = self.min_data_leaf;
        TrainParams {
            learning_rate: rng.random_range(lr_lo..=lr_hi),
            min_sum_hessian_leaf: rng.random_range(h_lo..=h_hi),
            min_data_leaf: rng.random_range(d_lo..=d_hi),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub params: TrainParams,
    pub valid_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: TrainParams,
    pub best_valid_ndcg: f64,
    pub trials: Vec<Trial>,
}

/// Draw `n_trials` configurations (all from one seeded stream, before any
/// training), train each, and keep the best validation nDCG; the earliest
/// trial wins ties.
pub fn random_search_tune(
    train_set: &LtrDataset,
    valid: &LtrDataset,
    base: &TrainParams,
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
) -> Result<TuneResult> {
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs: Vec<TrainParams> = (0..n_trials).map(|_| space.sample(base, &mut rng)).collect();
    for c in &configs {
        c.validate()?;
    }
    let trials = configs
        .into_par_iter()
        .map(|params| {
            let e = train(train_set, valid, &params)?;
            let valid_ndcg = e.metadata.as_ref().map_or(0.0, |m| m.best_valid_ndcg);
            Ok(Trial { params, valid_ndcg })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.valid_ndcg > trials[best].valid_ndcg {
            best = i;
        }
    }
    Ok(TuneResult { best: trials[best].params.clone(), best_valid_ndcg: trials[best].valid_ndcg, trials })
}
