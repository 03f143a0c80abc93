//! LambdaMART learning to rank.

pub mod dataset;
pub mod gain;
pub mod lambda;
pub mod train;
pub mod tree;
pub mod tune;

pub use dataset::{build_training_set, sample_groups, LtrDataset, LtrGroup, SampledGroup, DEFAULT_NEGATIVES};
pub use gain::{feature_gains, gain_report, GainReport, GainRow};
pub use lambda::{compute_lambdas, delta_ndcg, group_ndcg};
pub use train::{evaluate, train, Ensemble, LogRow, TrainMetadata, TrainParams};
pub use tree::{fit_tree, ColumnMatrix, Node, RegressionTree, SplitParams, TreeLearner};
pub use tune::{random_search_tune, SearchSpace, Trial, TuneResult};
