//! QuickScorer-style compiled ensembles.
//!
//! Leaves of each tree are numbered left to right and tracked in one `u64`.
//! A node's condition `x[f] <= t` being false rules out its whole left
//! subtree, so its mask clears those leaf bits. Conditions are grouped per
//! feature and sorted by threshold; scoring walks each feature's list only
//! while the value exceeds the threshold, then reads every tree's exit leaf
//! off the lowest set bit.

use crate::error::{Error, Result};
use crate::ltr::{Ensemble, Node, RegressionTree};

pub const MAX_LEAVES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledEnsemble {
    learning_rate: f64,
    feature_count: usize,
    /// Condition ranges per feature: `feature_offsets[f]..feature_offsets[f + 1]`.
    feature_offsets: Vec<usize>,
    thresholds: Vec<f64>,
    cond_trees: Vec<u32>,
    masks: Vec<u64>,
    /// Leaf weights per tree, left to right: `leaf_offsets[t]..leaf_offsets[t + 1]`.
    leaf_offsets: Vec<usize>,
    leaves: Vec<f64>,
}

/// Left-to-right leaf ranges of every node: `(first leaf, one past last)`.
fn leaf_spans(tree: &RegressionTree) -> Vec<(usize, usize)> {
    let nodes = tree.nodes();
    let mut spans = vec![(0, 0); nodes.len()];
    let mut next = 0;
    // Iterative post-order so that deep trees cannot overflow the stack.
    let mut stack = vec![(0usize, false)];
    while let Some((i, expanded)) = stack.pop() {
        match nodes[i] {
            Node::Leaf { .. } => {
                spans[i] = (next, next + 1);
                next += 1;
            }
            Node::Split { left, right, .. } => {
                if expanded {
                    spans[i] = (spans[left].0, spans[right].1);
                } else {
                    stack.push((i, true));
                    stack.push((right, false));
                    stack.push((left, false));
                }
            }
        }
    }
    spans
}

fn span_bits(a: usize, b: usize) -> u64 {
    let width = b - a;
    let ones = if width >= 64 { u64::MAX } else { (1u64 << width) - 1 };
    ones << a
}

pub fn compile(ensemble: &Ensemble) -> Result<CompiledEnsemble> {
    let nf = ensemble.feature_count;
    let mut per_feature: Vec<Vec<(f64, u32, u64)>> = vec![Vec::new(); nf];
    let mut leaf_offsets = vec![0];
    let mut leaves = Vec::new();
    for (t, tree) in ensemble.trees.iter().enumerate() {
        let n_leaves = tree.num_leaves();
        if n_leaves > MAX_LEAVES {
            return Err(Error::TooManyLeaves { tree: t, leaves: n_leaves });
        }
        let spans = leaf_spans(tree);
        for i in tree.leaves_in_order() {
            if let Node::Leaf { weight } = tree.nodes()[i] {
                leaves.push(weight);
            }
        }
        leaf_offsets.push(leaves.len());
        for (i, node) in tree.nodes().iter().enumerate() {
            if let Node::Split { feature, threshold, left, .. } = *node {
                if feature >= nf {
                    return Err(Error::invalid(format!("tree {t} node {i} uses feature {feature} of {nf}")));
                }
                let (a, b) = spans[left];
                per_feature[feature].push((threshold, t as u32, !span_bits(a, b)));
            }
        }
    }
    let mut feature_offsets = vec![0];
    let (mut thresholds, mut cond_trees, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for mut conds in per_feature {
        conds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (th, t, m) in conds {
            thresholds.push(th);
            cond_trees.push(t);
            masks.push(m);
        }
        feature_offsets.push(thresholds.len());
    }
    Ok(CompiledEnsemble {
        learning_rate: ensemble.learning_rate,
        feature_count: nf,
        feature_offsets,
        thresholds,
        cond_trees,
        masks,
        leaf_offsets,
        leaves,
    })
}

impl CompiledEnsemble {
    pub fn num_trees(&self) -> usize {
        self.leaf_offsets.len() - 1
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn num_conditions(&self) -> usize {
        self.thresholds.len()
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_count {
            return Err(Error::DimensionMismatch { expected: self.feature_count, got: x.len() });
        }
        Ok(())
    }

    /// Fill `bv` with one leaf bitvector per tree.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn eval_bitvectors(&self, x: &[f64], bv: &mut Vec<u64>) {
        bv.clear();
        bv.resize(self.num_trees(), u64::MAX);
        for (f, &v) in x.iter().enumerate() {
            for k in self.feature_offsets[f]..self.feature_offsets[f + 1] {
                // Negated `<=` so NaN takes the right branch, as in naive traversal.
                if !(v <= self.thresholds[k]) {
                    bv[self.cond_trees[k] as usize] &= self.masks[k];
                } else {
                    break;
                }
            }
        }
    }

    fn sum_leaves(&self, bv: &[u64]) -> f64 {
        let mut s = 0.0;
        for (t, &b) in bv.iter().enumerate() {
            debug_assert!(b != 0);
            s += self.learning_rate * self.leaves[self.leaf_offsets[t] + b.trailing_zeros() as usize];
        }
        s
    }

    pub fn score_one(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        let mut bv = Vec::new();
        self.eval_bitvectors(x, &mut bv);
        Ok(self.sum_leaves(&bv))
    }

    /// Left-to-right exit leaf index of every tree.
    pub fn exit_leaves(&self, x: &[f64]) -> Result<Vec<usize>> {
        self.check_len(x)?;
        let mut bv = Vec::new();
        self.eval_bitvectors(x, &mut bv);
        Ok(bv.iter().map(|b| b.trailing_zeros() as usize).collect())
    }

    /// Score every row in order, reusing one scratch buffer.
    pub fn score_batch<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<f64>> {
        let mut bv = Vec::with_capacity(self.num_trees());
        rows.iter()
            .map(|r| {
                let x = r.as_ref();
                self.check_len(x)?;
                self.eval_bitvectors(x, &mut bv);
                Ok(self.sum_leaves(&bv))
            })
            .collect()
    }
}
