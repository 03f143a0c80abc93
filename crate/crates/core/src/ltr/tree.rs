//! Regression trees and the exact best-first tree learner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hessian guard in gains and leaf values.
pub const EPSILON: f64 = 1e-9;
/// Leaf values are clamped to `[-MAX_LEAF_WEIGHT, MAX_LEAF_WEIGHT]`.
pub const MAX_LEAF_WEIGHT: f64 = 100.0;

/// Tree node. A value `x[feature] <= threshold` descends left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize, gain: f64 },
    Leaf { weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Root at index 0.
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn leaf(weight: f64) -> Self {
        Self { nodes: vec![Node::Leaf { weight }] }
    }

    /// Build from raw nodes, checking that they form a binary tree rooted at
    /// 0 with every node reachable exactly once.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::invalid("tree has no nodes"));
        }
        let mut seen = vec![false; nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if i >= nodes.len() || seen[i] {
                return Err(Error::invalid(format!("tree node {i} is out of range or shared")));
            }
            seen[i] = true;
            if let Node::Split { left, right, threshold, .. } = nodes[i] {
                if !threshold.is_finite() {
                    return Err(Error::invalid("non-finite split threshold"));
                }
                stack.push(right);
                stack.push(left);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("tree has unreachable nodes"));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    /// Index (into `nodes`) of the leaf reached by `get(feature)`.
    #[inline]
    pub fn exit_node(&self, get: impl Fn(usize) -> f64) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if get(feature) <= threshold { left } else { right };
                }
                Node::Leaf { .. } => return i,
            }
        }
    }

    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.exit_node(|f| x[f])] {
            Node::Leaf { weight } => weight,
            Node::Split { .. } => unreachable!(),
        }
    }

    #[inline]
    pub(crate) fn predict_column(&self, m: &ColumnMatrix, row: usize) -> f64 {
        match self.nodes[self.exit_node(|f| m.get(row, f))] {
            Node::Leaf { weight } => weight,
            Node::Split { .. } => unreachable!(),
        }
    }

    /// Node indices of the leaves, left to right.
    pub fn leaves_in_order(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            match self.nodes[i] {
                Node::Split { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
                Node::Leaf { .. } => out.push(i),
            }
        }
        out
    }

    /// `(feature, gain)` for every split.
    pub fn split_gains(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, gain, .. } => Some((*feature, *gain)),
            Node::Leaf { .. } => None,
        })
    }
}

/// Dense column-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ColumnMatrix {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let n = rows.len();
        let mut data = vec![0.0; n * cols];
        for (r, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, got: row.len() });
            }
            for (c, &v) in row.iter().enumerate() {
                data[c * n + r] = v;
            }
        }
        Ok(Self { rows: n, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    pub fn column(&self, col: usize) -> &[f64] {
        &self.data[col * self.rows..(col + 1) * self.rows]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParams {
    pub num_leaves: usize,
    pub min_data_leaf: usize,
    pub min_sum_hessian_leaf: f64,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
    /// Number of rows going left.
    left_count: usize,
}

struct Leaf {
    node: usize,
    start: usize,
    end: usize,
    sum_l: f64,
    sum_h: f64,
    best: Option<Candidate>,
}

/// Exact greedy learner over a fixed matrix. Each feature's rows are sorted
/// once; growing a tree keeps every leaf as the same contiguous range in all
/// per-feature orders, so a split is a stable partition of that range.
pub struct TreeLearner<'a> {
    matrix: &'a ColumnMatrix,
    presorted: Vec<Vec<(u32, f64)>>,
}

#[inline]
fn score(l: f64, h: f64) -> f64 {
    l * l / (h + EPSILON)
}

#[inline]
fn leaf_weight(l: f64, h: f64) -> f64 {
    (l / (h + EPSILON)).clamp(-MAX_LEAF_WEIGHT, MAX_LEAF_WEIGHT)
}

impl<'a> TreeLearner<'a> {
    pub fn new(matrix: &'a ColumnMatrix) -> Self {
        let presorted = (0..matrix.cols())
            .into_par_iter()
            .map(|f| {
                let col = matrix.column(f);
                let mut v: Vec<(u32, f64)> = col.iter().enumerate().map(|(r, &x)| (r as u32, x)).collect();
                v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                v
            })
            .collect();
        Self { matrix, presorted }
    }

    pub fn fit(&self, lambdas: &[f64], hessians: &[f64], params: &SplitParams) -> RegressionTree {
        let n = self.matrix.rows();
        assert_eq!(lambdas.len(), n);
        assert_eq!(hessians.len(), n);
        if n == 0 {
            return RegressionTree::leaf(0.0);
        }
        let mut orders = self.presorted.clone();
        let (sum_l, sum_h) = (0..n).fold((0.0, 0.0), |(l, h), r| (l + lambdas[r], h + hessians[r]));
        let mut nodes = vec![Node::Leaf { weight: leaf_weight(sum_l, sum_h) }];
        let mut leaves = vec![Leaf { node: 0, start: 0, end: n, sum_l, sum_h, best: None }];
        leaves[0].best = best_split(&orders, &leaves[0], lambdas, hessians, params);
        let mut goes_left = vec![false; n];

        while leaves.len() < params.num_leaves.max(1) {
            let mut pick: Option<(usize, f64)> = None;
            for (i, leaf) in leaves.iter().enumerate() {
                if let Some(c) = leaf.best {
                    if pick.is_none_or(|(_, g)| c.gain > g) {
                        pick = Some((i, c.gain));
                    }
                }
            }
            let Some((li, _)) = pick else { break };
            let leaf = leaves.remove(li);
            let cand = leaf.best.expect("picked leaf has a candidate");

            let col = self.matrix.column(cand.feature);
            for &(r, _) in &orders[0][leaf.start..leaf.end] {
                goes_left[r as usize] = col[r as usize] <= cand.threshold;
            }
            let mid = leaf.start + cand.left_count;
            orders.par_iter_mut().for_each(|order| {
                stable_partition(&mut order[leaf.start..leaf.end], &goes_left);
            });

            let (mut ll, mut lh) = (0.0, 0.0);
            for &(r, _) in &orders[0][leaf.start..mid] {
                ll += lambdas[r as usize];
                lh += hessians[r as usize];
            }
            let (mut rl, mut rh) = (0.0, 0.0);
            for &(r, _) in &orders[0][mid..leaf.end] {
                rl += lambdas[r as usize];
                rh += hessians[r as usize];
            }
            let left_node = nodes.len();
            nodes.push(Node::Leaf { weight: leaf_weight(ll, lh) });
            nodes.push(Node::Leaf { weight: leaf_weight(rl, rh) });
            nodes[leaf.node] = Node::Split {
                feature: cand.feature,
                threshold: cand.threshold,
                left: left_node,
                right: left_node + 1,
                gain: cand.gain,
            };
            // Children replace the parent in place so `leaves` stays in
            // left-to-right order; equal gains go to the leftmost leaf.
            for (k, (node, start, end, sl, sh)) in
                [(left_node, leaf.start, mid, ll, lh), (left_node + 1, mid, leaf.end, rl, rh)].into_iter().enumerate()
            {
                let mut child = Leaf { node, start, end, sum_l: sl, sum_h: sh, best: None };
                child.best = best_split(&orders, &child, lambdas, hessians, params);
                leaves.insert(li + k, child);
            }
        }
        RegressionTree { nodes }
    }
}

fn stable_partition(slice: &mut [(u32, f64)], goes_left: &[bool]) {
    let mut right = Vec::with_capacity(slice.len() / 2);
    let mut w = 0;
    for i in 0..slice.len() {
        let item = slice[i];
        if goes_left[item.0 as usize] {
            slice[w] = item;
            w += 1;
        } else {
            right.push(item);
        }
    }
    slice[w..].copy_from_slice(&right);
}

fn best_split(
    orders: &[Vec<(u32, f64)>],
    leaf: &Leaf,
    lambdas: &[f64],
    hessians: &[f64],
    params: &SplitParams,
) -> Option<Candidate> {
    let count = leaf.end - leaf.start;
    let min_data = params.min_data_leaf.max(1);
    if count < 2 * min_data {
        return None;
    }
    let parent = score(leaf.sum_l, leaf.sum_h);
    let per_feature: Vec<Option<Candidate>> = orders
        .par_iter()
        .enumerate()
        .map(|(f, order)| {
            let rows = &order[leaf.start..leaf.end];
            let mut best: Option<Candidate> = None;
            let (mut l, mut h) = (0.0, 0.0);
            for k in 0..rows.len() - 1 {
                let (r, v) = rows[k];
                l += lambdas[r as usize];
                h += hessians[r as usize];
                let next = rows[k + 1].1;
                if v == next {
                    continue;
                }
                let left_count = k + 1;
                if left_count < min_data {
                    continue;
                }
                if count - left_count < min_data {
                    break;
                }
                let (rl, rh) = (leaf.sum_l - l, leaf.sum_h - h);
                if h < params.min_sum_hessian_leaf || rh < params.min_sum_hessian_leaf {
                    continue;
                }
                let gain = score(l, h) + score(rl, rh) - parent;
                if best.is_none_or(|b| gain > b.gain) {
                    let mid = v + (next - v) / 2.0;
                    let threshold = if mid >= v && mid < next { mid } else { v };
                    best = Some(Candidate { feature: f, threshold, gain, left_count });
                }
            }
            best
        })
        .collect();
    per_feature.into_iter().flatten().filter(|c| c.gain > 0.0).fold(None, |acc: Option<Candidate>, c| match acc {
        Some(a) if a.gain >= c.gain => Some(a),
        _ => Some(c),
    })
}

/// Fit a single tree (presorting the matrix for this call only).
pub fn fit_tree(matrix: &ColumnMatrix, lambdas: &[f64], hessians: &[f64], params: &SplitParams) -> RegressionTree {
    TreeLearner::new(matrix).fit(lambdas, hessians, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(leaves: usize, min_data: usize) -> SplitParams {
        SplitParams { num_leaves: leaves, min_data_leaf: min_data, min_sum_hessian_leaf: 0.0 }
    }

    #[test]
    fn zero_hessian_leaf_is_clamped() {
        let m = ColumnMatrix::from_rows(&[[1.0], [2.0], [3.0]], 1).unwrap();
        let t = fit_tree(&m, &[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0], &params(64, 1));
        assert_eq!(t.num_leaves(), 1);
        assert_eq!(t.predict(&[0.0]), MAX_LEAF_WEIGHT);
        let t = fit_tree(&m, &[-1.0; 3], &[0.0; 3], &params(64, 1));
        assert_eq!(t.predict(&[0.0]), -MAX_LEAF_WEIGHT);
    }

    #[test]
    fn separable_one_d_split_matches_brute_force() {
        let xs = [0.1, 0.2, 0.3, 0.45, 0.8, 0.9, 0.95, 1.0];
        let lambdas = [1.0, 1.2, 0.9, 1.1, -1.0, -0.8, -1.3, -1.0];
        let hessians = [0.5; 8];
        let rows: Vec<[f64; 1]> = xs.iter().map(|&x| [x]).collect();
        let m = ColumnMatrix::from_rows(&rows, 1).unwrap();
        let t = fit_tree(&m, &lambdas, &hessians, &params(2, 1));

        // Enumerate every threshold between consecutive values.
        let total_l: f64 = lambdas.iter().sum();
        let total_h: f64 = hessians.iter().sum();
        let mut best = (f64::NEG_INFINITY, 0usize);
        for k in 0..xs.len() - 1 {
            let l: f64 = lambdas[..=k].iter().sum();
            let h: f64 = hessians[..=k].iter().sum();
            let g = l * l / (h + 1e-9) + (total_l - l).powi(2) / (total_h - h + 1e-9)
                - total_l * total_l / (total_h + 1e-9);
            if g > best.0 {
                best = (g, k);
            }
        }
        assert_eq!(best.1, 3);
        match t.nodes()[0] {
            Node::Split { feature, threshold, gain, .. } => {
                assert_eq!(feature, 0);
                assert!((0.45..0.8).contains(&threshold));
                assert!((gain - best.0).abs() < 1e-9);
            }
            _ => panic!("expected a root split"),
        }
        assert!(t.predict(&[0.2]) > 0.0);
        assert!(t.predict(&[0.9]) < 0.0);
    }

    #[test]
    fn min_data_leaf_blocks_splits() {
        let rows: Vec<[f64; 1]> = (0..10).map(|i| [i as f64]).collect();
        let m = ColumnMatrix::from_rows(&rows, 1).unwrap();
        let l: Vec<f64> = (0..10).map(|i| if i < 5 { 1.0 } else { -1.0 }).collect();
        let t = fit_tree(&m, &l, &[1.0; 10], &params(64, 6));
        assert_eq!(t.num_leaves(), 1);
        let t = fit_tree(&m, &l, &[1.0; 10], &params(64, 5));
        assert_eq!(t.num_leaves(), 2);
    }

    #[test]
    fn min_hessian_blocks_splits() {
        let rows: Vec<[f64; 1]> = (0..10).map(|i| [i as f64]).collect();
        let m = ColumnMatrix::from_rows(&rows, 1).unwrap();
        let l: Vec<f64> = (0..10).map(|i| if i < 5 { 1.0 } else { -1.0 }).collect();
        let p = SplitParams { num_leaves: 64, min_data_leaf: 1, min_sum_hessian_leaf: 5.5 };
        assert_eq!(fit_tree(&m, &l, &[1.0; 10], &p).num_leaves(), 1);
    }

    #[test]
    fn ties_prefer_lowest_feature() {
        // Two identical columns: the split must use feature 0.
        let rows: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, i as f64]).collect();
        let m = ColumnMatrix::from_rows(&rows, 2).unwrap();
        let l = [1.0, 1.0, 1.0, -1.0, -1.0, -1.0];
        let t = fit_tree(&m, &l, &[1.0; 6], &params(2, 1));
        assert!(matches!(t.nodes()[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn respects_leaf_budget() {
        let rows: Vec<[f64; 3]> =
            (0..400).map(|i| [(i * 7 % 13) as f64, (i * 11 % 17) as f64, (i % 5) as f64]).collect();
        let m = ColumnMatrix::from_rows(&rows, 3).unwrap();
        let l: Vec<f64> = (0..400).map(|i| ((i * 31 % 19) as f64) - 9.0).collect();
        for leaves in [1, 2, 5, 16, 64] {
            let t = fit_tree(&m, &l, &[1.0; 400], &params(leaves, 1));
            assert!(t.num_leaves() <= leaves);
            assert_eq!(RegressionTree::from_nodes(t.nodes().to_vec()).unwrap(), t);
            // Training rows land where the partition put them: predictions
            // are the leaf means of their own rows.
            let mut sums = std::collections::HashMap::new();
            for (r, row) in rows.iter().enumerate() {
                let leaf = t.exit_node(|f| row[f]);
                let e = sums.entry(leaf).or_insert((0.0, 0.0));
                e.0 += l[r];
                e.1 += 1.0;
            }
            for (leaf, (sl, sh)) in sums {
                match t.nodes()[leaf] {
                    Node::Leaf { weight } => assert!((weight - sl / (sh + 1e-9)).abs() < 1e-9),
                    _ => unreachable!(),
                }
            }
        }
    }

    #[test]
    fn from_nodes_validates() {
        assert!(RegressionTree::from_nodes(vec![]).is_err());
        let cyclic =
            vec![Node::Split { feature: 0, threshold: 0.0, left: 0, right: 1, gain: 0.0 }, Node::Leaf { weight: 1.0 }];
        assert!(RegressionTree::from_nodes(cyclic).is_err());
        let orphan = vec![Node::Leaf { weight: 1.0 }, Node::Leaf { weight: 2.0 }];
        assert!(RegressionTree::from_nodes(orphan).is_err());
    }
}
