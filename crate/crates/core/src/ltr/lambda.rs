//! LambdaMART gradients for truncated nDCG.
//!
//! Gains are exponential (`2^label - 1`), discounts `1 / log2(1 + rank)`,
//! and a group whose ideal DCG is zero contributes nothing.

#[inline]
pub fn gain(label: u32) -> f64 {
    (label as f64).exp2() - 1.0
}

/// Discount for a 1-based rank; zero past the truncation point.
#[inline]
pub fn discount(rank: usize, truncation: usize) -> f64 {
    if rank == 0 || rank > truncation {
        0.0
    } else {
        1.0 / ((1 + rank) as f64).log2()
    }
}

pub fn ideal_dcg(labels: &[u32], truncation: usize) -> f64 {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.iter().enumerate().map(|(i, &l)| gain(l) * discount(i + 1, truncation)).sum()
}

/// Order of documents by descending score; ties go to the smaller key.
pub fn rank_by_score(scores: &[f64], keys: &[u32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(keys[a].cmp(&keys[b])));
    order
}

/// 1-based rank of every document given the ranking order.
pub fn ranks_from_order(order: &[usize]) -> Vec<usize> {
    let mut ranks = vec![0; order.len()];
    for (pos, &doc) in order.iter().enumerate() {
        ranks[doc] = pos + 1;
    }
    ranks
}

/// nDCG@truncation of the ordering induced by `scores`.
pub fn group_ndcg(scores: &[f64], labels: &[u32], keys: &[u32], truncation: usize) -> f64 {
    let idcg = ideal_dcg(labels, truncation);
    if idcg == 0.0 {
        return 0.0;
    }
    let dcg: f64 = rank_by_score(scores, keys)
        .iter()
        .enumerate()
        .map(|(pos, &doc)| gain(labels[doc]) * discount(pos + 1, truncation))
        .sum();
    dcg / idcg
}

/// `|nDCG@truncation|` change from swapping documents `i` and `j`, given the
/// current 1-based `ranks` of every document.
pub fn delta_ndcg(labels: &[u32], ranks: &[usize], i: usize, j: usize, truncation: usize) -> f64 {
    let idcg = ideal_dcg(labels, truncation);
    delta_with_idcg(labels, ranks, i, j, truncation, idcg)
}

#[inline]
fn delta_with_idcg(labels: &[u32], ranks: &[usize], i: usize, j: usize, truncation: usize, idcg: f64) -> f64 {
    if idcg == 0.0 {
        return 0.0;
    }
    let dg = gain(labels[i]) - gain(labels[j]);
    let dd = discount(ranks[i], truncation) - discount(ranks[j], truncation);
    (dg * dd).abs() / idcg
}

/// Lambda gradients and second-order weights for one query group.
///
/// For each pair with `label_i > label_j`:
/// `rho = 1 / (1 + exp(sigma * (s_i - s_j)))`, `lambda_i += sigma * |dNDCG| * rho`,
/// `lambda_j -= the same`, and both hessians gain
/// `sigma^2 * |dNDCG| * rho * (1 - rho)`. `keys` break score ties when
/// ranking the group.
pub fn compute_lambdas(
    scores: &[f64],
    labels: &[u32],
    keys: &[u32],
    sigma: f64,
    truncation: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = scores.len();
    debug_assert_eq!(labels.len(), n);
    debug_assert_eq!(keys.len(), n);
    let mut lambdas = vec![0.0; n];
    let mut hessians = vec![0.0; n];
    let idcg = ideal_dcg(labels, truncation);
    if idcg == 0.0 {
        return (lambdas, hessians);
    }
    let order = rank_by_score(scores, keys);
    let ranks = ranks_from_order(&order);
    for &i in &order {
        for &j in &order {
            if labels[i] <= labels[j] {
                continue;
            }
            let delta = delta_with_idcg(labels, &ranks, i, j, truncation, idcg);
            if delta == 0.0 {
                continue;
            }
            let rho = 1.0 / (1.0 + (sigma * (scores[i] - scores[j])).exp());
            let l = sigma * delta * rho;
            let h = sigma * sigma * delta * rho * (1.0 - rho);
            lambdas[i] += l;
            lambdas[j] -= l;
            hessians[i] += h;
            hessians[j] += h;
        }
    }
    (lambdas, hessians)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute force: materialize both orderings and compute nDCG directly.
    fn ndcg_of_ranks(labels: &[u32], ranks: &[usize], trunc: usize) -> f64 {
        let mut sorted = labels.to_vec();
        sorted.sort_by(|a, b| b.cmp(a));
        let mut idcg = 0.0;
        for (p, &l) in sorted.iter().enumerate().take(trunc) {
            idcg += (2f64.powi(l as i32) - 1.0) / ((p + 2) as f64).log2();
        }
        if idcg == 0.0 {
            return 0.0;
        }
        let mut dcg = 0.0;
        for (d, &r) in ranks.iter().enumerate() {
            if r <= trunc {
                dcg += (2f64.powi(labels[d] as i32) - 1.0) / ((r + 1) as f64).log2();
            }
        }
        dcg / idcg
    }

    fn brute_delta(labels: &[u32], ranks: &[usize], i: usize, j: usize, trunc: usize) -> f64 {
        let mut swapped = ranks.to_vec();
        swapped.swap(i, j);
        (ndcg_of_ranks(labels, &swapped, trunc) - ndcg_of_ranks(labels, ranks, trunc)).abs()
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta_ndcg(&[1, 1, 0], &[1, 2, 3], 0, 1, 10), 0.0);
        assert_eq!(delta_ndcg(&[2, 0, 0, 1], &[1, 2, 3, 4], 2, 3, 2), 0.0);
        let d = delta_ndcg(&[2, 0], &[1, 2], 0, 1, 10);
        let want = (3.0 / 1.0 - 3.0 / 3f64.log2()) / 3.0;
        assert!((d - want).abs() < 1e-12);
        assert!((d - 0.369070).abs() < 1e-6);
        assert_eq!(delta_ndcg(&[0, 0], &[1, 2], 0, 1, 10), 0.0);
    }

    #[test]
    fn lambda_examples() {
        let (l, h) = compute_lambdas(&[0.3, -1.0, 2.0], &[1, 1, 1], &[0, 1, 2], 1.0, 10);
        assert!(l.iter().chain(&h).all(|&x| x == 0.0));

        let sigma = 1.0;
        let (l, h) = compute_lambdas(&[0.0, 0.0], &[1, 0], &[0, 1], sigma, 10);
        // Tie broken by key: doc 0 is already on top.
        let delta = delta_ndcg(&[1, 0], &[1, 2], 0, 1, 10);
        assert_eq!(l[0], sigma * delta * 0.5);
        assert_eq!(l[1], -l[0]);
        assert_eq!(h[0], sigma * sigma * delta * 0.25);
        assert_eq!(h[0], h[1]);
    }

    #[test]
    fn lambdas_push_relevant_up() {
        let (l, _) = compute_lambdas(&[1.0, 0.0, -1.0], &[0, 0, 2], &[0, 1, 2], 1.0, 10);
        assert!(l[2] > 0.0);
        assert!(l[0] < 0.0 && l[1] < 0.0);
    }

    proptest! {
        #[test]
        fn delta_matches_brute_force(
            labels in proptest::collection::vec(0u32..4, 2..12),
            perm_seed in any::<u64>(),
            trunc in 1usize..12,
        ) {
            let n = labels.len();
            let scores: Vec<f64> = (0..n).map(|i| ((perm_seed.wrapping_mul(i as u64 + 7)) % 97) as f64).collect();
            let keys: Vec<u32> = (0..n as u32).collect();
            let ranks = ranks_from_order(&rank_by_score(&scores, &keys));
            for i in 0..n {
                for j in 0..n {
                    if i == j { continue; }
                    let d = delta_ndcg(&labels, &ranks, i, j, trunc);
                    prop_assert_eq!(d, delta_ndcg(&labels, &ranks, j, i, trunc));
                    prop_assert!((d - brute_delta(&labels, &ranks, i, j, trunc)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn lambdas_sum_to_zero(
            labels in proptest::collection::vec(0u32..4, 1..30),
            seed in any::<u64>(),
        ) {
            let n = labels.len();
            let scores: Vec<f64> = (0..n).map(|i| (((seed ^ (i as u64 * 0x9e37)) % 1000) as f64) / 100.0 - 5.0).collect();
            let keys: Vec<u32> = (0..n as u32).collect();
            let (l, h) = compute_lambdas(&scores, &labels, &keys, 1.0, 10);
            prop_assert!(l.iter().sum::<f64>().abs() <= 1e-8);
            prop_assert!(h.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn group_ndcg_in_unit_interval(labels in proptest::collection::vec(0u32..4, 1..20), seed in any::<u64>()) {
            let scores: Vec<f64> = (0..labels.len()).map(|i| ((seed >> (i % 60)) & 0xff) as f64).collect();
            let keys: Vec<u32> = (0..labels.len() as u32).collect();
            let v = group_ndcg(&scores, &labels, &keys, 10);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }
}
