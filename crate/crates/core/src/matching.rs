//! Minimum-cost bipartite assignment and the prediction/ground-truth cost.

use crate::detector::DetectorOutput;
use crate::geometry::{giou, BoundingBox};
use crate::tensor::Tensor;

/// Weights of the class, L1 and GIoU terms, shared by the matching cost
/// and the localisation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query, target)` pairs in ascending query order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    fn from_pairs(pairs: Vec<(usize, usize)>, num_queries: usize) -> Self {
        let mut used = vec![false; num_queries];
        for &(q, _) in &pairs {
            used[q] = true;
        }
        Self {
            unmatched_queries: (0..num_queries).filter(|&q| !used[q]).collect(),
            pairs,
        }
    }
}

/// Optimal assignment for `n ≤ m`: `row_to_col[i]` for every row.
/// Classic O(n²m) shortest augmenting path with potentials.
fn solve_rows_le_cols(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Any optimal assignment of `min(rows, cols)` pairs, as (row, col).
fn solve_any(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows <= cols {
        solve_rows_le_cols(cost, rows, cols)
            .into_iter()
            .enumerate()
            .collect()
    } else {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        solve_rows_le_cols(&t, cols, rows)
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    }
}

fn optimum(cost: &Tensor, rows: &[usize], cols: &[usize]) -> f64 {
    let sub: Vec<f64> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| cost.at(r, c)))
        .collect();
    solve_any(&sub, rows.len(), cols.len())
        .into_iter()
        .map(|(i, j)| sub[i * cols.len() + j])
        .sum()
}

/// Minimum-cost assignment of `min(R, C)` pairs over an `[R, C]` cost
/// matrix. Among optimal assignments, returns the lexicographically
/// smallest pair list.
///
/// # Panics
/// On a non-finite cost entry.
pub fn hungarian(cost: &Tensor) -> Vec<(usize, usize)> {
    assert!(cost.data().iter().all(|v| v.is_finite()), "assignment costs must be finite");
    let (r, c) = if cost.shape().len() == 2 {
        (cost.shape()[0], cost.shape()[1])
    } else {
        (1, cost.len())
    };
    let all_rows: Vec<usize> = (0..r).collect();
    let all_cols: Vec<usize> = (0..c).collect();
    let best = optimum(cost, &all_rows, &all_cols);
    let tol = 1e-9 * best.abs().max(1.0);

    let mut pairs = Vec::new();
    let mut fixed = 0.0;
    let mut free_cols = all_cols;
    let target = r.min(c);
    for row in 0..r {
        if pairs.len() == target {
            break;
        }
        let later_rows: Vec<usize> = (row + 1..r).collect();
        // rows still to place after this one must be able to fill the rest
        let mut chosen = None;
        for (ci, &col) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != col).collect();
            let need = target - pairs.len() - 1;
            if later_rows.len() < need {
                continue;
            }
            let total = fixed + cost.at(row, col) + optimum(cost, &later_rows, &rest_cols);
            if (total - best).abs() <= tol {
                chosen = Some(ci);
                break;
            }
        }
        if let Some(ci) = chosen {
            let col = free_cols.remove(ci);
            fixed += cost.at(row, col);
            pairs.push((row, col));
        }
    }
    pairs
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `[num_queries, targets.len()]` cost of assigning each query to each
/// `(class column, box)` target.
pub fn match_cost(pred: &DetectorOutput, targets: &[(usize, BoundingBox)], w: &CostWeights) -> Tensor {
    let q = pred.boxes.len();
    let mut data = Vec::with_capacity(q * targets.len());
    for (i, pb) in pred.boxes.iter().enumerate() {
        for (class, tb) in targets {
            let prob = sigmoid(pred.class_logits.at(i, *class));
            data.push(pair_cost(prob, pb, tb, w));
        }
    }
    if targets.is_empty() {
        return Tensor::zeros(&[q.max(1), 1]);
    }
    Tensor::matrix(q, targets.len(), data).expect("cost shape")
}

pub fn pair_cost(prob: f64, pred: &BoundingBox, target: &BoundingBox, w: &CostWeights) -> f64 {
    -w.class * prob + w.l1 * pred.l1_distance(target) + w.giou * (1.0 - giou(pred, target))
}

/// Optimal matching of queries to targets.
pub fn match_predictions(pred: &DetectorOutput, targets: &[(usize, BoundingBox)], w: &CostWeights) -> MatchResult {
    let q = pred.boxes.len();
    if targets.is_empty() {
        return MatchResult::from_pairs(Vec::new(), q);
    }
    let cost = match_cost(pred, targets, w);
    MatchResult::from_pairs(hungarian(&cost), q)
}

/// Matches targets to a subset of queries; pair query indices refer to the
/// full query set.
pub fn match_subset(
    pred: &DetectorOutput,
    queries: &[usize],
    targets: &[(usize, BoundingBox)],
    w: &CostWeights,
) -> Vec<(usize, usize)> {
    if queries.is_empty() || targets.is_empty() {
        return Vec::new();
    }
    let mut data = Vec::with_capacity(queries.len() * targets.len());
    for &qi in queries {
        for (class, tb) in targets {
            let prob = sigmoid(pred.class_logits.at(qi, *class));
            data.push(pair_cost(prob, &pred.boxes[qi], tb, w));
        }
    }
    let cost = Tensor::matrix(queries.len(), targets.len(), data).expect("cost shape");
    hungarian(&cost)
        .into_iter()
        .map(|(r, t)| (queries[r], t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(cost: &Tensor) -> f64 {
        let (r, c) = (cost.shape()[0], cost.shape()[1]);
        let k = r.min(c);
        let mut best = f64::INFINITY;
        // choose k rows in order and an injective column map
        fn rec(cost: &Tensor, row: usize, r: usize, c: usize, left: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if left == 0 {
                *best = best.min(acc);
                return;
            }
            if r - row < left {
                return;
            }
            rec(cost, row + 1, r, c, left, used, acc, best);
            for col in 0..c {
                if !used[col] {
                    used[col] = true;
                    rec(cost, row + 1, r, c, left - 1, used, acc + cost.at(row, col), best);
                    used[col] = false;
                }
            }
        }
        rec(cost, 0, r, c, k, &mut vec![false; c], 0.0, &mut best);
        best
    }

    fn total(cost: &Tensor, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| cost.at(r, c)).sum()
    }

    #[test]
    fn small_examples() {
        let cost = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 1.0]).unwrap();
        let pairs = hungarian(&cost);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(total(&cost, &pairs), 2.0);

        let mut diag = vec![5.0; 16];
        for i in 0..4 {
            diag[i * 4 + i] = 0.0;
        }
        let pairs = hungarian(&Tensor::matrix(4, 4, diag).unwrap());
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let pairs = hungarian(&Tensor::full(&[3, 3], 1.0));
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2)]);
        // 3 rows, 2 cols, all equal: rows 0 and 1 take columns 0 and 1
        let pairs = hungarian(&Tensor::full(&[3, 2], 0.5));
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        // row 0 is expensive everywhere: it stays unmatched
        let cost = Tensor::matrix(3, 2, vec![9.0, 9.0, 1.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(hungarian(&cost), vec![(1, 0), (2, 1)]);
    }

    #[test]
    fn match_cost_examples() {
        let w = CostWeights::default();
        let b = BoundingBox::from_corners(0.1, 0.1, 0.5, 0.5);
        assert!((pair_cost(1.0, &b, &b, &w) + 2.0).abs() < 1e-12);
        let far = BoundingBox::from_corners(0.7, 0.7, 0.9, 0.9);
        let expect = 5.0 * far.l1_distance(&b) + 2.0 * (1.0 - giou(&far, &b));
        assert!((pair_cost(0.0, &far, &b, &w) - expect).abs() < 1e-12);
    }

    #[test]
    fn rectangular_and_empty() {
        assert!(hungarian(&Tensor::zeros(&[1, 1])).len() == 1);
        let cost = Tensor::matrix(2, 4, vec![4.0, 1.0, 3.0, 2.0, 2.0, 0.0, 5.0, 3.0]).unwrap();
        let pairs = hungarian(&cost);
        assert_eq!(total(&cost, &pairs), brute_force(&cost));
    }

    proptest! {
        #[test]
        fn matches_brute_force(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cost = Tensor::matrix(r, c, data).unwrap();
            let pairs = hungarian(&cost);
            prop_assert_eq!(pairs.len(), r.min(c));
            prop_assert!((total(&cost, &pairs) - brute_force(&cost)).abs() < 1e-9);
            let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort();
            cols.dedup();
            prop_assert_eq!(rows.len(), pairs.len());
            prop_assert_eq!(cols.len(), pairs.len());
        }
    }
}
