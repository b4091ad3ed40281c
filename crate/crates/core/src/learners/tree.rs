//! CART regression trees on squared error.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Flat tree: node `i` is a leaf when `feature[i] < 0`; otherwise rows with
/// `x[feature] <= threshold` go to `left[i]`, the rest to `right[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut node = 0;
        loop {
            let f = self.feature[node];
            if f < 0 {
                return self.value[node];
            }
            node = if row[f as usize] <= self.threshold[node] { self.left[node] } else { self.right[node] } as usize;
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    fn push_leaf(&mut self, value: f64) -> usize {
        self.feature.push(-1);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.value.push(value);
        self.feature.len() - 1
    }
}

pub(crate) struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per node; `None` tries all.
    pub max_features: Option<usize>,
}

/// Row-major design matrix view.
pub(crate) struct Design<'a> {
    pub x: &'a [f64],
    pub n_features: usize,
}

impl Design<'_> {
    fn at(&self, row: usize, f: usize) -> f64 {
        self.x[row * self.n_features + f]
    }
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
    n_left: usize,
}

/// Row indices of the full design sorted by (value, index), one list per
/// feature. Computed once per fit and shared by every tree.
pub(crate) fn presort(design: &Design) -> Vec<Vec<u32>> {
    let n = design.x.len() / design.n_features.max(1);
    (0..design.n_features)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_unstable_by(|&a, &b| design.at(a as usize, f).total_cmp(&design.at(b as usize, f)).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Grows a tree on `rows` (indices may repeat, as in a bootstrap sample).
/// Adds each split's squared-error reduction to `importance`.
pub(crate) fn grow<R: Rng>(
    design: &Design,
    presorted: &[Vec<u32>],
    y: &[f64],
    rows: &[usize],
    params: &TreeParams,
    rng: &mut R,
    importance: &mut [f64],
) -> Tree {
    let mut tree = Tree { feature: Vec::new(), threshold: Vec::new(), left: Vec::new(), right: Vec::new(), value: Vec::new() };
    let n_all = y.len();
    let mut counts = vec![0u32; n_all];
    for &r in rows {
        counts[r] += 1;
    }
    // Each feature's node list holds the node's rows in (value, index) order.
    let lists: Vec<Vec<u32>> = presorted
        .iter()
        .map(|order| {
            let mut out = Vec::with_capacity(rows.len());
            for &r in order {
                for _ in 0..counts[r as usize] {
                    out.push(r);
                }
            }
            out
        })
        .collect();
    let mut scratch = Scratch { goes_left: vec![false; n_all], features: Vec::new() };
    if design.n_features == 0 || rows.is_empty() {
        let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len().max(1) as f64;
        tree.push_leaf(mean);
        return tree;
    }
    build(design, y, lists, 0, params, rng, importance, &mut tree, &mut scratch);
    tree
}

struct Scratch {
    goes_left: Vec<bool>,
    features: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn build<R: Rng>(
    design: &Design,
    y: &[f64],
    lists: Vec<Vec<u32>>,
    depth: usize,
    params: &TreeParams,
    rng: &mut R,
    importance: &mut [f64],
    tree: &mut Tree,
    scratch: &mut Scratch,
) -> usize {
    let rows = &lists[0];
    let n = rows.len();
    let sum: f64 = rows.iter().map(|&r| y[r as usize]).sum();
    let mean = sum / n as f64;
    let sse: f64 = rows.iter().map(|&r| (y[r as usize] - mean) * (y[r as usize] - mean)).sum();
    let node = tree.push_leaf(mean);
    if depth >= params.max_depth || n < 2 * params.min_leaf || sse <= 1e-12 * (1.0 + mean * mean) * n as f64 {
        return node;
    }
    let candidates = candidate_features(design.n_features, params.max_features, rng, &mut scratch.features);
    let Some(split) = best_split(design, y, &lists, candidates, params.min_leaf, sum) else {
        return node;
    };
    if !(split.gain > 1e-12 * sse) {
        return node;
    }
    importance[split.feature] += split.gain;
    for &r in &lists[split.feature] {
        scratch.goes_left[r as usize] = design.at(r as usize, split.feature) <= split.threshold;
    }
    let mut left_lists = Vec::with_capacity(lists.len());
    let mut right_lists = Vec::with_capacity(lists.len());
    for list in lists {
        let mut l = Vec::with_capacity(split.n_left);
        let mut r = Vec::with_capacity(n - split.n_left);
        for idx in list {
            if scratch.goes_left[idx as usize] {
                l.push(idx);
            } else {
                r.push(idx);
            }
        }
        left_lists.push(l);
        right_lists.push(r);
    }
    debug_assert_eq!(left_lists[0].len(), split.n_left);
    let left = build(design, y, left_lists, depth + 1, params, rng, importance, tree, scratch);
    let right = build(design, y, right_lists, depth + 1, params, rng, importance, tree, scratch);
    tree.feature[node] = split.feature as i32;
    tree.threshold[node] = split.threshold;
    tree.left[node] = left as u32;
    tree.right[node] = right as u32;
    node
}

/// Candidate features in ascending order; a random subset when requested.
fn candidate_features<'a, R: Rng>(n_features: usize, max_features: Option<usize>, rng: &mut R, buf: &'a mut Vec<usize>) -> &'a [usize] {
    buf.clear();
    buf.extend(0..n_features);
    if let Some(k) = max_features {
        let k = k.clamp(1, n_features);
        if k < n_features {
            for i in 0..k {
                let j = rng.random_range(i..n_features);
                buf.swap(i, j);
            }
            buf.truncate(k);
            buf.sort_unstable();
        }
    }
    buf
}

fn best_split(design: &Design, y: &[f64], lists: &[Vec<u32>], candidates: &[usize], min_leaf: usize, sum: f64) -> Option<Split> {
    let n = lists[0].len();
    let parent = sum * sum / n as f64;
    let mut best: Option<Split> = None;
    for &f in candidates {
        let order = &lists[f];
        let mut left_sum = 0.0;
        for i in 0..n - 1 {
            left_sum += y[order[i] as usize];
            let n_left = i + 1;
            if n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let lo = design.at(order[i] as usize, f);
            let hi = design.at(order[i + 1] as usize, f);
            if lo == hi {
                continue;
            }
            let right_sum = sum - left_sum;
            let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64 - parent;
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(Split { feature: f, threshold, gain, n_left });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fit_all(x: &[f64], n_features: usize, y: &[f64], depth: usize, min_leaf: usize) -> (Tree, Vec<f64>) {
        let mut imp = vec![0.0; n_features];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let params = TreeParams { max_depth: depth, min_leaf, max_features: None };
        let design = Design { x, n_features };
        let sorted = presort(&design);
        let rows: Vec<usize> = (0..y.len()).collect();
        let tree = grow(&design, &sorted, y, &rows, &params, &mut rng, &mut imp);
        (tree, imp)
    }

    #[test]
    fn step_function_is_recovered_at_the_midpoint() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| if v < 5.0 { 1.0 } else { 4.0 }).collect();
        let (tree, imp) = fit_all(&x, 1, &y, 3, 1);
        assert_eq!(tree.feature[0], 0);
        assert_eq!(tree.threshold[0], 4.5);
        assert_eq!(tree.predict_row(&[2.0]), 1.0);
        assert_eq!(tree.predict_row(&[7.0]), 4.0);
        // Root reduction: 10 * var = 10 * 2.25.
        assert!((imp[0] - 22.5).abs() < 1e-9);
    }

    #[test]
    fn equal_gain_ties_pick_lowest_feature() {
        // Two identical columns: the split must use feature 0.
        let x: Vec<f64> = (0..8).flat_map(|i| [i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..8).map(|i| if i < 4 { 0.0 } else { 1.0 }).collect();
        let (tree, _) = fit_all(&x, 2, &y, 1, 1);
        assert_eq!(tree.feature[0], 0);
    }

    #[test]
    fn min_leaf_is_respected() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| if v < 1.0 { 100.0 } else { 0.0 }).collect();
        let (tree, _) = fit_all(&x, 1, &y, 4, 3);
        // The isolated first point cannot form its own leaf.
        assert!(tree.threshold[0] >= 2.5);
    }
}
