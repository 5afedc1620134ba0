//! Path-dependent TreeSHAP attributions in margin (log-odds) space, an
//! exponential brute-force Shapley oracle, and summary export.

use std::borrow::Cow;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, RowOrigin};
use crate::error::{Error, Result};
use crate::gbdt::{Node, Tree, TreeEnsemble};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    /// Cover-weighted expected margin.
    pub base_value: f64,
    pub phi: Vec<f64>,
    pub margin: f64,
}

impl ShapExplanation {
    /// `|base + sum(phi) - margin|`.
    pub fn local_accuracy_error(&self) -> f64 {
        (self.base_value + self.phi.iter().sum::<f64>() - self.margin).abs()
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: isize,
    zero: f64,
    one: f64,
    weight: f64,
}

const EMPTY: PathElement = PathElement {
    feature: -1,
    zero: 0.0,
    one: 0.0,
    weight: 0.0,
};

fn extend_path(path: &mut [PathElement], depth: usize, zero: f64, one: f64, feature: isize) {
    path[depth] = PathElement {
        feature,
        zero,
        one,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    };
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / d1;
        path[i].weight = zero * path[i].weight * (depth - i) as f64 / d1;
    }
}

fn unwind_path(path: &mut [PathElement], depth: usize, index: usize) {
    let one = path[index].one;
    let zero = path[index].zero;
    let d1 = (depth + 1) as f64;
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * d1 / ((i + 1) as f64 * one);
            next = tmp - path[i].weight * zero * (depth - i) as f64 / d1;
        } else {
            path[i].weight = path[i].weight * d1 / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
}

fn unwound_path_sum(path: &[PathElement], depth: usize, index: usize, inv: &[f64]) -> f64 {
    let one = path[index].one;
    let zero = path[index].zero;
    let mut next = path[depth].weight;
    let mut total = 0.0;
    if one != 0.0 {
        let inv_one = 1.0 / one;
        for i in (0..depth).rev() {
            let tmp = next * inv[i + 1] * inv_one;
            total += tmp;
            next = path[i].weight - tmp * zero * (depth - i) as f64;
        }
    } else {
        total = cold_path_sum(path, depth, inv) / zero;
    }
    total * (depth + 1) as f64
}

/// `sum_i w_i / (depth - i)`; shared by every element whose one-fraction is zero.
fn cold_path_sum(path: &[PathElement], depth: usize, inv: &[f64]) -> f64 {
    (0..depth).map(|i| path[i].weight * inv[depth - i]).sum()
}

fn goes_left(node: &Node, x: &[f64]) -> bool {
    match node {
        Node::Split {
            feature,
            threshold,
            default_left,
            ..
        } => {
            let v = x[*feature];
            if v.is_nan() {
                *default_left
            } else {
                v < *threshold
            }
        }
        Node::Leaf { .. } => unreachable!("leaves have no children"),
    }
}

fn children(node: &Node) -> (usize, usize) {
    match node {
        Node::Split { left, right, .. } => (*left, *right),
        Node::Leaf { .. } => unreachable!("leaves have no children"),
    }
}

/// Node covers of one tree, checked to be usable as path weights.
fn tree_covers(tree: &Tree) -> Result<Vec<f64>> {
    tree.nodes
        .iter()
        .map(|n| {
            let c = n.cover().ok_or_else(|| {
                Error::State("model has no node cover statistics; retrain it to enable explanations".into())
            })?;
            match n {
                Node::Split { .. } if !(c > 0.0 && c.is_finite()) => {
                    Err(Error::State(format!("split node with unusable cover {c}")))
                }
                _ => Ok(c),
            }
        })
        .collect()
}

/// Cover-weighted expectation of the tree's raw output.
fn expected_value(tree: &Tree, covers: &[f64], node: usize) -> f64 {
    match &tree.nodes[node] {
        Node::Leaf { weight, .. } => *weight,
        n @ Node::Split { .. } => {
            let (l, r) = children(n);
            (covers[l] * expected_value(tree, covers, l) + covers[r] * expected_value(tree, covers, r)) / covers[node]
        }
    }
}

struct Walk<'a> {
    tree: &'a Tree,
    covers: &'a [f64],
    x: &'a [f64],
    scale: f64,
    /// `inv[k] = 1 / k`.
    inv: &'a [f64],
}

impl Walk<'_> {
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        &self,
        buf: &mut [PathElement],
        phi: &mut [f64],
        parent_start: usize,
        node: usize,
        depth: usize,
        zero: f64,
        one: f64,
        feature: isize,
    ) {
        let start = parent_start + depth + 1;
        let (head, tail) = buf.split_at_mut(start);
        tail[..=depth].copy_from_slice(&head[parent_start..=parent_start + depth]);
        let path = &mut tail[..=depth];
        extend_path(path, depth, zero, one, feature);

        let n = &self.tree.nodes[node];
        let Node::Split { feature: split, .. } = n else {
            let Node::Leaf { weight, .. } = n else { unreachable!() };
            let value = weight * self.scale;
            let mut cold: Option<f64> = None;
            for i in 1..=depth {
                let el = path[i];
                let w = if el.one == 0.0 {
                    let c = *cold.get_or_insert_with(|| cold_path_sum(path, depth, self.inv));
                    c / el.zero * (depth + 1) as f64
                } else {
                    unwound_path_sum(path, depth, i, self.inv)
                };
                phi[el.feature as usize] += w * (el.one - el.zero) * value;
            }
            return;
        };
        let split = *split as isize;
        let (l, r) = children(n);
        let (hot, cold) = if goes_left(n, self.x) { (l, r) } else { (r, l) };
        let w = self.covers[node];
        let (mut in_zero, mut in_one) = (1.0, 1.0);
        let mut depth = depth;
        if let Some(k) = (0..=depth).find(|&k| path[k].feature == split) {
            in_zero = path[k].zero;
            in_one = path[k].one;
            unwind_path(path, depth, k);
            depth -= 1;
        }
        let hot_zero = self.covers[hot] / w * in_zero;
        let cold_zero = self.covers[cold] / w * in_zero;
        self.recurse(buf, phi, start, hot, depth + 1, hot_zero, in_one, split);
        self.recurse(buf, phi, start, cold, depth + 1, cold_zero, 0.0, split);
    }
}

/// Largest quadrature order; paths with more distinct features use [`Walk`].
const MAX_NODES: usize = 16;

/// Gauss-Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for i in 1..=m {
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if m == 1 { x } else { p1 };
            let prev = if m == 1 { 1.0 } else { p0 };
            dp = m as f64 * (x * p - prev) / (x * x - 1.0);
            let step = p / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        nodes.push((1.0 - x) / 2.0);
        weights.push(1.0 / ((1.0 - x * x) * dp * dp));
    }
    (nodes, weights)
}

/// Leaf-level Shapley sums written as `int_0^1 prod_j (q_j (1-t) + o_j t) dt`
/// and evaluated exactly by `M`-point quadrature, aggregated bottom-up at the
/// deepest split on each feature.
struct QuadWalk<'a, const M: usize> {
    tree: &'a Tree,
    covers: &'a [f64],
    x: &'a [f64],
    scale: f64,
    t: [f64; M],
    w: [f64; M],
    /// `w / (1 - t)`.
    w_cold: [f64; M],
    zero: &'a mut [f64],
    one: &'a mut [f64],
    /// Leaf mass below deeper splits on the same feature, per feature.
    below: &'a mut [[f64; M]],
    phi: &'a mut [f64],
}

impl<const M: usize> QuadWalk<'_, M> {
    fn visit(&mut self, node: usize, p: &[f64; M]) -> [f64; M] {
        let n = &self.tree.nodes[node];
        let Node::Split { feature, .. } = n else {
            let Node::Leaf { weight, .. } = n else { unreachable!() };
            let v = weight * self.scale;
            return p.map(|x| v * x);
        };
        let i = *feature;
        let (l, r) = children(n);
        let (hot, cold) = if goes_left(n, self.x) { (l, r) } else { (r, l) };
        let (zero_old, one_old) = (self.zero[i], self.one[i]);
        let fresh = zero_old == 1.0 && one_old == 1.0;
        let inv_old: [f64; M] = if one_old == 0.0 || fresh {
            [1.0; M]
        } else {
            std::array::from_fn(|k| 1.0 / (zero_old * (1.0 - self.t[k]) + self.t[k]))
        };
        let saved = self.below[i];
        let mut total = [0.0; M];
        for (child, one) in [(hot, one_old), (cold, 0.0)] {
            let zero = zero_old * self.covers[child] / self.covers[node];
            if zero == 0.0 && one == 0.0 {
                continue;
            }
            let f: [f64; M] = std::array::from_fn(|k| zero * (1.0 - self.t[k]) + one * self.t[k]);
            let pc: [f64; M] = if one_old == 0.0 {
                let ratio = zero / zero_old;
                p.map(|x| x * ratio)
            } else {
                std::array::from_fn(|k| p[k] * f[k] * inv_old[k])
            };
            self.zero[i] = zero;
            self.one[i] = one;
            self.below[i] = [0.0; M];
            let mass = self.visit(child, &pc);
            let below = &self.below[i];
            let mut s = 0.0;
            if one == 0.0 {
                for k in 0..M {
                    s += self.w_cold[k] * (mass[k] - below[k]);
                }
                s /= zero;
            } else {
                for k in 0..M {
                    s += self.w[k] * (mass[k] - below[k]) / f[k];
                }
            }
            for k in 0..M {
                total[k] += mass[k];
            }
            self.phi[i] += (one - zero) * s;
        }
        self.zero[i] = zero_old;
        self.one[i] = one_old;
        for k in 0..M {
            self.below[i][k] = saved[k] + total[k];
        }
        total
    }
}

/// Precomputed per-tree covers and expectations for repeated explanations.
#[derive(Debug, Clone)]
pub struct TreeExplainer<'a> {
    ensemble: Cow<'a, TreeEnsemble>,
    covers: Vec<Vec<f64>>,
    depths: Vec<usize>,
    base_value: f64,
    /// Quadrature order, when paths are short enough.
    quad_order: Option<usize>,
}

impl<'a> TreeExplainer<'a> {
    pub fn new(ensemble: &'a TreeEnsemble) -> Result<Self> {
        Self::build(Cow::Borrowed(ensemble))
    }

    /// An explainer that owns its ensemble.
    pub fn owned(ensemble: TreeEnsemble) -> Result<TreeExplainer<'static>> {
        TreeExplainer::build(Cow::Owned(ensemble))
    }

    fn build(ensemble: Cow<'a, TreeEnsemble>) -> Result<Self> {
        let covers = ensemble.trees.iter().map(tree_covers).collect::<Result<Vec<_>>>()?;
        let expected: f64 = ensemble
            .trees
            .iter()
            .zip(&covers)
            .map(|(t, c)| expected_value(t, c, 0))
            .sum();
        let depths: Vec<usize> = ensemble.trees.iter().map(Tree::depth).collect();
        let distinct = depths.iter().copied().max().unwrap_or(0).min(ensemble.n_features());
        let order = distinct / 2 + 1;
        let base_value = ensemble.base_score + ensemble.learning_rate * expected;
        Ok(TreeExplainer {
            ensemble,
            depths,
            quad_order: (order <= MAX_NODES).then_some(order),
            covers,
            base_value,
        })
    }

    pub fn ensemble(&self) -> &TreeEnsemble {
        &self.ensemble
    }

    pub fn base_value(&self) -> f64 {
        self.base_value
    }

    pub fn explain(&self, x: &[f64]) -> Result<ShapExplanation> {
        let Some(order) = self.quad_order else {
            return self.explain_path(x);
        };
        let d = self.check_row(x)?;
        let phi = match order {
            0..=2 => self.explain_quad::<2>(x, d),
            3..=4 => self.explain_quad::<4>(x, d),
            5..=8 => self.explain_quad::<8>(x, d),
            _ => self.explain_quad::<MAX_NODES>(x, d),
        };
        Ok(ShapExplanation {
            base_value: self.base_value,
            phi,
            margin: self.ensemble.predict_margin(x),
        })
    }

    fn explain_quad<const M: usize>(&self, x: &[f64], d: usize) -> Vec<f64> {
        let (t, w) = gauss_legendre(M);
        let t: [f64; M] = t.try_into().expect("M nodes");
        let w: [f64; M] = w.try_into().expect("M weights");
        let mut phi = vec![0.0; d];
        let mut zero = vec![1.0; d];
        let mut one = vec![1.0; d];
        let mut below = vec![[0.0; M]; d];
        for (tree, covers) in self.ensemble.trees.iter().zip(&self.covers) {
            if tree.nodes.len() == 1 {
                continue;
            }
            let mut walk = QuadWalk {
                tree,
                covers,
                x,
                scale: self.ensemble.learning_rate,
                t,
                w,
                w_cold: std::array::from_fn(|k| w[k] / (1.0 - t[k])),
                zero: &mut zero,
                one: &mut one,
                below: &mut below,
                phi: &mut phi,
            };
            walk.visit(0, &[1.0; M]);
        }
        phi
    }

    /// The classic path-weight recursion; same result as [`Self::explain`].
    pub fn explain_path(&self, x: &[f64]) -> Result<ShapExplanation> {
        let d = self.check_row(x)?;
        let mut phi = vec![0.0; d];
        let max_depth = self.depths.iter().copied().max().unwrap_or(0);
        let mut buf = vec![EMPTY; (max_depth + 2) * (max_depth + 3) / 2 + max_depth + 2];
        let inv: Vec<f64> = (0..max_depth + 3).map(|k| 1.0 / k as f64).collect();
        for (tree, covers) in self.ensemble.trees.iter().zip(&self.covers) {
            if tree.nodes.len() == 1 {
                continue;
            }
            let walk = Walk {
                tree,
                covers,
                x,
                scale: self.ensemble.learning_rate,
                inv: &inv,
            };
            walk.recurse(&mut buf, &mut phi, 0, 0, 0, 1.0, 1.0, -1);
        }
        Ok(ShapExplanation {
            base_value: self.base_value,
            phi,
            margin: self.ensemble.predict_margin(x),
        })
    }

    fn check_row(&self, x: &[f64]) -> Result<usize> {
        let d = self.ensemble.n_features();
        if x.len() != d {
            return Err(Error::Schema(format!("row has {} values, model expects {d}", x.len())));
        }
        Ok(d)
    }
}

/// Explains one row; builds a fresh explainer, so prefer [`TreeExplainer`] for batches.
pub fn tree_shap(ensemble: &TreeEnsemble, x: &[f64]) -> Result<ShapExplanation> {
    TreeExplainer::new(ensemble)?.explain(x)
}

/// Conditional expectation of the tree output with the features in `known`
/// fixed to `x` and the rest integrated out by node covers.
pub fn conditional_value(tree: &Tree, x: &[f64], known: &[bool]) -> Result<f64> {
    let covers = tree_covers(tree)?;
    fn go(tree: &Tree, covers: &[f64], x: &[f64], known: &[bool], node: usize) -> f64 {
        match &tree.nodes[node] {
            Node::Leaf { weight, .. } => *weight,
            n @ Node::Split { feature, .. } => {
                let (l, r) = children(n);
                if known[*feature] {
                    go(tree, covers, x, known, if goes_left(n, x) { l } else { r })
                } else {
                    (covers[l] * go(tree, covers, x, known, l) + covers[r] * go(tree, covers, x, known, r))
                        / covers[node]
                }
            }
        }
    }
    Ok(go(tree, &covers, x, known, 0))
}

/// Shapley values of one tree's raw output by enumeration of all feature
/// subsets, under the same cover-weighted valuation as TreeSHAP.
pub fn brute_force_shap(tree: &Tree, x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if n > 16 {
        return Err(Error::Config(format!("brute force supports at most 16 features, got {n}")));
    }
    let mut values = vec![0.0; 1 << n];
    for (mask, slot) in values.iter_mut().enumerate() {
        let known: Vec<bool> = (0..n).map(|j| mask >> j & 1 == 1).collect();
        *slot = conditional_value(tree, x, &known)?;
    }
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    })
    .collect();
    let mut phi = vec![0.0; n];
    for (j, p) in phi.iter_mut().enumerate() {
        for mask in 0..1usize << n {
            if mask >> j & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = fact[s] * fact[n - s - 1] / fact[n];
            *p += weight * (values[mask | 1 << j] - values[mask]);
        }
    }
    Ok(phi)
}

/// Replaces node covers by the number of `background` rows reaching each node.
pub fn covers_from_background(tree: &Tree, background: &[Vec<f64>]) -> Tree {
    let mut counts = vec![0.0; tree.nodes.len()];
    for x in background {
        let mut i = 0;
        loop {
            counts[i] += 1.0;
            match &tree.nodes[i] {
                Node::Leaf { .. } => break,
                n @ Node::Split { .. } => {
                    let (l, r) = children(n);
                    i = if goes_left(n, x) { l } else { r };
                }
            }
        }
    }
    let nodes = tree
        .nodes
        .iter()
        .zip(counts)
        .map(|(n, c)| match n.clone() {
            Node::Leaf { weight, .. } => Node::Leaf { weight, cover: Some(c) },
            Node::Split {
                feature,
                threshold,
                default_left,
                gain,
                left,
                right,
                ..
            } => Node::Split {
                feature,
                threshold,
                default_left,
                gain,
                cover: Some(c),
                left,
                right,
            },
        })
        .collect();
    Tree { nodes }
}

/// Per-row attributions plus mean-|phi| importance over a set of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub features: Vec<String>,
    pub base_value: f64,
    pub row_ids: Vec<Option<u64>>,
    /// Row-major `rows x features`.
    pub shap_values: Vec<f64>,
    pub feature_values: Vec<f64>,
    pub importance: Vec<f64>,
    /// Feature indices by decreasing importance; ties keep schema order.
    pub ranking: Vec<usize>,
    pub max_local_accuracy_error: f64,
}

impl ShapSummary {
    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    /// 1-based importance rank of feature `j`.
    pub fn rank_of(&self, j: usize) -> usize {
        self.ranking.iter().position(|&k| k == j).expect("feature index in range") + 1
    }

    pub fn top_feature(&self) -> Option<&str> {
        self.ranking.first().map(|&j| self.features[j].as_str())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let d = self.features.len();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["feature", "row_id", "shap_value", "feature_value", "rank"])?;
        for &j in &self.ranking {
            let rank = self.rank_of(j).to_string();
            for (i, id) in self.row_ids.iter().enumerate() {
                w.write_record([
                    self.features[j].clone(),
                    id.map(|v| v.to_string()).unwrap_or_default(),
                    self.shap_values[i * d + j].to_string(),
                    self.feature_values[i * d + j].to_string(),
                    rank.clone(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("shap csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// Explains every row of `data`.
pub fn summarize(ensemble: &TreeEnsemble, data: &Dataset) -> Result<ShapSummary> {
    let explainer = TreeExplainer::new(ensemble)?;
    let d = ensemble.n_features();
    if data.n_cols() != d {
        return Err(Error::Schema(format!(
            "data has {} columns, model expects {d}",
            data.n_cols()
        )));
    }
    let explanations = (0..data.n_rows())
        .into_par_iter()
        .map(|i| explainer.explain(data.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut shap_values = Vec::with_capacity(data.n_rows() * d);
    let mut max_err: f64 = 0.0;
    for e in &explanations {
        shap_values.extend_from_slice(&e.phi);
        max_err = max_err.max(e.local_accuracy_error());
    }
    let n = data.n_rows();
    // Sorted summation makes importance independent of row order.
    let importance: Vec<f64> = (0..d)
        .map(|j| {
            if n == 0 {
                return 0.0;
            }
            let mut a: Vec<f64> = (0..n).map(|i| shap_values[i * d + j].abs()).collect();
            a.sort_by(f64::total_cmp);
            a.iter().sum::<f64>() / n as f64
        })
        .collect();
    let mut ranking: Vec<usize> = (0..d).collect();
    ranking.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    Ok(ShapSummary {
        features: ensemble.feature_names.clone(),
        base_value: explainer.base_value(),
        row_ids: data
            .origins
            .iter()
            .map(|o| match o {
                RowOrigin::Source(id) => Some(*id),
                RowOrigin::Synthetic => None,
            })
            .collect(),
        shap_values,
        feature_values: data.values().to_vec(),
        importance,
        ranking,
        max_local_accuracy_error: max_err,
    })
}
