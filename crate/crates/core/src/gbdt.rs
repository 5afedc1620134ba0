//! Second-order gradient boosting of regression trees under logistic loss.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Dataset;
use crate::error::{Error, Result};

pub const MODEL_VERSION: u32 = 1;

/// Node row counts above which sibling subtrees and histograms are built in parallel.
const PAR_ROWS: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Quantile histograms with at most `n_bins` bins per feature.
    Histogram,
    /// Every distinct training value is its own bin.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    pub min_child_hessian: f64,
    pub min_split_gain: f64,
    pub n_bins: usize,
    pub split_mode: SplitMode,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            n_rounds: 200,
            learning_rate: 0.4,
            max_depth: 15,
            lambda: 1.0,
            min_child_hessian: 1.0,
            min_split_gain: 0.0,
            n_bins: 256,
            split_mode: SplitMode::Histogram,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.min_child_hessian > 0.0 && self.min_child_hessian.is_finite()) {
            return bad(format!("min_child_hessian must be positive, got {}", self.min_child_hessian));
        }
        if !(self.min_split_gain >= 0.0 && self.min_split_gain.is_finite()) {
            return bad(format!("min_split_gain must be non-negative, got {}", self.min_split_gain));
        }
        if self.n_bins < 2 {
            return bad(format!("n_bins must be at least 2, got {}", self.n_bins));
        }
        Ok(())
    }
}

pub fn sigmoid(margin: f64) -> f64 {
    if margin >= 0.0 {
        1.0 / (1.0 + (-margin).exp())
    } else {
        let e = margin.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Negative log-likelihood of `label` at log-odds `margin`.
pub fn log_loss(label: bool, margin: f64) -> f64 {
    if label {
        softplus(-margin)
    } else {
        softplus(margin)
    }
}

/// First and second derivative of the log loss with respect to the margin.
pub fn logistic_grad_hess(label: bool, margin: f64) -> (f64, f64) {
    let p = sigmoid(margin);
    let y = if label { 1.0 } else { 0.0 };
    (p - y, p * (1.0 - p))
}

pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    let g = gl + gr;
    let h = hl + hr;
    0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda))
}

pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    -g / (h + lambda)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        gain: f64,
        cover: Option<f64>,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
        cover: Option<f64>,
    },
}

impl Node {
    pub fn cover(&self) -> Option<f64> {
        match self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }
}

/// A regression tree stored as an arena; the root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(weight: f64, cover: Option<f64>) -> Tree {
        Tree {
            nodes: vec![Node::Leaf { weight, cover }],
        }
    }

    /// Arena index of the leaf that `x` falls into.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    /// Raw leaf weight reached by `x`, before the learning rate.
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { weight, .. } => weight,
            Node::Split { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Features used by at least one split.
    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

/// `margin(x) = base_score + learning_rate * sum_t tree_t(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsemble {
    pub base_score: f64,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
    pub config: Option<BoostConfig>,
    pub trees: Vec<Tree>,
}

impl TreeEnsemble {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn predict_margin(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.n_features());
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict_proba_one(&self, x: &[f64]) -> f64 {
        sigmoid(self.predict_margin(x))
    }

    fn check_width(&self, data: &Dataset) -> Result<()> {
        if data.n_cols() != self.n_features() {
            return Err(Error::Schema(format!(
                "model expects {} features, data has {}",
                self.n_features(),
                data.n_cols()
            )));
        }
        Ok(())
    }

    pub fn predict_margins(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_width(data)?;
        Ok((0..data.n_rows())
            .into_par_iter()
            .map(|i| self.predict_margin(data.row(i)))
            .collect())
    }

    pub fn predict_proba(&self, data: &Dataset) -> Result<Vec<f64>> {
        Ok(self.predict_margins(data)?.into_iter().map(sigmoid).collect())
    }

    /// The first `n` trees only.
    pub fn truncated(&self, n: usize) -> TreeEnsemble {
        TreeEnsemble {
            trees: self.trees[..n.min(self.trees.len())].to_vec(),
            ..self.clone()
        }
    }
}

/// A fitted ensemble plus the mean training log-loss at the base score and after every round.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub ensemble: TreeEnsemble,
    pub train_loss: Vec<f64>,
}

/// Per-feature cut points and the column-major bin index of every row.
struct Binned {
    n_rows: usize,
    cuts: Vec<Vec<f64>>,
    bins: Vec<u32>,
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    if m > a && m <= b && m.is_finite() {
        m
    } else {
        b
    }
}

fn feature_cuts(mut values: Vec<f64>, max_bins: usize) -> Vec<f64> {
    values.retain(|v| !v.is_nan());
    values.sort_by(f64::total_cmp);
    let mut distinct = values.clone();
    distinct.dedup();
    if distinct.len() <= max_bins {
        return distinct.windows(2).map(|w| midpoint(w[0], w[1])).collect();
    }
    let n = values.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(max_bins - 1);
    for i in 1..max_bins {
        let q = values[i * n / max_bins];
        let idx = distinct.partition_point(|&v| v < q);
        if idx == 0 {
            continue;
        }
        let c = midpoint(distinct[idx - 1], q);
        if cuts.last().is_none_or(|&last| c > last) {
            cuts.push(c);
        }
    }
    cuts
}

impl Binned {
    fn new(data: &Dataset, max_bins: usize) -> Binned {
        let n = data.n_rows();
        let d = data.n_cols();
        let cuts: Vec<Vec<f64>> = (0..d)
            .into_par_iter()
            .map(|j| feature_cuts(data.column(j).collect(), max_bins))
            .collect();
        let mut bins = vec![0u32; n * d];
        bins.par_chunks_mut(n.max(1)).enumerate().for_each(|(j, col)| {
            let c = &cuts[j];
            for (i, b) in col.iter_mut().enumerate() {
                let v = data.row(i)[j];
                *b = if v.is_nan() {
                    Self::missing_bin(c)
                } else {
                    c.partition_point(|&cut| cut <= v) as u32
                };
            }
        });
        Binned { n_rows: n, cuts, bins }
    }

    fn missing_bin(cuts: &[f64]) -> u32 {
        cuts.len() as u32 + 1
    }

    fn bin(&self, feature: usize, row: u32) -> u32 {
        self.bins[feature * self.n_rows + row as usize]
    }
}

/// Per-feature `(gradient, hessian, count)` sums; the last slot holds missing values.
type Histogram = Vec<Vec<[f64; 3]>>;

struct GrowContext<'a> {
    binned: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a BoostConfig,
}

enum Grown {
    Leaf {
        weight: f64,
        cover: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        gain: f64,
        cover: f64,
        left: Box<Grown>,
        right: Box<Grown>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BestSplit {
    feature: usize,
    bin: u32,
    default_left: bool,
    gain: f64,
}

impl GrowContext<'_> {
    fn histogram(&self, rows: &[u32]) -> Histogram {
        let build = |j: usize| {
            let mut h = vec![[0.0; 3]; self.binned.cuts[j].len() + 2];
            for &r in rows {
                let slot = &mut h[self.binned.bin(j, r) as usize];
                slot[0] += self.grad[r as usize];
                slot[1] += self.hess[r as usize];
                slot[2] += 1.0;
            }
            h
        };
        let d = self.binned.cuts.len();
        if rows.len() >= PAR_ROWS {
            (0..d).into_par_iter().map(build).collect()
        } else {
            (0..d).map(build).collect()
        }
    }

    fn best_split(&self, hist: &Histogram) -> Option<BestSplit> {
        let cfg = self.config;
        let lambda = cfg.lambda;
        let mut best: Option<BestSplit> = None;
        for (j, h) in hist.iter().enumerate() {
            let missing = h[h.len() - 1];
            let present = &h[..h.len() - 1];
            let (g_tot, h_tot, n_tot) = present
                .iter()
                .fold((0.0, 0.0, 0.0), |a, s| (a.0 + s[0], a.1 + s[1], a.2 + s[2]));
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0.0);
            for (b, s) in present[..present.len() - 1].iter().enumerate() {
                gl += s[0];
                hl += s[1];
                nl += s[2];
                let (gr, hr, nr) = (g_tot - gl, h_tot - hl, n_tot - nl);
                if nl == 0.0 || nr == 0.0 {
                    continue;
                }
                let options: &[bool] = if missing[2] > 0.0 { &[true, false] } else { &[true] };
                for &miss_left in options {
                    let (gl2, hl2, gr2, hr2) = if miss_left {
                        (gl + missing[0], hl + missing[1], gr, hr)
                    } else {
                        (gl, hl, gr + missing[0], hr + missing[1])
                    };
                    if hl2 < cfg.min_child_hessian || hr2 < cfg.min_child_hessian {
                        continue;
                    }
                    let gain = split_gain(gl2, hl2, gr2, hr2, lambda);
                    if gain > cfg.min_split_gain && best.is_none_or(|bs| gain > bs.gain) {
                        let default_left = if missing[2] > 0.0 { miss_left } else { hl2 >= hr2 };
                        best = Some(BestSplit {
                            feature: j,
                            bin: b as u32,
                            default_left,
                            gain,
                        });
                    }
                }
            }
        }
        best
    }

    fn grow(&self, rows: Vec<u32>, hist: Histogram, depth: usize) -> Grown {
        let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        let leaf = Grown::Leaf {
            weight: leaf_weight(g, h, self.config.lambda),
            cover: h,
        };
        if depth >= self.config.max_depth || rows.len() < 2 {
            return leaf;
        }
        let Some(split) = self.best_split(&hist) else {
            return leaf;
        };
        let missing = Binned::missing_bin(&self.binned.cuts[split.feature]);
        let goes_left = |r: u32| {
            let b = self.binned.bin(split.feature, r);
            if b == missing {
                split.default_left
            } else {
                b <= split.bin
            }
        };
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| goes_left(r));
        drop(rows);
        let left_small = left_rows.len() <= right_rows.len();
        let small = self.histogram(if left_small { &left_rows } else { &right_rows });
        let mut large = hist;
        for (lf, sf) in large.iter_mut().zip(&small) {
            for (a, b) in lf.iter_mut().zip(sf) {
                a[0] -= b[0];
                a[1] -= b[1];
                a[2] -= b[2];
            }
        }
        let (lh, rh) = if left_small { (small, large) } else { (large, small) };
        let n = left_rows.len() + right_rows.len();
        let (l, r) = if n >= PAR_ROWS {
            rayon::join(
                || self.grow(left_rows, lh, depth + 1),
                || self.grow(right_rows, rh, depth + 1),
            )
        } else {
            (self.grow(left_rows, lh, depth + 1), self.grow(right_rows, rh, depth + 1))
        };
        Grown::Split {
            feature: split.feature,
            threshold: self.binned.cuts[split.feature][split.bin as usize],
            default_left: split.default_left,
            gain: split.gain,
            cover: h,
            left: Box::new(l),
            right: Box::new(r),
        }
    }
}

fn flatten(grown: Grown, nodes: &mut Vec<Node>) -> usize {
    let at = nodes.len();
    match grown {
        Grown::Leaf { weight, cover } => nodes.push(Node::Leaf {
            weight,
            cover: Some(cover),
        }),
        Grown::Split {
            feature,
            threshold,
            default_left,
            gain,
            cover,
            left,
            right,
        } => {
            nodes.push(Node::Leaf { weight: 0.0, cover: None });
            let l = flatten(*left, nodes);
            let r = flatten(*right, nodes);
            nodes[at] = Node::Split {
                feature,
                threshold,
                default_left,
                gain,
                cover: Some(cover),
                left: l,
                right: r,
            };
        }
    }
    at
}

fn mean_loss(labels: &[bool], margins: &[f64]) -> f64 {
    labels.iter().zip(margins).map(|(&y, &m)| log_loss(y, m)).sum::<f64>() / labels.len() as f64
}

/// Fits an ensemble starting from the logit of the training positive rate.
pub fn train(data: &Dataset, config: &BoostConfig) -> Result<TrainOutcome> {
    if data.n_rows() < 2 {
        return Err(Error::Data("training needs at least two rows".into()));
    }
    let pos = data.positive_count();
    if pos == 0 || pos == data.n_rows() {
        return Err(Error::Data("training data contains a single class".into()));
    }
    let rate = pos as f64 / data.n_rows() as f64;
    boost(data, config, (rate / (1.0 - rate)).ln())
}

/// Boosting from an explicit starting margin; does not require both classes.
pub fn boost(data: &Dataset, config: &BoostConfig, base_score: f64) -> Result<TrainOutcome> {
    config.validate()?;
    if data.n_rows() == 0 {
        return Err(Error::Data("training needs at least one row".into()));
    }
    if !base_score.is_finite() {
        return Err(Error::Config("base score must be finite".into()));
    }
    let max_bins = match config.split_mode {
        SplitMode::Histogram => config.n_bins,
        SplitMode::Exact => usize::MAX,
    };
    let binned = Binned::new(data, max_bins);
    let labels = &data.labels;
    let n = data.n_rows();
    let mut margins = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut train_loss = vec![mean_loss(labels, &margins)];
    let mut trees = Vec::with_capacity(config.n_rounds);
    let all_rows: Vec<u32> = (0..n as u32).collect();

    for _ in 0..config.n_rounds {
        grad.par_iter_mut()
            .zip(hess.par_iter_mut())
            .zip(margins.par_iter().zip(labels.par_iter()))
            .for_each(|((g, h), (&m, &y))| {
                (*g, *h) = logistic_grad_hess(y, m);
            });
        let ctx = GrowContext {
            binned: &binned,
            grad: &grad,
            hess: &hess,
            config,
        };
        let root_hist = ctx.histogram(&all_rows);
        let grown = ctx.grow(all_rows.clone(), root_hist, 0);
        let mut nodes = Vec::new();
        flatten(grown, &mut nodes);
        let tree = Tree { nodes };
        margins.par_iter_mut().enumerate().for_each(|(i, m)| {
            *m += config.learning_rate * tree.predict(data.row(i));
        });
        train_loss.push(mean_loss(labels, &margins));
        trees.push(tree);
    }

    Ok(TrainOutcome {
        ensemble: TreeEnsemble {
            base_score,
            learning_rate: config.learning_rate,
            feature_names: data.column_names(),
            config: Some(config.clone()),
            trees,
        },
        train_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum NodeFile {
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        gain: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cover: Option<f64>,
        left: Box<NodeFile>,
        right: Box<NodeFile>,
    },
    Leaf {
        weight: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cover: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    base_score: f64,
    learning_rate: f64,
    feature_names: Vec<String>,
    #[serde(default)]
    config: Option<BoostConfig>,
    trees: Vec<NodeFile>,
}

fn to_file(tree: &Tree, i: usize) -> NodeFile {
    match &tree.nodes[i] {
        Node::Leaf { weight, cover } => NodeFile::Leaf {
            weight: *weight,
            cover: *cover,
        },
        Node::Split {
            feature,
            threshold,
            default_left,
            gain,
            cover,
            left,
            right,
        } => NodeFile::Split {
            feature: *feature,
            threshold: *threshold,
            default_left: *default_left,
            gain: *gain,
            cover: *cover,
            left: Box::new(to_file(tree, *left)),
            right: Box::new(to_file(tree, *right)),
        },
    }
}

fn from_file(node: NodeFile, n_features: usize, nodes: &mut Vec<Node>) -> Result<usize> {
    let at = nodes.len();
    match node {
        NodeFile::Leaf { weight, cover } => {
            if !weight.is_finite() {
                return Err(Error::Data("non-finite leaf weight".into()));
            }
            nodes.push(Node::Leaf { weight, cover });
        }
        NodeFile::Split {
            feature,
            threshold,
            default_left,
            gain,
            cover,
            left,
            right,
        } => {
            if feature >= n_features {
                return Err(Error::Data(format!("split on feature {feature} of {n_features}")));
            }
            if !threshold.is_finite() {
                return Err(Error::Data("non-finite split threshold".into()));
            }
            nodes.push(Node::Leaf { weight: 0.0, cover: None });
            let l = from_file(*left, n_features, nodes)?;
            let r = from_file(*right, n_features, nodes)?;
            nodes[at] = Node::Split {
                feature,
                threshold,
                default_left,
                gain,
                cover,
                left: l,
                right: r,
            };
        }
    }
    Ok(at)
}

impl TreeEnsemble {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            version: MODEL_VERSION,
            base_score: self.base_score,
            learning_rate: self.learning_rate,
            feature_names: self.feature_names.clone(),
            config: self.config.clone(),
            trees: self.trees.iter().map(|t| to_file(t, 0)).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<TreeEnsemble> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Data("model file has no version".into()))?;
        if found != MODEL_VERSION as u64 {
            return Err(Error::Version {
                found: found as u32,
                expected: MODEL_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_value(value)?;
        if !(file.base_score.is_finite() && file.learning_rate.is_finite()) {
            return Err(Error::Data("non-finite base score or learning rate".into()));
        }
        let n_features = file.feature_names.len();
        let trees = file
            .trees
            .into_iter()
            .map(|root| {
                let mut nodes = Vec::new();
                from_file(root, n_features, &mut nodes)?;
                Ok(Tree { nodes })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TreeEnsemble {
            base_score: file.base_score,
            learning_rate: file.learning_rate,
            feature_names: file.feature_names,
            config: file.config,
            trees,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TreeEnsemble> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
