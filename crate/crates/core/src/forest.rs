//! Random forest over Gini impurity.
//!
//! Split candidates are midpoints between consecutive distinct values, with
//! `x <= threshold` routed left. Child impurity is compared exactly on
//! integer counts; ties go to the lower feature index, then the lower
//! threshold.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{Artifact, ArtifactError};
use crate::features::FeatureMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("training data is empty")]
    EmptyData,
    #[error("training labels contain a single class")]
    SingleClassData,
    #[error("{labels} labels for {rows} rows")]
    RowCountMismatch { rows: usize, labels: usize },
    #[error("feature names differ from training: expected {expected:?}, found {found:?}")]
    NameMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("forest has no trees")]
    UntrainedForest,
    #[error("invalid forest configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ForestError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Bootstrap-weighted `[normal, theft]` counts.
    Leaf { counts: [u64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn leaf_for(&self, row: &[f64]) -> [u64; 2] {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
                Node::Leaf { counts } => return counts,
            }
        }
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        let c = self.leaf_for(row);
        c[1] as f64 / (c[0] + c[1]) as f64
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features drawn per node; `None` means `⌈√F⌉`.
    pub max_features: Option<usize>,
    pub min_samples_leaf: u64,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_features: None,
            min_samples_leaf: 1,
            max_depth: None,
            bootstrap: true,
        }
    }
}

impl ForestConfig {
    pub fn resolved_max_features(&self, n_features: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
    pub names: Vec<String>,
    pub config: ForestConfig,
    pub seed: u64,
    importances: Vec<f64>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [u8],
    max_features: usize,
    min_leaf: u64,
    max_depth: Option<usize>,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    /// Unnormalized weighted impurity decrease per feature.
    gain: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    // weighted child impurity is num/den (scaled by 1/2)
    num: u128,
    den: u128,
}

impl Candidate {
    fn better_than(&self, other: &Candidate) -> bool {
        match (self.num * other.den).cmp(&(other.num * self.den)) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => {
                self.feature < other.feature || (self.feature == other.feature && self.threshold < other.threshold)
            }
        }
    }
}

fn gini(c: [u64; 2]) -> f64 {
    let n = (c[0] + c[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    1.0 - (c[0] as f64 / n).powi(2) - (c[1] as f64 / n).powi(2)
}

/// `Σ_child a·b/n` as an exact fraction.
fn child_score(l: [u64; 2], r: [u64; 2]) -> (u128, u128) {
    let nl = (l[0] + l[1]) as u128;
    let nr = (r[0] + r[1]) as u128;
    (
        l[0] as u128 * l[1] as u128 * nr + r[0] as u128 * r[1] as u128 * nl,
        nl * nr,
    )
}

impl Builder<'_> {
    fn counts(&self, samples: &[(usize, u64)]) -> [u64; 2] {
        let mut c = [0u64; 2];
        for &(i, w) in samples {
            c[self.y[i] as usize] += w;
        }
        c
    }

    fn best_for_feature(&self, f: usize, samples: &[(usize, u64)], total: [u64; 2]) -> Option<Candidate> {
        let mut sorted: Vec<(f64, u64, u8)> = samples.iter().map(|&(i, w)| (self.x[i][f], w, self.y[i])).collect();
        sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = [0u64; 2];
        let mut best: Option<Candidate> = None;
        for k in 0..sorted.len() - 1 {
            left[sorted[k].2 as usize] += sorted[k].1;
            let (lo, hi) = (sorted[k].0, sorted[k + 1].0);
            if lo == hi {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            if left[0] + left[1] < self.min_leaf || right[0] + right[1] < self.min_leaf {
                continue;
            }
            let mut threshold = (lo + hi) / 2.0;
            if threshold >= hi {
                threshold = lo;
            }
            let (num, den) = child_score(left, right);
            let c = Candidate {
                feature: f,
                threshold,
                num,
                den,
            };
            if best.as_ref().is_none_or(|b| c.better_than(b)) {
                best = Some(c);
            }
        }
        best
    }

    fn build(&mut self, samples: Vec<(usize, u64)>, depth: usize) -> usize {
        let counts = self.counts(&samples);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { counts });
        let n = counts[0] + counts[1];
        if counts[0] == 0 || counts[1] == 0 || n < 2 * self.min_leaf || self.max_depth.is_some_and(|d| depth >= d) {
            return id;
        }
        let n_features = self.x[0].len();
        let mut order: Vec<usize> = (0..n_features).collect();
        order.shuffle(&mut self.rng);
        let mut best: Option<Candidate> = None;
        let mut tried = 0;
        for f in order {
            if tried >= self.max_features && best.is_some() {
                break;
            }
            let first = self.x[samples[0].0][f];
            if samples.iter().all(|&(i, _)| self.x[i][f] == first) {
                continue;
            }
            tried += 1;
            if let Some(c) = self.best_for_feature(f, &samples, counts) {
                if best.as_ref().is_none_or(|b| c.better_than(b)) {
                    best = Some(c);
                }
            }
        }
        let Some(best) = best else {
            return id;
        };
        let (ls, rs): (Vec<_>, Vec<_>) = samples
            .into_iter()
            .partition(|&(i, _)| self.x[i][best.feature] <= best.threshold);
        let lc = self.counts(&ls);
        let rc = self.counts(&rs);
        let parent = n as f64 * gini(counts);
        let children = (lc[0] + lc[1]) as f64 * gini(lc) + (rc[0] + rc[1]) as f64 * gini(rc);
        self.gain[best.feature] += (parent - children).max(0.0);
        let left = self.build(ls, depth + 1);
        let right = self.build(rs, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }
}

/// Fits one tree on weighted `(row, multiplicity)` samples; returns the tree
/// and its per-feature impurity decrease.
pub fn fit_tree(
    x: &[Vec<f64>],
    y: &[u8],
    samples: Vec<(usize, u64)>,
    max_features: usize,
    min_samples_leaf: u64,
    max_depth: Option<usize>,
    rng: ChaCha8Rng,
) -> (DecisionTree, Vec<f64>) {
    let mut b = Builder {
        x,
        y,
        max_features,
        min_leaf: min_samples_leaf.max(1),
        max_depth,
        rng,
        nodes: Vec::new(),
        gain: vec![0.0; x.first().map_or(0, Vec::len)],
    };
    b.build(samples, 0);
    (DecisionTree { nodes: b.nodes }, b.gain)
}

fn rows_of(x: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..x.n_rows()).map(|r| x.values.row(r).to_vec()).collect()
}

pub fn train_forest(x: &FeatureMatrix, y: &[u8], cfg: &ForestConfig, seed: u64) -> Result<Forest> {
    if x.n_rows() == 0 || x.n_features() == 0 {
        return Err(ForestError::EmptyData);
    }
    if y.len() != x.n_rows() {
        return Err(ForestError::RowCountMismatch {
            rows: x.n_rows(),
            labels: y.len(),
        });
    }
    if !y.contains(&0) || !y.contains(&1) {
        return Err(ForestError::SingleClassData);
    }
    if cfg.n_trees == 0 {
        return Err(ForestError::InvalidConfig("n_trees must be at least 1".into()));
    }
    let rows = rows_of(x);
    let n = rows.len();
    let max_features = cfg.resolved_max_features(x.n_features());
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut importance = vec![0.0; x.n_features()];
    for k in 0..cfg.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let samples = if cfg.bootstrap {
            let mut mult = vec![0u64; n];
            for _ in 0..n {
                mult[rng.gen_range(0..n)] += 1;
            }
            mult.into_iter().enumerate().filter(|&(_, m)| m > 0).collect()
        } else {
            (0..n).map(|i| (i, 1)).collect()
        };
        let (tree, gain) = fit_tree(&rows, y, samples, max_features, cfg.min_samples_leaf, cfg.max_depth, rng);
        let total: f64 = gain.iter().sum();
        if total > 0.0 {
            for (acc, g) in importance.iter_mut().zip(&gain) {
                *acc += g / total;
            }
        }
        trees.push(tree);
    }
    let total: f64 = importance.iter().sum();
    if total > 0.0 {
        importance.iter_mut().for_each(|v| *v /= total);
    } else {
        let u = 1.0 / importance.len() as f64;
        importance.iter_mut().for_each(|v| *v = u);
    }
    Ok(Forest {
        trees,
        names: x.names.clone(),
        config: cfg.clone(),
        seed,
        importances: importance,
    })
}

/// Mean over trees of the leaf's theft fraction.
pub fn rf_predict_proba(f: &Forest, x: &FeatureMatrix) -> Result<Vec<f64>> {
    if f.trees.is_empty() {
        return Err(ForestError::UntrainedForest);
    }
    if x.names != f.names {
        return Err(ForestError::NameMismatch {
            expected: f.names.clone(),
            found: x.names.clone(),
        });
    }
    let k = f.trees.len() as f64;
    Ok((0..x.n_rows())
        .map(|r| {
            let row = x.values.row(r);
            f.trees.iter().map(|t| t.predict_proba(row)).sum::<f64>() / k
        })
        .collect())
}

/// Normalized mean impurity decrease, in training column order.
pub fn feature_importances(f: &Forest) -> Result<Vec<(String, f64)>> {
    if f.trees.is_empty() {
        return Err(ForestError::UntrainedForest);
    }
    Ok(f.names.iter().cloned().zip(f.importances.iter().copied()).collect())
}

const NODE_WIDTH: usize = 6;

impl Forest {
    pub fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new(
            "random_forest",
            serde_json::json!({
                "names": self.names,
                "config": self.config,
                "seed": self.seed,
            }),
        );
        a.push("importances", &[self.importances.len()], self.importances.clone());
        for (k, t) in self.trees.iter().enumerate() {
            let mut flat = Vec::with_capacity(t.nodes.len() * NODE_WIDTH);
            for node in &t.nodes {
                match *node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => flat.extend([feature as f64, threshold, left as f64, right as f64, 0.0, 0.0]),
                    Node::Leaf { counts } => flat.extend([-1.0, 0.0, 0.0, 0.0, counts[0] as f64, counts[1] as f64]),
                }
            }
            a.push(&format!("tree_{k}"), &[t.nodes.len(), NODE_WIDTH], flat);
        }
        a
    }

    pub fn from_artifact(a: &Artifact) -> std::result::Result<Self, ArtifactError> {
        a.expect_kind("random_forest")?;
        let bad = || ArtifactError::BadShape("meta".into());
        let names: Vec<String> = serde_json::from_value(a.meta["names"].clone())?;
        let config: ForestConfig = serde_json::from_value(a.meta["config"].clone())?;
        let seed = a.meta["seed"].as_u64().ok_or_else(bad)?;
        let (_, imp) = a.tensor("importances")?;
        let mut trees = Vec::new();
        for k in 0.. {
            let name = format!("tree_{k}");
            let Ok((shape, flat)) = a.tensor(&name) else { break };
            if shape.len() != 2 || shape[1] != NODE_WIDTH {
                return Err(ArtifactError::BadShape(name));
            }
            let nodes = flat
                .chunks_exact(NODE_WIDTH)
                .map(|c| {
                    if c[0] < 0.0 {
                        Node::Leaf {
                            counts: [c[4] as u64, c[5] as u64],
                        }
                    } else {
                        Node::Split {
                            feature: c[0] as usize,
                            threshold: c[1],
                            left: c[2] as usize,
                            right: c[3] as usize,
                        }
                    }
                })
                .collect();
            trees.push(DecisionTree { nodes });
        }
        Ok(Self {
            trees,
            names,
            config,
            seed,
            importances: imp.to_vec(),
        })
    }
}
