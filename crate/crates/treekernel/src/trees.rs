//! Recursive binary splitting of the unit cube under four randomization
//! strategies, and histogram leaf fitting.
//!
//! A grown tree is recorded both as a flat [`Partition`] (the leaves) and as
//! a [`SplitScheme`] mapping internal node words to their (axis, fraction)
//! split, which is enough to replay the partition exactly.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Hyperrectangle, Partition};
use crate::igb::Loss;

/// Training sample: features in `[0,1]`, one real target per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if x.len() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows but {} targets",
                x.len(),
                y.len()
            )));
        }
        let p = x[0].len();
        for (i, row) in x.iter().enumerate() {
            if row.len() != p {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} features, expected {p}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::OutOfUnitCube { axis: j, value: v });
                }
            }
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn p(&self) -> usize {
        self.x[0].len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    /// FNV-1a over the bit patterns of every entry; used to tie forests to
    /// the data they were fitted on.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for row in &self.x {
            for &v in row {
                eat(v);
            }
        }
        for &v in &self.y {
            eat(v);
        }
        h
    }
}

/// Node word in the binary tree: sequence of 0/1 child choices from the root.
pub type NodeWord = Vec<u8>;

/// Per-internal-node split record `(axis, fraction)`; the fraction is
/// relative to the node cell, threshold = `a_j + u (b_j - a_j)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitScheme {
    pub entries: BTreeMap<NodeWord, (usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Uniform,
    ExtraTrees,
    Softmax,
    BreimanGreedy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowConfig {
    pub strategy: Strategy,
    pub max_depth: usize,
    /// Number of softmax candidates.
    pub k_candidates: usize,
    /// Softmax temperature.
    pub beta: f64,
    /// Number of axes examined per split for data-aware strategies.
    pub max_features: usize,
    pub min_samples_leaf: usize,
    pub min_impurity_decrease: f64,
    /// Bootstrap-resample the scoring data for partition construction only;
    /// leaf prediction always uses the original sample.
    pub bootstrap_for_partition: bool,
    pub seed: u64,
}

impl GrowConfig {
    pub fn new(strategy: Strategy, p: usize) -> Self {
        Self {
            strategy,
            max_depth: match strategy {
                Strategy::Uniform => 8,
                _ => 30,
            },
            k_candidates: if strategy == Strategy::Uniform { 1 } else { 10 },
            beta: 1.0,
            max_features: p.max(1),
            min_samples_leaf: 1,
            min_impurity_decrease: 0.0,
            bootstrap_for_partition: false,
            seed: 0,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.strategy == Strategy::Uniform && self.k_candidates != 1 {
            return Err(Error::InvalidConfig(
                "uniform strategy forces K = 1".into(),
            ));
        }
        if self.k_candidates < 1 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidConfig("beta must be >= 0".into()));
        }
        if self.max_features < 1 || self.max_features > p {
            return Err(Error::InvalidConfig(format!(
                "max_features must be in [1, {p}]"
            )));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::InvalidConfig("min_samples_leaf must be >= 1".into()));
        }
        if self.min_impurity_decrease < 0.0 {
            return Err(Error::InvalidConfig(
                "min_impurity_decrease must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Flat node array for O(depth) point location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        axis: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf: usize,
    },
}

/// Output of a grower before leaf fitting.
#[derive(Debug, Clone)]
pub struct GrownTree {
    pub partition: Partition,
    pub scheme: SplitScheme,
    pub nodes: Vec<TreeNode>,
    /// (axis, weighted impurity gain) per realized split, for MDI.
    pub split_gains: Vec<(usize, f64)>,
}

/// A tree with fitted leaf means. Empty leaves predict 0.
#[derive(Debug, Clone)]
pub struct FittedTree {
    pub partition: Partition,
    pub scheme: SplitScheme,
    pub nodes: Vec<TreeNode>,
    pub leaf_value: Vec<f64>,
    pub leaf_count: Vec<usize>,
    pub split_gains: Vec<(usize, f64)>,
}

impl FittedTree {
    /// Leaf index by root-to-leaf traversal; agrees with `Partition::locate`.
    pub fn locate(&self, z: &[f64]) -> usize {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { leaf } => return *leaf,
                TreeNode::Split {
                    axis,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if z[*axis] < *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        self.leaf_value[self.locate(z)]
    }
}

/// Counter-based per-tree RNG stream derived from (master seed, tree index).
pub fn tree_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = master_seed
        .wrapping_add(index.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Split score over the points of `rect`, in empirical-measure units:
/// `P[t 1_A0]^2 / P(A0) + P[t 1_A1]^2 / P(A1)` with the convention 0/0 = 0.
pub fn score_split(
    data: &Dataset,
    targets: &[f64],
    rect: &Hyperrectangle,
    axis: usize,
    fraction: f64,
) -> Result<f64> {
    let idx: Vec<usize> = (0..data.n())
        .filter(|&i| rect.contains_unchecked(data.row(i)))
        .collect();
    let (a, b) = (rect.lower()[axis], rect.upper()[axis]);
    let threshold = a + fraction * (b - a);
    let (s0, c0, s1, c1) = split_sums(data.rows(), targets, &idx, axis, threshold);
    Ok(pair_score(s0, c0, s1, c1, data.n()))
}

fn split_sums(
    rows: &[Vec<f64>],
    targets: &[f64],
    idx: &[usize],
    axis: usize,
    threshold: f64,
) -> (f64, usize, f64, usize) {
    let (mut s0, mut c0, mut s1, mut c1) = (0.0, 0usize, 0.0, 0usize);
    for &i in idx {
        if rows[i][axis] < threshold {
            s0 += targets[i];
            c0 += 1;
        } else {
            s1 += targets[i];
            c1 += 1;
        }
    }
    (s0, c0, s1, c1)
}

/// `P[t 1_A]^2/P(A)` terms with counts, divided by n once at the end.
fn pair_score(s0: f64, c0: usize, s1: f64, c1: usize, n: usize) -> f64 {
    let t0 = if c0 > 0 { s0 * s0 / c0 as f64 } else { 0.0 };
    let t1 = if c1 > 0 { s1 * s1 / c1 as f64 } else { 0.0 };
    (t0 + t1) / n as f64
}

fn node_score(sum: f64, count: usize, n: usize) -> f64 {
    if count > 0 {
        sum * sum / (count as f64 * n as f64)
    } else {
        0.0
    }
}

/// Draw an index with probability proportional to `exp(beta * score)`,
/// stabilized by subtracting the max score.
pub fn softmax_select<R: Rng>(scores: &[f64], beta: f64, rng: &mut R) -> usize {
    assert!(!scores.is_empty());
    if scores.len() == 1 {
        return 0;
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|&s| (beta * (s - max)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    scores.len() - 1
}

struct Grower<'a> {
    data: &'a Dataset,
    targets: &'a [f64],
    cfg: &'a GrowConfig,
    /// Index multiset used for split scoring (bootstrap when enabled).
    score_idx_of: Vec<Vec<usize>>,
    leaves: Vec<Hyperrectangle>,
    scheme: SplitScheme,
    nodes: Vec<TreeNode>,
    split_gains: Vec<(usize, f64)>,
    max_depth_seen: usize,
}

struct Candidate {
    axis: usize,
    fraction: f64,
    threshold: f64,
    score: f64,
    c0: usize,
    c1: usize,
}

impl<'a> Grower<'a> {
    fn grow<R: Rng>(mut self, rng: &mut R) -> GrownTree {
        let root_idx = std::mem::take(&mut self.score_idx_of[0]);
        let root = Hyperrectangle::unit_cube(self.data.p());
        self.nodes.push(TreeNode::Leaf { leaf: 0 });
        self.grow_node(0, root, root_idx, Vec::new(), 0, rng);
        let depth = self.max_depth_seen;
        GrownTree {
            partition: Partition::new(std::mem::take(&mut self.leaves), depth)
                .expect("grower always produces at least one leaf"),
            scheme: self.scheme,
            nodes: self.nodes,
            split_gains: self.split_gains,
        }
    }

    fn grow_node<R: Rng>(
        &mut self,
        node_slot: usize,
        rect: Hyperrectangle,
        idx: Vec<usize>,
        word: NodeWord,
        depth: usize,
        rng: &mut R,
    ) {
        self.max_depth_seen = self.max_depth_seen.max(depth);
        let stop_by_size = self.cfg.strategy != Strategy::Uniform
            && idx.len() < 2 * self.cfg.min_samples_leaf;
        if depth >= self.cfg.max_depth || stop_by_size {
            self.make_leaf(node_slot, rect);
            return;
        }
        let chosen = self.choose_split(&rect, &idx, rng);
        let Some(cand) = chosen else {
            self.make_leaf(node_slot, rect);
            return;
        };
        let n = self.data.n();
        let node_sum: f64 = idx.iter().map(|&i| self.targets[i]).sum();
        let gain = cand.score - node_score(node_sum, idx.len(), n);
        if self.cfg.strategy != Strategy::Uniform && gain < self.cfg.min_impurity_decrease {
            self.make_leaf(node_slot, rect);
            return;
        }
        let (left_rect, right_rect) = rect
            .split(cand.axis, cand.fraction)
            .expect("candidate fractions are in (0,1)");
        let (mut left_idx, mut right_idx) = (Vec::new(), Vec::new());
        for &i in &idx {
            if self.data.row(i)[cand.axis] < cand.threshold {
                left_idx.push(i);
            } else {
                right_idx.push(i);
            }
        }
        self.scheme
            .entries
            .insert(word.clone(), (cand.axis, cand.fraction));
        self.split_gains.push((cand.axis, gain));
        let left_slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { leaf: usize::MAX });
        let right_slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { leaf: usize::MAX });
        self.nodes[node_slot] = TreeNode::Split {
            axis: cand.axis,
            threshold: cand.threshold,
            left: left_slot,
            right: right_slot,
        };
        let mut left_word = word.clone();
        left_word.push(0);
        let mut right_word = word;
        right_word.push(1);
        self.grow_node(left_slot, left_rect, left_idx, left_word, depth + 1, rng);
        self.grow_node(right_slot, right_rect, right_idx, right_word, depth + 1, rng);
    }

    fn make_leaf(&mut self, node_slot: usize, rect: Hyperrectangle) {
        let leaf = self.leaves.len();
        self.leaves.push(rect);
        self.nodes[node_slot] = TreeNode::Leaf { leaf };
    }

    fn candidate(&self, rect: &Hyperrectangle, idx: &[usize], axis: usize, fraction: f64) -> Candidate {
        let (a, b) = (rect.lower()[axis], rect.upper()[axis]);
        let threshold = a + fraction * (b - a);
        let (s0, c0, s1, c1) =
            split_sums(self.data.rows(), self.targets, idx, axis, threshold);
        Candidate {
            axis,
            fraction,
            threshold,
            score: pair_score(s0, c0, s1, c1, self.data.n()),
            c0,
            c1,
        }
    }

    fn admissible(&self, c: &Candidate) -> bool {
        match self.cfg.strategy {
            Strategy::Uniform => true,
            // Softmax keeps leaves nonempty; the others respect min_samples_leaf.
            Strategy::Softmax => c.c0 > 0 && c.c1 > 0,
            _ => c.c0 >= self.cfg.min_samples_leaf && c.c1 >= self.cfg.min_samples_leaf,
        }
    }

    fn random_axes<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let p = self.data.p();
        let m = self.cfg.max_features.min(p);
        let mut axes: Vec<usize> = (0..p).collect();
        let (sampled, _) = axes.partial_shuffle(rng, m);
        let mut chosen = sampled.to_vec();
        chosen.sort_unstable();
        chosen
    }

    fn choose_split<R: Rng>(
        &self,
        rect: &Hyperrectangle,
        idx: &[usize],
        rng: &mut R,
    ) -> Option<Candidate> {
        match self.cfg.strategy {
            Strategy::Uniform => {
                let axis = rng.gen_range(0..self.data.p());
                let fraction = rng.gen_range(f64::MIN_POSITIVE..1.0);
                Some(self.candidate(rect, idx, axis, fraction))
            }
            Strategy::ExtraTrees => {
                let mut best: Option<Candidate> = None;
                for axis in self.random_axes(rng) {
                    let fraction = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let c = self.candidate(rect, idx, axis, fraction);
                    if !self.admissible(&c) {
                        continue;
                    }
                    // Ties go to the earliest candidate.
                    if best.as_ref().map_or(true, |b| c.score > b.score) {
                        best = Some(c);
                    }
                }
                best
            }
            Strategy::Softmax => {
                let mut cands = Vec::with_capacity(self.cfg.k_candidates);
                for _ in 0..self.cfg.k_candidates {
                    let axis = rng.gen_range(0..self.data.p());
                    let fraction = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    cands.push(self.candidate(rect, idx, axis, fraction));
                }
                let valid: Vec<Candidate> = cands
                    .into_iter()
                    .filter(|c| self.admissible(c))
                    .collect();
                if valid.is_empty() {
                    return None;
                }
                let scores: Vec<f64> = valid.iter().map(|c| c.score).collect();
                let k = softmax_select(&scores, self.cfg.beta, rng);
                valid.into_iter().nth(k)
            }
            Strategy::BreimanGreedy => {
                let mut best: Option<Candidate> = None;
                let (lo, hi) = (rect.lower(), rect.upper());
                for axis in self.random_axes(rng) {
                    let mut coords: Vec<f64> =
                        idx.iter().map(|&i| self.data.row(i)[axis]).collect();
                    coords.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    coords.dedup();
                    for w in coords.windows(2) {
                        let threshold = 0.5 * (w[0] + w[1]);
                        let span = hi[axis] - lo[axis];
                        let fraction = (threshold - lo[axis]) / span;
                        if !(fraction > 0.0 && fraction < 1.0) {
                            continue;
                        }
                        let c = self.candidate(rect, idx, axis, fraction);
                        if !self.admissible(&c) {
                            continue;
                        }
                        if best.as_ref().map_or(true, |b| c.score > b.score) {
                            best = Some(c);
                        }
                    }
                }
                best
            }
        }
    }
}

/// Grow a random partition from data under the configured strategy.
pub fn grow_partition<R: Rng>(
    data: &Dataset,
    targets: &[f64],
    cfg: &GrowConfig,
    rng: &mut R,
) -> Result<GrownTree> {
    cfg.validate(data.p())?;
    if targets.len() != data.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} rows",
            targets.len(),
            data.n()
        )));
    }
    let root_idx: Vec<usize> = if cfg.bootstrap_for_partition {
        (0..data.n()).map(|_| rng.gen_range(0..data.n())).collect()
    } else {
        (0..data.n()).collect()
    };
    let grower = Grower {
        data,
        targets,
        cfg,
        score_idx_of: vec![root_idx],
        leaves: Vec::new(),
        scheme: SplitScheme::default(),
        nodes: Vec::new(),
        split_gains: Vec::new(),
        max_depth_seen: 0,
    };
    Ok(grower.grow(rng))
}

/// Fit leaf means on the original (non-resampled) sample. Empty leaves get 0.
pub fn histogram_fit(grown: GrownTree, data: &Dataset, targets: &[f64]) -> FittedTree {
    let n_leaves = grown.partition.leaves().len();
    let mut sums = vec![0.0f64; n_leaves];
    let mut counts = vec![0usize; n_leaves];
    let locate = |z: &[f64]| -> usize {
        let mut idx = 0;
        loop {
            match &grown.nodes[idx] {
                TreeNode::Leaf { leaf } => return *leaf,
                TreeNode::Split {
                    axis,
                    threshold,
                    left,
                    right,
                } => idx = if z[*axis] < *threshold { *left } else { *right },
            }
        }
    };
    for i in 0..data.n() {
        let leaf = locate(data.row(i));
        sums[leaf] += targets[i];
        counts[leaf] += 1;
    }
    let leaf_value: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    FittedTree {
        partition: grown.partition,
        scheme: grown.scheme,
        nodes: grown.nodes,
        leaf_value,
        leaf_count: counts,
        split_gains: grown.split_gains,
    }
}

/// Negative first derivative of the loss at the current predictor values.
pub fn pseudo_residuals(loss: &Loss, f_values: &[f64], y: &[f64]) -> Vec<f64> {
    f_values
        .iter()
        .zip(y)
        .map(|(&f, &yi)| -loss.first_derivative(f, yi))
        .collect()
}
