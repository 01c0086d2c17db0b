//! Ensembles of fitted trees: the forest predictor, the weight matrix, and
//! the two kernel Gram builders.
//!
//! The empirical block intensity is never materialized; every leaf-measure
//! integral becomes `(1/M) * sum over trees, sum over leaves`. Gram
//! construction is leaf-indexed: points are bucketed per leaf and each
//! bucket contributes a rank-one block, which is exactly equal in value to
//! the pairwise scan but linear in the number of points per tree.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::trees::{
    grow_partition, histogram_fit, tree_rng, Dataset, FittedTree, GrowConfig, SplitScheme,
    Strategy, TreeNode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelTag {
    /// Connection kernel: probability of landing in the same leaf.
    K0,
    /// Weighted kernel: same-leaf co-occurrence weighted by inverse leaf mass.
    KP,
}

impl KernelTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelTag::K0 => "k0",
            KernelTag::KP => "kP",
        }
    }
}

/// M trees grown independently on one shared dataset.
#[derive(Debug, Clone)]
pub struct Forest {
    pub trees: Vec<FittedTree>,
    pub cfg: GrowConfig,
    pub data_fingerprint: u64,
    pub n_train: usize,
    pub p: usize,
}

/// Symmetric kernel matrix over a point set, tagged with its kernel and the
/// forest it came from.
#[derive(Debug, Clone)]
pub struct GramBundle {
    pub matrix: DMatrix<f64>,
    pub kernel_tag: KernelTag,
    pub points: Vec<Vec<f64>>,
    pub forest_fingerprint: u64,
}

impl Forest {
    pub fn m(&self) -> usize {
        self.trees.len()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = self.data_fingerprint ^ 0x9E3779B97F4A7C15;
        h ^= self.cfg.seed.wrapping_mul(0xff51afd7ed558ccd);
        h ^= (self.m() as u64).wrapping_mul(0xc4ceb9fe1a85ec53);
        h
    }
}

/// Grow and fit M independent trees. Leaf values always come from the full
/// non-resampled sample, even when the partition used a bootstrap.
pub fn fit_forest(
    data: &Dataset,
    targets: &[f64],
    cfg: &GrowConfig,
    m: usize,
) -> Result<Forest> {
    if m < 1 {
        return Err(Error::InvalidConfig("forest needs M >= 1 trees".into()));
    }
    cfg.validate(data.p())?;
    let trees: Vec<FittedTree> = (0..m as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(cfg.seed, t);
            let grown = grow_partition(data, targets, cfg, &mut rng)?;
            Ok(histogram_fit(grown, data, targets))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Forest {
        trees,
        cfg: cfg.clone(),
        data_fingerprint: data.fingerprint(),
        n_train: data.n(),
        p: data.p(),
    })
}

/// Forest prediction: average of the tree predictions.
pub fn predict(forest: &Forest, z: &[f64]) -> f64 {
    let sum: f64 = forest.trees.iter().map(|t| t.predict(z)).sum();
    sum / forest.m() as f64
}

/// Prediction weights over the training sample:
/// `W_ni(z) = (1/M) sum_m 1{X_i in leaf_m(z)} / (n P_n(leaf_m(z)))`.
pub fn weight_vector(forest: &Forest, data: &Dataset, z: &[f64]) -> Vec<f64> {
    let n = data.n();
    let mut acc = vec![0.0f64; n];
    for tree in &forest.trees {
        let leaf = tree.locate(z);
        let count = tree.leaf_count[leaf];
        if count == 0 {
            continue;
        }
        let w = 1.0 / count as f64;
        for i in 0..n {
            if tree.locate(data.row(i)) == leaf {
                acc[i] += w;
            }
        }
    }
    let m = forest.m() as f64;
    for v in &mut acc {
        *v /= m;
    }
    acc
}

/// Full n x n weight matrix at the training points, computed leaf-indexed.
pub fn weight_matrix(forest: &Forest, data: &Dataset) -> DMatrix<f64> {
    let gram = gram(forest, data.rows(), KernelTag::KP, forest.n_train);
    gram.matrix / forest.n_train as f64
}

fn alpha_sq(count: usize, n_train: usize) -> f64 {
    if count > 0 {
        n_train as f64 / count as f64
    } else {
        // Empty-leaf convention: alpha^2 = 1.
        1.0
    }
}

fn accumulate_tree(
    tree: &FittedTree,
    points: &[Vec<f64>],
    tag: KernelTag,
    n_train: usize,
    acc: &mut DMatrix<f64>,
) {
    let n_leaves = tree.leaf_count.len();
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n_leaves];
    for (i, z) in points.iter().enumerate() {
        buckets[tree.locate(z)].push(i);
    }
    for (leaf, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let w = match tag {
            KernelTag::K0 => 1.0,
            KernelTag::KP => alpha_sq(tree.leaf_count[leaf], n_train),
        };
        for &i in bucket {
            for &j in bucket {
                acc[(i, j)] += w;
            }
        }
    }
}

/// Gram matrix of the chosen kernel over a point set. `n_train` is the size
/// of the training sample behind `P_n` (the leaf masses).
pub fn gram(forest: &Forest, points: &[Vec<f64>], tag: KernelTag, n_train: usize) -> GramBundle {
    let s = points.len();
    let n_chunks = (rayon::current_num_threads() * 4).max(1);
    let chunk = forest.trees.len().div_ceil(n_chunks).max(1);
    // Fixed-order partial sums keep the reduction deterministic.
    let partials: Vec<DMatrix<f64>> = forest
        .trees
        .par_chunks(chunk)
        .map(|trees| {
            let mut acc = DMatrix::zeros(s, s);
            for tree in trees {
                accumulate_tree(tree, points, tag, n_train, &mut acc);
            }
            acc
        })
        .collect();
    let mut matrix = DMatrix::zeros(s, s);
    for part in partials {
        matrix += part;
    }
    matrix /= forest.m() as f64;
    GramBundle {
        matrix,
        kernel_tag: tag,
        points: points.to_vec(),
        forest_fingerprint: forest.fingerprint(),
    }
}

/// Rectangular kernel block k(rows_i, cols_j), leaf-indexed like `gram`.
pub fn gram_cross(
    forest: &Forest,
    rows: &[Vec<f64>],
    cols: &[Vec<f64>],
    tag: KernelTag,
    n_train: usize,
) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(rows.len(), cols.len());
    for tree in &forest.trees {
        let n_leaves = tree.leaf_count.len();
        let mut row_buckets: Vec<Vec<usize>> = vec![Vec::new(); n_leaves];
        let mut col_buckets: Vec<Vec<usize>> = vec![Vec::new(); n_leaves];
        for (i, z) in rows.iter().enumerate() {
            row_buckets[tree.locate(z)].push(i);
        }
        for (j, z) in cols.iter().enumerate() {
            col_buckets[tree.locate(z)].push(j);
        }
        for leaf in 0..n_leaves {
            if row_buckets[leaf].is_empty() || col_buckets[leaf].is_empty() {
                continue;
            }
            let w = match tag {
                KernelTag::K0 => 1.0,
                KernelTag::KP => alpha_sq(tree.leaf_count[leaf], n_train),
            };
            for &i in &row_buckets[leaf] {
                for &j in &col_buckets[leaf] {
                    acc[(i, j)] += w;
                }
            }
        }
    }
    acc / forest.m() as f64
}

/// Row means `(1/n) sum_j k(X_i, X_j)` of a kP Gram at training points;
/// equals 1 for every row when all realized leaves are nonempty.
pub fn gram_row_means(bundle: &GramBundle) -> Result<Vec<f64>> {
    if bundle.kernel_tag != KernelTag::KP {
        return Err(Error::InvalidConfig(
            "row means are defined for the kP kernel at training points".into(),
        ));
    }
    let n = bundle.matrix.nrows();
    Ok((0..n)
        .map(|i| bundle.matrix.row(i).sum() / n as f64)
        .collect())
}

/// Write a Gram matrix as CSV with a provenance comment line.
pub fn write_gram_csv<W: Write>(
    out: &mut W,
    bundle: &GramBundle,
    seed: u64,
    m: usize,
) -> Result<()> {
    writeln!(
        out,
        "# kernel={} seed={} M={}",
        bundle.kernel_tag.as_str(),
        seed,
        m
    )?;
    let s = bundle.matrix.ncols();
    let header: Vec<String> = (0..s).map(|j| format!("z{j}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..bundle.matrix.nrows() {
        let row: Vec<String> = (0..s).map(|j| format!("{}", bundle.matrix[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

const MAGIC: &[u8; 4] = b"TKFR";
const VERSION: u32 = 1;

/// Versioned binary forest file: header (magic, version, p, data
/// fingerprint, n, M, config) then per-tree scheme and leaf table. The
/// partition is replayed from the scheme on load.
pub fn save_forest<P: AsRef<Path>>(path: P, forest: &Forest) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(forest.p as u64).to_le_bytes())?;
    w.write_all(&forest.data_fingerprint.to_le_bytes())?;
    w.write_all(&(forest.n_train as u64).to_le_bytes())?;
    w.write_all(&(forest.m() as u64).to_le_bytes())?;
    let cfg = serde_json::to_vec(&forest.cfg).map_err(|e| Error::Serialization(e.to_string()))?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    for tree in &forest.trees {
        w.write_all(&(tree.scheme.entries.len() as u64).to_le_bytes())?;
        for (word, &(axis, fraction)) in &tree.scheme.entries {
            w.write_all(&(word.len() as u64).to_le_bytes())?;
            w.write_all(word)?;
            w.write_all(&(axis as u64).to_le_bytes())?;
            w.write_all(&fraction.to_le_bytes())?;
        }
        w.write_all(&(tree.leaf_value.len() as u64).to_le_bytes())?;
        for (&v, &c) in tree.leaf_value.iter().zip(&tree.leaf_count) {
            w.write_all(&v.to_le_bytes())?;
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        w.write_all(&(tree.split_gains.len() as u64).to_le_bytes())?;
        for &(axis, gain) in &tree.split_gains {
            w.write_all(&(axis as u64).to_le_bytes())?;
            w.write_all(&gain.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn load_forest<P: AsRef<Path>>(path: P) -> Result<Forest> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Serialization("bad magic".into()));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    if u32::from_le_bytes(vbuf) != VERSION {
        return Err(Error::Serialization("unsupported version".into()));
    }
    let p = read_u64(&mut r)? as usize;
    let data_fingerprint = read_u64(&mut r)?;
    let n_train = read_u64(&mut r)? as usize;
    let m = read_u64(&mut r)? as usize;
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let cfg: GrowConfig =
        serde_json::from_slice(&cfg_buf).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut trees = Vec::with_capacity(m);
    for _ in 0..m {
        let n_entries = read_u64(&mut r)? as usize;
        let mut scheme = SplitScheme::default();
        for _ in 0..n_entries {
            let wlen = read_u64(&mut r)? as usize;
            let mut word = vec![0u8; wlen];
            r.read_exact(&mut word)?;
            let axis = read_u64(&mut r)? as usize;
            let fraction = read_f64(&mut r)?;
            scheme.entries.insert(word, (axis, fraction));
        }
        let n_leaves = read_u64(&mut r)? as usize;
        let mut leaf_value = Vec::with_capacity(n_leaves);
        let mut leaf_count = Vec::with_capacity(n_leaves);
        for _ in 0..n_leaves {
            leaf_value.push(read_f64(&mut r)?);
            leaf_count.push(read_u64(&mut r)? as usize);
        }
        let n_gains = read_u64(&mut r)? as usize;
        let mut split_gains = Vec::with_capacity(n_gains);
        for _ in 0..n_gains {
            let axis = read_u64(&mut r)? as usize;
            split_gains.push((axis, read_f64(&mut r)?));
        }
        let mut tree = replay_scheme(&scheme, p)?;
        if tree.partition.leaves().len() != n_leaves {
            return Err(Error::Serialization(format!(
                "scheme replays to {} leaves but leaf table has {}",
                tree.partition.leaves().len(),
                n_leaves
            )));
        }
        tree.leaf_value = leaf_value;
        tree.leaf_count = leaf_count;
        tree.split_gains = split_gains;
        trees.push(tree);
    }
    Ok(Forest {
        trees,
        cfg,
        data_fingerprint,
        n_train,
        p,
    })
}

/// Rebuild partition and node array from a splitting scheme; leaf order is
/// the depth-first, left-before-right order used by the grower.
pub fn replay_scheme(scheme: &SplitScheme, p: usize) -> Result<FittedTree> {
    use crate::geometry::Hyperrectangle;
    let mut leaves = Vec::new();
    let mut nodes: Vec<TreeNode> = vec![TreeNode::Leaf { leaf: 0 }];
    let mut max_depth = 0usize;
    #[allow(clippy::too_many_arguments)]
    fn descend(
        scheme: &SplitScheme,
        slot: usize,
        rect: Hyperrectangle,
        word: Vec<u8>,
        depth: usize,
        leaves: &mut Vec<Hyperrectangle>,
        nodes: &mut Vec<TreeNode>,
        max_depth: &mut usize,
    ) -> Result<()> {
        *max_depth = (*max_depth).max(depth);
        if let Some(&(axis, fraction)) = scheme.entries.get(&word) {
            let (left_rect, right_rect) = rect.split(axis, fraction)?;
            let threshold = rect.lower()[axis] + fraction * (rect.upper()[axis] - rect.lower()[axis]);
            let left_slot = nodes.len();
            nodes.push(TreeNode::Leaf { leaf: usize::MAX });
            let right_slot = nodes.len();
            nodes.push(TreeNode::Leaf { leaf: usize::MAX });
            nodes[slot] = TreeNode::Split {
                axis,
                threshold,
                left: left_slot,
                right: right_slot,
            };
            let mut lw = word.clone();
            lw.push(0);
            let mut rw = word;
            rw.push(1);
            descend(scheme, left_slot, left_rect, lw, depth + 1, leaves, nodes, max_depth)?;
            descend(scheme, right_slot, right_rect, rw, depth + 1, leaves, nodes, max_depth)?;
        } else {
            let leaf = leaves.len();
            leaves.push(rect);
            nodes[slot] = TreeNode::Leaf { leaf };
        }
        Ok(())
    }
    descend(
        scheme,
        0,
        Hyperrectangle::unit_cube(p),
        Vec::new(),
        0,
        &mut leaves,
        &mut nodes,
        &mut max_depth,
    )?;
    let n_leaves = leaves.len();
    Ok(FittedTree {
        partition: crate::geometry::Partition::new(leaves, max_depth)?,
        scheme: scheme.clone(),
        nodes,
        leaf_value: vec![0.0; n_leaves],
        leaf_count: vec![0; n_leaves],
        split_gains: Vec::new(),
    })
}

/// Coarsen every tree by truncating its scheme at `depth`; leaf masses and
/// values are refitted on the same data.
pub fn truncate_forest(forest: &Forest, data: &Dataset, targets: &[f64], depth: usize) -> Forest {
    let trees: Vec<FittedTree> = forest
        .trees
        .iter()
        .map(|tree| {
            let mut scheme = SplitScheme::default();
            for (word, &split) in &tree.scheme.entries {
                if word.len() < depth {
                    scheme.entries.insert(word.clone(), split);
                }
            }
            let replayed = replay_scheme(&scheme, forest.p).expect("valid truncated scheme");
            let grown = crate::trees::GrownTree {
                partition: replayed.partition,
                scheme,
                nodes: replayed.nodes,
                split_gains: Vec::new(),
            };
            histogram_fit(grown, data, targets)
        })
        .collect();
    Forest {
        trees,
        cfg: forest.cfg.clone(),
        data_fingerprint: forest.data_fingerprint,
        n_train: forest.n_train,
        p: forest.p,
    }
}

/// Convenience check used by a few growers and tests.
pub fn is_uniform_strategy(cfg: &GrowConfig) -> bool {
    cfg.strategy == Strategy::Uniform
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_data(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.gen()).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn single_tree_forest_matches_tree() {
        let data = random_data(50, 2, 1);
        let cfg = GrowConfig::new(Strategy::ExtraTrees, 2);
        let forest = fit_forest(&data, data.targets(), &cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let z = [rng.gen(), rng.gen()];
            assert_eq!(predict(&forest, &z), forest.trees[0].predict(&z));
        }
    }

    #[test]
    fn constant_targets_constant_prediction() {
        let mut data = random_data(30, 2, 3);
        let c = 4.25;
        data = Dataset::new(data.rows().to_vec(), vec![c; 30]).unwrap();
        let cfg = GrowConfig::new(Strategy::ExtraTrees, 2);
        let forest = fit_forest(&data, data.targets(), &cfg, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let z = [rng.gen(), rng.gen()];
            assert!((predict(&forest, &z) - c).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_is_mean_of_tree_predictions() {
        let data = random_data(60, 3, 5);
        let cfg = GrowConfig::new(Strategy::Softmax, 3);
        let forest = fit_forest(&data, data.targets(), &cfg, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let z = [rng.gen(), rng.gen(), rng.gen()];
            let by_loop: f64 =
                forest.trees.iter().map(|t| t.predict(&z)).sum::<f64>() / forest.m() as f64;
            assert!((predict(&forest, &z) - by_loop).abs() < 1e-15);
        }
    }

    #[test]
    fn depth_zero_forest_predicts_sample_mean() {
        let data = random_data(40, 2, 7);
        let mean = data.targets().iter().sum::<f64>() / 40.0;
        let mut cfg = GrowConfig::new(Strategy::ExtraTrees, 2);
        cfg.max_depth = 0;
        let forest = fit_forest(&data, data.targets(), &cfg, 5).unwrap();
        assert!((predict(&forest, &[0.3, 0.3]) - mean).abs() < 1e-12);
    }

    #[test]
    fn forest_mc_error_shrinks_with_m() {
        // sup |T_M - T_2M| over a grid should shrink roughly like 1/sqrt(M).
        let data = random_data(80, 1, 8);
        let grid: Vec<Vec<f64>> = (0..100).map(|i| vec![(i as f64 + 0.5) / 100.0]).collect();
        let mut ratios = Vec::new();
        for seed in 0..20u64 {
            let mut cfg = GrowConfig::new(Strategy::Uniform, 1);
            cfg.max_depth = 3;
            cfg.k_candidates = 1;
            let sup_diff = |m1: usize, m2: usize, s: u64| {
                let mut c1 = cfg.clone();
                c1.seed = s;
                let mut c2 = cfg.clone();
                c2.seed = s + 1000;
                let f1 = fit_forest(&data, data.targets(), &c1, m1).unwrap();
                let f2 = fit_forest(&data, data.targets(), &c2, m2).unwrap();
                grid.iter()
                    .map(|z| (predict(&f1, z) - predict(&f2, z)).abs())
                    .fold(0.0f64, f64::max)
            };
            let d_small = sup_diff(100, 100, seed * 3);
            let d_large = sup_diff(400, 400, seed * 3 + 1);
            ratios.push(d_small / d_large);
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[10];
        assert!(
            (1.1..=2.6).contains(&median),
            "median ratio {median} outside [1.1, 2.6]"
        );
    }

    #[test]
    fn weight_single_point() {
        let data = Dataset::new(vec![vec![0.5]], vec![1.0]).unwrap();
        let mut cfg = GrowConfig::new(Strategy::Uniform, 1);
        cfg.max_depth = 2;
        cfg.k_candidates = 1;
        let forest = fit_forest(&data, data.targets(), &cfg, 10).unwrap();
        let w = weight_vector(&forest, &data, &[0.5]);
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_rows_sum_to_one_and_reproduce_predictions() {
        let data = random_data(50, 2, 9);
        let cfg = GrowConfig::new(Strategy::ExtraTrees, 2);
        let forest = fit_forest(&data, data.targets(), &cfg, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let z = vec![rng.gen(), rng.gen()];
            let w = weight_vector(&forest, &data, &z);
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
        }
        for i in 0..data.n() {
            let w = weight_vector(&forest, &data, data.row(i));
            let wy: f64 = w.iter().zip(data.targets()).map(|(a, b)| a * b).sum();
            assert!((wy - predict(&forest, data.row(i))).abs() < 1e-10);
        }
    }

    #[test]
    fn k0_diagonal_is_one() {
        let data = random_data(30, 2, 11);
        let cfg = GrowConfig::new(Strategy::Softmax, 2);
        let forest = fit_forest(&data, data.targets(), &cfg, 25).unwrap();
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0, 0.4]).collect();
        let g = gram(&forest, &pts, KernelTag::K0, data.n());
        for i in 0..10 {
            assert_eq!(g.matrix[(i, i)], 1.0);
        }
    }

    #[test]
    fn kp_entries_bounded_by_n() {
        let data = random_data(40, 2, 12);
        let cfg = GrowConfig::new(Strategy::BreimanGreedy, 2);
        let forest = fit_forest(&data, data.targets(), &cfg, 25).unwrap();
        let g = gram(&forest, data.rows(), KernelTag::KP, data.n());
        for i in 0..data.n() {
            for j in 0..data.n() {
                assert!(g.matrix[(i, j)] <= data.n() as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn uniform_k0_matches_connection_closed_form() {
        // p=1, depth 1: k0(z, z') = 1 - |z - z'|.
        let data = Dataset::new(
            (0..10).map(|i| vec![(i as f64 + 0.5) / 10.0]).collect(),
            vec![0.0; 10],
        )
        .unwrap();
        let mut cfg = GrowConfig::new(Strategy::Uniform, 1);
        cfg.max_depth = 1;
        cfg.k_candidates = 1;
        cfg.seed = 424;
        let m = 100_000;
        let forest = fit_forest(&data, data.targets(), &cfg, m).unwrap();
        let pts = vec![vec![0.2], vec![0.7]];
        let g = gram(&forest, &pts, KernelTag::K0, data.n());
        let expected = 0.5;
        let se = (expected * (1.0 - expected) / m as f64).sqrt();
        assert!(
            (g.matrix[(0, 1)] - expected).abs() < 3.0 * se,
            "k0 = {}, expected {expected} +- {}",
            g.matrix[(0, 1)],
            3.0 * se
        );
    }

    #[test]
    fn row_means_are_one_for_nonempty_leaf_growers() {
        let data = random_data(35, 2, 13);
        let cfg = GrowConfig::new(Strategy::ExtraTrees, 2);
        let forest = fit_forest(&data, data.targets(), &cfg, 20).unwrap();
        let g = gram(&forest, data.rows(), KernelTag::KP, data.n());
        for mean in gram_row_means(&g).unwrap() {
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn row_means_depth_zero() {
        let data = random_data(10, 1, 14);
        let mut cfg = GrowConfig::new(Strategy::ExtraTrees, 1);
        cfg.max_depth = 0;
        let forest = fit_forest(&data, data.targets(), &cfg, 3).unwrap();
        let g = gram(&forest, data.rows(), KernelTag::KP, data.n());
        for i in 0..10 {
            for j in 0..10 {
                assert!((g.matrix[(i, j)] - 1.0).abs() < 1e-15);
            }
        }
        for mean in gram_row_means(&g).unwrap() {
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_empty_leaf_row_means_below_one() {
        // Hand-built tree: split at 0.9 with all points on the left.
        let data = Dataset::new(
            (0..8).map(|i| vec![i as f64 / 10.0]).collect(),
            (0..8).map(|i| i as f64).collect(),
        )
        .unwrap();
        let mut scheme = SplitScheme::default();
        scheme.entries.insert(vec![], (0, 0.9));
        let replayed = replay_scheme(&scheme, 1).unwrap();
        let grown = crate::trees::GrownTree {
            partition: replayed.partition,
            scheme,
            nodes: replayed.nodes,
            split_gains: vec![],
        };
        let tree = histogram_fit(grown, &data, data.targets());
        assert_eq!(tree.leaf_count, vec![8, 0]);
        let forest = Forest {
            trees: vec![tree],
            cfg: GrowConfig::new(Strategy::Uniform, 1),
            data_fingerprint: data.fingerprint(),
            n_train: 8,
            p: 1,
        };
        let g = gram(&forest, data.rows(), KernelTag::KP, 8);
        for mean in gram_row_means(&g).unwrap() {
            assert!(mean <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn weight_kernel_link_at_training_points() {
        let data = random_data(40, 2, 15);
        let cfg = GrowConfig::new(Strategy::ExtraTrees, 2);
        let forest = fit_forest(&data, data.targets(), &cfg, 15).unwrap();
        let g = gram(&forest, data.rows(), KernelTag::KP, data.n());
        let n = data.n() as f64;
        for j in 0..data.n() {
            let w = weight_vector(&forest, &data, data.row(j));
            for i in 0..data.n() {
                let diff = (n * w[i] - g.matrix[(i, j)]).abs();
                assert!(diff <= 1e-12 * g.matrix[(i, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let data = random_data(45, 3, 16);
        let mut cfg = GrowConfig::new(Strategy::Softmax, 3);
        cfg.seed = 97;
        let forest = fit_forest(&data, data.targets(), &cfg, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.bin");
        save_forest(&path, &forest).unwrap();
        let loaded = load_forest(&path).unwrap();
        assert_eq!(loaded.m(), forest.m());
        assert_eq!(loaded.data_fingerprint, forest.data_fingerprint);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let z = [rng.gen(), rng.gen(), rng.gen()];
            assert_eq!(predict(&loaded, &z), predict(&forest, &z));
        }
    }

    #[test]
    fn gram_csv_header() {
        let data = random_data(8, 1, 18);
        let cfg = GrowConfig::new(Strategy::ExtraTrees, 1);
        let forest = fit_forest(&data, data.targets(), &cfg, 4).unwrap();
        let g = gram(&forest, data.rows(), KernelTag::K0, data.n());
        let mut buf = Vec::new();
        write_gram_csv(&mut buf, &g, 7, 4).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# kernel=k0 seed=7 M=4\n"));
    }
}
