//! Variable importance: the geometric (weight-operator) score, mean
//! decrease in impurity, permutation importance, the ten synthetic
//! benchmark scenarios, and the Precision_K / Separation / Spearman
//! evaluation protocol.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forest::{fit_forest, predict, weight_matrix, Forest};
use crate::stats::spearman;
use crate::trees::{tree_rng, Dataset, GrowConfig, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gvi,
    Mdi,
    Mda,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Gvi => "GVI",
            Method::Mdi => "MDI",
            Method::Mda => "MDA",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImportanceReport {
    pub method: Method,
    pub scores: Vec<f64>,
    pub elapsed_seconds: f64,
}

/// Geometric importance: the fraction of each centered feature column's
/// variance preserved by the forest weight operator,
/// `||W x_c||^2 / ||x_c||^2`. Zero-variance columns score 0.
pub fn gvi(forest: &Forest, data: &Dataset) -> ImportanceReport {
    let start = Instant::now();
    let w = weight_matrix(forest, data);
    let n = data.n();
    let p = data.p();
    let mut scores = Vec::with_capacity(p);
    for j in 0..p {
        let mean = (0..n).map(|i| data.row(i)[j]).sum::<f64>() / n as f64;
        let xc: Vec<f64> = (0..n).map(|i| data.row(i)[j] - mean).collect();
        let denom: f64 = xc.iter().map(|&v| v * v).sum();
        if denom == 0.0 {
            scores.push(0.0);
            continue;
        }
        // W^T W rather than W^2: identical for the symmetric W realized
        // here, and still correct if a grower ever breaks symmetry.
        let mut num = 0.0;
        for i in 0..n {
            let wi: f64 = (0..n).map(|k| w[(i, k)] * xc[k]).sum();
            num += wi * wi;
        }
        scores.push(num / denom);
    }
    ImportanceReport {
        method: Method::Gvi,
        scores,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    }
}

/// Mean decrease in impurity: per feature, the sum of mass-weighted split
/// gains, averaged over trees and normalized to sum to 1.
pub fn mdi(forest: &Forest) -> ImportanceReport {
    let start = Instant::now();
    let p = forest.p;
    let mut scores = vec![0.0f64; p];
    for tree in &forest.trees {
        for &(axis, gain) in &tree.split_gains {
            scores[axis] += gain;
        }
    }
    for v in &mut scores {
        *v /= forest.m() as f64;
    }
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        for v in &mut scores {
            *v /= total;
        }
    } else {
        scores = vec![0.0; p];
    }
    ImportanceReport {
        method: Method::Mdi,
        scores,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    }
}

/// Permutation importance: average increase of MSE when one feature column
/// is permuted, over `n_permutations` random permutations, evaluated on the
/// data given (the benchmark protocol uses the training data).
pub fn mda(
    forest: &Forest,
    data: &Dataset,
    targets: &[f64],
    n_permutations: usize,
    seed: u64,
) -> ImportanceReport {
    let start = Instant::now();
    let n = data.n();
    let p = data.p();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let baseline: f64 = (0..n)
        .map(|i| {
            let d = predict(forest, data.row(i)) - targets[i];
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let mut scores = Vec::with_capacity(p);
    let mut buf: Vec<Vec<f64>> = data.rows().to_vec();
    for j in 0..p {
        let mut acc = 0.0;
        for _ in 0..n_permutations {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            for i in 0..n {
                buf[i][j] = data.row(perm[i])[j];
            }
            let mse: f64 = (0..n)
                .map(|i| {
                    let d = predict(forest, &buf[i]) - targets[i];
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            acc += mse - baseline;
        }
        for i in 0..n {
            buf[i][j] = data.row(i)[j];
        }
        scores.push(acc / n_permutations as f64);
    }
    ImportanceReport {
        method: Method::Mda,
        scores,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioId {
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
    S7,
    S8,
    S9,
    S10,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 10] = [
        ScenarioId::S1,
        ScenarioId::S2,
        ScenarioId::S3,
        ScenarioId::S4,
        ScenarioId::S5,
        ScenarioId::S6,
        ScenarioId::S7,
        ScenarioId::S8,
        ScenarioId::S9,
        ScenarioId::S10,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "S1" | "s1" => Ok(ScenarioId::S1),
            "S2" | "s2" => Ok(ScenarioId::S2),
            "S3" | "s3" => Ok(ScenarioId::S3),
            "S4" | "s4" => Ok(ScenarioId::S4),
            "S5" | "s5" => Ok(ScenarioId::S5),
            "S6" | "s6" => Ok(ScenarioId::S6),
            "S7" | "s7" => Ok(ScenarioId::S7),
            "S8" | "s8" => Ok(ScenarioId::S8),
            "S9" | "s9" => Ok(ScenarioId::S9),
            "S10" | "s10" => Ok(ScenarioId::S10),
            other => Err(Error::InvalidConfig(format!("unknown scenario '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioId::S1 => "S1",
            ScenarioId::S2 => "S2",
            ScenarioId::S3 => "S3",
            ScenarioId::S4 => "S4",
            ScenarioId::S5 => "S5",
            ScenarioId::S6 => "S6",
            ScenarioId::S7 => "S7",
            ScenarioId::S8 => "S8",
            ScenarioId::S9 => "S9",
            ScenarioId::S10 => "S10",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ScenarioId::S7 => 50,
            _ => 20,
        }
    }

    /// Zero-based indices of the features that truly affect the outcome.
    pub fn signal_set(&self) -> Vec<usize> {
        match self {
            ScenarioId::S1 | ScenarioId::S8 | ScenarioId::S9 | ScenarioId::S10 => vec![0, 1, 2],
            ScenarioId::S2 | ScenarioId::S3 | ScenarioId::S4 | ScenarioId::S6 => vec![0, 1],
            ScenarioId::S5 => vec![0],
            ScenarioId::S7 => vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Scenario {
    pub id: ScenarioId,
    pub n: usize,
    pub seed: u64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Raw (unscaled) features and targets for one scenario replicate.
pub fn generate_scenario(scenario: &Scenario) -> (Vec<Vec<f64>>, Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(
        scenario.seed ^ (scenario.id.as_str().len() as u64) << 56
            | scenario.id.dim() as u64,
    );
    let n = scenario.n;
    let p = scenario.id.dim();
    let mut x = vec![vec![0.0f64; p]; n];
    let mut y = vec![0.0f64; n];
    match scenario.id {
        ScenarioId::S1 => {
            // AR(1) construction gives Sigma_jk = 0.5^|j-k| exactly.
            let rho = 0.5f64;
            let s = (1.0 - rho * rho).sqrt();
            for i in 0..n {
                x[i][0] = normal(&mut rng);
                for j in 1..p {
                    x[i][j] = rho * x[i][j - 1] + s * normal(&mut rng);
                }
                y[i] = 1.0 * x[i][0]
                    + 0.8 * 2.0 * (std::f64::consts::FRAC_PI_2 * x[i][1]).sin()
                    + 0.6 * x[i][2].max(0.0)
                    + 0.5 * normal(&mut rng);
            }
        }
        ScenarioId::S2 => {
            for i in 0..n {
                let z = normal(&mut rng);
                x[i][0] = z + 0.1 * normal(&mut rng);
                x[i][1] = z + 0.1 * normal(&mut rng);
                for j in 2..p {
                    x[i][j] = normal(&mut rng);
                }
                y[i] = z.sin() + 0.3 * normal(&mut rng);
            }
        }
        ScenarioId::S3 => {
            for i in 0..n {
                for j in 0..p {
                    x[i][j] = rng.gen();
                }
                let xor = (x[i][0] > 0.5) ^ (x[i][1] > 0.5);
                let mut label = if xor { 1.0 } else { 0.0 };
                if rng.gen_bool(0.05) {
                    label = 1.0 - label;
                }
                y[i] = label;
            }
        }
        ScenarioId::S4 => {
            for i in 0..n {
                for j in 0..p {
                    x[i][j] = normal(&mut rng);
                }
                // Feature index 3 (the paper's X4) is a uniform categorical
                // distractor with 50 levels.
                x[i][3] = rng.gen_range(0..50) as f64;
                y[i] = 1.0 * x[i][0]
                    + 0.8 * 2.0 * (std::f64::consts::FRAC_PI_2 * x[i][1]).sin()
                    + 0.5 * normal(&mut rng);
            }
        }
        ScenarioId::S5 => {
            for i in 0..n {
                for j in 0..p {
                    x[i][j] = rng.gen();
                }
                y[i] = if x[i][0] > 0.8 { 1.0 } else { 0.0 } + 0.1 * normal(&mut rng);
            }
        }
        ScenarioId::S6 => {
            for i in 0..n {
                for j in 0..10 {
                    x[i][j] = normal(&mut rng);
                }
                for j in 10..20 {
                    x[i][j] = x[i][j - 10] + 0.05 * normal(&mut rng);
                }
                y[i] = 1.0 * x[i][0]
                    + 0.8 * 2.0 * (std::f64::consts::FRAC_PI_2 * x[i][1]).sin()
                    + 0.5 * normal(&mut rng);
            }
        }
        ScenarioId::S7 => {
            for i in 0..n {
                for j in 0..p {
                    x[i][j] = rng.gen();
                }
                for k in 0..5 {
                    x[i][k + 10] = 0.9 * x[i][k] + 0.436 * x[i][k + 10];
                }
                y[i] = 3.0 * x[i][0]
                    + 2.5 * x[i][1]
                    + 2.0 * x[i][2]
                    + 1.5 * x[i][3]
                    + 1.0 * x[i][4]
                    + 1.5 * normal(&mut rng);
            }
        }
        ScenarioId::S8 => {
            for i in 0..n {
                for j in 0..p {
                    x[i][j] = normal(&mut rng);
                }
                y[i] = 0.5 * x[i][0] + 0.4 * x[i][1] + 0.3 * x[i][2] + 2.0 * normal(&mut rng);
            }
        }
        ScenarioId::S9 => {
            for i in 0..n {
                for j in 0..p {
                    x[i][j] = normal(&mut rng);
                }
                for k in 0..3 {
                    x[i][k + 5] = 0.95 * x[i][k] + 0.312 * x[i][k + 5];
                    x[i][k + 10] = 0.95 * x[i][k] + 0.312 * x[i][k + 10];
                }
                y[i] = 3.0 * x[i][0] + 2.5 * x[i][1] + 2.0 * x[i][2] + 0.5 * normal(&mut rng);
            }
        }
        ScenarioId::S10 => {
            for i in 0..n {
                for j in 0..p {
                    x[i][j] = rng.gen();
                }
                let eps = 0.3 * normal(&mut rng);
                y[i] = if x[i][0] > 0.5 {
                    2.0 * x[i][1] + eps
                } else {
                    2.0 * x[i][2] + eps
                };
            }
        }
    }
    (x, y, scenario.id.signal_set())
}

/// Min-max rescale every column into [0,1] (constant columns map to 0).
pub fn minmax_rescale(raw: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = raw[0].len();
    let mut lo = vec![f64::INFINITY; p];
    let mut hi = vec![f64::NEG_INFINITY; p];
    for row in raw {
        for j in 0..p {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    Ok(raw
        .iter()
        .map(|row| {
            (0..p)
                .map(|j| {
                    if hi[j] > lo[j] {
                        (row[j] - lo[j]) / (hi[j] - lo[j])
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}

/// Rank features by score (descending, ties to the lower index) and report
/// Precision_K, Separation, and Spearman correlation against MDA.
pub fn evaluate_importance(
    scores: &[f64],
    signal_set: &[usize],
    mda_scores: &[f64],
) -> (f64, f64, f64) {
    let p = scores.len();
    let k = signal_set.len();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let hits = order[..k].iter().filter(|i| signal_set.contains(i)).count();
    let precision = hits as f64 / k as f64;
    let signal_mean: f64 =
        signal_set.iter().map(|&j| scores[j]).sum::<f64>() / k as f64;
    let noise: Vec<f64> = (0..p)
        .filter(|j| !signal_set.contains(j))
        .map(|j| scores[j])
        .collect();
    let noise_mean = if noise.is_empty() {
        0.0
    } else {
        noise.iter().sum::<f64>() / noise.len() as f64
    };
    let separation = signal_mean - noise_mean;
    (precision, separation, spearman(scores, mda_scores))
}

/// The benchmark forest: Extra-Trees with M=500, max_features = floor
/// sqrt(p), min_samples_leaf = 5.
pub fn benchmark_config(p: usize, seed: u64) -> GrowConfig {
    let mut cfg = GrowConfig::new(Strategy::ExtraTrees, p);
    cfg.max_features = ((p as f64).sqrt().floor() as usize).max(1);
    cfg.min_samples_leaf = 5;
    cfg.seed = seed;
    cfg
}

#[derive(Debug, Clone)]
pub struct BenchmarkRow {
    pub scenario: ScenarioId,
    pub method: Method,
    pub precision_k: f64,
    pub separation: f64,
    pub spearman_vs_mda: f64,
    pub time_s: f64,
}

/// One replicate: generate, rescale, fit the benchmark forest, compute all
/// three importance vectors, and evaluate each against the signal set.
pub fn run_replicate(id: ScenarioId, n: usize, m: usize, seed: u64) -> Result<Vec<BenchmarkRow>> {
    let scenario = Scenario { id, n, seed };
    let (raw, y, signal) = generate_scenario(&scenario);
    let x = minmax_rescale(&raw)?;
    let data = Dataset::new(x, y.clone())?;
    let cfg = benchmark_config(data.p(), seed ^ 0xA5A5_5A5A);
    let forest = fit_forest(&data, &y, &cfg, m)?;
    let r_gvi = gvi(&forest, &data);
    let r_mdi = mdi(&forest);
    let r_mda = mda(&forest, &data, &y, 5, seed ^ 0x1357_9BDF);
    let mut rows = Vec::with_capacity(3);
    for report in [&r_gvi, &r_mdi, &r_mda] {
        let (prec, sep, rho) = evaluate_importance(&report.scores, &signal, &r_mda.scores);
        rows.push(BenchmarkRow {
            scenario: id,
            method: report.method,
            precision_k: prec,
            separation: sep,
            spearman_vs_mda: rho,
            time_s: report.elapsed_seconds,
        });
    }
    Ok(rows)
}

/// Replicates of one scenario, run in parallel with one seed stream per
/// replicate, averaged per method.
pub fn run_benchmark(
    scenarios: &[ScenarioId],
    n: usize,
    m: usize,
    replicates: usize,
    seed: u64,
) -> Result<Vec<BenchmarkRow>> {
    let mut out = Vec::new();
    for &id in scenarios {
        let per_rep: Vec<Vec<BenchmarkRow>> = (0..replicates as u64)
            .into_par_iter()
            .map(|r| {
                // Per-replicate seed stream.
                let mut rng = tree_rng(seed ^ (id.as_str().len() as u64), r);
                run_replicate(id, n, m, rng.gen())
            })
            .collect::<Result<Vec<_>>>()?;
        for method_idx in 0..3 {
            let mut acc = BenchmarkRow {
                scenario: id,
                method: per_rep[0][method_idx].method,
                precision_k: 0.0,
                separation: 0.0,
                spearman_vs_mda: 0.0,
                time_s: 0.0,
            };
            for rep in &per_rep {
                acc.precision_k += rep[method_idx].precision_k;
                acc.separation += rep[method_idx].separation;
                acc.spearman_vs_mda += rep[method_idx].spearman_vs_mda;
                acc.time_s += rep[method_idx].time_s;
            }
            let r = replicates as f64;
            acc.precision_k /= r;
            acc.separation /= r;
            acc.spearman_vs_mda /= r;
            acc.time_s /= r;
            out.push(acc);
        }
    }
    Ok(out)
}
