//! Kernel PCA over any Gram matrix, plus the evaluation tooling used by
//! the embedding experiments: silhouette scores and linear probes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forest::{GramBundle, KernelTag};

/// Fitted kernel PCA state. Projection of a new block of kernel rows uses
/// the stored train column means for centering, so train and test are
/// treated identically.
#[derive(Debug, Clone)]
pub struct KpcaModel {
    pub train_points: Vec<Vec<f64>>,
    /// s x q matrix of coefficient vectors alpha_c = v_c / sqrt(lambda_c).
    pub alphas: DMatrix<f64>,
    /// Descending positive eigenvalues of the centered Gram.
    pub eigenvalues: Vec<f64>,
    pub gram_column_means: Vec<f64>,
    pub grand_mean: f64,
    pub train_scores: DMatrix<f64>,
    pub kernel_tag: KernelTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTask {
    Classify,
    Regress,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    /// Accuracy for classification, MSE for regression.
    pub metric: f64,
    /// Percentage improvement over a caller-supplied baseline MSE
    /// (regression only): 100 * (mse - baseline) / baseline.
    pub relative_improvement: Option<f64>,
}

/// Fit kernel PCA: double-center the Gram, take the top-q eigenpairs, and
/// scale so that component c of the train scores has variance lambda_c / s.
pub fn kpca_fit(gram_train: &GramBundle, q: usize) -> Result<KpcaModel> {
    let k = &gram_train.matrix;
    let s = k.nrows();
    if s == 0 {
        return Err(Error::EmptyDataset);
    }
    let column_means: Vec<f64> = (0..s).map(|j| k.column(j).sum() / s as f64).collect();
    let grand_mean = column_means.iter().sum::<f64>() / s as f64;
    let mut centered = k.clone();
    for i in 0..s {
        for j in 0..s {
            centered[(i, j)] = k[(i, j)] - column_means[i] - column_means[j] + grand_mean;
        }
    }
    let sym = (&centered + centered.transpose()) / 2.0;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure);
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let tol = 1e-10 * eig.eigenvalues[order[0]].abs().max(1e-30);
    let positive = order
        .iter()
        .take_while(|&&i| eig.eigenvalues[i] > tol)
        .count();
    let q_eff = q.min(positive);
    if q_eff < q {
        eprintln!(
            "warning: requested {q} components but positive spectrum has rank {positive}; truncating"
        );
    }
    let mut alphas = DMatrix::zeros(s, q_eff);
    let mut eigenvalues = Vec::with_capacity(q_eff);
    for c in 0..q_eff {
        let idx = order[c];
        let lambda = eig.eigenvalues[idx];
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        // Sign convention: largest-magnitude entry positive.
        let lead = v
            .iter()
            .cloned()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v = -v;
        }
        alphas.set_column(c, &(v / lambda.sqrt()));
        eigenvalues.push(lambda);
    }
    let train_scores = &centered * &alphas;
    Ok(KpcaModel {
        train_points: gram_train.points.clone(),
        alphas,
        eigenvalues,
        gram_column_means: column_means,
        grand_mean,
        train_scores,
        kernel_tag: gram_train.kernel_tag,
    })
}

/// Project a t x s block of kernel evaluations against the train points.
pub fn kpca_project(model: &KpcaModel, gram_cross: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = model.gram_column_means.len();
    if gram_cross.ncols() != s {
        return Err(Error::ShapeMismatch(format!(
            "cross block has {} columns, model has {s} train points",
            gram_cross.ncols()
        )));
    }
    let t = gram_cross.nrows();
    let mut centered = gram_cross.clone();
    for i in 0..t {
        let row_mean = gram_cross.row(i).sum() / s as f64;
        for j in 0..s {
            centered[(i, j)] =
                gram_cross[(i, j)] - row_mean - model.gram_column_means[j] + model.grand_mean;
        }
    }
    Ok(&centered * &model.alphas)
}

/// Mean silhouette score of labeled points in score space (Euclidean).
/// Singleton clusters and zero-denominator points contribute 0.
pub fn silhouette(scores: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let n = scores.nrows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} score rows but {} labels",
            labels.len()
        )));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().cloned().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidConfig("silhouette needs >= 2 clusters".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        (scores.row(i) - scores.row(j)).norm()
    };
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size == 1 {
            continue; // contributes 0
        }
        let a: f64 = (0..n)
            .filter(|&j| j != i && labels[j] == own)
            .map(|j| dist(i, j))
            .sum::<f64>()
            / (own_size - 1) as f64;
        let b = distinct
            .iter()
            .filter(|&&l| l != own)
            .map(|&l| {
                let members: Vec<usize> = (0..n).filter(|&j| labels[j] == l).collect();
                members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

fn standardize_columns(train: &DMatrix<f64>, test: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let q = train.ncols();
    let n = train.nrows() as f64;
    let mut tr = train.clone();
    let mut te = test.clone();
    for c in 0..q {
        let mean = train.column(c).sum() / n;
        let var = train.column(c).iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        let scale = if sd > 0.0 { 1.0 / sd } else { 0.0 };
        for i in 0..tr.nrows() {
            tr[(i, c)] = (tr[(i, c)] - mean) * scale;
        }
        for i in 0..te.nrows() {
            te[(i, c)] = (te[(i, c)] - mean) * scale;
        }
    }
    (tr, te)
}

fn with_intercept(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(m.nrows(), m.ncols() + 1, 1.0);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(i, j + 1)] = m[(i, j)];
        }
    }
    out
}

/// Ordinary least squares with intercept via SVD pseudo-inverse.
pub fn ols_fit(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let design = with_intercept(x);
    let yv = DVector::from_column_slice(y);
    design
        .svd(true, true)
        .solve(&yv, 1e-12)
        .expect("SVD solve")
}

/// Linear probe on embedding scores: logistic regression by fixed-budget
/// gradient descent for classification (500 iterations, step 0.1,
/// standardized scores, L2 1e-4), OLS for regression. Classification labels
/// are 0/1; regression reports test MSE and, when a baseline MSE is given,
/// the relative improvement percentage.
pub fn linear_probe(
    train_scores: &DMatrix<f64>,
    train_targets: &[f64],
    test_scores: &DMatrix<f64>,
    test_targets: &[f64],
    task: ProbeTask,
    baseline_mse: Option<f64>,
) -> Result<ProbeReport> {
    if train_scores.nrows() != train_targets.len() || test_scores.nrows() != test_targets.len() {
        return Err(Error::ShapeMismatch("scores/targets length mismatch".into()));
    }
    match task {
        ProbeTask::Classify => {
            let (tr, te) = standardize_columns(train_scores, test_scores);
            let x = with_intercept(&tr);
            let xt = with_intercept(&te);
            let n = x.nrows() as f64;
            let q = x.ncols();
            let mut w = DVector::zeros(q);
            let l2 = 1e-4;
            for _ in 0..500 {
                let margins = &x * &w;
                let mut grad = DVector::zeros(q);
                for i in 0..x.nrows() {
                    let p = 1.0 / (1.0 + (-margins[i]).exp());
                    let err = p - train_targets[i];
                    for j in 0..q {
                        grad[j] += err * x[(i, j)] / n;
                    }
                }
                for j in 1..q {
                    grad[j] += l2 * w[j];
                }
                w -= 0.1 * grad;
            }
            let mut correct = 0usize;
            for i in 0..xt.nrows() {
                let m = (xt.row(i) * &w)[(0, 0)];
                let pred = if m > 0.0 { 1.0 } else { 0.0 };
                if (pred - test_targets[i]).abs() < 0.5 {
                    correct += 1;
                }
            }
            Ok(ProbeReport {
                metric: correct as f64 / xt.nrows() as f64,
                relative_improvement: None,
            })
        }
        ProbeTask::Regress => {
            let w = ols_fit(train_scores, train_targets);
            let xt = with_intercept(test_scores);
            let mut mse = 0.0;
            for i in 0..xt.nrows() {
                let pred = (xt.row(i) * &w)[(0, 0)];
                let d = pred - test_targets[i];
                mse += d * d;
            }
            mse /= xt.nrows() as f64;
            let ri = baseline_mse.map(|base| 100.0 * (mse - base) / base);
            Ok(ProbeReport {
                metric: mse,
                relative_improvement: ri,
            })
        }
    }
}

/// Gram matrix of the Gaussian kernel exp(-gamma ||x - x'||^2); the default
/// bandwidth is gamma = 1/p.
pub fn rbf_gram(rows: &[Vec<f64>], cols: &[Vec<f64>], gamma: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), cols.len());
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in cols.iter().enumerate() {
            let d2: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
            out[(i, j)] = (-gamma * d2).exp();
        }
    }
    out
}

/// Linear kernel Gram x . x' (classical PCA through the kPCA machinery).
pub fn linear_gram(rows: &[Vec<f64>], cols: &[Vec<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), cols.len());
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in cols.iter().enumerate() {
            out[(i, j)] = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// Wrap a plain matrix as a GramBundle for kpca_fit.
pub fn bundle_from_matrix(matrix: DMatrix<f64>, points: &[Vec<f64>], tag: KernelTag) -> GramBundle {
    GramBundle {
        matrix,
        kernel_tag: tag,
        points: points.to_vec(),
        forest_fingerprint: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..p).map(|_| rng.gen()).collect())
            .collect()
    }

    #[test]
    fn linear_kernel_matches_classical_pca() {
        for seed in 0..10 {
            let pts = random_points(40, 4, seed);
            let g = bundle_from_matrix(linear_gram(&pts, &pts), &pts, KernelTag::K0);
            let model = kpca_fit(&g, 2).unwrap();
            // Classical PCA: SVD of the centered data matrix.
            let mut x = DMatrix::zeros(40, 4);
            for i in 0..40 {
                for j in 0..4 {
                    x[(i, j)] = pts[i][j];
                }
            }
            let means: Vec<f64> = (0..4).map(|j| x.column(j).sum() / 40.0).collect();
            for i in 0..40 {
                for j in 0..4 {
                    x[(i, j)] -= means[j];
                }
            }
            let svd = x.clone().svd(true, true);
            let u = svd.u.as_ref().unwrap();
            for c in 0..2 {
                let pca: Vec<f64> = (0..40).map(|i| u[(i, c)] * svd.singular_values[c]).collect();
                let kpca: Vec<f64> = (0..40).map(|i| model.train_scores[(i, c)]).collect();
                // Align signs before comparing.
                let dot: f64 = pca.iter().zip(&kpca).map(|(a, b)| a * b).sum();
                let sign = if dot < 0.0 { -1.0 } else { 1.0 };
                for i in 0..40 {
                    assert!(
                        (sign * pca[i] - kpca[i]).abs() < 1e-8,
                        "seed {seed} comp {c} row {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn rank_one_gram_single_component() {
        let pts = random_points(10, 2, 3);
        let g = bundle_from_matrix(DMatrix::from_element(10, 10, 1.0), &pts, KernelTag::KP);
        let model = kpca_fit(&g, 3).unwrap();
        // Centering annihilates the all-ones Gram entirely.
        assert!(model.eigenvalues.len() <= 1);
    }

    #[test]
    fn duplicated_points_identical_scores() {
        let mut pts = random_points(12, 3, 4);
        pts[11] = pts[0].clone();
        let g = bundle_from_matrix(linear_gram(&pts, &pts), &pts, KernelTag::K0);
        let model = kpca_fit(&g, 2).unwrap();
        for c in 0..model.train_scores.ncols() {
            assert!((model.train_scores[(0, c)] - model.train_scores[(11, c)]).abs() < 1e-10);
        }
    }

    #[test]
    fn train_scores_centered_and_decorrelated() {
        let pts = random_points(30, 3, 5);
        let g = bundle_from_matrix(rbf_gram(&pts, &pts, 1.0 / 3.0), &pts, KernelTag::K0);
        let model = kpca_fit(&g, 3).unwrap();
        let q = model.train_scores.ncols();
        for c in 0..q {
            let mean = model.train_scores.column(c).sum() / 30.0;
            assert!(mean.abs() < 1e-10);
            // Variance lambda_c / s.
            let var = model
                .train_scores
                .column(c)
                .iter()
                .map(|&v| v * v)
                .sum::<f64>()
                / 30.0;
            assert!((var - model.eigenvalues[c] / 30.0).abs() < 1e-8 * model.eigenvalues[c]);
        }
        for a in 0..q {
            for b in 0..a {
                let dot: f64 = (0..30)
                    .map(|i| model.train_scores[(i, a)] * model.train_scores[(i, b)])
                    .sum();
                assert!(dot.abs() < 1e-8 * model.eigenvalues[0]);
            }
        }
    }

    #[test]
    fn projecting_train_block_reproduces_train_scores() {
        let pts = random_points(25, 2, 6);
        let k = rbf_gram(&pts, &pts, 0.5);
        let g = bundle_from_matrix(k.clone(), &pts, KernelTag::K0);
        let model = kpca_fit(&g, 2).unwrap();
        let proj = kpca_project(&model, &k).unwrap();
        assert!((proj - &model.train_scores).norm() < 1e-10);
    }

    #[test]
    fn permuting_test_rows_permutes_scores() {
        let pts = random_points(20, 2, 7);
        let test = random_points(6, 2, 8);
        let g = bundle_from_matrix(rbf_gram(&pts, &pts, 0.5), &pts, KernelTag::K0);
        let model = kpca_fit(&g, 2).unwrap();
        let cross = rbf_gram(&test, &pts, 0.5);
        let scores = kpca_project(&model, &cross).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let test_p: Vec<Vec<f64>> = perm.iter().map(|&i| test[i].clone()).collect();
        let scores_p = kpca_project(&model, &rbf_gram(&test_p, &pts, 0.5)).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for c in 0..scores.ncols() {
                assert_eq!(scores_p[(new_i, c)], scores[(old_i, c)]);
            }
        }
    }

    #[test]
    fn projection_matches_feature_space_oracle() {
        // Linear kernel: projecting test data equals centered-feature dot
        // products with the PCA axes.
        let pts = random_points(30, 3, 9);
        let test = random_points(10, 3, 10);
        let g = bundle_from_matrix(linear_gram(&pts, &pts), &pts, KernelTag::K0);
        let model = kpca_fit(&g, 2).unwrap();
        let proj = kpca_project(&model, &linear_gram(&test, &pts)).unwrap();
        // Feature-space axes from train SVD.
        let means: Vec<f64> = (0..3)
            .map(|j| pts.iter().map(|r| r[j]).sum::<f64>() / 30.0)
            .collect();
        let mut xc = DMatrix::zeros(30, 3);
        for i in 0..30 {
            for j in 0..3 {
                xc[(i, j)] = pts[i][j] - means[j];
            }
        }
        let svd = xc.clone().svd(true, true);
        let vt = svd.v_t.as_ref().unwrap();
        for c in 0..2 {
            // Sign-align via the first test point.
            let axis: Vec<f64> = (0..3).map(|j| vt[(c, j)]).collect();
            let oracle: Vec<f64> = test
                .iter()
                .map(|r| {
                    (0..3)
                        .map(|j| (r[j] - means[j]) * axis[j])
                        .sum::<f64>()
                })
                .collect();
            let dot: f64 = oracle.iter().zip((0..10).map(|i| proj[(i, c)])).map(|(a, b)| a * b).sum();
            let sign = if dot < 0.0 { -1.0 } else { 1.0 };
            for i in 0..10 {
                assert!((sign * oracle[i] - proj[(i, c)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn silhouette_separated_clusters_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut scores = DMatrix::zeros(40, 2);
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let center = if c == 0 { 0.0 } else { 100.0 };
            scores[(i, 0)] = center + rng.gen_range(-0.5..0.5);
            scores[(i, 1)] = rng.gen_range(-0.5..0.5);
            labels.push(c);
        }
        assert!(silhouette(&scores, &labels).unwrap() >= 0.95);
    }

    #[test]
    fn silhouette_shuffled_labels_near_zero() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 500;
            let mut scores = DMatrix::zeros(n, 2);
            for i in 0..n {
                scores[(i, 0)] = rng.gen::<f64>();
                scores[(i, 1)] = rng.gen::<f64>();
            }
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let s = silhouette(&scores, &labels).unwrap();
            assert!(s.abs() < 0.1, "seed {seed}: {s}");
        }
    }

    #[test]
    fn silhouette_identical_points_is_zero() {
        let scores = DMatrix::zeros(6, 2);
        let labels = vec![0, 0, 0, 1, 1, 1];
        assert_eq!(silhouette(&scores, &labels).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_single_cluster_errors() {
        let scores = DMatrix::zeros(4, 2);
        assert!(silhouette(&scores, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn probe_separable_classification_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let make = |n: usize, rng: &mut ChaCha8Rng| {
            let mut scores = DMatrix::zeros(n, 2);
            let mut y = Vec::new();
            for i in 0..n {
                let c = i % 2;
                scores[(i, 0)] = if c == 0 { -2.0 } else { 2.0 } + rng.gen_range(-0.5..0.5);
                scores[(i, 1)] = rng.gen_range(-1.0..1.0);
                y.push(c as f64);
            }
            (scores, y)
        };
        let (tr_s, tr_y) = make(60, &mut rng);
        let (te_s, te_y) = make(30, &mut rng);
        let report =
            linear_probe(&tr_s, &tr_y, &te_s, &te_y, ProbeTask::Classify, None).unwrap();
        assert_eq!(report.metric, 1.0);
    }

    #[test]
    fn probe_regression_ri_zero_against_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tr_s = DMatrix::zeros(50, 2);
        let mut tr_y = Vec::new();
        for i in 0..50 {
            tr_s[(i, 0)] = rng.gen::<f64>();
            tr_s[(i, 1)] = rng.gen::<f64>();
            tr_y.push(2.0 * tr_s[(i, 0)] - tr_s[(i, 1)] + rng.gen_range(-0.1..0.1));
        }
        let report = linear_probe(&tr_s, &tr_y, &tr_s, &tr_y, ProbeTask::Regress, None).unwrap();
        let report2 = linear_probe(
            &tr_s,
            &tr_y,
            &tr_s,
            &tr_y,
            ProbeTask::Regress,
            Some(report.metric),
        )
        .unwrap();
        assert!(report2.relative_improvement.unwrap().abs() < 1e-9);
    }

    #[test]
    fn ols_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let n = 40;
        let mut x = DMatrix::zeros(n, 3);
        let mut y = Vec::new();
        for i in 0..n {
            for j in 0..3 {
                x[(i, j)] = rng.gen_range(-1.0..1.0);
            }
            y.push(1.5 + x[(i, 0)] - 0.5 * x[(i, 2)] + rng.gen_range(-0.05..0.05));
        }
        let w = ols_fit(&x, &y);
        let design = with_intercept(&x);
        let yv = DVector::from_column_slice(&y);
        let normal = (design.transpose() * &design)
            .try_inverse()
            .unwrap()
            * design.transpose()
            * yv;
        assert!((w - normal).norm() < 1e-8);
    }

    #[test]
    fn degenerate_scores_fall_back_to_intercept() {
        let tr_s = DMatrix::zeros(20, 2);
        let tr_y: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
        let te_s = DMatrix::zeros(10, 2);
        let te_y = vec![1.0; 10];
        let report =
            linear_probe(&tr_s, &tr_y, &te_s, &te_y, ProbeTask::Classify, None).unwrap();
        assert!(report.metric <= 1.0);
        let report =
            linear_probe(&tr_s, &tr_y, &te_s, &te_y, ProbeTask::Regress, None).unwrap();
        // Intercept-only model predicts the train mean 0.5.
        assert!((report.metric - 0.25).abs() < 1e-9);
    }
}
