//! Analytics on the function space reproduced by the forest kernels:
//! norms, variance decomposition, the penalized-objective optimality check,
//! distribution embeddings (MMD), the kernel-operator spectrum, effective
//! sample size, and the partition-refinement ordering.
//!
//! Everything is computed through Gram matrices at finitely many anchor
//! points; the per-leaf sum forms used as independent oracles live here too
//! because they are exact identities, not approximations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forest::{gram, gram_cross, truncate_forest, Forest, KernelTag};
use crate::trees::Dataset;

/// Finite combination `F = sum_j c_j k(z_j, .)` of kernel sections.
#[derive(Debug, Clone)]
pub struct RkhsElement {
    pub coefficients: Vec<f64>,
    pub anchor_points: Vec<Vec<f64>>,
    pub forest_fingerprint: u64,
}

impl RkhsElement {
    /// The averaged-forest element: anchors at the training points with
    /// coefficients y/n.
    pub fn forest_element(forest: &Forest, data: &Dataset, targets: &[f64]) -> Self {
        let n = data.n() as f64;
        RkhsElement {
            coefficients: targets.iter().map(|&y| y / n).collect(),
            anchor_points: data.rows().to_vec(),
            forest_fingerprint: forest.fingerprint(),
        }
    }

    /// `||F||^2 = c^T K c` for the kP Gram at the anchors.
    pub fn norm_sq(&self, forest: &Forest) -> f64 {
        let k = gram(forest, &self.anchor_points, KernelTag::KP, forest.n_train);
        let c = DVector::from_column_slice(&self.coefficients);
        (c.transpose() * &k.matrix * &c)[(0, 0)]
    }
}

#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal columns, same order as eigenvalues.
    pub eigenvectors: DMatrix<f64>,
    pub trace: f64,
}

/// `||T_bar||^2 = (1/n^2) y^T K y` with K the kP Gram at the training
/// points.
pub fn forest_rkhs_norm_sq(forest: &Forest, data: &Dataset, targets: &[f64]) -> f64 {
    let k = gram(forest, data.rows(), KernelTag::KP, data.n());
    let y = DVector::from_column_slice(targets);
    (y.transpose() * &k.matrix * &y)[(0, 0)] / (data.n() as f64 * data.n() as f64)
}

/// Independent per-leaf form of the same norm:
/// `(1/M) sum_m sum_A P_n[y 1_A]^2 / P_n(A)`.
pub fn norm_sq_leaf_form(forest: &Forest, data: &Dataset, targets: &[f64]) -> f64 {
    let n = data.n() as f64;
    let mut total = 0.0;
    for tree in &forest.trees {
        let n_leaves = tree.leaf_count.len();
        let mut sums = vec![0.0f64; n_leaves];
        for i in 0..data.n() {
            sums[tree.locate(data.row(i))] += targets[i];
        }
        for (leaf, &s) in sums.iter().enumerate() {
            let c = tree.leaf_count[leaf];
            if c > 0 {
                total += s * s / c as f64;
            }
        }
    }
    total / (forest.m() as f64 * n)
}

/// Split of the empirical second moment into explained norm and mean
/// residual: returns (P_n[y^2], ||T_bar||^2, avg residual, gap). The gap is
/// zero for any finite forest.
pub fn variance_decomposition_check(
    forest: &Forest,
    data: &Dataset,
    targets: &[f64],
) -> (f64, f64, f64, f64) {
    let n = data.n();
    let lhs = targets.iter().map(|&y| y * y).sum::<f64>() / n as f64;
    let norm_part = forest_rkhs_norm_sq(forest, data, targets);
    let mut residual = 0.0;
    for tree in &forest.trees {
        for i in 0..n {
            let d = targets[i] - tree.predict(data.row(i));
            residual += d * d;
        }
    }
    let residual_part = residual / (forest.m() as f64 * n as f64);
    (lhs, norm_part, residual_part, lhs - norm_part - residual_part)
}

/// `-2 P_n[y F(x)] + ||F||^2` for an element anchored at the training
/// points; uniquely minimized at coefficients y/n.
pub fn penalized_objective(
    elem: &RkhsElement,
    forest: &Forest,
    data: &Dataset,
    targets: &[f64],
) -> Result<f64> {
    if elem.anchor_points.len() != data.n() {
        return Err(Error::ShapeMismatch(format!(
            "element has {} anchors, training set has {}",
            elem.anchor_points.len(),
            data.n()
        )));
    }
    let k = gram(forest, &elem.anchor_points, KernelTag::KP, forest.n_train);
    let c = DVector::from_column_slice(&elem.coefficients);
    let y = DVector::from_column_slice(targets);
    let kc = &k.matrix * &c;
    let data_term = (y.transpose() * &kc)[(0, 0)] / data.n() as f64;
    let norm = (c.transpose() * &kc)[(0, 0)];
    Ok(-2.0 * data_term + norm)
}

/// Squared kernel distance between the empirical embeddings of two point
/// sets: `mean(K11) + mean(K22) - 2 mean(K12)`.
pub fn kme_mmd(
    forest: &Forest,
    sample_q1: &[Vec<f64>],
    sample_q2: &[Vec<f64>],
    tag: KernelTag,
) -> f64 {
    let k11 = gram(forest, sample_q1, tag, forest.n_train).matrix;
    let k22 = gram(forest, sample_q2, tag, forest.n_train).matrix;
    let k12 = gram_cross(forest, sample_q1, sample_q2, tag, forest.n_train);
    let m1 = k11.sum() / (sample_q1.len() * sample_q1.len()) as f64;
    let m2 = k22.sum() / (sample_q2.len() * sample_q2.len()) as f64;
    let m12 = k12.sum() / (sample_q1.len() * sample_q2.len()) as f64;
    m1 + m2 - 2.0 * m12
}

/// Independent per-leaf form of the squared MMD:
/// `(1/M) sum_m sum_A alpha^2(A) (Q1_hat(A) - Q2_hat(A))^2`.
pub fn mmd_leaf_form(
    forest: &Forest,
    sample_q1: &[Vec<f64>],
    sample_q2: &[Vec<f64>],
    tag: KernelTag,
) -> f64 {
    let mut total = 0.0;
    for tree in &forest.trees {
        let n_leaves = tree.leaf_count.len();
        let mut q1 = vec![0.0f64; n_leaves];
        let mut q2 = vec![0.0f64; n_leaves];
        for z in sample_q1 {
            q1[tree.locate(z)] += 1.0 / sample_q1.len() as f64;
        }
        for z in sample_q2 {
            q2[tree.locate(z)] += 1.0 / sample_q2.len() as f64;
        }
        for leaf in 0..n_leaves {
            let a2 = match tag {
                KernelTag::K0 => 1.0,
                KernelTag::KP => {
                    let c = tree.leaf_count[leaf];
                    if c > 0 {
                        forest.n_train as f64 / c as f64
                    } else {
                        1.0
                    }
                }
            };
            let d = q1[leaf] - q2[leaf];
            total += a2 * d * d;
        }
    }
    total / forest.m() as f64
}

fn sorted_eigen(mat: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = mat.nrows();
    let sym = (&mat + mat.transpose()) / 2.0;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .ok_or(())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure);
    }
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

/// Eigendecomposition of `(1/n) K` at the training points, the matrix of
/// the empirical kernel integral operator.
pub fn kernel_operator_spectrum(forest: &Forest, data: &Dataset) -> Result<SpectrumReport> {
    let k = gram(forest, data.rows(), KernelTag::KP, data.n());
    let op = k.matrix / data.n() as f64;
    let trace = op.trace();
    let (eigenvalues, eigenvectors) = sorted_eigen(op)?;
    Ok(SpectrumReport {
        eigenvalues,
        eigenvectors,
        trace,
    })
}

/// Per-point and global effective sample sizes from the weight matrix:
/// `N_eff,i = 1 / sum_j W_nj(X_i)^2`, `N_eff = n / ||W||_F^2`.
pub fn effective_sample_size(forest: &Forest, data: &Dataset) -> (Vec<f64>, f64) {
    let w = crate::forest::weight_matrix(forest, data);
    let n = data.n();
    let per_point: Vec<f64> = (0..n)
        .map(|i| {
            let row_sq: f64 = (0..n).map(|j| w[(i, j)] * w[(i, j)]).sum();
            1.0 / row_sq
        })
        .collect();
    let frob_sq: f64 = w.iter().map(|v| v * v).sum();
    (per_point, n as f64 / frob_sq)
}

/// Minimum eigenvalue of `K_fine - K_coarse` where the coarse forest
/// truncates every tree at `truncation_depth`. Nonnegative (up to solver
/// slack) when all realized leaves are nonempty.
pub fn refinement_gap(
    forest_deep: &Forest,
    data: &Dataset,
    targets: &[f64],
    truncation_depth: usize,
) -> Result<f64> {
    let coarse = truncate_forest(forest_deep, data, targets, truncation_depth);
    let k_fine = gram(forest_deep, data.rows(), KernelTag::KP, data.n()).matrix;
    let k_coarse = gram(&coarse, data.rows(), KernelTag::KP, data.n()).matrix;
    let (values, _) = sorted_eigen(k_fine - k_coarse)?;
    Ok(*values.last().expect("nonempty spectrum"))
}
