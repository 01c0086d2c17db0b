//! Infinitesimal gradient boosting: convex losses, softmax gradient
//! forests, explicit-Euler integration of the fluid-limit ODE, and the
//! Radon-Nikodym diagnostic for the softmax scheme measure.

use nalgebra::DMatrix;
use rand::prelude::*;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Hyperrectangle;
use crate::trees::{
    grow_partition, histogram_fit, pseudo_residuals, score_split, tree_rng, Dataset, GrowConfig,
    SplitScheme, Strategy,
};

/// Convex, twice continuously differentiable loss in its first argument.
/// Second derivative is bounded (squared: 1, logistic: 1/4).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Squared,
    Logistic,
}

impl Loss {
    pub fn value(&self, z: f64, y: f64) -> f64 {
        match self {
            Loss::Squared => 0.5 * (z - y) * (z - y),
            // log(1 + exp(-y z)) computed stably.
            Loss::Logistic => {
                let t = -y * z;
                if t > 0.0 {
                    t + (-t).exp().ln_1p()
                } else {
                    t.exp().ln_1p()
                }
            }
        }
    }

    pub fn first_derivative(&self, z: f64, y: f64) -> f64 {
        match self {
            Loss::Squared => z - y,
            Loss::Logistic => -y / (1.0 + (y * z).exp()),
        }
    }

    pub fn second_derivative(&self, z: f64, y: f64) -> f64 {
        match self {
            Loss::Squared => 1.0,
            Loss::Logistic => {
                let s = 1.0 / (1.0 + (y * z).exp());
                y * y * s * (1.0 - s)
            }
        }
    }
}

/// Empirical risk `(1/n) sum ell(F_i, y_i)`.
pub fn risk(loss: Loss, f_values: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(f_values.len(), targets.len());
    f_values
        .iter()
        .zip(targets)
        .map(|(&f, &y)| loss.value(f, y))
        .sum::<f64>()
        / targets.len() as f64
}

/// Constant minimizer of the empirical risk. Squared: the mean. Logistic:
/// Newton iteration (50 steps, clipped at +-15 for degenerate label
/// frequencies).
pub fn init_constant(loss: Loss, targets: &[f64]) -> f64 {
    match loss {
        Loss::Squared => targets.iter().sum::<f64>() / targets.len() as f64,
        Loss::Logistic => {
            let mut z = 0.0f64;
            for _ in 0..50 {
                let n = targets.len() as f64;
                let g: f64 = targets.iter().map(|&y| loss.first_derivative(z, y)).sum::<f64>() / n;
                let h: f64 = targets.iter().map(|&y| loss.second_derivative(z, y)).sum::<f64>() / n;
                if h <= 0.0 {
                    break;
                }
                z = (z - g / h).clamp(-15.0, 15.0);
            }
            z
        }
    }
}

/// One gradient-forest evaluation: M fresh softmax trees grown and fitted
/// on the pseudo-residuals, averaged at the training points. Also returns
/// the per-point Monte-Carlo standard deviation of the average.
pub fn gradient_forest_step(
    loss: Loss,
    f_values: &[f64],
    data: &Dataset,
    targets: &[f64],
    cfg: &GrowConfig,
    m: usize,
    step_seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if cfg.strategy != Strategy::Softmax {
        return Err(Error::InvalidConfig(
            "gradient forests use the softmax strategy".into(),
        ));
    }
    let residuals = pseudo_residuals(&loss, f_values, targets);
    let n = data.n();
    let per_tree: Vec<Vec<f64>> = (0..m as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(step_seed, t);
            let grown = grow_partition(data, &residuals, cfg, &mut rng)?;
            let tree = histogram_fit(grown, data, &residuals);
            Ok((0..n).map(|i| tree.predict(data.row(i))).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0f64; n];
    for preds in &per_tree {
        for i in 0..n {
            mean[i] += preds[i];
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut std = vec![0.0f64; n];
    if m > 1 {
        for preds in &per_tree {
            for i in 0..n {
                let d = preds[i] - mean[i];
                std[i] += d * d;
            }
        }
        for v in &mut std {
            // Standard error of the M-tree average.
            *v = (*v / (m as f64 * (m - 1) as f64)).sqrt();
        }
    }
    Ok((mean, std))
}

/// Euler trajectory of the boosting ODE at the training points.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub times: Vec<f64>,
    pub f_values: Vec<Vec<f64>>,
    pub risks: Vec<f64>,
    /// Per-step mean Monte-Carlo standard error of the step vector.
    pub step_mc_std: Vec<f64>,
    pub lambda: f64,
    pub m_per_step: usize,
}

/// Explicit Euler: F_0 = best constant, F_{k+1} = F_k + lambda * step(F_k),
/// for ceil(T_end / lambda) steps.
pub fn igb_flow(
    loss: Loss,
    data: &Dataset,
    targets: &[f64],
    cfg: &GrowConfig,
    lambda: f64,
    t_end: f64,
    m_per_step: usize,
    seed: u64,
) -> Result<FlowTrace> {
    if lambda <= 0.0 {
        return Err(Error::InvalidConfig("lambda must be > 0".into()));
    }
    if t_end < 0.0 {
        return Err(Error::InvalidConfig("T_end must be >= 0".into()));
    }
    let n_steps = (t_end / lambda).ceil() as usize;
    let mut f = vec![init_constant(loss, targets); data.n()];
    let mut trace = FlowTrace {
        times: vec![0.0],
        f_values: vec![f.clone()],
        risks: vec![risk(loss, &f, targets)],
        step_mc_std: Vec::new(),
        lambda,
        m_per_step,
    };
    for k in 0..n_steps {
        let step_seed = seed
            .wrapping_add((k as u64 + 1).wrapping_mul(0x2545F4914F6CDD1D));
        let (step, std) =
            gradient_forest_step(loss, &f, data, targets, cfg, m_per_step, step_seed)?;
        for i in 0..f.len() {
            f[i] += lambda * step[i];
            if !f[i].is_finite() {
                return Err(Error::NonFinite(format!(
                    "F became non-finite at step {} index {i}",
                    k + 1
                )));
            }
        }
        trace.times.push((k + 1) as f64 * lambda);
        trace.f_values.push(f.clone());
        trace.risks.push(risk(loss, &f, targets));
        trace
            .step_mc_std
            .push(std.iter().sum::<f64>() / std.len() as f64);
    }
    Ok(trace)
}

/// Linear skeleton of the squared-loss flow with a frozen weight matrix:
/// F_{k+1} = F_k + lambda * W (y - F_k). Returns F after `steps` steps.
pub fn frozen_flow(w: &DMatrix<f64>, f0: &[f64], targets: &[f64], lambda: f64, steps: usize) -> Vec<f64> {
    let mut f = nalgebra::DVector::from_column_slice(f0);
    let y = nalgebra::DVector::from_column_slice(targets);
    for _ in 0..steps {
        let step = w * (&y - &f);
        f += lambda * step;
    }
    f.as_slice().to_vec()
}

/// Exact solution of the frozen linear flow: F_t = y + e^{-W t} (F_0 - y).
pub fn frozen_flow_exact(w: &DMatrix<f64>, f0: &[f64], targets: &[f64], t: f64) -> Vec<f64> {
    let y = nalgebra::DVector::from_column_slice(targets);
    let d0 = nalgebra::DVector::from_column_slice(f0) - &y;
    let e = (-(w.clone()) * t).exp();
    (y + e * d0).as_slice().to_vec()
}

fn node_rect(scheme: &SplitScheme, p: usize, word: &[u8]) -> Result<Hyperrectangle> {
    let mut rect = Hyperrectangle::unit_cube(p);
    for i in 0..word.len() {
        let prefix = word[..i].to_vec();
        let &(axis, fraction) = scheme
            .entries
            .get(&prefix)
            .ok_or_else(|| Error::InvalidConfig("scheme has a dangling internal node".into()))?;
        let (l, r) = rect.split(axis, fraction)?;
        rect = if word[i] == 0 { l } else { r };
    }
    Ok(rect)
}

/// Monte-Carlo estimate of the density of the softmax scheme measure with
/// respect to the uniform one, evaluated at a realized scheme: average over
/// draws of K-1 uniform companion splits per internal node of
/// `prod_v K exp(beta D(xi_v)) / sum_k exp(beta D(xi_v^k))`.
/// Equals 1 exactly when beta = 0 or K = 1, and is bounded by
/// K^(#internal nodes).
pub fn rn_derivative<R: Rng>(
    scheme: &SplitScheme,
    f_values: &[f64],
    data: &Dataset,
    targets: &[f64],
    loss: Loss,
    cfg: &GrowConfig,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64> {
    if cfg.strategy != Strategy::Softmax {
        return Err(Error::InvalidConfig(
            "the density is defined for the softmax strategy".into(),
        ));
    }
    let k = cfg.k_candidates;
    if cfg.beta == 0.0 || k == 1 {
        return Ok(1.0);
    }
    let residuals = pseudo_residuals(&loss, f_values, targets);
    let p = data.p();
    // Realized split score per internal node, computed once.
    let mut nodes = Vec::with_capacity(scheme.entries.len());
    for (word, &(axis, fraction)) in &scheme.entries {
        let rect = node_rect(scheme, p, word)?;
        let own = score_split(data, &residuals, &rect, axis, fraction)?;
        nodes.push((rect, own));
    }
    let mut total = 0.0f64;
    for _ in 0..n_mc {
        let mut log_prod = 0.0f64;
        for (rect, own) in &nodes {
            let mut scores = Vec::with_capacity(k);
            scores.push(*own);
            for _ in 1..k {
                let axis = rng.gen_range(0..p);
                let fraction = rng.gen_range(f64::MIN_POSITIVE..1.0);
                scores.push(score_split(data, &residuals, rect, axis, fraction)?);
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().map(|&s| (cfg.beta * (s - max)).exp()).sum();
            log_prod += (k as f64).ln() + cfg.beta * (own - max) - denom.ln();
        }
        total += log_prod.exp();
    }
    Ok(total / n_mc as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn squared_risk_trivia() {
        let y = vec![1.0, -1.0, 2.0];
        assert_eq!(risk(Loss::Squared, &y, &y), 0.0);
        let zero = vec![0.0; 3];
        let expect = (1.0 + 1.0 + 4.0) / 3.0 / 2.0;
        assert!((risk(Loss::Squared, &zero, &y) - expect).abs() < 1e-15);
    }

    #[test]
    fn logistic_risk_at_zero_balanced() {
        let y = vec![1.0, -1.0, 1.0, -1.0];
        let zero = vec![0.0; 4];
        assert!((risk(Loss::Logistic, &zero, &y) - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn init_constant_squared_is_mean() {
        assert_eq!(init_constant(Loss::Squared, &[1.0, 3.0]), 2.0);
    }

    #[test]
    fn init_constant_logistic_balanced_is_zero() {
        let z = init_constant(Loss::Logistic, &[1.0, -1.0, 1.0, -1.0]);
        assert!(z.abs() < 1e-10);
    }

    #[test]
    fn init_constant_logistic_matches_golden_section() {
        let targets = vec![1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
        let newton = init_constant(Loss::Logistic, &targets);
        // Golden-section search on [-15, 15].
        let obj = |z: f64| risk(Loss::Logistic, &vec![z; targets.len()], &targets);
        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (-15.0f64, 15.0f64);
        let (mut c, mut d) = (b - phi * (b - a), a + phi * (b - a));
        for _ in 0..200 {
            if obj(c) < obj(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - phi * (b - a);
            d = a + phi * (b - a);
        }
        let golden = 0.5 * (a + b);
        // Golden section resolves the argmin only to about sqrt(eps).
        assert!((newton - golden).abs() < 1e-6, "newton {newton} golden {golden}");
        // Closed form log(p/(1-p)) with p = 5/7.
        let closed = (5.0f64 / 7.0 / (2.0 / 7.0)).ln();
        assert!((newton - closed).abs() < 1e-8);
    }

    #[test]
    fn init_constant_logistic_degenerate_clips() {
        let z = init_constant(Loss::Logistic, &[1.0, 1.0, 1.0]);
        assert!(z <= 15.0 + 1e-12 && z > 5.0);
    }

    #[test]
    fn step_zero_at_fixed_point() {
        let data = random_data(30, 2, 1);
        let cfg = GrowConfig::new(Strategy::Softmax, 2);
        let (step, _) = gradient_forest_step(
            Loss::Squared,
            data.targets(),
            &data,
            data.targets(),
            &cfg,
            10,
            42,
        )
        .unwrap();
        for v in step {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn step_within_residual_range() {
        let data = random_data(40, 2, 2);
        let cfg = GrowConfig::new(Strategy::Softmax, 2);
        let f = vec![0.25; 40];
        let r = pseudo_residuals(&Loss::Squared, &f, data.targets());
        let (lo, hi) = r
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let (step, _) =
            gradient_forest_step(Loss::Squared, &f, &data, data.targets(), &cfg, 15, 7).unwrap();
        for v in step {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn beta_zero_step_equals_weight_matrix_replay() {
        // With beta = 0 and squared loss the step is W_bar (y - F) for the
        // realized average weight matrix of the same M trees.
        let data = random_data(25, 2, 3);
        let mut cfg = GrowConfig::new(Strategy::Softmax, 2);
        cfg.beta = 0.0;
        cfg.max_depth = 4;
        let f = vec![0.1; 25];
        let m = 12;
        let step_seed = 99u64;
        let (step, _) =
            gradient_forest_step(Loss::Squared, &f, &data, data.targets(), &cfg, m, step_seed)
                .unwrap();
        // Replay the identical trees and build W_bar by hand.
        let residuals = pseudo_residuals(&Loss::Squared, &f, data.targets());
        let n = data.n();
        let mut w = DMatrix::<f64>::zeros(n, n);
        for t in 0..m as u64 {
            let mut rng = tree_rng(step_seed, t);
            let grown = grow_partition(&data, &residuals, &cfg, &mut rng).unwrap();
            let tree = histogram_fit(grown, &data, &residuals);
            let leaves: Vec<usize> = (0..n).map(|i| tree.locate(data.row(i))).collect();
            for i in 0..n {
                let c = tree.leaf_count[leaves[i]];
                for j in 0..n {
                    if leaves[j] == leaves[i] {
                        w[(i, j)] += 1.0 / c as f64;
                    }
                }
            }
        }
        w /= m as f64;
        let r = nalgebra::DVector::from_vec(residuals);
        let expect = &w * r;
        for i in 0..n {
            assert!((step[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_t_end_zero_is_initialization_only() {
        let data = random_data(20, 2, 4);
        let cfg = GrowConfig::new(Strategy::Softmax, 2);
        let trace =
            igb_flow(Loss::Squared, &data, data.targets(), &cfg, 0.1, 0.0, 5, 1).unwrap();
        assert_eq!(trace.times, vec![0.0]);
        assert_eq!(trace.f_values.len(), 1);
        let mean = data.targets().iter().sum::<f64>() / 20.0;
        assert!(trace.f_values[0].iter().all(|&v| (v - mean).abs() < 1e-15));
    }

    #[test]
    fn flow_risks_decrease_with_slack() {
        let data = random_data(40, 2, 5);
        let mut cfg = GrowConfig::new(Strategy::Softmax, 2);
        cfg.max_depth = 4;
        let lambda = 0.05;
        let trace =
            igb_flow(Loss::Squared, &data, data.targets(), &cfg, lambda, 1.0, 30, 2).unwrap();
        for k in 0..trace.step_mc_std.len() {
            let slack = 2.0 * trace.step_mc_std[k] * lambda;
            assert!(
                trace.risks[k + 1] <= trace.risks[k] + slack,
                "step {k}: {} -> {} slack {slack}",
                trace.risks[k],
                trace.risks[k + 1]
            );
        }
    }

    #[test]
    fn frozen_flow_matches_matrix_exponential() {
        let data = random_data(20, 1, 6);
        let cfg = GrowConfig::new(Strategy::ExtraTrees, 1);
        let forest = crate::forest::fit_forest(&data, data.targets(), &cfg, 20).unwrap();
        let w = crate::forest::weight_matrix(&forest, &data);
        let f0 = vec![init_constant(Loss::Squared, data.targets()); 20];
        let lambda = 1e-3;
        let steps = 1000;
        let euler = frozen_flow(&w, &f0, data.targets(), lambda, steps);
        let exact = frozen_flow_exact(&w, &f0, data.targets(), lambda * steps as f64);
        let sup = euler
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(sup < 1e-3, "sup error {sup}");
    }

    #[test]
    fn frozen_flow_risk_strictly_decreases() {
        let data = random_data(25, 2, 7);
        let cfg = GrowConfig::new(Strategy::ExtraTrees, 2);
        let forest = crate::forest::fit_forest(&data, data.targets(), &cfg, 15).unwrap();
        let w = crate::forest::weight_matrix(&forest, &data);
        let mut f = vec![init_constant(Loss::Squared, data.targets()); 25];
        let mut prev = risk(Loss::Squared, &f, data.targets());
        for _ in 0..50 {
            f = frozen_flow(&w, &f, data.targets(), 0.5, 1);
            let r = risk(Loss::Squared, &f, data.targets());
            assert!(r <= prev + 1e-12);
            prev = r;
        }
    }

    #[test]
    fn rn_density_is_one_for_beta_zero_and_k1() {
        let data = random_data(30, 2, 8);
        let mut cfg = GrowConfig::new(Strategy::Softmax, 2);
        cfg.max_depth = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grown = grow_partition(&data, data.targets(), &cfg, &mut rng).unwrap();
        let f = vec![0.0; 30];
        let mut cfg0 = cfg.clone();
        cfg0.beta = 0.0;
        let v = rn_derivative(
            &grown.scheme, &f, &data, data.targets(), Loss::Squared, &cfg0, 50, &mut rng,
        )
        .unwrap();
        assert_eq!(v, 1.0);
        let mut cfg1 = cfg.clone();
        cfg1.k_candidates = 1;
        let v = rn_derivative(
            &grown.scheme, &f, &data, data.targets(), Loss::Squared, &cfg1, 50, &mut rng,
        )
        .unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn rn_density_bounded_by_node_count_bound() {
        let data = random_data(40, 2, 10);
        let mut cfg = GrowConfig::new(Strategy::Softmax, 2);
        cfg.max_depth = 2;
        cfg.beta = 2.0;
        cfg.k_candidates = 5;
        let f = vec![0.0; 40];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in 0..50u64 {
            let grown =
                grow_partition(&data, data.targets(), &cfg, &mut tree_rng(12, t)).unwrap();
            let n_internal = grown.scheme.entries.len() as i32;
            let bound = (cfg.k_candidates as f64).powi(n_internal);
            let v = rn_derivative(
                &grown.scheme, &f, &data, data.targets(), Loss::Squared, &cfg, 30, &mut rng,
            )
            .unwrap();
            assert!(v > 0.0 && v <= bound + 1e-9, "v = {v}, bound = {bound}");
        }
    }

    #[test]
    fn second_derivative_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let z = rng.gen_range(-20.0..20.0);
            let y = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            assert!(Loss::Logistic.second_derivative(z, y) <= 0.25 + 1e-12);
            assert_eq!(Loss::Squared.second_derivative(z, y), 1.0);
        }
    }
}
