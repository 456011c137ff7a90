//! Entropy balancing for multivariate continuous treatments.
//!
//! Weights minimize `Σ w_i ln(w_i / v_i)` subject to `Σ w_i g_i = 0` and
//! `Σ w_i = 1`, where `g_i = [vec(t_i x_i'), t_i, x_i]` stacks the
//! treatment-covariate cross products with the (centered) treatments and
//! covariates. The solution has the exponential-tilting form
//! `w_i ∝ v_i exp(−γ'g_i)`, with `γ` minimizing the convex dual
//! `ln Σ v_i exp(−γ'g_i)`. The dual is minimized by damped Newton steps with
//! an Armijo backtracking line search; exponents are shifted by their maximum
//! before exponentiation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BalanceOptions {
    /// Stop when the dual gradient's largest entry falls to this value.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceWeights {
    #[serde(serialize_with = "crate::report::serialize_vector")]
    pub w: DVector<f64>,
    /// Lagrange multipliers, one per moment column (zero for dropped columns).
    #[serde(serialize_with = "crate::report::serialize_vector")]
    pub dual: DVector<f64>,
    /// Euclidean norm of `Σ w_i g_i` over all moment columns.
    pub balance_stat: f64,
    /// Largest entry of the dual gradient at the returned multipliers.
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Moment columns that were identically zero and left out of the solve.
    pub dropped_columns: Vec<usize>,
}

/// `[vec(t x'), t, x]`, with `vec` stacking the columns of the `q × p` outer product.
pub fn moment_vector(t: &[f64], x: &[f64]) -> Vec<f64> {
    let mut g = Vec::with_capacity(t.len() * x.len() + t.len() + x.len());
    for xk in x {
        g.extend(t.iter().map(|tj| tj * xk));
    }
    g.extend_from_slice(t);
    g.extend_from_slice(x);
    g
}

/// Moment vectors of every row, stacked as an `n × (qp + q + p)` matrix.
pub fn moment_matrix(t: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, q, p) = (t.nrows(), t.ncols(), x.ncols());
    let m = q * p + q + p;
    let mut g = DMatrix::zeros(n, m);
    for i in 0..n {
        let ti: Vec<f64> = t.row(i).iter().copied().collect();
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        for (j, v) in moment_vector(&ti, &xi).into_iter().enumerate() {
            g[(i, j)] = v;
        }
    }
    g
}

/// `‖Σ_i w_i g_i‖₂`.
pub fn balance_statistic(w: &DVector<f64>, moments: &DMatrix<f64>) -> f64 {
    moments.tr_mul(w).norm()
}

/// Value of `ln Σ v_i exp(−γ'g_i)`.
pub fn dual_objective(moments: &DMatrix<f64>, base: &DVector<f64>, gamma: &DVector<f64>) -> f64 {
    let (log_total, _) = tilt(moments, base, gamma);
    log_total
}

/// `∇ = −Σ w_i(γ) g_i`.
pub fn dual_gradient(moments: &DMatrix<f64>, base: &DVector<f64>, gamma: &DVector<f64>) -> DVector<f64> {
    let (_, w) = tilt(moments, base, gamma);
    -moments.tr_mul(&w)
}

/// `Σ w_i g_i g_i' − (Σ w_i g_i)(Σ w_i g_i)'`.
pub fn dual_hessian(moments: &DMatrix<f64>, base: &DVector<f64>, gamma: &DVector<f64>) -> DMatrix<f64> {
    let (_, w) = tilt(moments, base, gamma);
    hessian_at(moments, &w)
}

/// Primal weights at `γ`.
pub fn tilted_weights(moments: &DMatrix<f64>, base: &DVector<f64>, gamma: &DVector<f64>) -> DVector<f64> {
    tilt(moments, base, gamma).1
}

fn hessian_at(moments: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mean = moments.tr_mul(w);
    let mut scaled = moments.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w[i];
    }
    moments.tr_mul(&scaled) - &mean * mean.transpose()
}

/// Returns the log normalizer and the normalized weights.
fn tilt(moments: &DMatrix<f64>, base: &DVector<f64>, gamma: &DVector<f64>) -> (f64, DVector<f64>) {
    let mut logits = -(moments * gamma);
    for (l, v) in logits.iter_mut().zip(base.iter()) {
        *l += v.ln();
    }
    let shift = logits.max();
    let mut w = logits.map(|l| (l - shift).exp());
    let total = w.sum();
    w /= total;
    (shift + total.ln(), w)
}

/// Balances the covariates of `data` (assumed standardized) against its treatments.
pub fn balance_dataset(data: &Dataset, base: Option<&DVector<f64>>) -> Result<BalanceWeights> {
    solve_weights(&moment_matrix(data.t(), data.x()), base, BalanceOptions::default())
}

/// Solves the dual for weights that zero the weighted moment means.
///
/// `base` defaults to uniform `1/n`. All-zero moment columns are dropped
/// (with a warning) since they impose no constraint. On failure to reach the
/// tolerance, the iterate with the smallest imbalance is returned in
/// [`Error::BalanceNonConvergence`].
pub fn solve_weights(
    moments: &DMatrix<f64>,
    base: Option<&DVector<f64>>,
    options: BalanceOptions,
) -> Result<BalanceWeights> {
    let (n, m) = moments.shape();
    if n < 2 {
        return Err(Error::InvalidArgument("balancing needs at least 2 rows".into()));
    }
    let base = match base {
        Some(v) => {
            if v.len() != n || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::InvalidArgument("base weights must be positive, one per row".into()));
            }
            v / v.sum()
        }
        None => DVector::from_element(n, 1.0 / n as f64),
    };
    let kept: Vec<usize> = (0..m).filter(|&j| moments.column(j).amax() > 0.0).collect();
    let dropped: Vec<usize> = (0..m).filter(|j| !kept.contains(j)).collect();
    if !dropped.is_empty() {
        log::warn!("dropping {} all-zero moment column(s)", dropped.len());
    }
    let g = moments.select_columns(&kept);
    let k = kept.len();

    let mut gamma = DVector::zeros(k);
    let (mut value, mut w) = tilt(&g, &base, &gamma);
    let mut grad = -g.tr_mul(&w);
    let mut converged = grad.amax() <= options.tolerance;
    let mut iterations = 0;
    // Lowest-imbalance iterate seen so far. When the constraints are
    // infeasible the dual is unbounded and later iterates pile all the mass
    // on a few rows, so the last iterate is the worst choice of fallback.
    let mut best = (grad.amax(), gamma.clone(), w.clone());
    while !converged && iterations < options.max_iters {
        iterations += 1;
        let hess = hessian_at(&g, &w);
        let Some(direction) = newton_direction(&hess, &grad) else {
            break;
        };
        let slope = grad.dot(&direction);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &gamma + &direction * step;
            let (trial_value, trial_w) = tilt(&g, &base, &trial);
            if trial_value <= value + 1e-4 * step * slope {
                gamma = trial;
                value = trial_value;
                w = trial_w;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        grad = -g.tr_mul(&w);
        converged = grad.amax() <= options.tolerance;
        if grad.amax() < best.0 {
            best = (grad.amax(), gamma.clone(), w.clone());
        }
    }
    if !converged {
        (_, gamma, w) = best;
        grad = -g.tr_mul(&w);
    }

    let mut dual = DVector::zeros(m);
    for (pos, &j) in kept.iter().enumerate() {
        dual[j] = gamma[pos];
    }
    let result = BalanceWeights {
        balance_stat: balance_statistic(&w, moments),
        grad_norm: grad.amax(),
        w,
        dual,
        converged,
        iterations,
        dropped_columns: dropped,
    };
    if converged {
        Ok(result)
    } else {
        Err(Error::BalanceNonConvergence {
            grad_norm: result.grad_norm,
            best: Box::new(result),
        })
    }
}

/// Solves `H d = −∇`, adding a growing ridge when `H` is not numerically positive definite.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let k = hess.nrows();
    let scale = (hess.trace() / k.max(1) as f64).max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..20 {
        let shifted = hess + DMatrix::identity(k, k) * ridge;
        if let Some(chol) = shifted.cholesky() {
            let d = chol.solve(&(-grad));
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn scalar_moments(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(values.len(), 1, values)
    }

    fn random_moments(seed: u64, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let t = DMatrix::from_fn(n, 2, |i, j| {
            0.5 * x[(i, j)] + rng.sample::<f64, _>(StandardNormal)
        });
        let std = Dataset::from_matrices(x, t, DVector::zeros(n)).unwrap().standardize().unwrap();
        (std.t().clone(), std.x().clone())
    }

    #[test]
    fn moment_vector_layout() {
        assert_eq!(moment_vector(&[1.0, 2.0], &[3.0]), vec![3.0, 6.0, 1.0, 2.0, 3.0]);
        assert_eq!(
            moment_vector(&[1.5, -2.0], &[0.0, 0.0]),
            vec![0.0, 0.0, 0.0, 0.0, 1.5, -2.0, 0.0, 0.0]
        );
        assert_eq!(moment_vector(&[2.0], &[-3.0]), vec![-6.0, 2.0, -3.0]);
    }

    #[test]
    fn already_balanced_sample_keeps_uniform_weights() {
        let g = scalar_moments(&[1.0, -1.0]);
        let res = solve_weights(&g, None, BalanceOptions::default()).unwrap();
        assert_eq!(res.dual[0], 0.0);
        assert!((res.w[0] - 0.5).abs() < 1e-15 && (res.w[1] - 0.5).abs() < 1e-15);

        // Every moment (t, x, t·x) already averages to zero.
        let t = DMatrix::from_row_slice(4, 1, &[1.0, -1.0, 2.0, -2.0]);
        let x = DMatrix::from_row_slice(4, 1, &[2.0, -2.0, -1.0, 1.0]);
        let res = solve_weights(&moment_matrix(&t, &x), None, BalanceOptions::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.w.iter().all(|w| (w - 0.25).abs() < 1e-15));
    }

    #[test]
    fn three_point_closed_form() {
        let g = scalar_moments(&[1.0, 1.0, -1.0]);
        let res = solve_weights(&g, None, BalanceOptions::default()).unwrap();
        // 2 e^{-γ} = e^{γ}  =>  γ = ln(2) / 2, w = (1/4, 1/4, 1/2).
        assert!((res.dual[0] - 0.5 * 2f64.ln()).abs() < 1e-8);
        for (w, e) in res.w.iter().zip([0.25, 0.25, 0.5]) {
            assert!((w - e).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_columns_are_dropped() {
        let g = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
        let res = solve_weights(&g, None, BalanceOptions::default()).unwrap();
        assert_eq!(res.dropped_columns, vec![1]);
        assert_eq!(res.dual[1], 0.0);
    }

    #[test]
    fn infeasible_balance_reports_non_convergence() {
        // All moments positive: Σ w g = 0 has no solution with w > 0.
        let g = scalar_moments(&[1.0, 2.0, 3.0]);
        match solve_weights(&g, None, BalanceOptions::default()) {
            Err(Error::BalanceNonConvergence { best, grad_norm }) => {
                assert!(grad_norm > 1e-8);
                assert!((best.w.sum() - 1.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (t, x) = random_moments(1, 80);
        let g = moment_matrix(&t, &x);
        let base = DVector::from_element(80, 1.0 / 80.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dist = Uniform::new(-0.3, 0.3).unwrap();
        for _ in 0..5 {
            let gamma = DVector::from_fn(g.ncols(), |_, _| dist.sample(&mut rng));
            let analytic = dual_gradient(&g, &base, &gamma);
            let h = 1e-6;
            let numeric = DVector::from_fn(g.ncols(), |j, _| {
                let mut up = gamma.clone();
                let mut down = gamma.clone();
                up[j] += h;
                down[j] -= h;
                (dual_objective(&g, &base, &up) - dual_objective(&g, &base, &down)) / (2.0 * h)
            });
            let rel = (&analytic - &numeric).norm() / analytic.norm();
            assert!(rel <= 1e-5, "{rel}");
        }
    }

    #[test]
    fn hessian_is_positive_semidefinite() {
        let (t, x) = random_moments(3, 60);
        let g = moment_matrix(&t, &x);
        let base = DVector::from_element(60, 1.0 / 60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dist = Uniform::new(-1.0, 1.0).unwrap();
        for _ in 0..5 {
            let gamma = DVector::from_fn(g.ncols(), |_, _| dist.sample(&mut rng));
            let min = dual_hessian(&g, &base, &gamma).symmetric_eigenvalues().min();
            assert!(min >= -1e-10, "{min}");
        }
    }

    #[test]
    fn converged_weights_balance_and_normalize() {
        for seed in 10..15 {
            let (t, x) = random_moments(seed, 200);
            let g = moment_matrix(&t, &x);
            let res = solve_weights(&g, None, BalanceOptions::default()).unwrap();
            assert!(res.converged);
            assert!(res.balance_stat <= 1e-6);
            assert!(g.tr_mul(&res.w).amax() <= 1e-6);
            assert!((res.w.sum() - 1.0).abs() <= 1e-12);
            assert!(res.w.iter().all(|w| *w > 0.0));
        }
    }

    #[test]
    fn uniform_statistic_is_norm_of_mean_moment() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, -4.0]);
        let w = DVector::from_element(2, 0.5);
        // mean moment (2, -1)
        assert!((balance_statistic(&w, &g) - 5f64.sqrt()).abs() < 1e-15);
    }
}
