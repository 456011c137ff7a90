//! Prior adaptive lasso for the multivariate Gaussian treatment model `T = XB + E`.
//!
//! The penalized negative log-likelihood
//!
//! ```text
//! L(B, Ω) = tr{(1/n)(T − XB)'(T − XB) Ω} − ln|Ω| + λ Σ_rc w_rc |B_rc|
//! ```
//!
//! is bi-convex, and is minimized by alternating the closed-form precision
//! update `Ω = S(B)⁻¹` with one cyclic coordinate-descent sweep over `B`.
//! Rows of `B` index covariates and columns index treatments throughout.

mod tuning;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue_sym, spd_inverse, spd_log_det, symmetrize};

pub use tuning::{bic, palut_baseline, select_lambda, GridPoint, LambdaSelection, PalutResult};

/// Ridge added to a near-singular residual covariance before inversion.
pub const OMEGA_RIDGE: f64 = 1e-8;
const OMEGA_MIN_EIGENVALUE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PalConfig {
    /// λ grid as exponents `a` in `λ = n^(−a)`.
    pub lambda_exponents: Vec<f64>,
    /// `c` in the rule `λ · n^(γ/2 − 1) = n^c` tying γ to λ.
    pub gamma_rule: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub zero_tol: f64,
}

impl Default for PalConfig {
    fn default() -> Self {
        Self {
            lambda_exponents: vec![1.0, 1.2, 1.4, 1.6, 1.8, 2.0],
            gamma_rule: 0.2,
            epsilon: 1e-6,
            max_iters: 500,
            zero_tol: 1e-10,
        }
    }
}

impl PalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_exponents.is_empty() {
            return Err(Error::InvalidArgument("lambda grid is empty".into()));
        }
        if self.lambda_exponents.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidArgument("lambda exponents must be positive".into()));
        }
        if !(self.epsilon > 0.0) || !(self.zero_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "epsilon and zero_tol must be positive and max_iters at least 1".into(),
            ));
        }
        Ok(())
    }

    /// `(λ, γ)` pairs for sample size `n`, ordered from largest λ to smallest.
    pub fn lambda_gamma_grid(&self, n: usize) -> Vec<(f64, f64)> {
        let mut exps = self.lambda_exponents.clone();
        exps.sort_by(f64::total_cmp);
        exps.dedup();
        exps.iter()
            .map(|&a| ((n as f64).powf(-a), gamma_for_exponent(a, self.gamma_rule)))
            .collect()
    }
}

/// Solves `n^(−a) · n^(γ/2 − 1) = n^c` for γ.
pub fn gamma_for_exponent(a: f64, rule: f64) -> f64 {
    2.0 * (1.0 + rule + a)
}

#[derive(Debug, Clone, Serialize)]
pub struct PalFit {
    /// Coefficients, covariates × treatments.
    #[serde(serialize_with = "crate::report::serialize_matrix")]
    pub b: DMatrix<f64>,
    #[serde(serialize_with = "crate::report::serialize_matrix")]
    pub omega: DMatrix<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub bic: f64,
    pub objective_trace: Vec<f64>,
    /// Rows of `b` with any entry above `zero_tol` in magnitude.
    pub selected_rows: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when some Ω step had to regularize a singular residual covariance.
    pub omega_fallback: bool,
}

impl PalFit {
    pub fn nonzeros(&self, zero_tol: f64) -> usize {
        self.b.iter().filter(|v| v.abs() > zero_tol).count()
    }
}

/// Sufficient statistics of the treatment model for one design.
#[derive(Debug, Clone)]
pub struct PalProblem {
    n: usize,
    gram: DMatrix<f64>,
    xt: DMatrix<f64>,
    tt: DMatrix<f64>,
}

impl PalProblem {
    pub fn new(x: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() != t.nrows() || x.nrows() < 2 {
            return Err(Error::InvalidArgument("X and T must share n >= 2 rows".into()));
        }
        if x.ncols() == 0 || t.ncols() == 0 {
            return Err(Error::InvalidArgument("empty design".into()));
        }
        Ok(Self {
            n: x.nrows(),
            gram: x.tr_mul(x),
            xt: x.tr_mul(t),
            tt: t.tr_mul(t),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.gram.nrows()
    }

    pub fn q(&self) -> usize {
        self.tt.nrows()
    }

    /// Restriction to a single treatment column.
    pub fn single_treatment(&self, col: usize) -> PalProblem {
        PalProblem {
            n: self.n,
            gram: self.gram.clone(),
            xt: self.xt.columns(col, 1).into_owned(),
            tt: DMatrix::from_element(1, 1, self.tt[(col, col)]),
        }
    }

    /// `S(B) = (1/n)(T − XB)'(T − XB)`.
    pub fn residual_covariance(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let cross = b.tr_mul(&self.xt);
        let s = &self.tt - &cross - cross.transpose() + b.tr_mul(&(&self.gram * b));
        symmetrize(s / self.n as f64)
    }

    /// Penalized objective. Zero coefficients contribute nothing, even with infinite weight.
    pub fn objective(&self, b: &DMatrix<f64>, omega: &DMatrix<f64>, lambda: f64, w: &DMatrix<f64>) -> f64 {
        let s = self.residual_covariance(b);
        let fit = (s * omega).trace();
        let logdet = spd_log_det(omega).unwrap_or(f64::NEG_INFINITY);
        let penalty: f64 = b
            .iter()
            .zip(w.iter())
            .filter(|(v, _)| **v != 0.0)
            .map(|(v, wi)| wi * v.abs())
            .sum();
        fit - logdet + lambda * penalty
    }
}

/// `ŵ_rc = (|GCM_r| / max |GCM|)^(−γ)`, identical across treatment columns.
pub fn prior_weights(gcm_abs: &[f64], gamma: f64, q: usize) -> Result<DMatrix<f64>> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} must be >= 0")));
    }
    let max = gcm_abs.iter().copied().map(f64::abs).fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::AllZeroGcm);
    }
    Ok(DMatrix::from_fn(gcm_abs.len(), q, |r, _| {
        if gamma == 0.0 {
            1.0
        } else {
            (gcm_abs[r].abs() / max).powf(-gamma)
        }
    }))
}

#[derive(Debug, Clone)]
pub struct OmegaStep {
    pub omega: DMatrix<f64>,
    pub fallback: bool,
}

/// Closed-form minimizer of `tr(S Ω) − ln|Ω|`: `Ω = S⁻¹`, ridged when `S` is near singular.
pub fn omega_mle(problem: &PalProblem, b: &DMatrix<f64>) -> OmegaStep {
    omega_from_covariance(&problem.residual_covariance(b))
}

fn omega_from_covariance(s: &DMatrix<f64>) -> OmegaStep {
    let q = s.nrows();
    if min_eigenvalue_sym(s) >= OMEGA_MIN_EIGENVALUE {
        if let Some(omega) = spd_inverse(s) {
            return OmegaStep { omega, fallback: false };
        }
    }
    let mut ridge = OMEGA_RIDGE;
    loop {
        let shifted = s + DMatrix::identity(q, q) * ridge;
        if let Some(omega) = spd_inverse(&shifted) {
            return OmegaStep { omega, fallback: true };
        }
        ridge *= 10.0;
    }
}

/// Soft-thresholded coordinate minimizer given the partial-residual score `h`.
fn shrink(h: f64, penalty: f64, curvature: f64, n: f64) -> f64 {
    let excess = h.abs() - penalty;
    if excess > 0.0 {
        h.signum() * n * excess / (2.0 * curvature)
    } else {
        0.0
    }
}

/// New value of `B[cov_row, trt_col]` with every other coefficient held at `b`.
pub fn coordinate_update(
    b: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    problem: &PalProblem,
    lambda: f64,
    w: &DMatrix<f64>,
    cov_row: usize,
    trt_col: usize,
) -> f64 {
    let n = problem.n as f64;
    let xt_omega = (problem.xt.row(cov_row) * omega.column(trt_col))[(0, 0)];
    let gram_b_omega = ((problem.gram.row(cov_row) * b) * omega.column(trt_col))[(0, 0)];
    let curvature = problem.gram[(cov_row, cov_row)] * omega[(trt_col, trt_col)];
    let h = 2.0 / n * (xt_omega + curvature * b[(cov_row, trt_col)] - gram_b_omega);
    shrink(h, lambda * w[(cov_row, trt_col)], curvature, n)
}

/// One cyclic sweep (covariate outer, treatment inner). Returns Σ|ΔB|.
fn sweep(problem: &PalProblem, b: &mut DMatrix<f64>, gram_b: &mut DMatrix<f64>, omega: &DMatrix<f64>, lambda: f64, w: &DMatrix<f64>) -> f64 {
    let n = problem.n as f64;
    let (p, q) = b.shape();
    let xt_omega = &problem.xt * omega;
    let mut change = 0.0;
    for r in 0..p {
        let a = problem.gram[(r, r)];
        for c in 0..q {
            let curvature = a * omega[(c, c)];
            let gram_b_omega: f64 = (0..q).map(|k| gram_b[(r, k)] * omega[(k, c)]).sum();
            let old = b[(r, c)];
            let h = 2.0 / n * (xt_omega[(r, c)] + curvature * old - gram_b_omega);
            let new = shrink(h, lambda * w[(r, c)], curvature, n);
            let delta = new - old;
            if delta != 0.0 {
                b[(r, c)] = new;
                for i in 0..p {
                    gram_b[(i, c)] += problem.gram[(i, r)] * delta;
                }
                change += delta.abs();
            }
        }
    }
    change
}

/// Alternating minimization from `B = 0`, `Σ = T'T/n`, one coordinate sweep per Ω update,
/// stopping when the summed absolute change in `B` drops below `epsilon`.
///
/// On hitting `max_iters` the last iterate is returned inside
/// [`Error::PalNonConvergence`].
pub fn fit_pal(
    problem: &PalProblem,
    weights: &DMatrix<f64>,
    lambda: f64,
    gamma: f64,
    epsilon: f64,
    max_iters: usize,
    zero_tol: f64,
) -> Result<PalFit> {
    let (p, q) = (problem.p(), problem.q());
    if weights.shape() != (p, q) {
        return Err(Error::InvalidArgument("weight matrix shape mismatch".into()));
    }
    if !(lambda >= 0.0) || !(epsilon > 0.0) || max_iters == 0 {
        return Err(Error::InvalidArgument("invalid lambda, epsilon or max_iters".into()));
    }
    let mut b = DMatrix::zeros(p, q);
    let mut gram_b = DMatrix::zeros(p, q);
    let mut omega = omega_from_covariance(&symmetrize(&problem.tt / problem.n as f64));
    let mut fallback = omega.fallback;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=max_iters {
        iterations = iter;
        if iter > 1 {
            omega = omega_mle(problem, &b);
            fallback |= omega.fallback;
        }
        let change = sweep(problem, &mut b, &mut gram_b, &omega.omega, lambda, weights);
        trace.push(problem.objective(&b, &omega.omega, lambda, weights));
        if change < epsilon {
            converged = true;
            break;
        }
    }
    let selected_rows = (0..p)
        .filter(|&r| b.row(r).iter().any(|v| v.abs() > zero_tol))
        .collect();
    let mut fit = PalFit {
        b,
        omega: omega.omega,
        lambda,
        gamma,
        bic: f64::NAN,
        objective_trace: trace,
        selected_rows,
        iterations,
        converged,
        omega_fallback: fallback,
    };
    fit.bic = bic(&fit, problem, zero_tol);
    if converged {
        Ok(fit)
    } else {
        Err(Error::PalNonConvergence {
            max_iters,
            fit: Box::new(fit),
        })
    }
}

/// Smallest λ at which `B = 0` is already a fixed point for the given weights.
pub fn lambda_max(problem: &PalProblem, weights: &DMatrix<f64>) -> f64 {
    let omega = omega_from_covariance(&symmetrize(&problem.tt / problem.n as f64)).omega;
    let h = (&problem.xt * &omega) * (2.0 / problem.n as f64);
    h.iter()
        .zip(weights.iter())
        .map(|(h, w)| h.abs() / w)
        .fold(0.0, f64::max)
}

/// Ordinary least squares `(X'X)⁻¹X'T`, used as a reference point.
pub fn least_squares(problem: &PalProblem) -> Option<DMatrix<f64>> {
    let chol = problem.gram.clone().cholesky()?;
    Some(chol.solve(&problem.xt))
}

/// Largest single-coordinate change a fresh sweep would make at `fit`.
pub fn fixed_point_residual(problem: &PalProblem, fit: &PalFit, weights: &DMatrix<f64>) -> f64 {
    let (p, q) = fit.b.shape();
    let mut worst: f64 = 0.0;
    for r in 0..p {
        for c in 0..q {
            let v = coordinate_update(&fit.b, &fit.omega, problem, fit.lambda, weights, r, c);
            worst = worst.max((v - fit.b[(r, c)]).abs());
        }
    }
    worst
}
