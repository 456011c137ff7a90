use rayon::prelude::*;
use serde::Serialize;

use super::{fit_pal, prior_weights, PalConfig, PalFit, PalProblem};
use crate::error::{Error, Result};
use crate::linalg::spd_log_det;

/// `−n ln|Ω| + n tr(S Ω) + ln(n)(k + q + s/2)` where `k` counts nonzero
/// coefficients and `s` counts nonzero off-diagonal precision entries
/// (both triangles, so `s/2` is the number of pairs).
pub fn bic(fit: &PalFit, problem: &PalProblem, zero_tol: f64) -> f64 {
    let n = problem.n() as f64;
    let q = problem.q();
    let s = problem.residual_covariance(&fit.b);
    let logdet = spd_log_det(&fit.omega).unwrap_or(f64::NEG_INFINITY);
    let k = fit.b.iter().filter(|v| v.abs() > zero_tol).count();
    let off = (0..q)
        .flat_map(|i| (0..q).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && fit.omega[(i, j)].abs() > zero_tol)
        .count();
    -n * logdet + n * (s * &fit.omega).trace() + n.ln() * (k as f64 + q as f64 + off as f64 / 2.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub gamma: f64,
    /// `None` when the fit failed outright.
    pub bic: Option<f64>,
    pub nonzeros: Option<usize>,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaSelection {
    pub fit: PalFit,
    pub path: Vec<GridPoint>,
}

/// Fits every grid point with γ tied to λ and returns the minimum-BIC fit.
/// BIC ties go to the larger λ. Fits that hit the iteration cap are kept
/// (with a warning); fits that fail outright are skipped.
pub fn select_lambda(problem: &PalProblem, gcm_abs: &[f64], config: &PalConfig) -> Result<LambdaSelection> {
    config.validate()?;
    if gcm_abs.len() != problem.p() {
        return Err(Error::InvalidArgument("one GCM value per covariate required".into()));
    }
    let grid = config.lambda_gamma_grid(problem.n());
    let results: Vec<Result<PalFit>> = grid
        .par_iter()
        .map(|&(lambda, gamma)| {
            let w = prior_weights(gcm_abs, gamma, problem.q())?;
            match fit_pal(problem, &w, lambda, gamma, config.epsilon, config.max_iters, config.zero_tol) {
                Ok(fit) => Ok(fit),
                Err(Error::PalNonConvergence { fit, .. }) => {
                    log::warn!("lambda {lambda:.3e}: no convergence after {} sweeps; using last iterate", fit.iterations);
                    Ok(*fit)
                }
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut path = Vec::with_capacity(grid.len());
    let mut best: Option<PalFit> = None;
    let mut last_err = None;
    for (&(lambda, gamma), res) in grid.iter().zip(results) {
        match res {
            Ok(fit) => {
                path.push(GridPoint {
                    lambda,
                    gamma,
                    bic: Some(fit.bic),
                    nonzeros: Some(fit.nonzeros(config.zero_tol)),
                    converged: fit.converged,
                });
                // Grid runs from largest λ down, so strict improvement keeps ties at the larger λ.
                if best.as_ref().is_none_or(|b| fit.bic < b.bic) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                log::warn!("lambda {lambda:.3e} skipped: {e}");
                path.push(GridPoint {
                    lambda,
                    gamma,
                    bic: None,
                    nonzeros: None,
                    converged: false,
                });
                last_err = Some(e.to_string());
            }
        }
    }
    match best {
        Some(fit) => Ok(LambdaSelection { fit, path }),
        None => Err(Error::NoUsableFit(last_err.unwrap_or_default())),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PalutResult {
    /// Union of the per-treatment selections, ascending.
    pub selected: Vec<usize>,
    pub fits: Vec<PalFit>,
}

/// Runs the single-treatment version of the selector on each treatment
/// column separately and unions the selected rows.
pub fn palut_baseline(problem: &PalProblem, gcm_abs: &[f64], config: &PalConfig) -> Result<PalutResult> {
    let fits = (0..problem.q())
        .map(|c| select_lambda(&problem.single_treatment(c), gcm_abs, config).map(|s| s.fit))
        .collect::<Result<Vec<_>>>()?;
    Ok(PalutResult {
        selected: union_sorted(fits.iter().map(|f| f.selected_rows.as_slice())),
        fits,
    })
}

pub(crate) fn union_sorted<'a>(sets: impl Iterator<Item = &'a [usize]>) -> Vec<usize> {
    let mut all: Vec<usize> = sets.flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    all
}
