//! Two-stage covariate screening.
//!
//! The first stage keeps covariates marginally associated with the treatment
//! vector (confounders and instruments); the second keeps covariates that stay
//! associated with the outcome once treatments and the first-stage set are
//! conditioned on (confounders and predictors).

mod conditional;
mod independence;

pub use conditional::{
    default_k, gcm_from_residuals, gcm_statistic, screen_conditional, CondScreenResult,
};
pub use independence::{canonical_corr_stat, screen_independence, IndepScreenResult, TreatmentCorrelation};

/// Indices of the `k` largest scores, best first. Ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
