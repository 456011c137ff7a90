use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::child_seed;

/// Share of failed replicates above which the bootstrap is abandoned.
const MAX_FAILED_SHARE: f64 = 0.10;

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapSummary {
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    pub level: f64,
    /// Replicates that produced an estimate.
    pub n_boot: usize,
    pub failed: usize,
}

/// Percentile interval from a sorted sample, rounding the lower order
/// statistic down and the upper one up.
pub fn percentile_interval(sorted: &[f64], level: f64) -> (f64, f64) {
    let last = sorted.len() - 1;
    let alpha = (1.0 - level) / 2.0;
    let lo = (alpha * last as f64).floor() as usize;
    let hi = ((1.0 - alpha) * last as f64).ceil() as usize;
    (sorted[lo], sorted[hi.min(last)])
}

/// Pairs bootstrap: each replicate resamples rows with replacement and
/// re-runs `estimate` on the resample. Replicate `b` draws from a generator
/// seeded with `child_seed(seed, b)`, so results do not depend on scheduling.
pub fn bootstrap_ci<F>(data: &Dataset, n_boot: usize, seed: u64, level: f64, estimate: F) -> Result<BootstrapSummary>
where
    F: Fn(&Dataset) -> Result<DVector<f64>> + Sync,
{
    if n_boot < 2 {
        return Err(Error::InvalidArgument("n_boot must be at least 2".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument("confidence level must lie in (0, 1)".into()));
    }
    let n = data.n();
    let results: Vec<Result<DVector<f64>>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, b as u64));
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            estimate(&data.select_rows(&rows)?)
        })
        .collect();
    let mut estimates = Vec::with_capacity(n_boot);
    let mut failed = 0;
    for r in results {
        match r {
            Ok(v) => estimates.push(v),
            Err(e) => {
                log::warn!("bootstrap replicate failed: {e}");
                failed += 1;
            }
        }
    }
    if failed as f64 > MAX_FAILED_SHARE * n_boot as f64 || estimates.len() < 2 {
        return Err(Error::TooManyFailures { failed, total: n_boot });
    }
    if failed > 0 {
        log::warn!("{failed} of {n_boot} bootstrap replicates failed");
    }
    let dim = estimates[0].len();
    if estimates.iter().any(|e| e.len() != dim) {
        return Err(Error::InvalidArgument("replicate estimates differ in length".into()));
    }
    let count = estimates.len() as f64;
    let mut se = Vec::with_capacity(dim);
    let mut ci = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut column: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
        let mean = column.iter().sum::<f64>() / count;
        let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0);
        se.push(var.sqrt());
        column.sort_by(f64::total_cmp);
        ci.push(percentile_interval(&column, level));
    }
    Ok(BootstrapSummary {
        se,
        ci,
        level,
        n_boot: estimates.len(),
        failed,
    })
}
