use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::top_k;
use crate::data::{pearson, Dataset};
use crate::error::{Error, Result};
use crate::linalg::condition_number_sym;

const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Serialize)]
pub struct IndepScreenResult {
    /// Squared multi-treatment canonical correlation of each covariate.
    pub stats: Vec<f64>,
    /// Selected covariate indices (0-based), strongest first.
    pub selected: Vec<usize>,
    pub d: usize,
}

/// Inverse of the treatment correlation matrix, computed once per dataset.
#[derive(Debug, Clone)]
pub struct TreatmentCorrelation {
    columns: Vec<Vec<f64>>,
    inverse: DMatrix<f64>,
}

impl TreatmentCorrelation {
    pub fn new(t: &DMatrix<f64>) -> Result<Self> {
        let q = t.ncols();
        let columns: Vec<Vec<f64>> = t.column_iter().map(|c| c.iter().copied().collect()).collect();
        let psi = DMatrix::from_fn(q, q, |a, b| {
            if a == b {
                1.0
            } else {
                pearson(&columns[a], &columns[b])
            }
        });
        let condition = condition_number_sym(&psi);
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularTreatmentCorrelation { condition });
        }
        let inverse = psi
            .cholesky()
            .ok_or(Error::SingularTreatmentCorrelation { condition })?
            .inverse();
        Ok(Self { columns, inverse })
    }

    /// `r' Ψ⁻¹ r`, with `r` the Pearson correlations between `x` and each treatment.
    pub fn stat(&self, x: &[f64]) -> f64 {
        let r = DVector::from_iterator(
            self.columns.len(),
            self.columns.iter().map(|c| pearson(x, c)),
        );
        let value = (r.transpose() * &self.inverse * &r)[(0, 0)];
        // Constant covariates have undefined correlation; treat as unrelated.
        if value.is_nan() {
            0.0
        } else {
            value.max(0.0)
        }
    }
}

/// Squared canonical correlation between one covariate and the treatment block.
pub fn canonical_corr_stat(x: &[f64], t: &DMatrix<f64>) -> Result<f64> {
    Ok(TreatmentCorrelation::new(t)?.stat(x))
}

/// Ranks every covariate by its canonical correlation with `T` and keeps the top `d`.
pub fn screen_independence(data: &Dataset, d: usize) -> Result<IndepScreenResult> {
    if d == 0 || d > data.p() {
        return Err(Error::InvalidArgument(format!(
            "screening size D = {d} must lie in 1..={}",
            data.p()
        )));
    }
    let corr = TreatmentCorrelation::new(data.t())?;
    let stats: Vec<f64> = (0..data.p())
        .into_par_iter()
        .map(|k| corr.stat(data.x().column(k).as_slice()))
        .collect();
    let selected = top_k(&stats, d);
    Ok(IndepScreenResult { stats, selected, d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn correlated_treatments(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = normals(rng, n);
        let b = normals(rng, n);
        DMatrix::from_fn(n, 2, |i, j| if j == 0 { a[i] } else { 0.6 * a[i] + 0.8 * b[i] })
    }

    /// Maximizes corr(x, T b)² over unit directions b = (cos θ, sin θ).
    fn direction_grid_oracle(x: &[f64], t: &DMatrix<f64>) -> f64 {
        let n = x.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
        let cov = |u: &[f64], v: &[f64]| {
            let (mu, mv) = (mean(u), mean(v));
            u.iter().zip(v).map(|(a, b)| (a - mu) * (b - mv)).sum::<f64>() / n
        };
        let t0: Vec<f64> = t.column(0).iter().copied().collect();
        let t1: Vec<f64> = t.column(1).iter().copied().collect();
        let (c0, c1) = (cov(x, &t0), cov(x, &t1));
        let (s00, s01, s11, sxx) = (cov(&t0, &t0), cov(&t0, &t1), cov(&t1, &t1), cov(x, x));
        let steps = 400_000;
        (0..steps)
            .map(|s| {
                let th = std::f64::consts::PI * s as f64 / steps as f64;
                let (b0, b1) = (th.cos(), th.sin());
                let num = c0 * b0 + c1 * b1;
                let den = sxx * (b0 * b0 * s00 + 2.0 * b0 * b1 * s01 + b1 * b1 * s11);
                num * num / den
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_treatment_is_squared_pearson() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normals(&mut rng, 50);
        let t = normals(&mut rng, 50);
        let r = pearson(&x, &t);
        let stat = canonical_corr_stat(&x, &DMatrix::from_column_slice(50, 1, &t)).unwrap();
        assert!((stat - r * r).abs() < 1e-12);
    }

    #[test]
    fn covariate_equal_to_a_treatment_has_unit_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = correlated_treatments(&mut rng, 80);
        let x: Vec<f64> = t.column(0).iter().copied().collect();
        let stat = canonical_corr_stat(&x, &t).unwrap();
        assert!((stat - 1.0).abs() < 1e-10);
    }

    #[test]
    fn matches_direction_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = correlated_treatments(&mut rng, 500);
        for _ in 0..3 {
            let x = normals(&mut rng, 500);
            let stat = canonical_corr_stat(&x, &t).unwrap();
            let oracle = direction_grid_oracle(&x, &t);
            assert!((stat - oracle).abs() < 1e-6, "{stat} vs {oracle}");
        }
        // A covariate that loads on both treatments.
        let noise = normals(&mut rng, 500);
        let x: Vec<f64> = (0..500).map(|i| t[(i, 0)] - 2.0 * t[(i, 1)] + 3.0 * noise[i]).collect();
        let stat = canonical_corr_stat(&x, &t).unwrap();
        assert!((stat - direction_grid_oracle(&x, &t)).abs() < 1e-6);
    }

    #[test]
    fn singular_treatments_are_reported() {
        let t = DMatrix::from_fn(10, 2, |i, _| i as f64);
        let x: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        assert!(matches!(
            canonical_corr_stat(&x, &t),
            Err(Error::SingularTreatmentCorrelation { .. })
        ));
    }

    #[test]
    fn selects_top_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200;
        let t = correlated_treatments(&mut rng, n);
        let strong: Vec<f64> = normals(&mut rng, n).iter().enumerate().map(|(i, e)| t[(i, 0)] + 0.3 * e).collect();
        let medium: Vec<f64> = normals(&mut rng, n).iter().enumerate().map(|(i, e)| t[(i, 1)] + 1.5 * e).collect();
        let weak = normals(&mut rng, n);
        let x = DMatrix::from_fn(n, 3, |i, j| [&strong, &weak, &medium][j][i]);
        let data = Dataset::from_matrices(x, t, DVector::zeros(n)).unwrap();
        let res = screen_independence(&data, 2).unwrap();
        assert_eq!(res.selected, vec![0, 2]);
        let all = screen_independence(&data, 3).unwrap();
        let mut sorted = all.selected.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert!(screen_independence(&data, 4).is_err());
        assert!(screen_independence(&data, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn affine_invariant_and_bounded(seed in 0u64..10_000, a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], b in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = correlated_treatments(&mut rng, 60);
            let e = normals(&mut rng, 60);
            let x: Vec<f64> = (0..60).map(|i| t[(i, 1)] * 0.5 + e[i]).collect();
            let shifted: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let s0 = canonical_corr_stat(&x, &t).unwrap();
            let s1 = canonical_corr_stat(&shifted, &t).unwrap();
            prop_assert!((s0 - s1).abs() < 1e-10);
            prop_assert!((0.0..=1.0 + 1e-8).contains(&s0));
        }
    }
}
