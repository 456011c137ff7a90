//! Gaussian-kernel ridge regression with a median-heuristic bandwidth and a
//! leave-one-out choice of the ridge penalty.
//!
//! The Gram matrix is eigendecomposed once per input set (`K = U Λ U'`), after
//! which every target vector and every ridge value costs two `O(n²)` products:
//!
//! ```text
//! ŷ = ȳ + U diag(λ / (λ + nρ)) U' (y − ȳ)
//! ```
//!
//! Targets are centered, so the smoother is `S = J + H (I − J)` with
//! `J = 11'/n`, and the exact leave-one-out residual is `(y_i − ŷ_i) / (1 − S_ii)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ridge values searched by leave-one-out.
pub const RIDGE_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Debug, Clone)]
pub struct KernelRidgeModel {
    z: Arc<DMatrix<f64>>,
    dual: DVector<f64>,
    intercept: f64,
    bandwidth: f64,
    ridge: f64,
    fitted: DVector<f64>,
    loo_mse: f64,
}

impl KernelRidgeModel {
    pub fn dual(&self) -> &DVector<f64> {
        &self.dual
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// In-sample predictions at the training inputs.
    pub fn fitted(&self) -> &DVector<f64> {
        &self.fitted
    }

    pub fn loo_mse(&self) -> f64 {
        self.loo_mse
    }

    pub fn predict(&self, znew: &DMatrix<f64>) -> DVector<f64> {
        let scale = -0.5 / (self.bandwidth * self.bandwidth);
        DVector::from_fn(znew.nrows(), |i, _| {
            let row = znew.row(i);
            let mut acc = self.intercept;
            for (j, a) in self.dual.iter().enumerate() {
                let d2 = (row - self.z.row(j)).norm_squared();
                acc += a * (scale * d2).exp();
            }
            acc
        })
    }
}

/// Eigendecomposed Gram matrix for one set of training inputs.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    z: Arc<DMatrix<f64>>,
    bandwidth: f64,
    degenerate: bool,
    vectors: DMatrix<f64>,
    values: DVector<f64>,
    ut_ones: DVector<f64>,
}

impl KernelBasis {
    /// Uses the median pairwise distance as bandwidth; falls back to 1 when
    /// every row of `z` is identical.
    pub fn new(z: &DMatrix<f64>) -> Result<Self> {
        check_inputs(z)?;
        let sq = squared_distances(z);
        let median = median_pairwise_distance(&sq);
        let degenerate = !(median > 0.0);
        if degenerate {
            log::warn!("kernel inputs are all identical; using bandwidth 1");
        }
        let bandwidth = if degenerate { 1.0 } else { median };
        Ok(Self::from_squared_distances(z, &sq, bandwidth, degenerate))
    }

    pub fn with_bandwidth(z: &DMatrix<f64>, bandwidth: f64) -> Result<Self> {
        check_inputs(z)?;
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth {bandwidth} must be positive")));
        }
        let sq = squared_distances(z);
        Ok(Self::from_squared_distances(z, &sq, bandwidth, false))
    }

    fn from_squared_distances(z: &DMatrix<f64>, sq: &DMatrix<f64>, bandwidth: f64, degenerate: bool) -> Self {
        let scale = -0.5 / (bandwidth * bandwidth);
        let gram = sq.map(|d| (scale * d).exp());
        let eig = gram.symmetric_eigen();
        let values = eig.eigenvalues.map(|v| v.max(0.0));
        let n = z.nrows();
        let ut_ones = eig.eigenvectors.tr_mul(&DVector::from_element(n, 1.0));
        Self {
            z: Arc::new(z.clone()),
            bandwidth,
            degenerate,
            vectors: eig.eigenvectors,
            values,
            ut_ones,
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// True when the median heuristic collapsed and the fallback bandwidth was used.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    /// Fits `targets`, choosing the ridge penalty from [`RIDGE_GRID`] by exact
    /// leave-one-out error. Ties keep the smaller penalty.
    pub fn fit(&self, targets: &DVector<f64>) -> KernelRidgeModel {
        let (mean, coords) = self.project(targets);
        let mut best: Option<(f64, f64, DVector<f64>)> = None;
        for &ridge in &RIDGE_GRID {
            let shrink = self.shrinkage(ridge);
            let fitted = self.smooth(mean, &coords, &shrink);
            let diag = self.smoother_diagonal(&shrink);
            let loo = targets
                .iter()
                .zip(fitted.iter())
                .zip(diag.iter())
                .map(|((y, f), s)| {
                    let r = (y - f) / (1.0 - s).max(1e-12);
                    r * r
                })
                .sum::<f64>()
                / self.n() as f64;
            if best.as_ref().is_none_or(|(b, _, _)| loo < *b) {
                best = Some((loo, ridge, fitted));
            }
        }
        let (loo, ridge, fitted) = best.expect("ridge grid is nonempty");
        self.assemble(mean, &coords, ridge, fitted, loo)
    }

    /// Fits with a fixed ridge penalty.
    pub fn fit_with_ridge(&self, targets: &DVector<f64>, ridge: f64) -> KernelRidgeModel {
        let (mean, coords) = self.project(targets);
        let shrink = self.shrinkage(ridge);
        let fitted = self.smooth(mean, &coords, &shrink);
        self.assemble(mean, &coords, ridge, fitted, f64::NAN)
    }

    fn project(&self, targets: &DVector<f64>) -> (f64, DVector<f64>) {
        assert_eq!(targets.len(), self.n(), "target length must match training rows");
        let mean = targets.mean();
        let centered = targets.map(|v| v - mean);
        (mean, self.vectors.tr_mul(&centered))
    }

    fn shrinkage(&self, ridge: f64) -> DVector<f64> {
        let nr = self.n() as f64 * ridge;
        self.values.map(|l| l / (l + nr))
    }

    fn smooth(&self, mean: f64, coords: &DVector<f64>, shrink: &DVector<f64>) -> DVector<f64> {
        let mut fitted = &self.vectors * coords.component_mul(shrink);
        fitted.add_scalar_mut(mean);
        fitted
    }

    /// Diagonal of `J + H (I − J)`.
    fn smoother_diagonal(&self, shrink: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let h_ones = &self.vectors * self.ut_ones.component_mul(shrink);
        DVector::from_fn(n, |i, _| {
            let hii: f64 = (0..n)
                .map(|k| {
                    let u = self.vectors[(i, k)];
                    u * u * shrink[k]
                })
                .sum();
            1.0 / n as f64 + hii - h_ones[i] / n as f64
        })
    }

    fn assemble(
        &self,
        mean: f64,
        coords: &DVector<f64>,
        ridge: f64,
        fitted: DVector<f64>,
        loo_mse: f64,
    ) -> KernelRidgeModel {
        let nr = self.n() as f64 * ridge;
        let inv = self.values.map(|l| 1.0 / (l + nr));
        let dual = &self.vectors * coords.component_mul(&inv);
        KernelRidgeModel {
            z: Arc::clone(&self.z),
            dual,
            intercept: mean,
            bandwidth: self.bandwidth,
            ridge,
            fitted,
            loo_mse,
        }
    }
}

/// One-shot fit: median-heuristic bandwidth and leave-one-out ridge.
pub fn krr_fit(z: &DMatrix<f64>, targets: &DVector<f64>) -> Result<KernelRidgeModel> {
    if targets.len() != z.nrows() {
        return Err(Error::InvalidArgument("targets and inputs differ in length".into()));
    }
    Ok(KernelBasis::new(z)?.fit(targets))
}

fn check_inputs(z: &DMatrix<f64>) -> Result<()> {
    if z.nrows() < 2 {
        return Err(Error::InvalidArgument("kernel ridge regression needs n >= 2".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite kernel input".into()));
    }
    Ok(())
}

fn squared_distances(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    let inner = z * z.transpose();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (inner[(i, i)] + inner[(j, j)] - 2.0 * inner[(i, j)]).max(0.0)
        }
    })
}

fn median_pairwise_distance(sq: &DMatrix<f64>) -> f64 {
    let n = sq.nrows();
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for j in 0..n {
        for i in 0..j {
            d.push(sq[(i, j)].sqrt());
        }
    }
    let m = d.len();
    let (_, upper, _) = d.select_nth_unstable_by(m / 2, f64::total_cmp);
    let upper = *upper;
    if m % 2 == 1 {
        upper
    } else {
        let lower = d[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_inputs(seed: u64, n: usize, d: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn constant_targets_are_reproduced() {
        let z = random_inputs(1, 60, 3);
        let y = DVector::from_element(60, 2.5);
        let basis = KernelBasis::new(&z).unwrap();
        let model = basis.fit_with_ridge(&y, 1e-4);
        assert!(model.fitted().iter().all(|f| (f - 2.5).abs() <= 1e-6));
        let pred = model.predict(&random_inputs(2, 5, 3));
        assert!(pred.iter().all(|f| (f - 2.5).abs() <= 1e-6));
    }

    #[test]
    fn noiseless_linear_targets_fit_closely() {
        let z = random_inputs(3, 100, 2);
        let y = DVector::from_fn(100, |i, _| 1.5 * z[(i, 0)] - 0.7 * z[(i, 1)] + 0.3);
        let model = krr_fit(&z, &y).unwrap();
        let mean = y.mean();
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
        let mse = (model.fitted() - &y).norm_squared() / 100.0;
        assert!(mse <= 0.01 * var, "mse {mse} var {var}");
    }

    #[test]
    fn predictions_are_linear_in_targets() {
        let z = random_inputs(4, 40, 2);
        let y = DVector::from_fn(40, |i, _| z[(i, 0)].sin() + z[(i, 1)]);
        let basis = KernelBasis::new(&z).unwrap();
        for ridge in RIDGE_GRID {
            let a = -3.7;
            let base = basis.fit_with_ridge(&y, ridge);
            let scaled = basis.fit_with_ridge(&(&y * a), ridge);
            assert!((scaled.fitted() - base.fitted() * a).amax() < 1e-10);
        }
    }

    #[test]
    fn loo_matches_dense_smoother() {
        let n = 25;
        let z = random_inputs(5, n, 2);
        let y = DVector::from_fn(n, |i, _| z[(i, 0)] * z[(i, 1)] + 0.1 * i as f64);
        let basis = KernelBasis::new(&z).unwrap();
        let model = basis.fit(&y);
        // Build S = J + K (K + nρI)^{-1} (I − J) densely and apply the LOO identity.
        let h = basis.bandwidth();
        let k = DMatrix::from_fn(n, n, |i, j| {
            let d2 = (z.row(i) - z.row(j)).norm_squared();
            (-d2 / (2.0 * h * h)).exp()
        });
        let j = DMatrix::from_element(n, n, 1.0 / n as f64);
        let mut best = (f64::INFINITY, 0.0);
        for ridge in RIDGE_GRID {
            let reg = &k + DMatrix::identity(n, n) * (n as f64 * ridge);
            let hat = &k * reg.try_inverse().unwrap();
            let s = &j + hat * (DMatrix::identity(n, n) - &j);
            let fitted = &s * &y;
            let loo = (0..n).map(|i| ((y[i] - fitted[i]) / (1.0 - s[(i, i)])).powi(2)).sum::<f64>() / n as f64;
            if ridge == model.ridge() {
                assert!((fitted - model.fitted()).amax() < 1e-8);
            }
            if loo < best.0 {
                best = (loo, ridge);
            }
        }
        assert_eq!(best.1, model.ridge());
        assert!((best.0 - model.loo_mse()).abs() < 1e-8 * (1.0 + best.0));
    }

    #[test]
    fn identical_rows_fall_back_to_unit_bandwidth() {
        let z = DMatrix::from_element(10, 2, 1.0);
        let basis = KernelBasis::new(&z).unwrap();
        assert!(basis.is_degenerate());
        assert_eq!(basis.bandwidth(), 1.0);
    }

    #[test]
    fn median_of_even_count() {
        // Three points on a line: distances 1, 2, 3 (odd count) -> 2.
        let z = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 3.0]);
        assert_eq!(median_pairwise_distance(&squared_distances(&z)), 2.0);
        // Four points: distances 1,1,1,2,2,3 -> (1+2)/2.
        let z = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(median_pairwise_distance(&squared_distances(&z)), 1.5);
    }
}
