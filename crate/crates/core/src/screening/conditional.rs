use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::top_k;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::krr::KernelBasis;

#[derive(Debug, Clone, Serialize)]
pub struct CondScreenResult {
    /// Signed GCM statistic of every covariate.
    pub gcm: Vec<f64>,
    /// Selected covariate indices (0-based), largest |GCM| first.
    pub selected: Vec<usize>,
    pub k: usize,
}

impl CondScreenResult {
    pub fn abs_gcm(&self) -> Vec<f64> {
        self.gcm.iter().map(|g| g.abs()).collect()
    }
}

/// `⌊n / ln n⌋`, at least 1.
pub fn default_k(n: usize) -> usize {
    ((n as f64 / (n as f64).ln()).floor() as usize).max(1)
}

/// Mean residual product divided by its (population) standard deviation.
pub fn gcm_from_residuals(rx: &DVector<f64>, ry: &DVector<f64>) -> Result<f64> {
    let n = rx.len() as f64;
    let prod = rx.component_mul(ry);
    let mean = prod.sum() / n;
    let second = prod.norm_squared() / n;
    let var = second - mean * mean;
    if !(var > 1e-14) {
        return Err(Error::ZeroResidualVariance);
    }
    Ok(mean / var.sqrt())
}

/// GCM of `x` and `y` given `z`, with both regressions fitted by kernel ridge.
pub fn gcm_statistic(x: &DVector<f64>, y: &DVector<f64>, z: &DMatrix<f64>) -> Result<f64> {
    if x.len() < 3 || x.len() != y.len() || x.len() != z.nrows() {
        return Err(Error::InvalidArgument(
            "GCM needs n >= 3 and matching lengths".into(),
        ));
    }
    let basis = KernelBasis::new(z)?;
    gcm_with_basis(&basis, x, &residual(&basis, y))
}

fn residual(basis: &KernelBasis, target: &DVector<f64>) -> DVector<f64> {
    target - basis.fit(target).fitted()
}

fn gcm_with_basis(basis: &KernelBasis, x: &DVector<f64>, ry: &DVector<f64>) -> Result<f64> {
    gcm_from_residuals(&residual(basis, x), ry)
}

/// Conditioning inputs `[T, X_cols]`.
fn conditioning_set(data: &Dataset, cols: &[usize]) -> DMatrix<f64> {
    let (n, q) = (data.n(), data.q());
    DMatrix::from_fn(n, q + cols.len(), |i, j| {
        if j < q {
            data.t()[(i, j)]
        } else {
            data.x()[(i, cols[j - q])]
        }
    })
}

/// Scores every covariate by |GCM(X_k, Y | T, X_{m_c \ k})| and keeps the top `k`.
///
/// Covariates outside `m_c` share one conditioning set, so that kernel basis
/// and the outcome residuals are computed once. Members of `m_c` drop
/// themselves from the conditioning set and get their own fits.
pub fn screen_conditional(data: &Dataset, m_c: &[usize], k: usize) -> Result<CondScreenResult> {
    let p = data.p();
    if k == 0 || k > p {
        return Err(Error::InvalidArgument(format!("K = {k} must lie in 1..={p}")));
    }
    if data.n() < 3 {
        return Err(Error::InvalidArgument("GCM needs n >= 3".into()));
    }
    if let Some(&bad) = m_c.iter().find(|&&j| j >= p) {
        return Err(Error::InvalidArgument(format!("m_c index {bad} out of range")));
    }
    let column = |j: usize| data.x().column(j).into_owned();

    let shared = KernelBasis::new(&conditioning_set(data, m_c))?;
    let shared_ry = residual(&shared, data.y());

    let outside: Vec<usize> = (0..p).filter(|j| !m_c.contains(j)).collect();
    let mut gcm = vec![0.0; p];
    let outside_stats = outside
        .par_iter()
        .map(|&j| gcm_with_basis(&shared, &column(j), &shared_ry))
        .collect::<Result<Vec<f64>>>()?;
    for (&j, g) in outside.iter().zip(outside_stats) {
        gcm[j] = g;
    }

    let inside_stats = m_c
        .par_iter()
        .map(|&j| {
            let others: Vec<usize> = m_c.iter().copied().filter(|&c| c != j).collect();
            let basis = KernelBasis::new(&conditioning_set(data, &others))?;
            let ry = residual(&basis, data.y());
            gcm_with_basis(&basis, &column(j), &ry)
        })
        .collect::<Result<Vec<f64>>>()?;
    for (&j, g) in m_c.iter().zip(inside_stats) {
        gcm[j] = g;
    }

    let abs: Vec<f64> = gcm.iter().map(|g| g.abs()).collect();
    let selected = top_k(&abs, k);
    Ok(CondScreenResult { gcm, selected, k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn default_k_values() {
        assert_eq!(default_k(300), 52);
        assert_eq!(default_k(500), 80);
    }

    #[test]
    fn hand_computed_residual_statistic() {
        let rx = DVector::from_vec(vec![1.0, -1.0, 2.0]);
        let ry = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        // R = (1, -1, 2): mean 2/3, mean square 2, variance 2 - 4/9 = 14/9.
        let expect = (2.0 / 3.0) / (14.0_f64 / 9.0).sqrt();
        assert!((gcm_from_residuals(&rx, &ry).unwrap() - expect).abs() < 1e-15);
        let zero = DVector::zeros(3);
        assert!(matches!(gcm_from_residuals(&zero, &ry), Err(Error::ZeroResidualVariance)));
    }

    #[test]
    fn sign_antisymmetry_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 120;
        let z = DMatrix::<f64>::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let shared = normals(&mut rng, n);
        let x = DVector::from_fn(n, |i, _| z[(i, 0)] + shared[i]);
        let y = DVector::from_fn(n, |i, _| z[(i, 1)].sin() + shared[i] + 0.5 * z[(i, 0)]);
        let base = gcm_statistic(&x, &y, &z).unwrap();
        let flipped = gcm_statistic(&x, &(-&y), &z).unwrap();
        assert!((base + flipped).abs() < 1e-10);
        for (a, b) in [(2.5, 0.3), (-4.0, 1.7), (0.01, -9.0)] {
            let g = gcm_statistic(&(&x * a), &(&y * b), &z).unwrap();
            assert!((g - (a * b).signum() * base).abs() < 1e-10, "{a} {b}");
        }
    }

    #[test]
    fn shared_noise_gives_large_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 500;
        let z = DMatrix::<f64>::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let noise = normals(&mut rng, n);
        let x = DVector::from_fn(n, |i, _| z[(i, 0)].tanh() + noise[i]);
        let g = gcm_statistic(&x, &x, &z).unwrap();
        assert!(g >= 0.5, "{g}");
    }

    #[test]
    fn ranks_and_selects() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 150;
        let t = DMatrix::from_fn(n, 1, |_, _| StandardNormal.sample(&mut rng));
        let x = DMatrix::from_fn(n, 4, |_, _| StandardNormal.sample(&mut rng));
        let eps = normals(&mut rng, n);
        let y = DVector::from_fn(n, |i, _| t[(i, 0)] + 2.0 * x[(i, 0)] + 1.2 * x[(i, 2)] + eps[i]);
        let data = Dataset::from_matrices(x, t, y).unwrap().standardize().unwrap();
        let res = screen_conditional(&data, &[0], 2).unwrap();
        assert_eq!(res.selected, vec![0, 2]);
        let all = screen_conditional(&data, &[0], 4).unwrap();
        let mut sorted = all.selected.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert!(screen_conditional(&data, &[0], 5).is_err());
    }
}
