use serde::Serialize;

use crate::error::{Error, Result};

/// Clamped B-spline basis on `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BSplineBasis {
    degree: usize,
    interior: Vec<f64>,
    lower: f64,
    upper: f64,
    #[serde(skip)]
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(degree: usize, lower: f64, upper: f64, interior: Vec<f64>) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::InvalidArgument(format!(
                "spline range [{lower}, {upper}] is empty"
            )));
        }
        if interior.iter().any(|k| !(*k > lower && *k < upper)) {
            return Err(Error::KnotsOutsideRange);
        }
        if interior.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("interior knots must be strictly increasing".into()));
        }
        let mut knots = vec![lower; degree + 1];
        knots.extend_from_slice(&interior);
        knots.extend(std::iter::repeat_n(upper, degree + 1));
        Ok(Self {
            degree,
            interior,
            lower,
            upper,
            knots,
        })
    }

    /// Interior knots at weighted quantiles `1/(k+1), …, k/(k+1)`; duplicate
    /// quantiles (from tied values) collapse to one knot.
    pub fn from_weighted_quantiles(degree: usize, values: &[f64], weights: &[f64], count: usize) -> Result<Self> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let lower = values[order[0]];
        let upper = values[order[order.len() - 1]];
        // Summed in sorted order so the knots do not depend on row order.
        let total: f64 = order.iter().map(|&i| weights[i]).sum();
        let mut interior = Vec::with_capacity(count);
        for level in 1..=count {
            let target = total * level as f64 / (count + 1) as f64;
            let mut acc = 0.0;
            let mut knot = upper;
            for &i in &order {
                acc += weights[i];
                if acc >= target {
                    knot = values[i];
                    break;
                }
            }
            if knot > lower && knot < upper && interior.last().is_none_or(|&k| knot > k) {
                interior.push(knot);
            }
        }
        Self::new(degree, lower, upper, interior)
    }

    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    /// Values of every basis function at `x`. Points outside the range are
    /// clamped to the boundary.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let x = x.clamp(self.lower, self.upper);
        let k = &self.knots;
        let nb = self.len();
        // Span index s with k[s] <= x < k[s+1]; the right boundary belongs to the last span.
        let span = if x >= self.upper {
            nb - 1
        } else {
            (self.degree..nb).rev().find(|&s| k[s] <= x).unwrap_or(self.degree)
        };
        // Cox–de Boor on the degree+1 nonzero functions.
        let mut local = vec![0.0; self.degree + 1];
        local[0] = 1.0;
        for d in 1..=self.degree {
            let mut saved = 0.0;
            for r in 0..d {
                let left = k[span + r + 1 - d];
                let right = k[span + r + 1];
                let temp = local[r] / (right - left);
                local[r] = saved + (right - x) * temp;
                saved = (x - left) * temp;
            }
            local[d] = saved;
        }
        let mut out = vec![0.0; nb];
        for (r, v) in local.into_iter().enumerate() {
            out[span - self.degree + r] = v;
        }
        out
    }
}
