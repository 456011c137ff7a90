//! Weighted regression of the outcome on the treatments.
//!
//! With balancing weights `w`, minimizing `Σ w_i (Y_i − s(T_i; θ))²` targets
//! the causal effect function `E[Y(t)] = s(t; θ)`. Parametric designs (linear,
//! quadratic) and an additive cubic B-spline design with optional pairwise
//! tensor-product interactions are available.

mod bootstrap;
mod bspline;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::weighted_least_squares;

pub use bootstrap::{bootstrap_ci, percentile_interval, BootstrapSummary};
pub use bspline::BSplineBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectKind {
    Parametric,
    Spline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub degree: usize,
    /// Interior knots per treatment for the additive terms.
    pub interior_knots: usize,
    pub interactions: bool,
    /// Interior knots per treatment inside each tensor-product block.
    pub interaction_knots: usize,
}

impl Default for SplineSpec {
    fn default() -> Self {
        Self {
            degree: 3,
            interior_knots: 5,
            interactions: false,
            interaction_knots: 1,
        }
    }
}

/// Regression design as a function of the treatment vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Design {
    /// `(1, t_1, …, t_q)`.
    Linear { q: usize },
    /// Linear terms plus `t_j²` and `t_j t_k` (`j < k`).
    Quadratic { q: usize },
    Spline {
        additive: Vec<BSplineBasis>,
        /// `((j, k), basis_j, basis_k)` for each interacting pair.
        interactions: Vec<((usize, usize), BSplineBasis, BSplineBasis)>,
    },
}

impl Design {
    pub fn matrix(&self, t: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = (0..t.nrows())
            .map(|i| self.row(&t.row(i).iter().copied().collect::<Vec<_>>()))
            .collect();
        let cols = rows.first().map_or(0, Vec::len);
        DMatrix::from_fn(t.nrows(), cols, |i, j| rows[i][j])
    }

    fn row(&self, t: &[f64]) -> Vec<f64> {
        let mut out = vec![1.0];
        match self {
            Design::Linear { .. } => out.extend_from_slice(t),
            Design::Quadratic { .. } => {
                out.extend_from_slice(t);
                out.extend(t.iter().map(|v| v * v));
                for j in 0..t.len() {
                    for k in j + 1..t.len() {
                        out.push(t[j] * t[k]);
                    }
                }
            }
            Design::Spline { additive, interactions } => {
                // Bases form a partition of unity; the first function of each is
                // absorbed by the intercept.
                for (j, basis) in additive.iter().enumerate() {
                    out.extend_from_slice(&basis.eval(t[j])[1..]);
                }
                for ((j, k), bj, bk) in interactions {
                    let vj = bj.eval(t[*j]);
                    let vk = bk.eval(t[*k]);
                    for a in &vj[1..] {
                        out.extend(vk[1..].iter().map(|b| a * b));
                    }
                }
            }
        }
        out
    }

    /// Labels of the design columns.
    pub fn column_names(&self, treatment_names: &[String]) -> Vec<String> {
        let mut names = vec!["intercept".to_owned()];
        match self {
            Design::Linear { .. } => names.extend(treatment_names.iter().cloned()),
            Design::Quadratic { .. } => {
                names.extend(treatment_names.iter().cloned());
                names.extend(treatment_names.iter().map(|t| format!("{t}^2")));
                for j in 0..treatment_names.len() {
                    for k in j + 1..treatment_names.len() {
                        names.push(format!("{}*{}", treatment_names[j], treatment_names[k]));
                    }
                }
            }
            Design::Spline { additive, interactions } => {
                for (j, basis) in additive.iter().enumerate() {
                    names.extend((1..basis.len()).map(|b| format!("bs({})[{b}]", treatment_names[j])));
                }
                for ((j, k), bj, bk) in interactions {
                    for a in 1..bj.len() {
                        names.extend((1..bk.len()).map(|b| {
                            format!("bs({})[{a}]*bs({})[{b}]", treatment_names[*j], treatment_names[*k])
                        }));
                    }
                }
            }
        }
        names
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectEstimate {
    pub kind: EffectKind,
    #[serde(serialize_with = "crate::report::serialize_vector")]
    pub theta: DVector<f64>,
    pub design: Design,
    pub se: Option<Vec<f64>>,
    pub ci: Option<Vec<(f64, f64)>>,
    pub n_boot: usize,
}

impl EffectEstimate {
    /// Estimated effect function at each row of `t`.
    pub fn predict(&self, t: &DMatrix<f64>) -> DVector<f64> {
        self.design.matrix(t) * &self.theta
    }

    pub fn with_bootstrap(mut self, summary: &BootstrapSummary) -> Self {
        self.se = Some(summary.se.clone());
        self.ci = Some(summary.ci.clone());
        self.n_boot = summary.n_boot;
        self
    }
}

fn check_weights(w: &DVector<f64>, n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::InvalidArgument("one weight per row required".into()));
    }
    // Entropy weights are positive in exact arithmetic but can underflow to zero.
    if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !(w.sum() > 0.0) {
        return Err(Error::InvalidArgument("weights must be nonnegative with a positive sum".into()));
    }
    Ok(())
}

fn fit_design(design: Design, kind: EffectKind, t: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Result<EffectEstimate> {
    check_weights(w, t.nrows())?;
    if y.len() != t.nrows() {
        return Err(Error::InvalidArgument("outcome length mismatch".into()));
    }
    let theta = weighted_least_squares(&design.matrix(t), y, w)?;
    Ok(EffectEstimate {
        kind,
        theta,
        design,
        se: None,
        ci: None,
        n_boot: 0,
    })
}

/// Weighted least squares on a linear (`quadratic = false`) or full quadratic design.
pub fn weighted_parametric_fit(t: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, quadratic: bool) -> Result<EffectEstimate> {
    let q = t.ncols();
    let design = if quadratic { Design::Quadratic { q } } else { Design::Linear { q } };
    fit_design(design, EffectKind::Parametric, t, y, w)
}

/// Weighted least squares on additive cubic B-splines, knots at weighted
/// quantiles of each treatment, plus optional pairwise tensor blocks.
pub fn weighted_spline_fit(t: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, spec: &SplineSpec) -> Result<EffectEstimate> {
    check_weights(w, t.nrows())?;
    let weights: Vec<f64> = w.iter().copied().collect();
    let column = |j: usize| -> Vec<f64> { t.column(j).iter().copied().collect() };
    let additive = (0..t.ncols())
        .map(|j| BSplineBasis::from_weighted_quantiles(spec.degree, &column(j), &weights, spec.interior_knots))
        .collect::<Result<Vec<_>>>()?;
    let mut interactions = Vec::new();
    if spec.interactions {
        let marginal = (0..t.ncols())
            .map(|j| BSplineBasis::from_weighted_quantiles(spec.degree, &column(j), &weights, spec.interaction_knots))
            .collect::<Result<Vec<_>>>()?;
        for j in 0..t.ncols() {
            for k in j + 1..t.ncols() {
                interactions.push(((j, k), marginal[j].clone(), marginal[k].clone()));
            }
        }
    }
    fit_design(Design::Spline { additive, interactions }, EffectKind::Spline, t, y, w)
}

/// Spline fit on caller-supplied interior knots (one list per treatment).
pub fn weighted_spline_fit_with_knots(
    t: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    degree: usize,
    knots: &[Vec<f64>],
) -> Result<EffectEstimate> {
    if knots.len() != t.ncols() {
        return Err(Error::InvalidArgument("one knot list per treatment required".into()));
    }
    let additive = knots
        .iter()
        .enumerate()
        .map(|(j, k)| {
            let col = t.column(j);
            BSplineBasis::new(degree, col.min(), col.max(), k.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    fit_design(Design::Spline { additive, interactions: Vec::new() }, EffectKind::Spline, t, y, w)
}

/// Root-mean-square difference between the fitted and the true effect at the rows of `t`.
pub fn effect_rmse(fit: &EffectEstimate, truth: impl Fn(&[f64]) -> f64, t: &DMatrix<f64>) -> f64 {
    let pred = fit.predict(t);
    let n = t.nrows();
    let sse: f64 = (0..n)
        .map(|i| {
            let row: Vec<f64> = t.row(i).iter().copied().collect();
            (pred[i] - truth(&row)).powi(2)
        })
        .sum();
    (sse / n as f64).sqrt()
}
