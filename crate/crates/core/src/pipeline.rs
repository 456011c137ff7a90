//! End-to-end analysis: screening, selection, balancing and effect estimation.
//!
//! The stages are exposed individually so the simulation harness can share
//! screening between methods, and so the bootstrap can re-run only the
//! balancing and regression stages.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::balance::{moment_matrix, solve_weights, BalanceOptions, BalanceWeights};
use crate::config::{EffectModel, PipelineConfig, ResolvedConfig};
use crate::data::{standardize_columns, Dataset};
use crate::effect::{bootstrap_ci, weighted_parametric_fit, weighted_spline_fit, BootstrapSummary, EffectEstimate};
use crate::error::{Block, Error, Result};
use crate::pal::{palut_baseline, select_lambda, GridPoint, PalConfig, PalFit, PalProblem};
use crate::report::SCHEMA_VERSION;
use crate::screening::{screen_conditional, screen_independence, CondScreenResult, IndepScreenResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Standardize,
    IndependenceScreening,
    ConditionalScreening,
    Selection,
    Balancing,
    EffectFit,
    Bootstrap,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Standardize => "standardize",
            Stage::IndependenceScreening => "independence screening",
            Stage::ConditionalScreening => "conditional screening",
            Stage::Selection => "covariate selection",
            Stage::Balancing => "balancing",
            Stage::EffectFit => "effect fit",
            Stage::Bootstrap => "bootstrap",
        })
    }
}

/// An error tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Covariate selector applied to the screened set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Joint prior adaptive lasso over all treatments.
    Dspal,
    /// Per-treatment fits, selections unioned.
    Palut,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dspal => "dspal",
            Method::Palut => "palut",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dspal" => Ok(Method::Dspal),
            "palut" => Ok(Method::Palut),
            _ => Err(Error::InvalidArgument(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Screening {
    pub independence: IndepScreenResult,
    pub conditional: CondScreenResult,
}

/// Runs both screens on standardized data.
pub fn screen(std: &Dataset, d: usize, k: usize) -> StageResult<Screening> {
    let independence = screen_independence(std, d).at(Stage::IndependenceScreening)?;
    let conditional = screen_conditional(std, &independence.selected, k).at(Stage::ConditionalScreening)?;
    Ok(Screening { independence, conditional })
}

#[derive(Debug, Clone, Serialize)]
pub struct Selection {
    pub method: Method,
    /// Covariates that entered the lasso (the conditional-screening set), ascending.
    pub candidates: Vec<usize>,
    /// Selected covariates as indices into the full covariate set, ascending.
    pub selected: Vec<usize>,
    /// One fit for DSPAL; one per treatment for PALUT. Rows follow `candidates`.
    pub fits: Vec<PalFit>,
    /// BIC path of the joint fit (empty for PALUT).
    pub path: Vec<GridPoint>,
}

/// Fits the selector on the screened covariates of standardized data.
pub fn select(std: &Dataset, screening: &Screening, method: Method, pal: &PalConfig) -> StageResult<Selection> {
    let mut candidates = screening.conditional.selected.clone();
    candidates.sort_unstable();
    let gcm_abs = screening.conditional.abs_gcm();
    let gcm: Vec<f64> = candidates.iter().map(|&j| gcm_abs[j]).collect();
    let problem = PalProblem::new(&std.x().select_columns(&candidates), std.t()).at(Stage::Selection)?;
    let (rows, fits, path) = match method {
        Method::Dspal => {
            let sel = select_lambda(&problem, &gcm, pal).at(Stage::Selection)?;
            (sel.fit.selected_rows.clone(), vec![sel.fit], sel.path)
        }
        Method::Palut => {
            let res = palut_baseline(&problem, &gcm, pal).at(Stage::Selection)?;
            (res.selected, res.fits, Vec::new())
        }
    };
    let mut selected: Vec<usize> = rows.iter().map(|&r| candidates[r]).collect();
    selected.sort_unstable();
    Ok(Selection {
        method,
        candidates,
        selected,
        fits,
        path,
    })
}

/// Entropy-balancing weights for the `selected` covariates of raw data.
///
/// Treatments and selected covariates are standardized on the sample at
/// hand. A solver that stops short of the tolerance still yields its best
/// weights; the shortfall is logged and visible in `converged`.
pub fn balance_weights(raw: &Dataset, selected: &[usize]) -> StageResult<BalanceWeights> {
    let t = standardize_columns(raw.t(), Block::Treatments).at(Stage::Balancing)?;
    let x = if selected.is_empty() {
        DMatrix::zeros(raw.n(), 0)
    } else {
        standardize_columns(&raw.x().select_columns(selected), Block::Covariates).at(Stage::Balancing)?
    };
    match solve_weights(&moment_matrix(&t, &x), None, BalanceOptions::default()) {
        Ok(w) => Ok(w),
        Err(Error::BalanceNonConvergence { grad_norm, best }) => {
            log::warn!("balancing stopped at gradient norm {grad_norm:.3e}; using best weights");
            Ok(*best)
        }
        Err(e) => Err(StageError {
            stage: Stage::Balancing,
            source: e,
        }),
    }
}

/// Weighted regression of raw `Y` on raw `T`.
pub fn fit_effect(raw: &Dataset, w: &DVector<f64>, model: &EffectModel) -> StageResult<EffectEstimate> {
    match model {
        EffectModel::Linear => weighted_parametric_fit(raw.t(), raw.y(), w, false),
        EffectModel::Quadratic => weighted_parametric_fit(raw.t(), raw.y(), w, true),
        EffectModel::Spline(spec) => weighted_spline_fit(raw.t(), raw.y(), w, spec),
    }
    .at(Stage::EffectFit)
}

/// Balancing followed by the effect fit, with the covariate selection fixed.
pub fn balance_and_fit(
    raw: &Dataset,
    selected: &[usize],
    model: &EffectModel,
) -> StageResult<(BalanceWeights, EffectEstimate)> {
    let weights = balance_weights(raw, selected)?;
    let effect = fit_effect(raw, &weights.w, model)?;
    Ok((weights, effect))
}

/// Standardize, screen and select on raw data.
pub fn screen_and_select(
    raw: &Dataset,
    resolved: &ResolvedConfig,
    method: Method,
) -> StageResult<(Screening, Selection)> {
    let std = raw.standardize().at(Stage::Standardize)?;
    let screening = screen(&std, resolved.d, resolved.k)?;
    let selection = select(&std, &screening, method, &resolved.config.pal)?;
    Ok((screening, selection))
}

#[derive(Debug, Clone, Serialize)]
pub struct CovariateSummary {
    pub name: String,
    pub canonical_corr: f64,
    pub gcm: f64,
    pub in_independence_set: bool,
    pub in_conditional_set: bool,
    pub selected: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionSummary {
    pub lambda: f64,
    pub gamma: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Names of the lasso rows (the conditional-screening set).
    pub rows: Vec<String>,
    /// Estimated coefficients, one row per candidate covariate and one column per treatment.
    pub coefficients: Vec<Vec<f64>>,
    pub nonzero: Vec<Vec<bool>>,
    pub path: Vec<GridPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceSummary {
    pub statistic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub max_weight: f64,
    /// `1 / Σ w²`.
    pub effective_sample_size: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectTerm {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
    pub detail: String,
}

/// Everything `analyze` produces, ready to serialize.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub resolved_config: ResolvedConfig,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub treatments: Vec<String>,
    pub covariates: Vec<CovariateSummary>,
    pub selected: Vec<String>,
    pub selection: SelectionSummary,
    pub balance: BalanceSummary,
    pub effect_model: EffectModel,
    pub effect: Vec<EffectTerm>,
    pub bootstrap: Option<BootstrapSummary>,
    pub stages: Vec<StageTiming>,
}

struct Timer {
    stages: Vec<StageTiming>,
    start: Instant,
}

impl Timer {
    fn new() -> Self {
        Self {
            stages: Vec::new(),
            start: Instant::now(),
        }
    }

    fn mark(&mut self, stage: Stage, detail: String) {
        log::info!("{stage}: {detail}");
        self.stages.push(StageTiming {
            stage,
            seconds: self.start.elapsed().as_secs_f64(),
            detail,
        });
        self.start = Instant::now();
    }
}

/// Runs the full DSPAL pipeline on `raw` and, if `n_boot > 0`, bootstraps
/// the effect estimates.
pub fn analyze(raw: &Dataset, config: &PipelineConfig) -> StageResult<AnalysisReport> {
    let resolved = config.resolve(raw.n(), raw.p()).map_err(|source| StageError {
        stage: Stage::Standardize,
        source,
    })?;
    let mut timer = Timer::new();
    let std = raw.standardize().at(Stage::Standardize)?;
    timer.mark(Stage::Standardize, format!("n = {}, p = {}, q = {}", raw.n(), raw.p(), raw.q()));

    let independence = screen_independence(&std, resolved.d).at(Stage::IndependenceScreening)?;
    timer.mark(Stage::IndependenceScreening, format!("kept {} covariates", independence.selected.len()));
    let conditional = screen_conditional(&std, &independence.selected, resolved.k).at(Stage::ConditionalScreening)?;
    timer.mark(Stage::ConditionalScreening, format!("kept {} covariates", conditional.selected.len()));
    let screening = Screening {
        independence,
        conditional,
    };

    let selection = select(&std, &screening, Method::Dspal, &config.pal)?;
    let fit = &selection.fits[0];
    timer.mark(
        Stage::Selection,
        format!("lambda = {:.4e}, {} covariates selected", fit.lambda, selection.selected.len()),
    );

    let weights = balance_weights(raw, &selection.selected)?;
    timer.mark(
        Stage::Balancing,
        format!("balance statistic {:.3e} after {} iterations", weights.balance_stat, weights.iterations),
    );
    let estimate = fit_effect(raw, &weights.w, &config.effect_model)?;
    timer.mark(Stage::EffectFit, format!("{} coefficients", estimate.theta.len()));

    let bootstrap = if config.n_boot >= 2 {
        let summary = bootstrap_ci(raw, config.n_boot, config.seed, config.ci_level, |d| {
            let selected = if config.bootstrap_rescreen {
                screen_and_select(d, &resolved, Method::Dspal).map_err(|e| e.source)?.1.selected
            } else {
                selection.selected.clone()
            };
            let (_, est) = balance_and_fit(d, &selected, &config.effect_model).map_err(|e| e.source)?;
            if est.theta.len() != estimate.theta.len() {
                return Err(Error::InvalidArgument("replicate design differs in size".into()));
            }
            Ok(est.theta)
        })
        .at(Stage::Bootstrap)?;
        timer.mark(
            Stage::Bootstrap,
            format!("{} replicates, {} failed", summary.n_boot, summary.failed),
        );
        Some(summary)
    } else {
        None
    };

    let names = raw.covariate_names();
    let in_set = |set: &[usize], j: usize| set.contains(&j);
    let covariates = (0..raw.p())
        .map(|j| CovariateSummary {
            name: names[j].clone(),
            canonical_corr: screening.independence.stats[j],
            gcm: screening.conditional.gcm[j],
            in_independence_set: in_set(&screening.independence.selected, j),
            in_conditional_set: in_set(&screening.conditional.selected, j),
            selected: in_set(&selection.selected, j),
        })
        .collect();
    let q = raw.q();
    let zero_tol = config.pal.zero_tol;
    let selection_summary = SelectionSummary {
        lambda: fit.lambda,
        gamma: fit.gamma,
        bic: fit.bic,
        iterations: fit.iterations,
        converged: fit.converged,
        rows: selection.candidates.iter().map(|&j| names[j].clone()).collect(),
        coefficients: (0..fit.b.nrows()).map(|r| (0..q).map(|c| fit.b[(r, c)]).collect()).collect(),
        nonzero: (0..fit.b.nrows())
            .map(|r| (0..q).map(|c| fit.b[(r, c)].abs() > zero_tol).collect())
            .collect(),
        path: selection.path.clone(),
    };
    let balance = BalanceSummary {
        statistic: weights.balance_stat,
        converged: weights.converged,
        iterations: weights.iterations,
        grad_norm: weights.grad_norm,
        max_weight: weights.w.max(),
        effective_sample_size: 1.0 / weights.w.norm_squared(),
    };
    let effect = estimate
        .design
        .column_names(raw.treatment_names())
        .into_iter()
        .enumerate()
        .map(|(i, name)| EffectTerm {
            name,
            estimate: estimate.theta[i],
            se: bootstrap.as_ref().map(|b| b.se[i]),
            ci_lower: bootstrap.as_ref().map(|b| b.ci[i].0),
            ci_upper: bootstrap.as_ref().map(|b| b.ci[i].1),
        })
        .collect();

    Ok(AnalysisReport {
        schema_version: SCHEMA_VERSION,
        n: raw.n(),
        p: raw.p(),
        q,
        treatments: raw.treatment_names().to_vec(),
        covariates,
        selected: selection.selected.iter().map(|&j| names[j].clone()).collect(),
        selection: selection_summary,
        balance,
        effect_model: config.effect_model.clone(),
        effect,
        bootstrap,
        stages: timer.stages,
        resolved_config: resolved,
    })
}
