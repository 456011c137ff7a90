//! Synthetic data with known covariate roles, and replicated pipeline runs.
//!
//! The data-generating process has two treatments:
//!
//! * `X ~ N(0, I_p)`;
//! * `T = X B + E` with `E ~ N(0, Σ_E)`, `Σ_E[i][j] = 0.5^|i−j|`. Column 1 of
//!   `B` is one on covariates 1–5 and 11–15; column 2 is Bernoulli(0.5) on
//!   the same rows, redrawn for every dataset;
//! * `Y = Σ_{j≤10} X_j + s(T) + ε`, `ε ~ N(0, 1)`, with `s(t) = t₁ + t₂`
//!   (linear) or `t₁ + t₂ + t₁² + t₂² + 0.2 t₁ t₂` (nonlinear).
//!
//! Covariates 1–5 are confounders, 6–10 outcome predictors, 11–15
//! instruments and the rest spurious.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{EffectModel, PipelineConfig, ResolvedConfig};
use crate::data::{CovariateRole, Dataset};
use crate::effect::SplineSpec;
use crate::error::{Error, Result};
use crate::pipeline::{balance_and_fit, screen, select, Method, Screening};
use crate::report::{write_atomic, write_json, SCHEMA_VERSION};
use crate::rng::child_seed;

pub use crate::effect::effect_rmse;

/// Number of treatments in the simulation design.
pub const Q: usize = 2;
const ROLE_BLOCK: usize = 5;
/// Share of failed replicates above which a simulation is abandoned.
const MAX_FAILED_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Linear,
    Nonlinear,
}

impl std::str::FromStr for OutcomeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(OutcomeKind::Linear),
            "nonlinear" => Ok(OutcomeKind::Nonlinear),
            _ => Err(Error::InvalidArgument(format!("unknown outcome kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DgpSpec {
    pub n: usize,
    pub p: usize,
    pub outcome: OutcomeKind,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(n: usize, p: usize, outcome: OutcomeKind, seed: u64) -> Result<Self> {
        if p < 3 * ROLE_BLOCK {
            return Err(Error::InvalidArgument(format!("p must be at least {}", 3 * ROLE_BLOCK)));
        }
        if n < 10 {
            return Err(Error::InvalidArgument("n must be at least 10".into()));
        }
        Ok(Self { n, p, outcome, seed })
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn roles(&self) -> Vec<CovariateRole> {
        roles(self.p)
    }
}

pub fn roles(p: usize) -> Vec<CovariateRole> {
    (0..p)
        .map(|j| match j / ROLE_BLOCK {
            0 => CovariateRole::Confounder,
            1 => CovariateRole::Predictor,
            2 => CovariateRole::Instrument,
            _ => CovariateRole::Spurious,
        })
        .collect()
}

/// The true effect function `s(t)`.
pub fn true_effect(outcome: OutcomeKind, t: &[f64]) -> f64 {
    let linear = t[0] + t[1];
    match outcome {
        OutcomeKind::Linear => linear,
        OutcomeKind::Nonlinear => linear + t[0] * t[0] + t[1] * t[1] + 0.2 * t[0] * t[1],
    }
}

/// Coefficients of the linear effect, `(β₁, β₂)`.
pub const TRUE_BETA: [f64; Q] = [1.0, 1.0];

pub fn treatment_error_covariance() -> DMatrix<f64> {
    DMatrix::from_fn(Q, Q, |i, j| 0.5f64.powi(i.abs_diff(j) as i32))
}

/// `n` rows of `N(0, Σ_E)`.
pub fn treatment_errors<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let l = treatment_error_covariance()
        .cholesky()
        .expect("error covariance is positive definite")
        .l();
    let mut e = DMatrix::zeros(n, Q);
    for i in 0..n {
        let z = DVector::from_fn(Q, |_, _| StandardNormal.sample(rng));
        e.row_mut(i).copy_from(&(&l * z).transpose());
    }
    e
}

/// Coefficient matrix with the given column-2 entries on the confounder and
/// instrument rows (confounders first).
pub fn coefficient_matrix(p: usize, second_column: &[f64; 2 * ROLE_BLOCK]) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(p, Q);
    let rows = (0..ROLE_BLOCK).chain(2 * ROLE_BLOCK..3 * ROLE_BLOCK);
    for (pos, j) in rows.enumerate() {
        b[(j, 0)] = 1.0;
        b[(j, 1)] = second_column[pos];
    }
    b
}

/// Builds `T = X B + E` and `Y = Σ_{j≤10} X_j + s(T) + ε` from given parts.
pub fn assemble(
    x: DMatrix<f64>,
    b: &DMatrix<f64>,
    e: &DMatrix<f64>,
    eps: &DVector<f64>,
    outcome: OutcomeKind,
) -> Result<Dataset> {
    let t = &x * b + e;
    let y = DVector::from_fn(x.nrows(), |i, _| {
        let prognostic: f64 = (0..2 * ROLE_BLOCK).map(|j| x[(i, j)]).sum();
        prognostic + true_effect(outcome, &[t[(i, 0)], t[(i, 1)]]) + eps[i]
    });
    Dataset::from_matrices(x, t, y)
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub data: Dataset,
    pub roles: Vec<CovariateRole>,
    pub b: DMatrix<f64>,
}

/// Draws one dataset; identical seeds give bit-identical output.
pub fn generate_dataset(spec: &DgpSpec) -> Result<SimDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, p) = (spec.n, spec.p);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            x[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    let second: [f64; 2 * ROLE_BLOCK] = std::array::from_fn(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let b = coefficient_matrix(p, &second);
    let e = treatment_errors(&mut rng, n);
    let eps = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let data = assemble(x, &b, &e, &eps, spec.outcome)?;
    Ok(SimDataset {
        data,
        roles: spec.roles(),
        b,
    })
}

/// `mean(θ̂ − θ*)`.
pub fn mean_bias(estimates: &[f64], truth: f64) -> f64 {
    estimates.iter().map(|e| e - truth).sum::<f64>() / estimates.len() as f64
}

/// `sqrt(mean((θ̂ − θ*)²))`.
pub fn rmse(estimates: &[f64], truth: f64) -> f64 {
    (estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / estimates.len() as f64).sqrt()
}

/// Pipeline settings for simulation runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimSettings {
    /// Screening and selection tuning; the effect model and bootstrap settings are ignored.
    pub pipeline: PipelineConfig,
    /// Effect surface fitted under the nonlinear outcome. Linear outcomes use a linear fit.
    pub spline: SplineSpec,
}

impl SimSettings {
    pub fn effect_model(&self, outcome: OutcomeKind) -> EffectModel {
        match outcome {
            OutcomeKind::Linear => EffectModel::Linear,
            OutcomeKind::Nonlinear => EffectModel::Spline(self.spline.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub selected: Vec<usize>,
    /// No instrument was selected, i.e. every instrument row of B̂ is zero.
    pub instruments_zero: bool,
    /// `(β̂₁, β̂₂)` under the linear outcome.
    pub beta: Option<Vec<f64>>,
    /// Effect-surface RMSE under the nonlinear outcome.
    pub effect_rmse: Option<f64>,
    pub balance_stat: f64,
    pub balance_converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScreeningOutcome {
    /// All confounders and predictors survive conditional screening.
    pub sure_screening: bool,
    /// Every confounder and predictor has larger |GCM| than every instrument and spurious covariate.
    pub ranking_consistent: bool,
    /// All confounders and instruments survive independence screening.
    pub independence_coverage: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    pub screening: std::result::Result<ScreeningOutcome, String>,
    pub methods: Vec<(Method, std::result::Result<MethodOutcome, String>)>,
}

fn screening_outcome(screening: &Screening, roles: &[CovariateRole]) -> ScreeningOutcome {
    let targets = |j: &usize| roles[*j].is_target();
    let abs = screening.conditional.abs_gcm();
    let min_target = (0..roles.len()).filter(targets).map(|j| abs[j]).fold(f64::INFINITY, f64::min);
    let max_other = (0..roles.len())
        .filter(|j| !targets(j))
        .map(|j| abs[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let indep = &screening.independence.selected;
    ScreeningOutcome {
        sure_screening: (0..roles.len())
            .filter(targets)
            .all(|j| screening.conditional.selected.contains(&j)),
        ranking_consistent: min_target > max_other,
        independence_coverage: (0..roles.len())
            .filter(|&j| matches!(roles[j], CovariateRole::Confounder | CovariateRole::Instrument))
            .all(|j| indep.contains(&j)),
    }
}

fn run_method(
    sim: &SimDataset,
    std: &Dataset,
    screening: &Screening,
    method: Method,
    outcome: OutcomeKind,
    settings: &SimSettings,
) -> Result<MethodOutcome> {
    let selection = select(std, screening, method, &settings.pipeline.pal).map_err(|e| e.source)?;
    let model = settings.effect_model(outcome);
    let (weights, fit) = balance_and_fit(&sim.data, &selection.selected, &model).map_err(|e| e.source)?;
    let (beta, effect) = match outcome {
        OutcomeKind::Linear => (Some(vec![fit.theta[1], fit.theta[2]]), None),
        OutcomeKind::Nonlinear => (
            None,
            Some(effect_rmse(&fit, |t| true_effect(outcome, t), sim.data.t())),
        ),
    };
    Ok(MethodOutcome {
        method,
        instruments_zero: !selection
            .selected
            .iter()
            .any(|&j| sim.roles[j] == CovariateRole::Instrument),
        selected: selection.selected,
        beta,
        effect_rmse: effect,
        balance_stat: weights.balance_stat,
        balance_converged: weights.converged,
    })
}

/// Generates replicate `index` and runs each method on it. Screening is
/// shared between methods.
pub fn run_replicate(
    spec: &DgpSpec,
    index: usize,
    methods: &[Method],
    settings: &SimSettings,
    resolved: &ResolvedConfig,
) -> Result<ReplicateRecord> {
    let seed = child_seed(spec.seed, index as u64);
    let sim = generate_dataset(&spec.with_seed(seed))?;
    let fail_all = |msg: String| ReplicateRecord {
        index,
        seed,
        screening: Err(msg.clone()),
        methods: methods.iter().map(|&m| (m, Err(msg.clone()))).collect(),
    };
    let std = match sim.data.standardize() {
        Ok(s) => s,
        Err(e) => return Ok(fail_all(format!("standardize failed: {e}"))),
    };
    let screening = match screen(&std, resolved.d, resolved.k) {
        Ok(s) => s,
        Err(e) => return Ok(fail_all(e.to_string())),
    };
    let outcomes = methods
        .iter()
        .map(|&m| {
            let res = run_method(&sim, &std, &screening, m, spec.outcome, settings).map_err(|e| {
                log::warn!("replicate {index} ({m}): {e}");
                e.to_string()
            });
            (m, res)
        })
        .collect();
    Ok(ReplicateRecord {
        index,
        seed,
        screening: Ok(screening_outcome(&screening, &sim.roles)),
        methods: outcomes,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub successes: usize,
    pub failures: usize,
    /// Per covariate: share of successful replicates that selected it.
    pub selection_proportions: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_bias: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_effect_rmse: Option<f64>,
    /// Share of successful replicates that selected no instrument.
    pub instrument_zero_rate: f64,
    pub mean_balance_stat: f64,
    pub balance_nonconvergence: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub spec: DgpSpec,
    pub n_reps: usize,
    pub seeds: Vec<u64>,
    pub settings: SimSettings,
    pub resolved_config: ResolvedConfig,
    pub sure_screening_rate: f64,
    pub ranking_consistency_rate: f64,
    pub independence_coverage_rate: f64,
    pub screening_failures: usize,
    pub methods: Vec<MethodSummary>,
    #[serde(skip)]
    pub replicates: Vec<ReplicateRecord>,
}

impl SimReport {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// One row per replicate and method.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "replicate",
            "seed",
            "method",
            "sure_screening",
            "ranking_consistent",
            "n_selected",
            "instruments_zero",
            "beta1",
            "beta2",
            "effect_rmse",
            "balance_stat",
            "balance_converged",
            "error",
        ])
        .map_err(csv_error)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for rep in &self.replicates {
            let (sure, ranking) = match &rep.screening {
                Ok(s) => (s.sure_screening.to_string(), s.ranking_consistent.to_string()),
                Err(_) => (String::new(), String::new()),
            };
            for (method, res) in &rep.methods {
                let mut row = vec![rep.index.to_string(), rep.seed.to_string(), method.to_string(), sure.clone(), ranking.clone()];
                match res {
                    Ok(o) => {
                        let beta = |k: usize| o.beta.as_ref().map(|b| b[k]);
                        row.extend([
                            o.selected.len().to_string(),
                            o.instruments_zero.to_string(),
                            opt(beta(0)),
                            opt(beta(1)),
                            opt(o.effect_rmse),
                            o.balance_stat.to_string(),
                            o.balance_converged.to_string(),
                            String::new(),
                        ]);
                    }
                    Err(e) => {
                        row.extend(std::iter::repeat_n(String::new(), 7));
                        row.push(e.clone());
                    }
                }
                w.write_record(&row).map_err(csv_error)?;
            }
        }
        w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidData(e.to_string())
}

fn summarize(method: Method, records: &[ReplicateRecord], p: usize, outcome: OutcomeKind) -> MethodSummary {
    let outcomes: Vec<&MethodOutcome> = records
        .iter()
        .filter_map(|r| r.methods.iter().find(|(m, _)| *m == method))
        .filter_map(|(_, res)| res.as_ref().ok())
        .collect();
    let successes = outcomes.len();
    let failures = records.len() - successes;
    let denom = successes.max(1) as f64;
    let mut counts = vec![0usize; p];
    for o in &outcomes {
        for &j in &o.selected {
            counts[j] += 1;
        }
    }
    let (mean_bias, rmse_v, mean_effect_rmse) = match outcome {
        OutcomeKind::Linear if successes > 0 => {
            let column = |k: usize| outcomes.iter().map(|o| o.beta.as_ref().unwrap()[k]).collect::<Vec<_>>();
            let cols: Vec<Vec<f64>> = (0..Q).map(column).collect();
            (
                Some(cols.iter().zip(TRUE_BETA).map(|(c, b)| mean_bias(c, b)).collect()),
                Some(cols.iter().zip(TRUE_BETA).map(|(c, b)| rmse(c, b)).collect()),
                None,
            )
        }
        OutcomeKind::Nonlinear if successes > 0 => (
            None,
            None,
            Some(outcomes.iter().map(|o| o.effect_rmse.unwrap()).sum::<f64>() / denom),
        ),
        _ => (None, None, None),
    };
    MethodSummary {
        method,
        successes,
        failures,
        selection_proportions: counts.iter().map(|&c| c as f64 / denom).collect(),
        mean_bias,
        rmse: rmse_v,
        mean_effect_rmse,
        instrument_zero_rate: outcomes.iter().filter(|o| o.instruments_zero).count() as f64 / denom,
        mean_balance_stat: outcomes.iter().map(|o| o.balance_stat).sum::<f64>() / denom,
        balance_nonconvergence: outcomes.iter().filter(|o| !o.balance_converged).count(),
    }
}

/// Runs `n_reps` replicates concurrently and aggregates them in index order.
/// Replicate `r` uses the dataset seed `child_seed(spec.seed, r)`.
pub fn run_simulation(spec: &DgpSpec, n_reps: usize, methods: &[Method], settings: &SimSettings) -> Result<SimReport> {
    if n_reps == 0 {
        return Err(Error::InvalidArgument("n_reps must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods requested".into()));
    }
    let resolved = settings.pipeline.resolve(spec.n, spec.p)?;
    let records = (0..n_reps)
        .into_par_iter()
        .map(|r| run_replicate(spec, r, methods, settings, &resolved))
        .collect::<Result<Vec<_>>>()?;

    let limit = MAX_FAILED_SHARE * n_reps as f64;
    let methods_summary: Vec<MethodSummary> = methods
        .iter()
        .map(|&m| summarize(m, &records, spec.p, spec.outcome))
        .collect();
    for s in &methods_summary {
        if s.failures > 0 {
            log::warn!("{}: {} of {n_reps} replicates failed", s.method, s.failures);
        }
        if s.failures as f64 > limit {
            return Err(Error::TooManyFailures {
                failed: s.failures,
                total: n_reps,
            });
        }
    }
    let screened: Vec<&ScreeningOutcome> = records.iter().filter_map(|r| r.screening.as_ref().ok()).collect();
    let denom = screened.len().max(1) as f64;
    let rate = |f: fn(&ScreeningOutcome) -> bool| screened.iter().filter(|s| f(s)).count() as f64 / denom;
    Ok(SimReport {
        schema_version: SCHEMA_VERSION,
        spec: *spec,
        n_reps,
        seeds: records.iter().map(|r| r.seed).collect(),
        settings: settings.clone(),
        resolved_config: resolved,
        sure_screening_rate: rate(|s| s.sure_screening),
        ranking_consistency_rate: rate(|s| s.ranking_consistent),
        independence_coverage_rate: rate(|s| s.independence_coverage),
        screening_failures: records.len() - screened.len(),
        methods: methods_summary,
        replicates: records,
    })
}
