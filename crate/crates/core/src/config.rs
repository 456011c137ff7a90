//! Tuning constants for a full pipeline run, in one place.
//!
//! Configuration files use a plain `key = value` format; `#` starts a
//! comment. Unknown keys are rejected so typos surface immediately.

use std::path::Path;

use serde::Serialize;

use crate::effect::SplineSpec;
use crate::error::{Error, Result};
use crate::pal::PalConfig;
use crate::screening::default_k;

/// How many covariates the conditional screen keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KRule {
    /// `⌊n / ln n⌋`.
    NOverLogN,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectModel {
    Linear,
    Quadratic,
    Spline(SplineSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    /// Size of the independence-screening set.
    pub d: usize,
    pub k_rule: KRule,
    pub pal: PalConfig,
    pub effect_model: EffectModel,
    pub n_boot: usize,
    pub ci_level: f64,
    /// Re-run screening and selection inside each bootstrap replicate.
    pub bootstrap_rescreen: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            d: 20,
            k_rule: KRule::NOverLogN,
            pal: PalConfig::default(),
            effect_model: EffectModel::Linear,
            n_boot: 500,
            ci_level: 0.95,
            bootstrap_rescreen: false,
            seed: 20240601,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl PipelineConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spline = |model: &mut EffectModel| -> SplineSpec {
            match model {
                EffectModel::Spline(s) => s.clone(),
                _ => SplineSpec::default(),
            }
        };
        match key {
            "d" => self.d = parse_num(key, value)?,
            "k" | "k_rule" => {
                self.k_rule = if value == "n_over_log_n" {
                    KRule::NOverLogN
                } else {
                    KRule::Fixed(parse_num(key, value)?)
                }
            }
            "lambda_exponents" | "lambda_grid" => {
                self.pal.lambda_exponents = value
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<Vec<f64>>>()?
            }
            "gamma_rule" => self.pal.gamma_rule = parse_num(key, value)?,
            "epsilon" => self.pal.epsilon = parse_num(key, value)?,
            "max_iters" => self.pal.max_iters = parse_num(key, value)?,
            "zero_tol" => self.pal.zero_tol = parse_num(key, value)?,
            "effect_model" => {
                self.effect_model = match value {
                    "linear" => EffectModel::Linear,
                    "quadratic" => EffectModel::Quadratic,
                    "spline" => EffectModel::Spline(spline(&mut self.effect_model)),
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "effect_model must be linear, quadratic or spline, got `{value}`"
                        )))
                    }
                }
            }
            "spline_degree" | "spline_knots" | "spline_interactions" | "spline_interaction_knots" => {
                let mut s = spline(&mut self.effect_model);
                match key {
                    "spline_degree" => s.degree = parse_num(key, value)?,
                    "spline_knots" => s.interior_knots = parse_num(key, value)?,
                    "spline_interactions" => s.interactions = parse_bool(key, value)?,
                    _ => s.interaction_knots = parse_num(key, value)?,
                }
                self.effect_model = EffectModel::Spline(s);
            }
            "n_boot" => self.n_boot = parse_num(key, value)?,
            "ci_level" => self.ci_level = parse_num(key, value)?,
            "bootstrap_rescreen" => self.bootstrap_rescreen = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every setting in `text` on top of `self`.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidArgument(format!(
                    "config line {}: expected `key = value`",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::default();
        config.merge_str(&text)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.pal.validate()?;
        if self.d == 0 {
            return Err(Error::InvalidArgument("d must be at least 1".into()));
        }
        if self.k_rule == KRule::Fixed(0) {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.n_boot == 1 {
            return Err(Error::InvalidArgument("n_boot must be 0 (off) or at least 2".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidArgument("ci_level must lie in (0, 1)".into()));
        }
        if let EffectModel::Spline(s) = &self.effect_model {
            if s.degree == 0 {
                return Err(Error::InvalidArgument("spline_degree must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Fixes every data-dependent quantity for a sample of `n` rows and `p`
    /// covariates. `d` and `k` are capped at `p`.
    pub fn resolve(&self, n: usize, p: usize) -> Result<ResolvedConfig> {
        self.validate()?;
        let d = self.d.min(p);
        if d < self.d {
            log::warn!("d = {} exceeds p = {p}; using {d}", self.d);
        }
        let k_requested = match self.k_rule {
            KRule::NOverLogN => default_k(n),
            KRule::Fixed(k) => k,
        };
        let k = k_requested.clamp(1, p);
        if k != k_requested {
            log::warn!("k = {k_requested} is outside [1, {p}]; using {k}");
        }
        let lambda_grid = {
            let mut exps = self.pal.lambda_exponents.clone();
            exps.sort_by(f64::total_cmp);
            exps.dedup();
            exps.into_iter()
                .zip(self.pal.lambda_gamma_grid(n))
                .map(|(exponent, (lambda, gamma))| GridEntry { exponent, lambda, gamma })
                .collect()
        };
        Ok(ResolvedConfig {
            n,
            p,
            d,
            k,
            lambda_grid,
            config: self.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridEntry {
    pub exponent: f64,
    pub lambda: f64,
    pub gamma: f64,
}

/// A configuration with all sample-size-dependent values filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub k: usize,
    pub lambda_grid: Vec<GridEntry>,
    pub config: PipelineConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults() {
        let mut c = PipelineConfig::default();
        c.merge_str("# tuning\nd = 10\nk = 30\nlambda_exponents = 1, 2\nspline_knots = 4  # fewer\nseed=9\n")
            .unwrap();
        assert_eq!(c.d, 10);
        assert_eq!(c.k_rule, KRule::Fixed(30));
        assert_eq!(c.pal.lambda_exponents, vec![1.0, 2.0]);
        assert_eq!(c.seed, 9);
        match &c.effect_model {
            EffectModel::Spline(s) => assert_eq!(s.interior_knots, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_settings_are_config_errors() {
        for text in ["d = x", "nope = 1", "epsilon = -1", "lambda_exponents = 0", "just text", "effect_model = cubic"] {
            let err = PipelineConfig::default().merge_str(text).unwrap_err();
            assert_eq!(err.class(), crate::ErrorClass::Config, "{text}");
        }
    }

    #[test]
    fn resolution_fills_k_and_gamma() {
        let r = PipelineConfig::default().resolve(300, 100).unwrap();
        assert_eq!(r.k, 52);
        assert_eq!(r.d, 20);
        assert_eq!(r.lambda_grid.len(), 6);
        assert!((r.lambda_grid[0].lambda - 1.0 / 300.0).abs() < 1e-15);
        assert!((r.lambda_grid[0].gamma - 4.4).abs() < 1e-12);
        assert!((r.lambda_grid[5].gamma - 6.4).abs() < 1e-12);
        let small = PipelineConfig::default().resolve(300, 12).unwrap();
        assert_eq!((small.d, small.k), (12, 12));
    }
}
