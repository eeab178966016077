use std::path::PathBuf;

use openlens_core::evaluation::{DEFAULT_MIN_DROP, DEFAULT_NUM_POINTS};
use openlens_core::masking::DEFAULT_BLUR_SIGMA;
use openlens_core::{BaselineKind, OptimizationConfig};
use serde::Serialize;

use crate::error::{CliError, Result};

/// Everything a subcommand needs besides its own inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub adapter: String,
    pub baseline: BaselineKind,
    pub blur_sigma: f64,
    pub optimization: OptimizationConfig,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub num_points: usize,
    pub min_drop: f64,
    pub fail_fast: bool,
    pub max_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            adapter: crate::adapters::BUILTIN_TOY.into(),
            baseline: BaselineKind::Blurred,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            optimization: OptimizationConfig::default(),
            output_dir: PathBuf::from("openlens-out"),
            workers: 1,
            num_points: DEFAULT_NUM_POINTS,
            min_drop: DEFAULT_MIN_DROP,
            fail_fast: false,
            max_tokens: 4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimization
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        if self.num_points < 2 {
            return Err(CliError::Config("num-points must be at least 2".into()));
        }
        if self.max_tokens == 0 {
            return Err(CliError::Config("max-tokens must be at least 1".into()));
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(CliError::Config("blur-sigma must be positive".into()));
        }
        if !self.min_drop.is_finite() {
            return Err(CliError::Config("min-drop must be finite".into()));
        }
        Ok(())
    }
}

/// Parameters `sweep` can vary.
pub const SWEEP_PARAMS: &[&str] = &[
    "lambda1",
    "lambda2",
    "lambda3",
    "gamma",
    "alpha_llr",
    "steps",
    "step_size",
];

pub fn set_param(config: &mut OptimizationConfig, name: &str, value: f64) -> Result<()> {
    match name {
        "lambda1" => config.lambda1 = value,
        "lambda2" => config.lambda2 = value,
        "lambda3" => config.lambda3 = value,
        "gamma" => config.gamma = value,
        "alpha_llr" => config.alpha_llr = value,
        "step_size" => config.step_size = value,
        "steps" => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(CliError::Config(format!("steps must be a positive integer, got {value}")));
            }
            config.steps = value as usize;
        }
        other => {
            return Err(CliError::Config(format!(
                "cannot sweep '{other}'; choose one of {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    Ok(())
}

/// Parses `28x28`, `28×28` or a single side length.
pub fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("'{t}': {e}"));
    match s.split_once(['x', 'X', '×']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}
