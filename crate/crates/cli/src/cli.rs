use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use openlens_core::{BaselineKind, OptimizationConfig, OptimizationMode};

use crate::commands::{self, Outcome};
use crate::config::{parse_resolution, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::DEFAULT_OPTIONS_MARKER;

pub const EXIT_PARTIAL: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "openlens", version, about = "Token-selective saliency maps for vision-language models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Built-in adapter name, descriptor path, or name on OPENLENS_ADAPTER_PATH.
    #[arg(long, global = true, default_value = "toy")]
    pub adapter: String,
    #[arg(long, global = true, default_value = "blurred")]
    pub baseline: BaselineKind,
    #[arg(long, global = true, default_value_t = openlens_core::masking::DEFAULT_BLUR_SIGMA)]
    pub blur_sigma: f64,
    #[arg(long, global = true)]
    pub alpha_llr: Option<f64>,
    #[arg(long, global = true)]
    pub lambda1: Option<f64>,
    #[arg(long, global = true)]
    pub lambda2: Option<f64>,
    #[arg(long, global = true)]
    pub lambda3: Option<f64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub step_size: Option<f64>,
    /// Optimization grid, `HxW` or a single side; capped at the image size.
    #[arg(long, global = true, value_parser = parse_resolution)]
    pub mask_res: Option<(usize, usize)>,
    #[arg(long, global = true)]
    pub sigma_btv: Option<f64>,
    #[arg(long, global = true, value_parser = ["single", "separate"])]
    pub mode: Option<String>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, global = true, default_value = "openlens-out")]
    pub output_dir: PathBuf,
    #[arg(long, global = true, default_value_t = openlens_core::evaluation::DEFAULT_NUM_POINTS)]
    pub num_points: usize,
    #[arg(long, global = true, allow_negative_numbers = true, default_value_t = openlens_core::evaluation::DEFAULT_MIN_DROP)]
    pub min_drop: f64,
    /// Stop at the first failing sample.
    #[arg(long, global = true)]
    pub fail_fast: bool,
    /// Length limit for generated answers.
    #[arg(long, global = true, default_value_t = 4)]
    pub max_tokens: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a heatmap per manifest entry.
    Explain {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Deletion/insertion AUCs of existing heatmaps.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<sample_id>/heatmap.raw`.
        #[arg(long)]
        heatmaps: PathBuf,
        /// Row label in table1.csv.
        #[arg(long, default_value = "openlens")]
        method: String,
    },
    /// Probability drop under the baseline image, bucketed per dataset.
    Reliance {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Samples every model depends on visually.
    Filter {
        /// `reliance_stats.json` of one model; repeat per model.
        #[arg(long = "stats", required = true)]
        stats: Vec<PathBuf>,
    },
    /// Explain and evaluate over a grid of one hyperparameter.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "lambda2")]
        param: String,
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.1,1.0,10.0")]
        values: Vec<f64>,
    },
    /// Soft IOU and rank correlation of two raw heatmaps, as JSON on stdout.
    Compare { a: PathBuf, b: PathBuf },
    /// Drop multiple-choice blocks from manifest questions.
    Prep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Lines from the first one starting with this text are removed.
        #[arg(long, default_value = DEFAULT_OPTIONS_MARKER)]
        marker: String,
    },
}

impl GlobalArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let d = OptimizationConfig::default();
        let mode = match self.mode.as_deref() {
            Some(m) => m.parse().map_err(|e: openlens_core::Error| CliError::Config(e.to_string()))?,
            None => OptimizationMode::SingleMask,
        };
        let optimization = OptimizationConfig {
            lambda1: self.lambda1.unwrap_or(d.lambda1),
            lambda2: self.lambda2.unwrap_or(d.lambda2),
            lambda3: self.lambda3.unwrap_or(d.lambda3),
            gamma: self.gamma.unwrap_or(d.gamma),
            alpha_llr: self.alpha_llr.unwrap_or(d.alpha_llr),
            steps: self.steps.unwrap_or(d.steps),
            step_size: self.step_size.unwrap_or(d.step_size),
            mask_resolution: self.mask_res.unwrap_or(d.mask_resolution),
            mode,
            seed: self.seed,
            sigma_btv: self.sigma_btv.unwrap_or(d.sigma_btv),
        };
        let run = RunConfig {
            adapter: self.adapter.clone(),
            baseline: self.baseline,
            blur_sigma: self.blur_sigma,
            optimization,
            output_dir: self.output_dir.clone(),
            workers: self.workers,
            num_points: self.num_points,
            min_drop: self.min_drop,
            fail_fast: self.fail_fast,
            max_tokens: self.max_tokens,
        };
        run.validate()?;
        Ok(run)
    }
}

pub fn dispatch(cli: &Cli) -> Result<Outcome> {
    let run = cli.global.run_config()?;
    match &cli.command {
        Command::Explain { manifest } => commands::explain(&run, manifest),
        Command::Evaluate {
            manifest,
            heatmaps,
            method,
        } => commands::evaluate(&run, manifest, heatmaps, method),
        Command::Reliance { manifest } => commands::reliance(&run, manifest),
        Command::Filter { stats } => commands::filter(&run, stats),
        Command::Sweep {
            manifest,
            param,
            values,
        } => commands::sweep(&run, manifest, param, values),
        Command::Compare { a, b } => {
            let scores = commands::compare(a, b)?;
            println!("{}", serde_json::to_string(&scores)?);
            Ok(Outcome::default())
        }
        Command::Prep {
            manifest,
            out,
            marker,
        } => commands::prep(manifest, out, marker),
    }
}

/// Exit status for a finished or failed run: 0, 2 on partial failures,
/// 3 on configuration errors, 1 otherwise.
pub fn exit_code(result: &Result<Outcome>) -> ExitCode {
    match result {
        Ok(o) if o.failures == 0 => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(EXIT_PARTIAL),
        Err(e) if is_config_error(e) => ExitCode::from(EXIT_CONFIG),
        Err(_) => ExitCode::FAILURE,
    }
}

fn is_config_error(e: &CliError) -> bool {
    use openlens_core::Error as E;
    matches!(
        e,
        CliError::Config(_)
            | CliError::Core(E::InvalidConfig(_) | E::UnknownKind(_) | E::GradientUnsupported)
    )
}
