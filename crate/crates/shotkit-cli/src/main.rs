//! `shotkit`: single entry point for the multi-shot toolkit.
//!
//! Exit codes: 0 on success, 1 on domain or validation failures (with a
//! machine-readable JSON document on standard error), 2 on I/O failures.
//! Identical arguments, inputs, and seed produce byte-identical outputs.

mod commands;
mod config;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use config::ToolConfig;
use serde::Serialize;
use shotkit::attention::AttentionError;
use shotkit::camera::{GeometryError, GridSampling};
use shotkit::conditioning::ConditioningError;
use shotkit::curation::CurationError;
use shotkit::mask::MaskError;
use shotkit::metrics::MetricsError;
use shotkit::tensor::TensorError;
use std::path::PathBuf;

/// Every failure a subcommand can report, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad inputs or violated contracts: exit code 1.
    Validation(String),
    /// The operating system failed us: exit code 2.
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match &e {
            TensorError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        match &e {
            GeometryError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MaskError> for CliError {
    fn from(e: MaskError) -> Self {
        match &e {
            MaskError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ConditioningError> for CliError {
    fn from(e: ConditioningError) -> Self {
        match &e {
            ConditioningError::Tensor(TensorError::Io(_)) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<AttentionError> for CliError {
    fn from(e: AttentionError) -> Self {
        let io = matches!(
            &e,
            AttentionError::Tensor(TensorError::Io(_))
                | AttentionError::Mask(MaskError::Io(_))
                | AttentionError::Geometry(GeometryError::Io(_))
                | AttentionError::Conditioning(ConditioningError::Tensor(TensorError::Io(_)))
        );
        if io {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<CurationError> for CliError {
    fn from(e: CurationError) -> Self {
        match &e {
            CurationError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match &e {
            MetricsError::Io(_) | MetricsError::Tensor(TensorError::Io(_)) => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'static str,
    message: &'a str,
}

#[derive(Serialize)]
struct ErrorDoc<'a> {
    error: ErrorBody<'a>,
}

fn report_error(err: &CliError, json_errors: bool) -> i32 {
    let (kind, message, code) = match err {
        CliError::Validation(m) => ("validation", m, 1),
        CliError::Io(m) => ("io", m, 2),
    };
    // Validation failures always get the machine-readable form; the flag
    // extends it to I/O failures as well.
    if code == 1 || json_errors {
        let doc = ErrorDoc {
            error: ErrorBody { kind, message },
        };
        eprintln!(
            "{}",
            serde_json::to_string(&doc).expect("error serialization cannot fail")
        );
    } else {
        eprintln!("error: {message}");
    }
    code
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SamplingArg {
    TopLeft,
    Center,
}

impl From<SamplingArg> for GridSampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::TopLeft => GridSampling::TopLeft,
            SamplingArg::Center => GridSampling::Center,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "shotkit",
    version,
    about = "Camera-conditioned multi-shot toolkit: ray maps, attention masks, curation, metrics"
)]
struct Cli {
    /// Config file (TOML); defaults to $SHOTKIT_CONFIG, then built-ins.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Report every error, including I/O, as JSON on standard error.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render per-frame Plücker ray maps from a camera trajectory.
    Plucker {
        /// Camera trajectory JSON file.
        #[arg(long, value_name = "PATH")]
        trajectory: PathBuf,
        /// Ray grid size as HxW, for example 4x4.
        #[arg(long, value_name = "HxW")]
        grid: String,
        /// Output tensor file, one [h, w, 6] tensor per frame.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Where inside each grid cell the ray is sampled.
        #[arg(long, value_enum)]
        sampling: Option<SamplingArg>,
    },
    /// Build the shot-aware attention mask for a token layout.
    Mask {
        /// Token layout JSON file.
        #[arg(long, value_name = "PATH")]
        layout: PathBuf,
        /// Optional grayscale image of the mask, one pixel per pair.
        #[arg(long, value_name = "PATH")]
        pgm: Option<PathBuf>,
        /// Optional block-descriptor JSON export.
        #[arg(long, value_name = "PATH")]
        blocks: Option<PathBuf>,
    },
    /// Filter clip records and print keep/drop reports plus a summary.
    Curate {
        /// Clip records, one JSON document per line.
        #[arg(long, value_name = "PATH")]
        records: PathBuf,
        /// Optional captions keyed by clip_id, one JSON document per line.
        #[arg(long, value_name = "PATH")]
        captions: Option<PathBuf>,
        /// "default" or a TOML file of threshold overrides.
        #[arg(long, value_name = "PATH|default", default_value = "default")]
        thresholds: String,
        /// Also write the per-clip reports to this file.
        #[arg(long, value_name = "PATH")]
        reports: Option<PathBuf>,
        /// Append dataset statistics over the kept records to the summary.
        #[arg(long)]
        stats: bool,
    },
    /// Evaluation metrics over detector outputs and feature files.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Run the toy masked transformer forward pass on synthetic inputs.
    DemoForward {
        /// Token layout JSON file (carries full_visibility_layers).
        #[arg(long, value_name = "PATH")]
        layout: PathBuf,
        /// Camera trajectory JSON covering every layout frame.
        #[arg(long, value_name = "PATH")]
        trajectory: PathBuf,
        /// Output tensor file for the final token matrix.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Optional results JSON file (also printed to standard output).
        #[arg(long, value_name = "PATH")]
        results: Option<PathBuf>,
        /// Seed override; wins over the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Seed override; wins over the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Transition confidence per clip from detector logits.
    Confidence {
        /// Logit records, one JSON document per line.
        #[arg(long, value_name = "PATH")]
        logits: PathBuf,
    },
    /// Transition-type accuracy and predicted-type distribution.
    Types {
        /// Prediction records, one JSON document per line.
        #[arg(long, value_name = "PATH")]
        predictions: PathBuf,
    },
    /// Cross-shot semantic and visual consistency for one clip.
    Consistency {
        /// Consistency input JSON document.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Fréchet distance between two feature tensor files.
    Fvd {
        /// First feature set, a single [n, dim] tensor.
        #[arg(long, value_name = "PATH")]
        features_a: PathBuf,
        /// Second feature set, a single [n, dim] tensor.
        #[arg(long, value_name = "PATH")]
        features_b: PathBuf,
    },
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let config = ToolConfig::resolve(cli.config.as_ref())?;
    match &cli.command {
        Command::Plucker {
            trajectory,
            grid,
            out,
            sampling,
        } => commands::run_plucker(
            &config,
            trajectory,
            grid,
            out,
            sampling.map(GridSampling::from),
        ),
        Command::Mask {
            layout,
            pgm,
            blocks,
        } => commands::run_mask(layout, pgm.as_ref(), blocks.as_ref()),
        Command::Curate {
            records,
            captions,
            thresholds,
            reports,
            stats,
        } => commands::run_curate(
            &config,
            records,
            captions.as_ref(),
            thresholds,
            reports.as_ref(),
            *stats,
        ),
        Command::Metrics(metrics) => match metrics {
            MetricsCommand::Confidence { logits } => commands::run_metrics_confidence(logits),
            MetricsCommand::Types { predictions } => commands::run_metrics_types(predictions),
            MetricsCommand::Consistency { input } => commands::run_metrics_consistency(input),
            MetricsCommand::Fvd {
                features_a,
                features_b,
            } => commands::run_metrics_fvd(features_a, features_b),
        },
        Command::DemoForward {
            layout,
            trajectory,
            out,
            results,
            seed,
        } => commands::run_demo_forward(&config, layout, trajectory, out, results.as_ref(), *seed),
        Command::Gradcheck { seed } => commands::run_gradcheck(&config, *seed),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                std::process::exit(0);
            }
            _ => {
                // Unknown subcommands and bad flags print usage and exit 1.
                eprint!("{e}");
                std::process::exit(1);
            }
        },
    };
    let code = match dispatch(&cli) {
        Ok(()) => 0,
        Err(err) => report_error(&err, cli.json_errors),
    };
    std::process::exit(code);
}
