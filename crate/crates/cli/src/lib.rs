//! Command-line front end: registration, featurization, the risk-score
//! protocol, scoring, reporting, evaluation and synthetic cohorts.

pub mod commands;
pub mod files;
pub mod manifest;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use time_drs::data::{Arm, Endpoint};

pub const THREADS_ENV: &str = "TIME_DRS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "time-drs", version, about = "Digital risk scores from spatial immune phenotype densities")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Align one panel's keypoints and nuclei onto the other panel.
    Register(RegisterArgs),
    /// Per-patient phenotype densities from a cohort directory.
    Featurize(FeaturizeArgs),
    /// Search, split refits, ensembled risk scores and stratification.
    RunProtocol(RunProtocolArgs),
    /// Score patients with a saved model bundle.
    Score(ScoreArgs),
    /// Kaplan-Meier curves, log-rank tests and group comparisons.
    Report(ReportArgs),
    /// Detection F1 and mask DICE against ground truth.
    Evaluate(EvaluateArgs),
    /// Write a synthetic planted-hazard cohort.
    Synth(SynthArgs),
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    s.parse().map_err(|e: time_drs::Error| e.to_string())
}

fn parse_endpoint(s: &str) -> Result<Endpoint, String> {
    s.parse().map_err(|e: time_drs::Error| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct RegisterArgs {
    /// Keypoints (JSON lines) of the panel being moved.
    #[arg(long)]
    pub keypoints_src: PathBuf,
    /// Keypoints of the reference panel.
    #[arg(long)]
    pub keypoints_ref: PathBuf,
    /// Nuclei (JSON lines) of the panel being moved.
    #[arg(long)]
    pub nuclei: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16.0)]
    pub threshold_um: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 3)]
    pub min_inliers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional greyscale (PGM) thumbnails for SSIM/PCC quality.
    #[arg(long, requires = "ref_image")]
    pub src_image: Option<PathBuf>,
    #[arg(long, requires = "src_image")]
    pub ref_image: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub image_pixel_um: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub cohort_dir: PathBuf,
    #[arg(long, default_value_t = time_drs::phenotype::DEFAULT_EXTENT_UM)]
    pub extent_um: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RunProtocolArgs {
    /// Feature CSV; repeat to pool files (e.g. both arms).
    #[arg(long, required = true)]
    pub features: Vec<PathBuf>,
    /// Survival CSV; repeatable.
    #[arg(long, required = true)]
    pub survival: Vec<PathBuf>,
    /// Discovery arm; patients of the other arm are scored cross-arm.
    #[arg(long, value_parser = parse_arm)]
    pub arm: Arm,
    #[arg(long, value_parser = parse_endpoint)]
    pub endpoint: Endpoint,
    #[arg(long, default_value_t = time_drs::protocol::DEFAULT_SPLITS)]
    pub splits: usize,
    #[arg(long, default_value_t = time_drs::protocol::DEFAULT_SEARCH_POINTS)]
    pub search_points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Kaplan-Meier horizon in months (default 12 for PFS, 36 for OS).
    #[arg(long)]
    pub censor_months: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long, required = true)]
    pub features: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub drs: PathBuf,
    #[arg(long, required = true)]
    pub survival: Vec<PathBuf>,
    /// Feature CSVs for the per-phenotype High vs Low comparison table.
    #[arg(long)]
    pub features: Vec<PathBuf>,
    #[arg(long, default_value_t = 12.0)]
    pub censor_pfs: f64,
    #[arg(long, default_value_t = 36.0)]
    pub censor_os: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Predicted centroids, CSV `x_um,y_um`.
    #[arg(long, requires = "truth")]
    pub predicted: Option<PathBuf>,
    #[arg(long, requires = "predicted")]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = time_drs::metrics::DEFAULT_GATE_UM)]
    pub gate_um: f64,
    /// Predicted mask (PGM with JSON sidecar).
    #[arg(long, requires = "mask_truth")]
    pub mask_pred: Option<PathBuf>,
    #[arg(long, requires = "mask_pred")]
    pub mask_truth: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 120)]
    pub n_patients: usize,
    /// Planted log-hazard weight, `PHENOTYPE=VALUE`; repeatable.
    #[arg(long = "coef")]
    pub coefficients: Vec<String>,
    #[arg(long, default_value_t = 0.2)]
    pub censoring_rate: f64,
    #[arg(long, default_value_t = 0.17)]
    pub baseline_hazard: f64,
    #[arg(long, value_parser = parse_arm, default_value = "ARM1")]
    pub arm: Arm,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

/// Exit status for an error: 1 for bad input, 2 for a failed computation.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use time_drs::Error as E;
    match err.downcast_ref::<E>() {
        Some(
            E::RegistrationFailed { .. }
            | E::ConstantImage
            | E::EmptyRegion(_)
            | E::NoEvents
            | E::UndefinedTest(_)
            | E::Protocol(_)
            | E::InsufficientData { .. },
        ) => 2,
        _ => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        // the global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Register(a) => commands::register(a),
        Command::Featurize(a) => commands::featurize(a),
        Command::RunProtocol(a) => commands::run_protocol(a),
        Command::Score(a) => commands::score(a),
        Command::Report(a) => commands::report(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Synth(a) => commands::synth(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
