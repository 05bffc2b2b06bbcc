//! The `vissyn` command line.
//!
//! Exit status: 0 on success, 1 for usage and validation errors, 2 for
//! runtime failures (I/O, backends).

pub mod commands;
pub mod config;
pub mod transcript;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use config::BackendKind;
use vissyn_core::pipeline::{MaskingStrategy, PartOrder};

#[derive(Debug, Parser)]
#[command(name = "vissyn", version, about = "Check the visual syntax of part-based images")]
pub struct Cli {
    /// Resolve relative paths against this directory.
    #[arg(long, global = true, env = "VISSYN_WORKDIR", value_name = "DIR")]
    pub workdir: Option<PathBuf>,
    /// TOML run configuration; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a corpus of grammar-conformant scenes.
    Generate(GenerateArgs),
    /// Add perturbed (syntactically incorrect) scenes to a corpus.
    Perturb(PerturbArgs),
    /// Run the checker over a corpus and report balanced accuracy.
    Evaluate(EvaluateArgs),
    /// Re-render the report of a saved evaluation.
    Report(ReportArgs),
    /// Check a single image.
    Check(CheckArgs),
    /// Exercise an external backend and report protocol conformance.
    ProtocolTest(ProtocolTestArgs),
    /// Serve the oracle backend over the line protocol on stdin/stdout.
    #[command(hide = true)]
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Bundled grammar name (face, cat, wild) or path to a grammar file.
    #[arg(long, default_value = "face")]
    pub grammar: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub center_sigma: Option<f64>,
    #[arg(long)]
    pub size_sigma: Option<f64>,
    #[arg(long)]
    pub drop_prob: Option<f64>,
    #[arg(long, env = "VISSYN_SEED")]
    pub seed: Option<u64>,
    /// Scene ids are `<prefix>-<index>`; defaults to the class name.
    #[arg(long)]
    pub prefix: Option<String>,
    /// First scene index.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Add to an existing corpus instead of replacing its manifest.
    #[arg(long)]
    pub append: bool,
    /// Also write this many background images for scatter perturbations.
    #[arg(long, default_value_t = 0)]
    pub backgrounds: usize,
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Kind weights, e.g. `swap=0.4,replace=0.3,extra=0.3` (kinds: swap,
    /// replace, extra, scatter).
    #[arg(long, default_value = "swap=0.4,replace=0.3,extra=0.3")]
    pub mix: String,
    #[arg(long, env = "VISSYN_SEED")]
    pub seed: Option<u64>,
    /// Extra grammar files, for classes that are not bundled.
    #[arg(long = "grammar", value_name = "FILE")]
    pub grammars: Vec<String>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct BackendArgs {
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// External backend executable.
    #[arg(long, value_name = "PROGRAM")]
    pub external_program: Option<String>,
    /// Argument for the external backend (repeatable).
    #[arg(long = "external-arg", value_name = "ARG", allow_hyphen_values = true)]
    pub external_args: Vec<String>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Seconds to wait for each backend response.
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Send frame hints with reconstruct requests.
    #[arg(long)]
    pub forward_hints: bool,
    /// Oracle detector box noise (fraction of box size).
    #[arg(long)]
    pub noise_center_sigma: Option<f64>,
    #[arg(long)]
    pub noise_size_sigma: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct PipelineArgs {
    #[arg(long, value_enum)]
    pub masking: Option<Masking>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long)]
    pub nms_original: Option<f64>,
    #[arg(long)]
    pub nms_reconstructed: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<u32>,
    #[arg(long, value_enum)]
    pub order: Option<Order>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Masking {
    PartBased,
    Random,
}

impl From<Masking> for MaskingStrategy {
    fn from(m: Masking) -> Self {
        match m {
            Masking::PartBased => MaskingStrategy::PartBased,
            Masking::Random => MaskingStrategy::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Order {
    RowMajor,
    Score,
}

impl From<Order> for PartOrder {
    fn from(o: Order) -> Self {
        match o {
            Order::RowMajor => PartOrder::RowMajor,
            Order::Score => PartOrder::Score,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Directory for evaluation.json, report.json and report.txt.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, env = "VISSYN_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Write one trace file per scene here.
    #[arg(long, value_name = "DIR")]
    pub trace_dir: Option<PathBuf>,
    /// Extra grammar files, for classes that are not bundled.
    #[arg(long = "grammar", value_name = "FILE")]
    pub grammars: Vec<String>,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// An evaluation.json written by `evaluate`.
    #[arg(long, value_name = "FILE")]
    pub evaluation: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    #[arg(long, default_value = "face")]
    pub grammar: String,
    /// Object frame `x0,y0,x1,y1`; defaults to the centered frame.
    #[arg(long, conflicts_with = "unframed")]
    pub frame: Option<String>,
    /// Tell the reconstructor there is no object frame.
    #[arg(long)]
    pub unframed: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, env = "VISSYN_SEED")]
    pub seed: Option<u64>,
    /// Print the full outcome as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ProtocolTestArgs {
    #[arg(long, default_value_t = 10.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = vissyn_core::geometry::DEFAULT_PATCH_SIZE)]
    pub patch_size: u32,
    /// Grammar used to render the probe image.
    #[arg(long, default_value = "face")]
    pub grammar: String,
    /// Also replay every `*.jsonl` golden transcript in this directory.
    #[arg(long, value_name = "DIR")]
    pub golden: Option<PathBuf>,
    /// Backend command and its arguments.
    #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
    pub command: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "face")]
    pub grammar: String,
    #[arg(long, env = "VISSYN_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = vissyn_core::geometry::DEFAULT_PATCH_SIZE)]
    pub patch_size: u32,
    /// Fail reconstruct requests without hints instead of assuming the centered frame.
    #[arg(long)]
    pub require_hints: bool,
    #[arg(long)]
    pub noise_center_sigma: Option<f64>,
}

/// Error with the exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(error: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: 1,
        error: error.into(),
    }
}

pub fn runtime(error: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: 2,
        error: error.into(),
    }
}

/// Shared context: working directory and loaded configuration.
pub struct Context {
    pub workdir: PathBuf,
    pub config: config::FileConfig,
}

impl Context {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {:#}", e.error);
            e.code
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let workdir = match cli.workdir {
        Some(w) => w,
        None => std::env::current_dir().map_err(runtime)?,
    };
    let config = match &cli.config {
        Some(p) => {
            let p = if p.is_absolute() { p.clone() } else { workdir.join(p) };
            config::FileConfig::load(&p).map_err(usage)?
        }
        None => config::FileConfig::default(),
    };
    let ctx = Context { workdir, config };
    match cli.command {
        Command::Generate(a) => commands::generate(&ctx, a, out),
        Command::Perturb(a) => commands::perturb(&ctx, a, out),
        Command::Evaluate(a) => commands::evaluate(&ctx, a, out, err),
        Command::Report(a) => commands::report(&ctx, a, out),
        Command::Check(a) => commands::check(&ctx, a, out),
        Command::ProtocolTest(a) => commands::protocol_test(&ctx, a, out),
        Command::Serve(a) => commands::serve(&ctx, a),
    }
}
