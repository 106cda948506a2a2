use std::path::PathBuf;
use std::process::ExitCode;

use cemmaf_cli::commands::{collect_images, format_table};
use cemmaf_cli::{cmd_eval, cmd_fixtures, cmd_pn, cmd_pp, cmd_segment, CliResult, EvalArgs, Outcome, SolveArgs};
use clap::{Args, Parser, Subcommand};

/// Contrastive explanations with monotonic attribute functions.
///
/// Exit status: 0 on success, 2 when no explanation was found for some
/// image, 1 on any error.
#[derive(Parser)]
#[command(name = "cemmaf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pertinent negatives: attribute additions that would change the class.
    Pn(SolveOpts),
    /// Pertinent positives: superpixels that alone keep the class.
    Pp(SolveOpts),
    /// Compare PP reports (and external rankings) in one metrics table.
    Eval(EvalOpts),
    /// Train a small fixture bundle and write sample images.
    Fixtures(FixtureOpts),
    /// Write grid superpixel label maps.
    Segment(SolveOpts),
}

#[derive(Args)]
struct SolveOpts {
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Input image (repeatable).
    #[arg(long)]
    image: Vec<PathBuf>,
    /// Directory of input images.
    #[arg(long)]
    images: Option<PathBuf>,
    /// key = value run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for batch runs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Record wall-clock solve times in reports (breaks byte-identical reruns).
    #[arg(long)]
    timings: bool,
    /// Superpixel label map to use instead of the grid segmentation.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct EvalOpts {
    /// Directory holding `*.pp.json` reports.
    #[arg(long)]
    reports: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// External ranking file (repeatable).
    #[arg(long)]
    rankings: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FixtureOpts {
    /// key = value fixture spec; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl SolveOpts {
    fn into_args(self, needs_bundle: bool) -> CliResult<SolveArgs> {
        if needs_bundle && self.bundle.is_none() {
            return Err(cemmaf_cli::CliError::Usage("--bundle is required".into()));
        }
        Ok(SolveArgs {
            images: collect_images(&self.image, self.images.as_deref())?,
            bundle: self.bundle.unwrap_or_default(),
            config: self.config,
            out: self.out,
            seed: self.seed,
            jobs: self.jobs,
            timings: self.timings,
            labels: self.labels,
        })
    }
}

fn run(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::Pn(opts) => cmd_pn(&opts.into_args(true)?),
        Command::Pp(opts) => cmd_pp(&opts.into_args(true)?),
        Command::Segment(opts) => cmd_segment(&opts.into_args(false)?).map(|()| Outcome::Ok),
        Command::Eval(opts) => {
            let table = cmd_eval(&EvalArgs {
                reports: opts.reports,
                bundle: opts.bundle,
                rankings: opts.rankings,
                out: opts.out,
            })?;
            print!("{}", format_table(&table));
            Ok(Outcome::Ok)
        }
        Command::Fixtures(opts) => cmd_fixtures(opts.config.as_deref(), opts.seed, &opts.out).map(|()| Outcome::Ok),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CEMMAF_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => ExitCode::from(outcome.exit_code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
