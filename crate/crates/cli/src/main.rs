use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use minwidth::{Metric, ProbedFold};
use minwidth_cli::config::{parse_layers, parse_widths, RunConfig, ScheduleKind};
use minwidth_cli::run::{render_report, run, Command as RunCommand};

/// Estimate the minimum width of hidden fully connected layers.
#[derive(Parser)]
#[command(name = "minwidth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Log progress (-v) or every evaluation (-vv) to stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Train the cross-validated ensemble and save it.
    Train(RunArgs),
    /// Search the minimum width of every probed layer.
    Estimate(RunArgs),
    /// Retrain at given widths and compare with the original ensemble.
    Verify(RunArgs),
    /// Render an existing report as text (and TSV with --out).
    Report {
        path: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Recipe (mnist8, mnist28, fashion, california, wine), csv:<path> or idx:<images>,<labels>.
    #[arg(long)]
    dataset: Option<String>,
    /// Root directory of recipe data files [default: data].
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Target column of a CSV dataset.
    #[arg(long)]
    target: Option<String>,
    /// Test set, in the same syntax as --dataset.
    #[arg(long)]
    test: Option<String>,
    /// Fraction held out as the test set when there is no test file [default: 0.2].
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Reduce 28x28 images to 8x8.
    #[arg(long)]
    downscale: bool,
    /// Use only the first N training samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Output-first architecture formula, e.g. "FCx10(Softmax),FCx128(Abs),BN".
    #[arg(long)]
    formula: Option<String>,
    /// Value of p in the formula [default: 1].
    #[arg(long)]
    width_multiplier: Option<usize>,
    /// Cross-validation folds [default: 3].
    #[arg(long)]
    folds: Option<usize>,
    /// accuracy or mse [default: from the dataset].
    #[arg(long)]
    metric: Option<Metric>,
    /// Master seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Bootstrap resamples per evaluation [default: 10000].
    #[arg(long)]
    bootstrap_n: Option<usize>,
    /// Comma-separated layer indices to probe [default: all hidden dense layers].
    #[arg(long)]
    layers: Option<String>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    jobs: Option<usize>,
    /// constant or decreasing [default: constant].
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    /// Schedule of the retrained networks [default: decreasing].
    #[arg(long)]
    verify_schedule: Option<ScheduleKind>,
    /// Epoch cap per learning-rate phase [default: 200].
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Diagnostic Q(M) evaluations per fold pair [default: 8].
    #[arg(long)]
    sweep_points: Option<usize>,
    /// Factor layer outputs on a random subset of this many rows.
    #[arg(long)]
    svd_rows: Option<usize>,
    /// Network probed for fold pair (i, j): same (network i) or peer (network j) [default: same].
    #[arg(long)]
    probed_fold: Option<ProbedFold>,
    /// Directory of previously trained networks.
    #[arg(long)]
    networks: Option<PathBuf>,
    /// Widths for verify, e.g. "1=40,2=10".
    #[arg(long)]
    widths: Option<String>,
    /// Estimate report supplying the widths for verify.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Output directory [default: out].
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn into_config(self) -> anyhow::Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            dataset: self.dataset,
            data_dir: self.data_dir,
            target: self.target,
            test: self.test,
            test_fraction: self.test_fraction,
            downscale: self.downscale.then_some(true),
            limit: self.limit,
            formula: self.formula,
            width_multiplier: self.width_multiplier,
            folds: self.folds,
            metric: self.metric,
            seed: self.seed,
            bootstrap_n: self.bootstrap_n,
            layers: self.layers.as_deref().map(parse_layers).transpose()?,
            jobs: self.jobs,
            schedule: self.schedule,
            verify_schedule: self.verify_schedule,
            max_epochs: self.max_epochs,
            sweep_points: self.sweep_points,
            svd_rows: self.svd_rows,
            probed_fold: self.probed_fold,
            networks: self.networks,
            widths: self.widths.as_deref().map(parse_widths).transpose()?,
            report: self.report,
            out: self.out,
        };
        Ok(base.merge(flags))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Report { path, out } => render_report(&path, out.as_deref()),
        Command::Train(a) => a.into_config().and_then(|c| run(RunCommand::Train, c)),
        Command::Estimate(a) => a.into_config().and_then(|c| run(RunCommand::Estimate, c)),
        Command::Verify(a) => a.into_config().and_then(|c| run(RunCommand::Verify, c)),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
