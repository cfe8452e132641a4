use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hcattn::cli::{
    cmd_gen, cmd_report_budget, cmd_report_comm, cmd_run, cmd_sweep, cmd_train, render_sweep,
    ReportFormat, RunConfig,
};

#[derive(Parser)]
#[command(name = "hcattn", version, about = "Approximate attention over a compressed KV cache")]
struct Cli {
    /// Report rendering for all commands.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Keyvalue,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => ReportFormat::Text,
            Format::Keyvalue => ReportFormat::KeyValue,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic key/value/query tensor dumps.
    Gen(GenArgs),
    /// Train a codebook on a key dump.
    Train(TrainArgs),
    /// Run the pipeline and report error against the exact oracle.
    Run(RunArgs),
    /// Sweep tau / g / c axes over shared data.
    Sweep(SweepArgs),
    /// Memory-budget and communication-overhead reports.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Gaussian,
    Planted,
}

impl DataKind {
    fn as_str(self) -> &'static str {
        match self {
            DataKind::Gaussian => "gaussian",
            DataKind::Planted => "planted",
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Data kind.
    #[arg(long, value_enum, default_value_t = DataKind::Gaussian)]
    kind: DataKind,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    /// Planted clusters per group.
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    /// Planted group count; defaults to d/2.
    #[arg(long)]
    groups: Option<usize>,
    /// Planted noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Query rows to generate.
    #[arg(long, default_value_t = 64)]
    queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Key dump to fit on.
    #[arg(long)]
    keys: PathBuf,
    /// Output codebook path.
    #[arg(long, default_value = "codebook.hccb")]
    out: PathBuf,
    #[arg(long)]
    g: usize,
    #[arg(long)]
    c: usize,
    /// Share one codebook across all groups.
    #[arg(long, default_value_t = false)]
    shared: bool,
    #[arg(long, default_value_t = 10_000)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 3)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// TOML session config; when given, other flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(long)]
    values: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,

    /// Synthetic sequence length when no dumps are given.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    query_heads: usize,
    #[arg(long, default_value_t = 1)]
    kv_heads: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    recent_window: usize,

    /// Quantization group count; omit (with --c) for value-offload-only.
    #[arg(long)]
    g: Option<usize>,
    /// Centroids per codebook.
    #[arg(long)]
    c: Option<usize>,
    /// Disable key quantization even if --g/--c are present.
    #[arg(long, default_value_t = false)]
    no_quantize: bool,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig, hcattn::Error> {
        if let Some(path) = &self.config {
            return RunConfig::from_file(path);
        }
        let (groups, centroids) = if self.no_quantize {
            (None, None)
        } else {
            (self.g, self.c)
        };
        Ok(RunConfig {
            keys_path: self.keys,
            values_path: self.values,
            queries_path: self.queries,
            codebook_path: self.codebook,
            n: self.n,
            steps: Some(self.steps),
            seed: Some(self.seed),
            layers: self.layers,
            query_heads: self.query_heads,
            kv_heads: self.kv_heads,
            d: self.d,
            tau: self.tau,
            recent_window: Some(self.recent_window),
            groups,
            centroids,
        })
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated tau values.
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7,0.9,1.0")]
    taus: Vec<f64>,
    /// Comma-separated group counts.
    #[arg(long, value_delimiter = ',', required = true)]
    gs: Vec<usize>,
    /// Comma-separated centroid counts.
    #[arg(long, value_delimiter = ',', required = true)]
    cs: Vec<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Communication-overhead mode instead of memory budget.
    #[arg(long, default_value_t = false)]
    comm: bool,

    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long, default_value_t = false)]
    offload: bool,

    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    #[arg(long = "L", default_value_t = 32)]
    layers: usize,
    #[arg(long = "H", default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 0.2)]
    frac: f64,
    #[arg(long, default_value_t = 2)]
    bytes_per_score: usize,
}

fn run(cli: Cli) -> Result<String, hcattn::Error> {
    let format: ReportFormat = cli.format.into();
    match cli.command {
        Command::Gen(a) => Ok(cmd_gen(
            a.kind.as_str(),
            a.n,
            a.d,
            a.clusters,
            a.groups,
            a.noise,
            a.queries,
            a.seed,
            &a.out_dir,
        )?
        .render(format)),
        Command::Train(a) => Ok(cmd_train(
            &a.keys,
            &a.out,
            a.g,
            a.c,
            a.shared,
            a.batch_size,
            a.max_iters,
            a.restarts,
            a.seed,
        )?
        .render(format)),
        Command::Run(a) => Ok(cmd_run(&a.into_config()?)?.render(format)),
        Command::Sweep(a) => {
            let cfg = a.run.into_config()?;
            let rows = cmd_sweep(&cfg, &a.taus, &a.gs, &a.cs)?;
            Ok(render_sweep(&rows, format))
        }
        Command::Report(a) => {
            if a.comm {
                Ok(
                    cmd_report_comm(a.n, a.layers, a.heads, a.frac, a.bytes_per_score)?
                        .render(format),
                )
            } else {
                Ok(cmd_report_budget(a.d, a.g, a.offload)?.render(format))
            }
        }
    }
}

fn main() -> ExitCode {
    // clap exits with code 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(output) => {
            print!("{output}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
