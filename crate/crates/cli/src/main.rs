use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mchom::config::RunConfig;
use mchom::metrics::table_to_string;
use mchom::pipeline::Pipeline;

/// Multicontinuum homogenization of time-fractional diffusion-wave problems.
///
/// Verbosity follows the MCHOM_LOG environment variable (env_logger syntax,
/// default `info`).
#[derive(Parser)]
#[command(name = "mchom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize the configured medium.
    GenerateMedia(Common),
    /// Solve the fine-scale reference problem and store snapshots.
    SolveFine(Common),
    /// Solve all cell problems and write a diagnostics report.
    SolveCells(Common),
    /// Compute effective block coefficients and load moments.
    Upscale(Common),
    /// Solve the coarse multicontinuum model and store snapshots.
    SolveMacro(Common),
    /// Error table from stored fine and coarse snapshots.
    Compare(Common),
    /// Every stage in order, reusing finished artifacts.
    Full(Common),
    /// Decoupled zero-order model with a scalar reference check.
    ZeroOrder(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn run(command: Command) -> mchom::Result<()> {
    let (Command::GenerateMedia(c)
    | Command::SolveFine(c)
    | Command::SolveCells(c)
    | Command::Upscale(c)
    | Command::SolveMacro(c)
    | Command::Compare(c)
    | Command::Full(c)
    | Command::ZeroOrder(c)) = &command;
    if let Some(jobs) = c.jobs {
        if jobs == 0 {
            return Err(mchom::Error::Config("--jobs: must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let cfg = RunConfig::load(&c.config)?;
    let continua = cfg.continua();
    let pipeline = Pipeline::new(cfg, &c.out)?;
    let print_path = |p: PathBuf| println!("{}", p.display());
    match command {
        Command::GenerateMedia(_) => print_path(pipeline.generate_media()?),
        Command::SolveFine(_) => print_path(pipeline.solve_fine()?),
        Command::SolveCells(_) => print_path(pipeline.solve_cells()?),
        Command::Upscale(_) => print_path(pipeline.upscale()?),
        Command::SolveMacro(_) => print_path(pipeline.solve_macro()?),
        Command::Compare(_) | Command::Full(_) => {
            let (path, rows) = if matches!(command, Command::Full(_)) {
                pipeline.full()?
            } else {
                pipeline.compare()?
            };
            let n = rows.first().map(|r| r.errors.len()).or(continua).unwrap_or(0);
            print!("{}", table_to_string(&rows, n));
            log::info!("error table: {}", path.display());
        }
        Command::ZeroOrder(_) => {
            let report = pipeline.zero_order()?;
            println!("max relative deviation from scalar reference: {:e}", report.max_deviation);
            println!("max off-diagonal gamma/beta entry: {:e}", report.max_off_diagonal);
            println!("{}", report.path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MCHOM_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
