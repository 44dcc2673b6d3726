use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use srhc_cli::{cmd_field, cmd_plan, cmd_simulate, cmd_slice, cmd_sweep, CliError, CliResult, Context, FieldTarget};

#[derive(Debug, Parser)]
#[command(name = "srhc", version, about = "Stochastic receding-horizon control pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "SRHC_CONFIG")]
    config: Option<PathBuf>,
    /// Base seed; overrides `execution.seed`.
    #[arg(long, global = true, env = "SRHC_SEED")]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo batches.
    #[arg(long, global = true, env = "SRHC_JOBS")]
    jobs: Option<usize>,
    /// Run directory; overrides `output_dir`.
    #[arg(long, global = true, env = "SRHC_OUT")]
    out: Option<PathBuf>,
    /// Use `field.paper_nodes` and `field.paper_paths` instead of the default field resolution.
    #[arg(long, global = true, env = "SRHC_PAPER_SCALE")]
    paper_scale: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plan waypoints from `execution.start` to the origin.
    Plan,
    /// Estimate value fields for the plan's annuli.
    Field {
        /// Only the domain around this waypoint (1-based).
        #[arg(long, conflicts_with = "radius")]
        waypoint: Option<usize>,
        /// Only this outer radius.
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Run episodes along the stored plan.
    Simulate,
    /// Goal-exit probability against start radius.
    Sweep,
    /// Export `g` on planar slices of a field file.
    Slice {
        /// FKG1 file to read.
        #[arg(long)]
        field: PathBuf,
        /// Headings in radians.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        theta: Vec<f64>,
    },
}

fn context(g: &Global) -> CliResult<Context> {
    let path = g.config.as_ref().ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    Context::load(path, g.out.clone(), g.seed, g.paper_scale)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Plan => {
            let report = cmd_plan(&context(&cli.global)?)?;
            println!("{} ({} segments)", report.path.display(), report.plan.len());
        }
        Command::Field { waypoint, radius } => {
            let target = match (waypoint, radius) {
                (Some(i), _) => FieldTarget::Waypoint(i),
                (None, Some(r)) => FieldTarget::Radius(r),
                (None, None) => FieldTarget::Plan,
            };
            for p in cmd_field(&context(&cli.global)?, &target)? {
                println!("{}", p.display());
            }
        }
        Command::Simulate => {
            let s = cmd_simulate(&context(&cli.global)?)?;
            println!(
                "success rate {} ({} episodes, {} obstacle contacts, {} forbidden exits)",
                s.success_rate, s.episodes, s.obstacle_contacts, s.forbidden_exits
            );
        }
        Command::Sweep => {
            for r in cmd_sweep(&context(&cli.global)?)? {
                println!("r = {}: {} / {}", r.radius, r.success.successes, r.success.trials);
            }
        }
        Command::Slice { field, theta } => {
            let out = match (&cli.global.out, &cli.global.config) {
                (Some(o), _) => o.clone(),
                (None, Some(_)) => context(&cli.global)?.out,
                (None, None) => return Err(CliError::Config("slice needs --out or --config".into())),
            };
            for p in cmd_slice(&field, &theta, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
