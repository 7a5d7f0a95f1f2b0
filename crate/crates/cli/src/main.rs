use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spryfed_cli::{cmd_cost, cmd_partition, cmd_run, cmd_validate, load_config, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "spryfed", version, about = "Federated finetuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config with flat dotted keys.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for client simulation (default: all cores).
    #[arg(long, env = "SPRYFED_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federation; writes trace.csv, summary.json and checkpoint.bin.
    Run(Common),
    /// Partition the data; writes partition.json and bias.csv.
    Partition(Common),
    /// Cost tables over the configured grid; writes cost.csv.
    Cost(Common),
    /// Run a validation suite; writes report.json and prints it.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Suite name (defaults to the config's `validate.suite`).
        #[arg(long)]
        suite: Option<String>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load(&c)?;
            let out = cmd_run(&cfg, &c.out, c.threads)?;
            println!("{}", out.summary.display());
        }
        Command::Partition(c) => {
            let cfg = load(&c)?;
            let p = cmd_partition(&cfg, &c.out)?;
            println!("{} clients, {} samples", p.num_clients(), p.total());
        }
        Command::Cost(c) => {
            let cfg = load(&c)?;
            println!("{}", cmd_cost(&cfg, &c.out)?.display());
        }
        Command::Validate { common, suite } => {
            let cfg = load(&common)?;
            let Some(suite) = suite.or_else(|| cfg.validate_suite.clone()) else {
                return Err(CliError::UnknownSuite("no suite given (--suite or `validate.suite`)".into()));
            };
            let bundle = cmd_validate(&cfg, &suite, &common.out, common.threads)?;
            println!("{}", serde_json::to_string_pretty(&bundle).expect("json"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
