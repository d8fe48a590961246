use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lgd_cli::commands::{self, Which};
use lgd_cli::rundir::{RunDir, CONFIG};
use lgd_cli::{CliError, Method, Result, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lgd", version, about = "Learnability-guided incremental dataset distillation")]
struct Cli {
    /// Config file (TOML, dotted keys). Defaults to the run directory's
    /// config.toml, then to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report errors as JSON on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the synthetic mixture and write the train/test split.
    GenData,
    /// Train the reference classifier and the diffusion noise predictor.
    TrainReference,
    /// Run the staged distillation.
    Distill {
        #[arg(long, value_enum)]
        method: Option<Method>,
    },
    /// Train fresh models on the distilled dataset and report test accuracy.
    EvalStatic {
        #[arg(long)]
        repeats: Option<usize>,
        /// Train on the full train split instead of the distilled dataset.
        #[arg(long)]
        full: bool,
    },
    /// Redundancy, loss-spike, dynamics and in-distribution reports.
    Analyze {
        #[arg(long, value_enum, default_value = "all")]
        which: Which,
    },
    /// Side-by-side summary of analysed runs.
    Compare {
        #[arg(required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.out) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(CliError::config(format!("config file {} does not exist", path.display())));
            }
            RunConfig::load(path)?
        }
        (None, Some(out)) if out.join(CONFIG).exists() => RunConfig::load(&out.join(CONFIG))?,
        (None, _) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Command::Distill { method: Some(m) } = &cli.command {
        cfg.method = *m;
    }
    if let Command::EvalStatic { repeats: Some(r), .. } = &cli.command {
        cfg.eval.repeats = *r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Compare { runs } = &cli.command {
        let dirs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
        print!("{}", commands::format_table(&commands::compare(&dirs)?));
        return Ok(());
    }
    let cfg = resolve_config(cli)?;
    let dir = RunDir::open(&cfg.out)?;
    match &cli.command {
        Command::GenData => emit(&commands::gen_data(&cfg, &dir)?),
        Command::TrainReference => emit(&commands::train_reference(&cfg, &dir)?),
        Command::Distill { .. } => emit(&commands::distill(&cfg, &dir)?),
        Command::EvalStatic { full, .. } => emit(&commands::eval_static(&cfg, &dir, cfg.eval.repeats, *full)?),
        Command::Analyze { which } => emit(&commands::analyze(&cfg, &dir, *which)?),
        Command::Compare { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() && std::env::args().any(|a| a == "--json-errors") => {
            eprintln!("{}", CliError::config(e.kind().to_string()).to_json());
            return ExitCode::from(2);
        }
        // clap exits 2 for usage errors and 0 for --help/--version
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json_errors {
                eprintln!("{}", e.to_json());
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
