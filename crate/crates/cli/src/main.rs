use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcm_core::distill::Mode;
use dcm_core::experiment::{self, ExperimentConfig, Overrides, RunOptions};
use dcm_core::Error;

/// Joint training of two networks with dense cross-layer mutual distillation.
#[derive(Parser, Debug)]
#[command(name = "dcm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every seed of an experiment and write its run directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue seeds from their latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Check a configuration and print it fully resolved.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Tabulate final errors of several runs with margins against a baseline.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Run label (config name or directory name) or mode used as the
        /// reference column; defaults to the first run.
        #[arg(long)]
        baseline: Option<String>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Accept metrics files whose config hash differs from their run.
        #[arg(long)]
        force: bool,
    },
    /// Write one network's backbone from a checkpoint, without auxiliary heads.
    Export {
        /// Configuration the checkpoint was trained with.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1 or 2.
        #[arg(long, default_value_t = 2)]
        net: usize,
        /// Manifest file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds, replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "mode-override", value_parser = parse_mode)]
    mode_override: Option<Mode>,
    /// Stratified training subset size.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long = "corrupt-ratio")]
    corrupt_ratio: Option<f64>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode {s:?}; expected one of {}", names.join(", "))
    })
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidSpec(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut config = ExperimentConfig::load(&args.config).map_err(|e| match e {
        Error::Io { .. } => Failure::Config(e.to_string()),
        other => other.into(),
    })?;
    config.apply(&Overrides {
        seeds: args.seeds.clone(),
        out_dir: args.out.clone(),
        mode: args.mode_override,
        subset: args.subset,
        corrupt_ratio: args.corrupt_ratio,
    });
    Ok(config.resolve()?)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, resume } => {
            let config = load_config(&config)?;
            let record = experiment::run(&config, &RunOptions { resume }, &mut |line| eprintln!("{line}"))?;
            print!("{}", std::fs::read_to_string(record.config.out_dir.join("summary.txt")).unwrap_or_default());
        }
        Command::Validate { config } => {
            let config = load_config(&config)?;
            println!("# config_hash: {}", config.hash());
            print!("{}", config.to_toml());
        }
        Command::Compare {
            runs,
            baseline,
            csv,
            force,
        } => {
            let cmp = experiment::compare(&runs, baseline.as_deref(), force)?;
            print!("{}", cmp.to_text());
            if let Some(path) = csv {
                write_file(&path, &cmp.to_csv()?)?;
            }
        }
        Command::Export {
            config,
            checkpoint,
            net,
            out,
        } => {
            let config = load_config(&ConfigArgs {
                config,
                seeds: None,
                out: None,
                mode_override: None,
                subset: None,
                corrupt_ratio: None,
            })?;
            let m = experiment::export(&config, &checkpoint, net, &out)?;
            println!("{}: {} parameters", out.display(), m.param_count());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
