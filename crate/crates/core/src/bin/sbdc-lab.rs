use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sbdc_lab::pipeline::{files, Run, RunConfig, Stage};
use sbdc_lab::Error;

const THREADS_ENV: &str = "SBDC_LAB_THREADS";

#[derive(Parser)]
#[command(name = "sbdc-lab", version, about = "Discriminator-corrected conditional diffusion on 2D toy data")]
struct Cli {
    /// TOML or JSON config, merged over its `preset`.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker cap; SBDC_LAB_THREADS takes precedence.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Generate,
    TrainScore,
    Detect,
    TrainDisc,
    Sample,
    Analyze,
    Pipeline {
        /// Skip stages whose recorded outputs are present and unchanged.
        #[arg(long)]
        resume: bool,
    },
    Plot,
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let config = match &e {
            Error::Stage { source, .. } => source.is_config_error(),
            other => other.is_config_error(),
        };
        if config {
            Failure::Config(e.to_string())
        } else {
            Failure::Stage(e.to_string())
        }
    }
}

fn jobs(flag: Option<usize>) -> Result<usize, Failure> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        };
    }
    match flag {
        Some(0) => Err(Failure::Config("--jobs must be at least 1".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let config_err = |e: Error| Failure::Config(e.to_string());
    let snapshot = cli.out.as_deref().map(|d| d.join(files::CONFIG)).filter(|p| p.exists());
    let mut config = match (&cli.config, &cli.preset, snapshot) {
        (Some(path), _, _) => RunConfig::load(path).map_err(config_err)?,
        (None, Some(name), _) => RunConfig::preset(name).map_err(config_err)?,
        (None, None, Some(snap)) => RunConfig::load(&snap).map_err(config_err)?,
        (None, None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate().map_err(config_err)?;
    Ok(config)
}

fn out_dir(cli: &Cli, config: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| Path::new("runs").join(format!("{}-seed{}", config.preset, config.seed)))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = load_config(&cli)?;
    let jobs = jobs(cli.jobs)?;
    let dir = out_dir(&cli, &config);
    let run = Run::create(config, &dir, jobs)?;
    let stage = match cli.command {
        Command::Generate => Stage::Generate,
        Command::TrainScore => Stage::TrainScore,
        Command::Detect => Stage::Detect,
        Command::TrainDisc => Stage::TrainDisc,
        Command::Sample => Stage::Sample,
        Command::Analyze => Stage::Analyze,
        Command::Plot => Stage::Plot,
        Command::Pipeline { resume } => {
            let cmp = run.pipeline(resume)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "purity {:.4} -> {:.4}, mean class-wise Frechet {} -> {}",
                cmp.unguided.purity,
                cmp.guided.purity,
                fmt(cmp.mean_cw_frechet_unguided),
                fmt(cmp.mean_cw_frechet_guided)
            );
            println!("{}", dir.display());
            return Ok(());
        }
    };
    run.run_stage(stage)?;
    eprintln!("{}: done", stage.name());
    for name in stage.outputs() {
        println!("{}", dir.join(name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
