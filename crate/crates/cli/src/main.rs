use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dgdpo_core::config::Config;
use dgdpo_core::pipeline::{Pipeline, Stage};
use dgdpo_core::{report, Error};

#[derive(Parser)]
#[command(name = "dgdpo", version, about = "Diagnose and refine simulated user profiles, then pit them against recommenders")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "configs/toy.toml")]
    config: PathBuf,

    /// Output directory for the run.
    #[arg(long, short, global = true, default_value = "runs/toy")]
    out: PathBuf,

    /// Worker threads for per-user work; defaults to the number of cores.
    #[arg(long, short, global = true)]
    jobs: Option<usize>,

    /// Re-run stages the manifest already lists as complete.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the dataset, filter it, split users and draw the user sample.
    Ingest,
    /// Build initial profiles from each user's initialization sequence.
    InitProfiles,
    /// Run the diagnose-and-treat loop over each user's optimization sequence.
    Optimize,
    /// Corrupt clean profiles into labelled defect samples.
    SynthesizeDefects,
    /// Write the pre-training and fine-tuning corpora.
    EmitCorpus,
    /// Score the configured diagnoser on the held-out defect samples.
    EvalDiagnostic,
    /// Play the simulator-recommender arena for initial and optimized profiles.
    Interact,
    /// Summarize one or more run directories.
    Report {
        /// Run directories to compare; defaults to --out.
        runs: Vec<PathBuf>,
        /// Where to write the tables; defaults to <out>/report.
        #[arg(long)]
        to: Option<PathBuf>,
    },
    /// Run a sequence of stages, skipping completed ones.
    Run {
        /// Comma-separated stages; defaults to ingest through report without the corpus stages.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
        /// Run every stage.
        #[arg(long, conflicts_with = "stages")]
        all: bool,
    },
    /// Validate the config and print its hash.
    Check,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Backend(_) | Error::Parse(_) => 3,
        Error::Invariant(_) | Error::Precondition(_) | Error::Divergence { .. } | Error::UnknownId(_) => 4,
        Error::Io { .. } | Error::MalformedRecord { .. } | Error::Serde(_) => 1,
    }
}

fn stage_of(cmd: &Command) -> Option<Stage> {
    Some(match cmd {
        Command::Ingest => Stage::Ingest,
        Command::InitProfiles => Stage::InitProfiles,
        Command::Optimize => Stage::Optimize,
        Command::SynthesizeDefects => Stage::SynthesizeDefects,
        Command::EmitCorpus => Stage::EmitCorpus,
        Command::EvalDiagnostic => Stage::EvalDiagnostic,
        Command::Interact => Stage::Interact,
        _ => return None,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Command::Report { runs, to } = &cli.command {
        let runs = if runs.is_empty() { vec![cli.out.clone()] } else { runs.clone() };
        let to = to.clone().unwrap_or_else(|| cli.out.join("report"));
        let r = report::build(&runs, &to)?;
        print!("{}", r.summary_text());
        return Ok(());
    }

    let cfg = Config::load(&cli.config)?;
    let pipeline = Pipeline::new(cfg, &cli.out, cli.jobs)?;
    match &cli.command {
        Command::Check => {
            println!("{}", pipeline.config_hash());
            Ok(())
        }
        Command::Run { stages, all } => {
            let stages: Vec<Stage> = if *all {
                Stage::ALL.to_vec()
            } else if stages.is_empty() {
                Stage::DEFAULT_RUN.to_vec()
            } else {
                stages.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
            };
            let m = pipeline.run(&stages, cli.force)?;
            println!("{} {}", m.config_hash, pipeline.out_dir().display());
            Ok(())
        }
        cmd => {
            let stage = stage_of(cmd).expect("stage subcommand");
            pipeline.run(&[stage], cli.force).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
