use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stdfnc_cli::report::RunDir;
use stdfnc_cli::run::{prepare, run_stage};
use stdfnc_cli::{run_experiment, ExperimentConfig, Result, Stage};

#[derive(Parser)]
#[command(name = "stdfnc", version, about = "Spatio-temporal attention over dynamic functional network connectivity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (JSON). Without it the preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Overrides the root seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory of the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Folds and CAM jobs run concurrently on up to this many threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Synthetic CN vs Asym cohort.
    Desk,
    /// Synthetic cohort with weak and strong positive subgroups.
    Graded,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort (time courses, labels, effect table).
    Synth,
    /// Compute and store sliding-window dFNC for every subject.
    Dfnc,
    /// Train one model per cross-validation fold and save checkpoints.
    Train,
    /// Evaluate the fold checkpoints: metrics.csv, predictions, group scores, attention.
    Eval,
    /// Class activation maps, group difference maps and masking fidelity.
    Cam,
    /// Render SVG heatmaps and a summary from earlier stages.
    Report,
    /// Every stage in order.
    Run,
    /// Print the effective configuration as JSON.
    Config,
}

fn config(g: &Global) -> Result<ExperimentConfig> {
    let mut c = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => match g.preset {
            Preset::Desk => ExperimentConfig::desk("runs/desk"),
            Preset::Graded => ExperimentConfig::desk_graded("runs/graded"),
        },
    };
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(o) = &g.out {
        c.output = o.clone();
    }
    c.validate()?;
    Ok(c)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = config(&cli.global)?;
    let stage = match cli.command {
        Command::Config => {
            println!("{}", cfg.to_json());
            return Ok(());
        }
        Command::Run => {
            let summary = run_experiment(&cfg, cli.global.threads)?;
            println!("run written to {}", summary.run_dir.display());
            for f in &summary.folds {
                let m = f.metrics;
                println!("fold {}: acc {:.2} f1 {:.2} precision {:.2} spec {:.2} sens {:.2}", f.fold + 1, m.accuracy, m.f1, m.precision, m.specificity, m.sensitivity);
            }
            return Ok(());
        }
        Command::Synth => Stage::Synth,
        Command::Dfnc => Stage::Dfnc,
        Command::Train => Stage::Train,
        Command::Eval => Stage::Eval,
        Command::Cam => Stage::Cam,
        Command::Report => Stage::Report,
    };
    let mut run = RunDir::open(&cfg.output)?;
    run.set_seed("root", cfg.seed);
    let prepared = prepare(&cfg)?;
    run_stage(&cfg, &prepared, &mut run, stage, cli.global.threads, None)?;
    println!("{} stage written to {}", stage.name(), cfg.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
