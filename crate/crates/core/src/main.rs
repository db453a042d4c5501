use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use earcan::harness::{self, stages, ExperimentConfig, HarnessError, RunOptions, Scenario};

#[derive(Parser)]
#[command(name = "earcan", version, about = "Ear-canal acoustic authentication experiments")]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output root. Overrides the config and the EARCAN_OUT variable.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sound every user's ear and export the estimated impulse responses.
    Enroll,
    /// Write the synthetic training and test corpora as WAV files.
    SynthCorpus,
    /// Build the augmented training set and summarise it.
    Augment,
    /// Train the embedding network.
    Train,
    /// Score the chirp, playback and watermarked conditions (needs `train`).
    Eval,
    /// Optimise and audit watermark patches for the test clips (needs `train`).
    Watermark,
    /// Simulate one session scenario (needs `train`).
    SessionSim {
        #[arg(long)]
        scenario: String,
    },
    /// Run the whole pipeline and write report.json.
    RunAll,
    /// Print the effective config as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = load_config(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir());
    match &cli.cmd {
        Cmd::Enroll => stages::enroll_stage(&cfg, &out)?,
        Cmd::SynthCorpus => stages::synth_corpus(&cfg, &out)?,
        Cmd::Augment => stages::augment_stage(&cfg, &out)?,
        Cmd::Train => stages::train_stage(&cfg, &out)?,
        Cmd::Eval => stages::eval_stage(&cfg, &out)?,
        Cmd::Watermark => stages::watermark_stage(&cfg, &out)?,
        Cmd::SessionSim { scenario } => {
            let s: Scenario = scenario.parse()?;
            stages::session_stage(&cfg, &out, s)?
        }
        Cmd::RunAll => {
            let report = harness::run_with(&cfg, &RunOptions { out_dir: Some(out.clone()), ..RunOptions::default() })?;
            for c in &report.conditions {
                println!("{:<12} eer {:.4}  accuracy@eer {:.4}", c.condition, c.eer, c.accuracy_at_eer);
            }
        }
        Cmd::ShowConfig => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Config(_) => ExitCode::from(2),
                HarnessError::Stage { .. } => ExitCode::from(3),
            }
        }
    }
}
