use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maulab::config::{load_config_file, resolve, Overrides, Preset};
use maulab::pipeline::Pipeline;
use maulab::{parallel, Error};

#[derive(Parser)]
#[command(name = "maulab", version, about = "Masked acoustic-unit mispronunciation detection and correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON file overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    /// Output root holding every artifact directory.
    #[arg(long, global = true, default_value = "maulab-out")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Synthesize the corpus.
    Generate,
    /// Train the VQ autoencoder.
    TrainVq,
    /// Encode every split into acoustic units.
    Encode,
    /// Train the masked detector on corrupted L1 units.
    TrainDetector,
    /// Fine-tune the detector into the MASK-filling corrector.
    FinetuneCorrector,
    /// Per-phoneme error scores on the L2 test split.
    Detect,
    /// Mask flagged units and refill them.
    Correct,
    /// Detection and correction reports.
    Evaluate,
    /// SVG plots.
    Report,
    /// Every stage in order.
    All,
}

impl Command {
    fn stage(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::TrainVq => "train-vq",
            Command::Encode => "encode",
            Command::TrainDetector => "train-detector",
            Command::FinetuneCorrector => "finetune-corrector",
            Command::Detect => "detect",
            Command::Correct => "correct",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
            Command::All => "all",
        }
    }
}

fn threads_from_env() -> Result<(), Error> {
    match std::env::var("MAULAB_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| Error::Config(format!("MAULAB_THREADS must be a positive integer, got `{v}`")))?;
            parallel::init_threads(n);
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    threads_from_env()?;
    let file = cli.config.as_deref().map(load_config_file).transpose()?;
    let cfg = resolve(file.as_ref(), &Overrides { preset: cli.preset, seed: cli.seed })?;
    let p = Pipeline::new(cfg, &cli.out);
    match cli.command {
        Command::All => p.run_all(),
        c => p.run(c.stage()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "status": "error",
                "stage": cli.command.stage(),
                "kind": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::from(2)
        }
    }
}
