use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmada::{run_ablation, run_plan, run_stage, Context, Preset, RunConfig, Stage, Variant};

#[derive(Parser)]
#[command(
    name = "cmada",
    version,
    about = "Cross-modality domain adaptation for VS and cochlea segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); defaults to the preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    variant: Variant,
    /// Use predecessor artifacts written under a different configuration.
    #[arg(long)]
    allow_hash_mismatch: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the phantom dataset, or validate and record a manifest.
    Synth(Common),
    /// Resample, crop or pad, clip, and normalize every volume.
    Preprocess(Common),
    /// Train the image translation networks and map the source volumes.
    Translate(Common),
    /// Train the variant's segmentation networks.
    TrainSeg(Common),
    /// Adversarial adaptation, keeping candidate checkpoints.
    Adapt(Common),
    /// Pick a candidate by the unsupervised validation loss.
    Select(Common),
    /// Score the variant's methods on the labelled target volumes.
    Evaluate(Common),
    /// Tabulate every evaluated method.
    Report(Common),
    /// Every stage of the chosen variant.
    Run(Common),
    /// All variants and the report.
    Ablation(Common),
    /// Print the resolved configuration and its hash.
    ShowConfig(Common),
}

fn config(c: &Common) -> cmada::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(c.preset.unwrap_or(Preset::Desk)),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_line(line: &str) {
    println!("{}", line.trim_end());
}

fn run(cmd: Command) -> cmada::Result<()> {
    let (c, stage) = match &cmd {
        Command::Synth(c) => (c, Some(Stage::Synth)),
        Command::Preprocess(c) => (c, Some(Stage::Preprocess)),
        Command::Translate(c) => (c, Some(Stage::Translate)),
        Command::TrainSeg(c) => (c, Some(Stage::TrainSeg)),
        Command::Adapt(c) => (c, Some(Stage::Adapt)),
        Command::Select(c) => (c, Some(Stage::Select)),
        Command::Evaluate(c) => (c, Some(Stage::Evaluate)),
        Command::Report(c) => (c, Some(Stage::Report)),
        Command::Run(c) | Command::Ablation(c) | Command::ShowConfig(c) => (c, None),
    };
    let cfg = config(c)?;
    match (&cmd, stage) {
        (_, Some(stage)) => {
            let ctx = Context::new(cfg, c.variant, c.allow_hash_mismatch)?;
            println!("{}", run_stage(&ctx, stage)?.trim_end());
        }
        (Command::Run(_), _) => {
            let ctx = Context::new(cfg, c.variant, c.allow_hash_mismatch)?;
            run_plan(&ctx, &mut print_line)?;
        }
        (Command::Ablation(_), _) => {
            run_ablation(&cfg, c.allow_hash_mismatch, &mut print_line)?;
        }
        _ => {
            println!("# config_hash = {}", cfg.hash());
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
