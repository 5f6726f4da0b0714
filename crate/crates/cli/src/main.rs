use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use popmap_core::experiment::{sweep_presets, Experiment, ExperimentConfig, Profile, Scenario, Variant};
use popmap_core::Error;

#[derive(Parser, Debug)]
#[command(name = "popmap", version, about = "Fine-grained population maps from coarse counts")]
struct Cli {
    /// JSON experiment config. Without one, defaults for --profile are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for model initialization and training. Without --config it
    /// also picks the synthetic city pair.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory shared by all stages.
    #[arg(long, global = true, env = "POPMAP_DATA", default_value = "popmap-out")]
    out: PathBuf,

    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,

    #[arg(long, global = true, value_enum)]
    scenario: Option<ScenarioArg>,

    /// Upscale factor between coarse and fine grids (2, 4 or 8).
    #[arg(long, global = true)]
    upscale: Option<usize>,

    /// Comma-separated variants: snet, stnet, stnet-frozen, snet+pgnet,
    /// stnet+pgnet, psrnet.
    #[arg(long, global = true, value_delimiter = ',')]
    variants: Option<Vec<String>>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic cities.
    Synth,
    /// Pre-train STNet (and SNet when a variant needs it).
    PretrainStnet,
    /// Pre-train PGNet.
    PretrainPgnet,
    /// Synthesize fine-grained target samples around the reference.
    Augment,
    /// Fine-tune every selected variant.
    Finetune,
    /// Evaluate on the target test period and write the reports.
    Evaluate,
    /// Run every stage in order.
    RunAll,
    /// Print the effective config as JSON.
    ShowConfig,
    /// Write the sweep preset configs into a directory.
    Presets {
        #[arg(default_value = "presets")]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScenarioArg {
    CrossCity,
    CrossGranularity,
}

fn build_config(cli: &Cli) -> popmap_core::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let profile = match cli.profile {
                ProfileArg::Desk => Profile::Desk,
                ProfileArg::Paper => Profile::Paper,
            };
            let scenario = match cli.scenario.unwrap_or(ScenarioArg::CrossCity) {
                ScenarioArg::CrossCity => Scenario::CrossCity,
                ScenarioArg::CrossGranularity => Scenario::CrossGranularity,
            };
            ExperimentConfig::for_profile(profile, scenario, cli.upscale.unwrap_or(4), cli.seed.unwrap_or(0))
        }
    };
    if cli.config.is_some() && (cli.scenario.is_some() || cli.upscale.is_some()) {
        return Err(Error::Config("--scenario and --upscale only apply without --config".into()));
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(names) = &cli.variants {
        config.variants = names.iter().map(|s| Variant::parse(s.trim())).collect::<popmap_core::Result<_>>()?;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> popmap_core::Result<()> {
    let config = build_config(cli)?;
    match &cli.command {
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&config)?);
            return Ok(());
        }
        Command::Presets { dir } => {
            fs::create_dir_all(dir)?;
            for (name, preset) in sweep_presets(&config) {
                let path = dir.join(format!("{name}.json"));
                fs::write(&path, serde_json::to_string_pretty(&preset)? + "\n")?;
                println!("{}", path.display());
            }
            return Ok(());
        }
        _ => {}
    }
    let exp = Experiment::new(config, &cli.out)?;
    match cli.command {
        Command::Synth => exp.synth(),
        Command::PretrainStnet => exp.pretrain_stnet(),
        Command::PretrainPgnet => exp.pretrain_pgnet(),
        Command::Augment => exp.augment(),
        Command::Finetune => exp.finetune(),
        Command::Evaluate => exp.evaluate().map(|r| print!("{}", r.to_markdown())),
        Command::RunAll => exp.run_all().map(|r| print!("{}", r.to_markdown())),
        Command::ShowConfig | Command::Presets { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            match e.root() {
                Error::Config(_) => ExitCode::from(2),
                Error::Train { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
