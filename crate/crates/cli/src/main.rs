mod commands;
mod config;
mod error;
mod ledger;
mod output;
mod plot;
mod registry;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Preset;

/// Grow a mixture-of-experts next-location model city by city, evaluate it
/// and audit what it leaks.
#[derive(Parser)]
#[command(name = "mobgcl", version)]
struct Cli {
    /// Root holding `cities/<id>/` datasets and `runs/ledger.jsonl`.
    #[arg(long, global = true, env = "MGCL_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct Overwrite {
    /// Overwrite existing output.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city with train/val/test splits.
    GenCity {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        city_id: u32,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        locations: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        trajectories: u64,
        /// Inverse temperature of the gravity transitions.
        #[arg(long, default_value_t = 2.5)]
        sharpness: f64,
        #[arg(long, default_value_t = 0.05)]
        explore: f64,
        #[arg(long, default_value_t = 0.75)]
        taste_spread: f64,
        /// Train, validation and test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.0, 0.2])]
        split: Vec<f64>,
        /// Defaults to `<data-root>/cities/<city-id>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overwrite: Overwrite,
    },
    /// Print a preset experiment config as TOML.
    InitConfig {
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the base model on the config's base cities.
    TrainBase {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overwrite: Overwrite,
    },
    /// Run one continual round on a new city.
    Continual {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory of the previous round.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        city: u32,
        #[arg(long, value_enum, default_value_t = VariantArg::Gcl)]
        variant: VariantArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overwrite: Overwrite,
    },
    /// Score a checkpoint on the test split of some cities.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated city ids.
        #[arg(long, value_delimiter = ',', required = true)]
        cities: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 3])]
        k: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overwrite: Overwrite,
    },
    /// Privacy audits: uniqueness, membership inference, epsilon estimate.
    Audit {
        #[arg(long, value_enum)]
        kind: AuditKind,
        #[arg(long)]
        city: u32,
        /// Checkpoint to audit; not needed with `--generator memorize`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Neighbouring checkpoint for `--kind dp`.
        #[arg(long)]
        other: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = GeneratorArg::Model)]
        generator: GeneratorArg,
        /// Experiment config supplying the `[audit]` block.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overwrite: Overwrite,
    },
    /// Render SVG charts from a report file.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overwrite: Overwrite,
    },
    /// Write a city's location embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        city: u32,
        /// `pre`: location encoder output (hidden width). `post`: decoder
        /// output before projection (twice the hidden width).
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overwrite: Overwrite,
    },
    /// Desk-scale experiments on a generated multi-city scenario.
    Bench {
        #[arg(long, value_enum)]
        kind: BenchKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overwrite: Overwrite,
    },
    /// Check that every round in the ledger consumed an earlier round's output.
    VerifyLedger,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Gcl,
    FullTune,
    ExpertTune,
    WithoutKd,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AuditKind {
    U,
    Mia,
    Dp,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
pub enum GeneratorArg {
    Model,
    /// Replays training trajectories verbatim; a worst-case reference.
    Memorize,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Stage {
    Pre,
    Post,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BenchKind {
    Ablation,
    Order,
    Sweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.data_root.clone().unwrap_or_else(|| PathBuf::from("data"));
    let res = match cli.command {
        Command::GenCity {
            seed,
            city_id,
            locations,
            trajectories,
            sharpness,
            explore,
            taste_spread,
            split,
            out,
            overwrite,
        } => commands::gen_city(
            &root,
            commands::GenCity {
                seed,
                city_id,
                locations: locations as usize,
                trajectories: trajectories as usize,
                sharpness,
                explore,
                taste_spread,
                split: [split[0], split[1], split[2]],
            },
            out,
            overwrite.force,
        ),
        Command::InitConfig { preset, seed } => {
            print!("{}", config::ExperimentConfig::preset(preset, seed, root).to_toml());
            Ok(())
        }
        Command::TrainBase { config, out, overwrite } => commands::train_base(cli.data_root, &config, &out, overwrite.force),
        Command::Continual {
            config,
            teacher,
            city,
            variant,
            out,
            overwrite,
        } => commands::continual(cli.data_root, &config, &teacher, city, variant, &out, overwrite.force),
        Command::Eval {
            checkpoint,
            cities,
            k,
            out,
            overwrite,
        } => commands::eval(&root, &checkpoint, &cities, &k, &out, overwrite.force),
        Command::Audit {
            kind,
            city,
            checkpoint,
            other,
            generator,
            config,
            seed,
            out,
            overwrite,
        } => commands::audit(
            cli.data_root,
            commands::AuditArgs {
                kind,
                city,
                checkpoint,
                other,
                generator,
                config,
                seed,
            },
            &out,
            overwrite.force,
        ),
        Command::Plot { report, out, overwrite } => commands::plot(&report, &out, overwrite.force),
        Command::ExportEmbeddings {
            checkpoint,
            city,
            stage,
            out,
            overwrite,
        } => commands::export_embeddings(&root, &checkpoint, city, stage, &out, overwrite.force),
        Command::Bench { kind, seed, out, overwrite } => commands::bench(kind, seed, &out, overwrite.force),
        Command::VerifyLedger => commands::verify_ledger(&root),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
