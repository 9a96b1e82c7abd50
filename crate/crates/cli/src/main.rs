use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tts_core::corpus::Corpus;
use tts_core::eval::{run_ablation, AblationGrid};
use tts_core::model::checkpoint::Checkpoint;
use tts_core::model::{train_erm, NoiseStats, TrainConfig};
use tts_core::synth::{generate, SynthConfig};
use tts_core::trapset::{
    build_trap_split, correlation_report, read_metadata_csv, write_split_csv, Artifact, Stratum, TrapSplit,
    TrapSplitSpec,
};
use tts_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "tts", version, about = "Keypoint-guided test-time channel selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted artifacts.
    Generate(GenerateArgs),
    /// Build a trap split from a metadata CSV.
    Split(SplitArgs),
    /// Train a model on the train stratum of a trap split.
    Train(TrainArgs),
    /// Run the ablation grid and write report.csv and bias_sweep.csv.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Synthesis settings as JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SplitOptions {
    #[arg(long, default_value_t = 1.0)]
    bias_factor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.1, 0.3])]
    fractions: Vec<f64>,
}

impl SplitOptions {
    fn spec(&self) -> TrapSplitSpec {
        TrapSplitSpec::new(self.bias_factor, self.seed).with_fractions(
            self.fractions[0],
            self.fractions[1],
            self.fractions[2],
        )
    }
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    metadata: PathBuf,
    /// Output CSV of `image_id,stratum`.
    #[arg(long)]
    out: PathBuf,
    /// Per-stratum phi table CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    split: SplitOptions,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// Training settings as JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    split: SplitOptions,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Grid definition as JSON.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Number of seeds; seeds 0..N are used.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the grid's bias factors.
    #[arg(long, value_delimiter = ',')]
    bias_factors: Option<Vec<f64>>,
    /// Corpus directory; a default synthetic corpus is generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate_corpus(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn generate_corpus(a: GenerateArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_json(a.config.as_deref())?;
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let corpus = Corpus::from_synth(generate(&cfg)?)?;
    corpus.save(&a.out)?;
    println!("wrote {} samples to {}", corpus.len(), a.out.display());
    Ok(())
}

fn print_phi(split: &TrapSplit) {
    println!("{:<12} {:>9} {:>9}", "artifact", "train_phi", "test_phi");
    for a in Artifact::ALL {
        println!("{:<12} {:>9.3} {:>9.3}", a.as_str(), split.train_phi(a), split.test_phi(a));
    }
}

fn split(a: SplitArgs) -> Result<()> {
    let records = read_metadata_csv(&a.metadata)?;
    let split = build_trap_split(&records, &a.split.spec())?;
    write_split_csv(&split, &a.out)?;
    if let Some(path) = &a.report {
        correlation_report(&split, &records)?.write_csv(path)?;
    }
    print_phi(&split);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = read_json(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.seed = a.split.seed;
    let corpus = Corpus::load(&a.corpus)?;
    let split = build_trap_split(&corpus.records(), &a.split.spec())?;
    let stratum = |s| -> Vec<_> {
        split
            .ids(s)
            .into_iter()
            .filter_map(|id| corpus.get(id))
            .map(|s| s.labeled())
            .collect()
    };
    let (train, val) = (stratum(Stratum::Train), stratum(Stratum::Val));
    print_phi(&split);
    let outcome = train_erm(&train, &val, &cfg)?;
    let stats = NoiseStats::from_images(train.iter().map(|s| &s.image))?;
    Checkpoint::new(outcome.model, Some(stats)).save(&a.out)?;
    println!(
        "trained {} epochs; kept epoch {} (val AUC {}); wrote {}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome
            .best_val_auc
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        a.out.display()
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut grid = match &a.grid {
        Some(p) => AblationGrid::from_json(&std::fs::read_to_string(p)?)?,
        None => AblationGrid::default(),
    };
    if let Some(b) = a.bias_factors {
        grid.bias_factors = b;
    }
    grid.validate()?;
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let corpus = match &a.corpus {
        Some(dir) => Corpus::load(dir)?,
        None => Corpus::from_synth(generate(&SynthConfig::default())?)?,
    };
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let report = run_ablation(&corpus, &grid, &seeds)?;
    std::fs::create_dir_all(&a.out)?;
    report.write_csv(&a.out.join("report.csv"))?;
    report.write_bias_sweep_csv(&a.out.join("bias_sweep.csv"))?;
    std::fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    for r in &report.rows {
        println!(
            "{:<36} bias {:<4} AUC {:.3} ± {:.3} (n={}){}",
            r.series(),
            r.bias_factor,
            r.auc_mean,
            r.auc_std,
            r.n_seeds,
            if r.incomplete { " incomplete" } else { "" }
        );
    }
    if !report.is_complete() {
        log::warn!("some cells failed; see the errors in report.json");
    }
    Ok(())
}
