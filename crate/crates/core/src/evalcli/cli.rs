//! Command-line entry points. Everything is written under `--out`:
//!
//! ```text
//! data/source, data/target_train, data/target_test   generate-data
//! data/source_noisy (+ noise_manifest.csv)           corrupt-labels
//! <name>/                                            train, evaluate
//! report/                                            report
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use super::{
    format_table, plot_results, run_matrix, write_matrix_csv, CellConfig, DiceReport, MatrixAxes,
    MatrixBase,
};
use crate::datamodel::{Domain, RunConfig, Strategy};
use crate::labelnoise::{corrupt_corpus, CorruptedCorpus, NoiseLevel, NoiseSpec};
use crate::synthdata::{generate_corpus, ingest_corpus, write_corpus, Split, SynthConfig};
use crate::training::{evaluate, train_full, RunDir, TrainData};

pub const NOISY_DIR: &str = "source_noisy";
pub const NOISE_MANIFEST: &str = "noise_manifest.csv";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Parser)]
#[command(name = "crossdenoise", version, about = "Cross-denoising peer training on a synthetic disc/cup benchmark")]
pub struct Cli {
    /// Experiment config (TOML with optional [synth], [noise], [run] and [matrix] tables).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic source, target-train and target-test splits.
    GenerateData,
    /// Corrupt a fraction of the source masks.
    CorruptLabels {
        /// `low` or `high`.
        #[arg(long)]
        level: Option<NoiseLevel>,
        /// Fraction of samples to corrupt (β).
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Train on the generated data.
    Train {
        /// `none`, or components joined by `+` (CD, CICL, NTL).
        #[arg(long)]
        strategy: Option<String>,
        /// Expected noise ratio β for the remember-rate schedule.
        #[arg(long)]
        ratio: Option<f64>,
        /// Run directory name under `--out`.
        #[arg(long, default_value = "train")]
        name: String,
    },
    /// Score a trained run on the target test split.
    Evaluate {
        #[arg(long, default_value = "train")]
        name: String,
    },
    /// Run the experiment matrix and write the CSV, table and plots.
    Report,
}

/// Experiment matrix as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixConfig {
    pub noise_levels: Vec<NoiseLevel>,
    pub noise_ratios: Vec<f64>,
    pub pretrain: Vec<bool>,
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    pub pretrain_epochs: usize,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            noise_levels: vec![NoiseLevel::High],
            noise_ratios: vec![0.1, 0.5, 0.9],
            pretrain: vec![false],
            strategies: Strategy::ABLATION.iter().map(Strategy::label).collect(),
            seeds: vec![0],
            pretrain_epochs: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub noise: NoiseSpec,
    pub run: RunConfig,
    pub matrix: MatrixConfig,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<Self> {
        let mut cfg: ExperimentConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.synth.seed = s;
            cfg.noise.seed = s;
            cfg.run.seed = s;
            cfg.matrix.seeds = vec![s];
        }
        cfg.synth.validate()?;
        cfg.noise.validate()?;
        cfg.run.validate()?;
        Ok(cfg)
    }
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn load_split(out: &Path, split: Split) -> anyhow::Result<crate::datamodel::Corpus> {
    let dir = data_dir(out).join(split.dir_name());
    ingest_corpus(&dir, split.domain())
        .with_context(|| format!("loading {} (run generate-data first)", dir.display()))
}

fn generate_data(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    for split in [Split::Source, Split::TargetTrain, Split::TargetTest] {
        let corpus = generate_corpus(&cfg.synth, split)?;
        let dir = data_dir(out).join(split.dir_name());
        let corpus = if split == Split::TargetTrain {
            corpus.without_masks()
        } else {
            corpus
        };
        write_corpus(&corpus, &dir)?;
        println!("wrote {} samples to {}", corpus.len(), dir.display());
    }
    Ok(())
}

fn corrupt_labels(cfg: &ExperimentConfig, out: &Path, level: Option<NoiseLevel>, ratio: Option<f64>) -> anyhow::Result<()> {
    let source = load_split(out, Split::Source)?;
    let spec = NoiseSpec {
        level: level.unwrap_or(cfg.noise.level),
        ratio: ratio.unwrap_or(cfg.noise.ratio),
        ..cfg.noise.clone()
    };
    let noisy = corrupt_corpus(&source, &spec)?;
    let dir = data_dir(out).join(NOISY_DIR);
    write_corpus(&noisy.corpus, &dir)?;
    noisy.write_manifest(&dir.join(NOISE_MANIFEST))?;
    println!(
        "corrupted {} of {} masks into {}",
        noisy.corrupted_ids().len(),
        source.len(),
        dir.display()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path, strategy: Option<&str>, ratio: Option<f64>, name: &str) -> anyhow::Result<()> {
    let mut run = cfg.run.clone();
    if let Some(s) = strategy {
        run.strategy = Strategy::parse(s)?;
    }
    if let Some(r) = ratio {
        run.noise_ratio = r;
    }
    let clean = load_split(out, Split::Source)?;
    let noisy_dir = data_dir(out).join(NOISY_DIR);
    if !noisy_dir.exists() {
        bail!("{} not found (run corrupt-labels first)", noisy_dir.display());
    }
    let noisy = CorruptedCorpus::from_manifest(
        ingest_corpus(&noisy_dir, Domain::Source)?,
        &noisy_dir.join(NOISE_MANIFEST),
    )?;
    let target = load_split(out, Split::TargetTrain)?;
    let test = load_split(out, Split::TargetTest)?;
    let data = TrainData {
        source: &noisy,
        clean_source: Some(&clean),
        target_train: &target,
        target_test: Some(&test),
    };
    let dir = out.join(name);
    let state = train_full(&run, data, Some(&dir))?;
    if let Some(m) = state.history.last() {
        println!("finished epoch {}: target dice {:?}", m.epoch, m.dice);
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn evaluate_run(cfg: &ExperimentConfig, out: &Path, name: &str) -> anyhow::Result<()> {
    let dir = out.join(name);
    let state = RunDir::load_run(&dir).with_context(|| format!("loading run {}", dir.display()))?;
    let test = load_split(out, Split::TargetTest)?;
    let dice = evaluate(state.peer_a(), &test)?;
    let cell = CellConfig {
        noise_level: cfg.noise.level,
        noise_ratio: state.config.noise_ratio,
        pretrain: state.config.warm_start_epochs > 0,
        strategy: state.config.strategy,
    };
    let report = DiceReport::new(cell, dice, test.len())?;
    let path = dir.join(EVALUATION_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{} {}", cell.key(), super::format_cell(&report.dice));
    Ok(())
}

fn report(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let m = &cfg.matrix;
    let axes = MatrixAxes {
        noise_levels: m.noise_levels.clone(),
        noise_ratios: m.noise_ratios.clone(),
        pretrain: m.pretrain.clone(),
        strategies: m
            .strategies
            .iter()
            .map(|s| Strategy::parse(s))
            .collect::<crate::Result<_>>()?,
        seeds: m.seeds.clone(),
    };
    let base = MatrixBase {
        synth: cfg.synth.clone(),
        noise: cfg.noise.clone(),
        run: cfg.run.clone(),
        pretrain_epochs: m.pretrain_epochs,
    };
    let dir = out.join(REPORT_DIR);
    let table = run_matrix(&base, &axes, Some(&dir.join("cells")))?;
    write_matrix_csv(&table, &dir.join("matrix.csv"))?;
    let text = format_table(&table);
    fs::write(dir.join("table.txt"), &text)?;
    print!("{text}");
    if table.rows.iter().any(|r| r.outcome.is_ok()) {
        for p in plot_results(&table, &dir)? {
            println!("wrote {}", p.display());
        }
    }
    let failed = table.rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        bail!("{failed} of {} cells failed; see matrix.csv", table.rows.len());
    }
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenerateData => generate_data(&cfg, out),
        Command::CorruptLabels { level, ratio } => corrupt_labels(&cfg, out, *level, *ratio),
        Command::Train {
            strategy,
            ratio,
            name,
        } => train(&cfg, out, strategy.as_deref(), *ratio, name),
        Command::Evaluate { name } => evaluate_run(&cfg, out, name),
        Command::Report => report(&cfg, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_experiment_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn seed_flag_overrides_every_seed() {
        let cfg = ExperimentConfig::load(None, Some(7)).unwrap();
        assert_eq!((cfg.synth.seed, cfg.noise.seed, cfg.run.seed), (7, 7, 7));
        assert_eq!(cfg.matrix.seeds, vec![7]);
    }

    #[test]
    fn parses_subcommands_and_global_flags() {
        let cli = Cli::try_parse_from([
            "crossdenoise", "train", "--strategy", "CD+NTL", "--out", "x", "--seed", "3",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(3));
        assert!(matches!(cli.command, Command::Train { ref strategy, .. } if strategy.as_deref() == Some("CD+NTL")));
        let cli = Cli::try_parse_from(["crossdenoise", "corrupt-labels", "--level", "low"]).unwrap();
        assert!(matches!(cli.command, Command::CorruptLabels { level: Some(NoiseLevel::Low), .. }));
        assert!(Cli::try_parse_from(["crossdenoise", "bogus"]).is_err());
    }
}
