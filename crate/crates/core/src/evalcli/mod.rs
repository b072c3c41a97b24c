//! Dice reports, the experiment matrix, report tables, plots and the
//! command-line entry points.

pub mod cli;
mod plot;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::datamodel::{RunConfig, Strategy};
use crate::error::{Error, Result};
use crate::labelnoise::{corrupt_corpus, NoiseLevel, NoiseSpec};
use crate::synthdata::{generate_corpus, Split, SynthConfig};
use crate::training::{train_full, TrainData};

pub use plot::{class_name, plot_results};

/// Identifies one cell of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub noise_level: NoiseLevel,
    pub noise_ratio: f64,
    pub pretrain: bool,
    pub strategy: Strategy,
}

pub fn level_name(level: NoiseLevel) -> &'static str {
    match level {
        NoiseLevel::Low => "low",
        NoiseLevel::High => "high",
    }
}

impl CellConfig {
    /// Unique key, also used as the cell's directory name.
    pub fn key(&self) -> String {
        format!(
            "{}_b{}_{}_{}",
            level_name(self.noise_level),
            self.noise_ratio,
            if self.pretrain { "pretrain" } else { "scratch" },
            self.strategy.label()
        )
    }
}

/// Target-domain Dice of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub cell: CellConfig,
    /// Dice per foreground class `1..C`.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    pub samples: usize,
}

impl DiceReport {
    pub fn new(cell: CellConfig, dice: Vec<f64>, samples: usize) -> Result<Self> {
        if dice.is_empty() {
            return Err(Error::Empty("report without foreground classes".into()));
        }
        if let Some(d) = dice.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Error::Numerical(format!("dice {d} outside [0, 1]")));
        }
        let mean_dice = dice.iter().sum::<f64>() / dice.len() as f64;
        Ok(Self {
            cell,
            dice,
            mean_dice,
            samples,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub cell: CellConfig,
    /// The report, or the error that stopped the cell.
    pub outcome: std::result::Result<DiceReport, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTable {
    pub num_classes: usize,
    pub rows: Vec<MatrixRow>,
}

/// Values swept by [`run_matrix`]. Every cell is trained once per seed and
/// reports the seed average.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixAxes {
    pub noise_levels: Vec<NoiseLevel>,
    pub noise_ratios: Vec<f64>,
    pub pretrain: Vec<bool>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
}

impl MatrixAxes {
    fn validate(&self) -> Result<()> {
        let empty = [
            ("noise_levels", self.noise_levels.is_empty()),
            ("noise_ratios", self.noise_ratios.is_empty()),
            ("pretrain", self.pretrain.is_empty()),
            ("strategies", self.strategies.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Empty(format!("matrix axis '{name}' is empty")));
        }
        if let Some(r) = self.noise_ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("noise ratio {r} not in [0, 1)")));
        }
        let mut keys = HashSet::new();
        for cell in self.cells() {
            if !keys.insert(cell.key()) {
                return Err(Error::Config(format!("duplicate matrix cell {}", cell.key())));
            }
        }
        Ok(())
    }

    /// Cells in row-major order: level, ratio, pretrain, strategy.
    pub fn cells(&self) -> Vec<CellConfig> {
        let mut out = Vec::new();
        for &noise_level in &self.noise_levels {
            for &noise_ratio in &self.noise_ratios {
                for &pretrain in &self.pretrain {
                    for &strategy in &self.strategies {
                        out.push(CellConfig {
                            noise_level,
                            noise_ratio,
                            pretrain,
                            strategy,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Settings shared by every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixBase {
    pub synth: SynthConfig,
    pub noise: NoiseSpec,
    pub run: RunConfig,
    /// Warm-start epochs used by cells with `pretrain = true`.
    pub pretrain_epochs: usize,
}

/// Generates the data for `seed`, corrupts the source and trains one cell.
/// Dice is taken from the last epoch.
pub fn run_cell(base: &MatrixBase, cell: &CellConfig, seed: u64, dir: Option<&Path>) -> Result<DiceReport> {
    let synth = SynthConfig {
        seed,
        ..base.synth.clone()
    };
    let source = generate_corpus(&synth, Split::Source)?;
    let target = generate_corpus(&synth, Split::TargetTrain)?.without_masks();
    let test = generate_corpus(&synth, Split::TargetTest)?;
    let noisy = corrupt_corpus(
        &source,
        &NoiseSpec {
            level: cell.noise_level,
            ratio: cell.noise_ratio,
            seed,
            ..base.noise.clone()
        },
    )?;
    if cell.pretrain && base.pretrain_epochs == 0 {
        return Err(Error::Config("pretrain cell with pretrain_epochs = 0".into()));
    }
    let cfg = RunConfig {
        noise_ratio: cell.noise_ratio,
        strategy: cell.strategy,
        warm_start_epochs: if cell.pretrain { base.pretrain_epochs } else { 0 },
        seed,
        ..base.run.clone()
    };
    let data = TrainData {
        source: &noisy,
        clean_source: Some(&source),
        target_train: &target,
        target_test: Some(&test),
    };
    let state = train_full(&cfg, data, dir)?;
    let dice = state
        .history
        .last()
        .map(|m| m.dice.clone())
        .ok_or_else(|| Error::Empty("run finished without epochs".into()))?;
    DiceReport::new(*cell, dice, test.len())
}

/// Trains every cell for every seed. A failing cell is recorded and the
/// matrix continues. With `out`, each run writes to `out/<cell key>/seed<k>`.
pub fn run_matrix(base: &MatrixBase, axes: &MatrixAxes, out: Option<&Path>) -> Result<MatrixTable> {
    axes.validate()?;
    let num_classes = base.run.model.num_classes;
    let mut rows = Vec::new();
    for cell in axes.cells() {
        let mut reports = Vec::new();
        let mut failure = None;
        for &seed in &axes.seeds {
            let dir: Option<PathBuf> = out.map(|o| o.join(cell.key()).join(format!("seed{seed}")));
            match run_cell(base, &cell, seed, dir.as_deref()) {
                Ok(r) => reports.push(r),
                Err(e) => {
                    warn!("cell {} seed {seed} failed: {e}", cell.key());
                    failure = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        let outcome = match failure {
            Some(msg) => Err(msg),
            None => {
                let k = reports.len() as f64;
                let dice = (0..num_classes - 1)
                    .map(|c| reports.iter().map(|r| r.dice[c]).sum::<f64>() / k)
                    .collect();
                let samples = reports.iter().map(|r| r.samples).sum();
                DiceReport::new(cell, dice, samples).map_err(|e| e.to_string())
            }
        };
        if let Ok(r) = &outcome {
            info!("cell {}: dice {:?}", cell.key(), r.dice);
        }
        rows.push(MatrixRow { cell, outcome });
    }
    Ok(MatrixTable { num_classes, rows })
}

/// Writes one CSV row per cell.
pub fn write_matrix_csv(table: &MatrixTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["noise_level", "noise_ratio", "pretrain", "strategy", "status", "samples"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for c in 1..table.num_classes {
        header.push(format!("dice_class{c}"));
    }
    header.push("mean_dice".into());
    header.push("error".into());
    w.write_record(&header)?;
    for row in &table.rows {
        let c = &row.cell;
        let mut rec = vec![
            level_name(c.noise_level).to_string(),
            c.noise_ratio.to_string(),
            c.pretrain.to_string(),
            c.strategy.label(),
        ];
        match &row.outcome {
            Ok(r) => {
                rec.push("ok".into());
                rec.push(r.samples.to_string());
                rec.extend(r.dice.iter().map(f64::to_string));
                rec.push(r.mean_dice.to_string());
                rec.push(String::new());
            }
            Err(e) => {
                rec.push("failed".into());
                rec.push(String::new());
                rec.extend((0..table.num_classes).map(|_| String::new()));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dice values as percentages with one decimal, e.g. `(94.6, 87.7)`.
pub fn format_cell(dice: &[f64]) -> String {
    let parts: Vec<String> = dice.iter().map(|d| format!("{:.1}", 100.0 * d)).collect();
    format!("({})", parts.join(", "))
}

/// Plain-text table: one row per (pretrain, strategy), one column per
/// (noise level, β).
pub fn format_table(table: &MatrixTable) -> String {
    let mut columns: Vec<(NoiseLevel, f64)> = Vec::new();
    let mut lines: Vec<(bool, Strategy)> = Vec::new();
    for row in &table.rows {
        let col = (row.cell.noise_level, row.cell.noise_ratio);
        if !columns.contains(&col) {
            columns.push(col);
        }
        let line = (row.cell.pretrain, row.cell.strategy);
        if !lines.contains(&line) {
            lines.push(line);
        }
    }
    let mut grid = vec![vec!["method".to_string()]];
    for (level, ratio) in &columns {
        grid[0].push(format!("{} β={ratio}", level_name(*level)));
    }
    for (pretrain, strategy) in &lines {
        let mut cells = vec![format!(
            "{}{}",
            strategy.label(),
            if *pretrain { " (pretrain)" } else { "" }
        )];
        for (level, ratio) in &columns {
            let found = table.rows.iter().find(|r| {
                r.cell.noise_level == *level
                    && r.cell.noise_ratio == *ratio
                    && r.cell.pretrain == *pretrain
                    && r.cell.strategy == *strategy
            });
            cells.push(match found.map(|r| &r.outcome) {
                Some(Ok(rep)) => format_cell(&rep.dice),
                Some(Err(_)) => "failed".into(),
                None => "-".into(),
            });
        }
        grid.push(cells);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        let padded: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<w$}", w = *w))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "{}", rule.join("  "));
        }
    }
    out
}
