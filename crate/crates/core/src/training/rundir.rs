//! Run directory layout:
//!
//! ```text
//! config.toml            config snapshot
//! metrics.csv            one row per epoch
//! selection_trace.jsonl  one JSON object per selection event
//! checkpoint.json        state after the latest epoch
//! pseudo_labels/         last pseudo-label round, per receiving peer
//! report.json            final summary
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate, EpochMetrics, TrainRunState};
use crate::datamodel::{Corpus, RunConfig};
use crate::error::{Error, Result};
use crate::models::{config_hash, Checkpoint};
use crate::pseudolabel::PseudoLabelSet;
use crate::selection::SelectionTrace;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "selection_trace.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";

const PEER_COLUMNS: [&str; 2] = ["peer_a", "peer_b"];

#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

/// Final summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub architecture_id: String,
    pub config_hash: String,
    pub epochs: usize,
    pub noise_ratio: f64,
    pub seed: u64,
    pub parameter_counts: Vec<usize>,
    /// Peer-A Dice per foreground class; empty without an evaluation corpus.
    pub dice: Vec<f64>,
    pub mean_dice: Option<f64>,
    pub eval_samples: usize,
    pub final_selection_purity: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the per-epoch metrics table.
pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics], num_classes: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string(), "gamma".to_string()];
    for kind in ["train_loss", "disc_loss", "gen_loss"] {
        for p in PEER_COLUMNS {
            header.push(format!("{kind}_{p}"));
        }
    }
    header.push("selection_purity".into());
    header.push("pseudo_valid_fraction".into());
    for c in 1..num_classes {
        header.push(format!("dice_class{c}"));
    }
    header.push("mean_dice".into());
    w.write_record(&header)?;
    for m in history {
        let mut row = vec![m.epoch.to_string(), m.gamma.to_string()];
        for v in [&m.train_loss, &m.disc_loss, &m.gen_loss] {
            for i in 0..PEER_COLUMNS.len() {
                row.push(fmt_opt(v.get(i).copied()));
            }
        }
        row.push(fmt_opt(m.selection_purity));
        row.push(fmt_opt(m.pseudo_valid_fraction));
        for c in 0..num_classes - 1 {
            row.push(fmt_opt(m.dice.get(c).copied()));
        }
        row.push(fmt_opt(mean(&m.dice)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let dice_cols: Vec<usize> = (1..)
        .map_while(|c| col(&format!("dice_class{c}")))
        .collect();
    let bad = |what: &str| Error::Serde(format!("{}: malformed {what}", path.display()));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<Option<f64>> {
            let s = rec.get(i).ok_or_else(|| bad("row"))?;
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(s))
            }
        };
        let req = |name: &str| -> Result<f64> {
            num(col(name).ok_or_else(|| bad(name))?)?.ok_or_else(|| bad(name))
        };
        let peers = |kind: &str| -> Result<Vec<f64>> {
            let mut v = Vec::new();
            for p in PEER_COLUMNS {
                if let Some(x) = num(col(&format!("{kind}_{p}")).ok_or_else(|| bad(kind))?)? {
                    v.push(x);
                }
            }
            Ok(v)
        };
        out.push(EpochMetrics {
            epoch: req("epoch")? as usize,
            gamma: req("gamma")?,
            train_loss: peers("train_loss")?,
            disc_loss: peers("disc_loss")?,
            gen_loss: peers("gen_loss")?,
            selection_purity: num(col("selection_purity").ok_or_else(|| bad("purity"))?)?,
            pseudo_valid_fraction: num(col("pseudo_valid_fraction").ok_or_else(|| bad("valid"))?)?,
            dice: dice_cols
                .iter()
                .map(|&i| num(i).map(|v| v.unwrap_or(f64::NAN)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|v| !v.is_nan())
                .collect(),
        });
    }
    Ok(out)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl RunDir {
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let dir = Self {
            path: path.to_path_buf(),
        };
        let cfg_path = dir.file(CONFIG_FILE);
        fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Loads the latest checkpoint if one exists for this config, and trims
    /// the trace to the epochs it covers. Without one, the trace is reset.
    pub(super) fn load_checkpoint(&self, cfg: &RunConfig) -> Result<Option<TrainRunState>> {
        let ck_path = self.file(CHECKPOINT_FILE);
        let trace_path = self.file(TRACE_FILE);
        if !ck_path.exists() {
            File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
            return Ok(None);
        }
        let expected = TrainRunState::new(cfg)?.architecture_id();
        let ck = Checkpoint::load(&ck_path, &expected, &config_hash(cfg)?)?;
        let state = TrainRunState::from_checkpoint(cfg, &ck)?;
        let mut kept = Vec::new();
        if trace_path.exists() {
            let f = File::open(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&trace_path, e))?;
                let rec: SelectionTrace = serde_json::from_str(&line)?;
                if rec.epoch <= state.epoch {
                    kept.push(line);
                }
            }
        }
        let mut body = kept.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        fs::write(&trace_path, body).map_err(|e| Error::io(&trace_path, e))?;
        Ok(Some(state))
    }

    /// Reads the config snapshot and latest checkpoint of an existing run.
    pub fn load_run(path: &Path) -> Result<TrainRunState> {
        let cfg_path = path.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg = RunConfig::from_toml_str(&text)?;
        let expected = TrainRunState::new(&cfg)?.architecture_id();
        let ck = Checkpoint::load(&path.join(CHECKPOINT_FILE), &expected, &config_hash(&cfg)?)?;
        TrainRunState::from_checkpoint(&cfg, &ck)
    }

    pub(super) fn trace_writer(&self) -> Result<BufWriter<File>> {
        let p = self.file(TRACE_FILE);
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        Ok(BufWriter::new(f))
    }

    pub(super) fn save_checkpoint(&self, state: &TrainRunState) -> Result<()> {
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = self.file("checkpoint.json.tmp");
        state.to_checkpoint()?.save(&tmp)?;
        let dst = self.file(CHECKPOINT_FILE);
        fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }

    pub(super) fn write_metrics(&self, history: &[EpochMetrics], num_classes: usize) -> Result<()> {
        write_metrics_csv(&self.file(METRICS_FILE), history, num_classes)
    }

    pub(super) fn export_pseudo_labels(
        &self,
        state: &TrainRunState,
        sets: &[Vec<PseudoLabelSet>],
    ) -> Result<()> {
        for (peer, sets) in state.peers.iter().zip(sets) {
            let dir = self.path.join("pseudo_labels").join(peer.peer_id.as_str());
            for s in sets {
                s.export(&dir)?;
            }
        }
        Ok(())
    }

    pub(super) fn write_report(&self, state: &TrainRunState, test: Option<&Corpus>) -> Result<()> {
        let dice = match test {
            Some(t) => evaluate(state.peer_a(), t)?,
            None => Vec::new(),
        };
        let report = RunReport {
            strategy: state.config.strategy.label(),
            architecture_id: state.architecture_id(),
            config_hash: config_hash(&state.config)?,
            epochs: state.epoch,
            noise_ratio: state.config.noise_ratio,
            seed: state.config.seed,
            parameter_counts: state.peers.iter().map(|p| p.segmenter.parameter_count()).collect(),
            mean_dice: mean(&dice),
            dice,
            eval_samples: test.map_or(0, Corpus::len),
            final_selection_purity: state.history.last().and_then(|m| m.selection_purity),
        };
        let p = self.file(REPORT_FILE);
        let mut f = File::create(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::to_writer_pretty(&mut f, &report)?;
        writeln!(f).map_err(|e| Error::io(&p, e))
    }
}
