//! Remember-rate schedule, small-loss subset selection and the clean/noisy
//! split inside a selected subset.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack for `ceil` of products such as `0.3 * 10`, which round up to
/// `3.0000000000000004` in binary floating point.
const CEIL_SLACK: f64 = 1e-9;

fn ceil_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - CEIL_SLACK).ceil().max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RememberSchedule {
    /// Expected noise ratio β.
    pub noise_ratio: f64,
    /// Total epochs T.
    pub epochs: usize,
    /// Floor γ0.
    pub gamma0: f64,
}

impl RememberSchedule {
    pub fn new(noise_ratio: f64, epochs: usize, gamma0: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&noise_ratio) || epochs == 0 || !(0.0..=1.0).contains(&gamma0) {
            return Err(Error::Config(format!(
                "invalid remember schedule: beta {noise_ratio}, T {epochs}, gamma0 {gamma0}"
            )));
        }
        Ok(Self {
            noise_ratio,
            epochs,
            gamma0,
        })
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        remember_rate(epoch, self)
    }
}

/// `γ(t) = max(γ0, min(t (1 − β) / T, 1 − β))`.
pub fn remember_rate(epoch: usize, sched: &RememberSchedule) -> f64 {
    let keep = 1.0 - sched.noise_ratio;
    let ramp = (epoch as f64 * keep / sched.epochs as f64).min(keep);
    ramp.max(sched.gamma0)
}

/// A small-loss subset of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Batch positions of the selected samples, by ascending loss.
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    /// Losses of the selected samples, aligned with `ids`.
    pub losses: Vec<f64>,
    /// Noisy flag per selected sample; all false until [`split_omega`].
    pub omega: Vec<bool>,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Selects the `ceil(γ N)` samples with the smallest loss. Ties go to the
/// lexicographically smaller id, so the result does not depend on batch order.
pub fn select_small_loss(ids: &[String], losses: &[f64], gamma: f64) -> Result<SelectionResult> {
    if ids.is_empty() {
        return Err(Error::Empty("cannot select from an empty batch".into()));
    }
    if ids.len() != losses.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ids but {} losses",
            ids.len(),
            losses.len()
        )));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Numerical(format!("loss of '{}' is {}", ids[i], losses[i])));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("remember rate {gamma} not in (0, 1]")));
    }
    let count = ceil_count(gamma, ids.len()).max(1);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then_with(|| ids[a].cmp(&ids[b])));
    order.truncate(count);
    Ok(SelectionResult {
        ids: order.iter().map(|&i| ids[i].clone()).collect(),
        losses: order.iter().map(|&i| losses[i]).collect(),
        omega: vec![false; count],
        indices: order,
    })
}

/// Nearest-rank quantile: the `ceil(τ n)`-th smallest value (1-based).
pub fn nearest_rank(values: &[f64], tau: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ceil_count(tau, sorted.len()).max(1);
    Some(sorted[rank - 1])
}

/// Flags selected samples whose loss strictly exceeds the τ-quantile of the
/// selected losses.
pub fn split_omega(mut selected: SelectionResult, tau: f64) -> SelectionResult {
    if let Some(q) = nearest_rank(&selected.losses, tau) {
        selected.omega = selected.losses.iter().map(|&l| l > q).collect();
    }
    selected
}

/// One selection event, as appended to a run's trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub epoch: usize,
    pub subset: usize,
    pub gamma: f64,
    /// Peer whose losses produced the selection.
    pub selected_by: String,
    /// Peer trained on the selection.
    pub consumed_by: String,
    pub ids: Vec<String>,
    pub omega: Vec<bool>,
    pub losses: Vec<f64>,
    /// Every batch id with the selecting peer's loss, in batch order.
    pub batch_ids: Vec<String>,
    pub batch_losses: Vec<f64>,
}

impl SelectionTrace {
    /// Appends the record as one JSON line.
    pub fn append_to(&self, out: &mut (impl Write + ?Sized)) -> Result<()> {
        let line = serde_json::to_string(self)?;
        writeln!(out, "{line}").map_err(|e| Error::io("selection trace", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn schedule_examples() {
        let s = RememberSchedule::new(0.5, 10, 0.0).unwrap();
        assert_eq!(s.rate(5), 0.25);
        assert_eq!(s.rate(10), 0.5);
        let s = RememberSchedule::new(0.9, 10, 0.05).unwrap();
        assert_eq!(s.rate(3), 0.05);
        assert!(RememberSchedule::new(1.0, 10, 0.1).is_err());
    }

    #[test]
    fn schedule_is_monotone_and_capped() {
        for beta in [0.0, 0.1, 0.5, 0.9] {
            let s = RememberSchedule::new(beta, 7, 0.1).unwrap();
            let mut prev = 0.0;
            for t in 1..=7 {
                let g = s.rate(t);
                assert!(g >= prev && g <= (1.0 - beta).max(0.1) && g > 0.0);
                prev = g;
            }
        }
    }

    #[test]
    fn selection_examples() {
        let sel = select_small_loss(&ids(4), &[0.9, 0.1, 0.5, 0.3], 0.5).unwrap();
        assert_eq!(sel.indices, vec![1, 3]);
        let all = select_small_loss(&ids(4), &[0.9, 0.1, 0.5, 0.3], 1.0).unwrap();
        assert_eq!(all.len(), 4);
        assert!(select_small_loss(&[], &[], 0.5).is_err());
        assert!(select_small_loss(&ids(2), &[0.1, f64::NAN], 0.5).is_err());
    }

    #[test]
    fn exact_products_do_not_round_up() {
        let sel = select_small_loss(&ids(10), &[1.0; 10], 0.3).unwrap();
        assert_eq!(sel.len(), 3);
    }

    #[test]
    fn ties_follow_ids_not_batch_order() {
        let a = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        let sel = select_small_loss(&a, &[0.2, 0.2, 0.1], 0.5).unwrap();
        assert_eq!(sel.ids, vec!["c", "a"]);
    }

    #[test]
    fn omega_examples() {
        let sel = SelectionResult {
            indices: vec![0, 1, 2, 3],
            ids: ids(4),
            losses: vec![0.1, 0.2, 0.9, 1.0],
            omega: vec![false; 4],
        };
        assert_eq!(split_omega(sel.clone(), 0.5).omega, vec![false, false, true, true]);
        let flat = SelectionResult {
            losses: vec![0.4; 4],
            ..sel
        };
        assert!(split_omega(flat, 0.5).omega.iter().all(|o| !o));
    }
}
