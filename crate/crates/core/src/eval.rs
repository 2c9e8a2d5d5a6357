//! Accuracy reports, phase-bucketed accuracy and the partial-observability
//! density statistic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::Task;
use crate::parser::{reduce_event, PlayerView};
use crate::trace::{Matchup, Trace};

pub const QUARTILES: usize = 4;
pub const DECILES: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("{what} has {got} entries, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("label {label} out of range for {n} outputs")]
    Label { label: usize, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matchup: Option<Matchup>,
    /// Mean over all evaluated steps.
    pub overall: f64,
    /// Accuracy per game-progress quartile; `None` for an empty bucket.
    pub quartiles: [Option<f64>; QUARTILES],
    pub counts: [usize; QUARTILES],
    pub total: usize,
    /// Mean of per-sequence accuracies, when sequence boundaries are known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_replay: Option<f64>,
}

impl EvalReport {
    /// Builds a report from per-step correctness and progress fractions.
    pub fn from_steps(task: Task, correct: &[bool], progress: &[f64]) -> Result<Self, EvalError> {
        if correct.is_empty() {
            return Err(EvalError::Empty);
        }
        if progress.len() != correct.len() {
            return Err(EvalError::Length {
                what: "progress",
                got: progress.len(),
                expected: correct.len(),
            });
        }
        let mut hits = [0usize; QUARTILES];
        let mut counts = [0usize; QUARTILES];
        for (&c, &p) in correct.iter().zip(progress) {
            let q = quartile_of(p);
            counts[q] += 1;
            hits[q] += usize::from(c);
        }
        let total = correct.len();
        let quartiles =
            std::array::from_fn(|q| (counts[q] > 0).then(|| hits[q] as f64 / counts[q] as f64));
        Ok(EvalReport {
            task,
            matchup: None,
            overall: hits.iter().sum::<usize>() as f64 / total as f64,
            quartiles,
            counts,
            total,
            per_replay: None,
        })
    }

    pub fn with_matchup(mut self, matchup: Matchup) -> Self {
        self.matchup = Some(matchup);
        self
    }

    /// Fills in the per-sequence mean; `lengths` splits the step list into
    /// consecutive sequences.
    pub fn with_per_replay(mut self, correct: &[bool], lengths: &[usize]) -> Self {
        let mut accs = Vec::with_capacity(lengths.len());
        let mut at = 0;
        for &n in lengths {
            if n > 0 {
                let hits = correct[at..at + n].iter().filter(|c| **c).count();
                accs.push(hits as f64 / n as f64);
            }
            at += n;
        }
        self.per_replay = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
        self
    }

    /// `quartile,lower,upper,count,accuracy` rows.
    pub fn phase_csv(&self) -> String {
        let mut s = String::from("quartile,lower,upper,count,accuracy\n");
        for q in 0..QUARTILES {
            let acc = self.quartiles[q].map_or(String::new(), |a| format!("{a:.6}"));
            let _ = writeln!(
                s,
                "{},{:.2},{:.2},{},{}",
                q + 1,
                q as f64 / 4.0,
                (q + 1) as f64 / 4.0,
                self.counts[q],
                acc
            );
        }
        s
    }
}

/// Bucket of a progress fraction: `[0,.25)`, `[.25,.5)`, `[.5,.75)`, `[.75,1]`.
pub fn quartile_of(progress: f64) -> usize {
    ((progress * QUARTILES as f64).floor().max(0.0) as usize).min(QUARTILES - 1)
}

/// `t / T` for every step of a length-`T` sequence.
pub fn progress_fractions(len: usize) -> Vec<f64> {
    (0..len).map(|t| t as f64 / len as f64).collect()
}

/// A win prediction is correct when `p ≥ 0.5` agrees with the result.
pub fn gse_correct(p: f64, won: bool) -> bool {
    (p >= 0.5) == won
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in dist.iter().enumerate() {
        if *v > dist[best] {
            best = i;
        }
    }
    best
}

pub fn gse_accuracy(
    preds: &[f64],
    won: &[bool],
    progress: &[f64],
) -> Result<EvalReport, EvalError> {
    if won.len() != preds.len() {
        return Err(EvalError::Length {
            what: "results",
            got: won.len(),
            expected: preds.len(),
        });
    }
    let correct: Vec<bool> = preds
        .iter()
        .zip(won)
        .map(|(p, w)| gse_correct(*p, *w))
        .collect();
    EvalReport::from_steps(Task::Gse, &correct, progress)
}

pub fn bop_accuracy(
    dists: &[Vec<f64>],
    labels: &[usize],
    progress: &[f64],
) -> Result<EvalReport, EvalError> {
    if labels.len() != dists.len() {
        return Err(EvalError::Length {
            what: "labels",
            got: labels.len(),
            expected: dists.len(),
        });
    }
    let mut correct = Vec::with_capacity(dists.len());
    for (d, &l) in dists.iter().zip(labels) {
        if l >= d.len() {
            return Err(EvalError::Label {
                label: l,
                n: d.len(),
            });
        }
        correct.push(argmax(d) == l);
    }
    EvalReport::from_steps(Task::Bop, &correct, progress)
}

/// Mean observed/total enemy ratio per decile of game progress.
///
/// Each perspective of each trace is sampled every `stride` frames; within
/// a decile its ratios are averaged, then deciles are averaged over all
/// perspectives that have a sample there. Deciles without any sample are 0.
pub fn po_density(traces: &[Trace], stride: u64) -> [f64; DECILES] {
    let stride = stride.max(1);
    let mut sums = [0.0; DECILES];
    let mut counts = [0usize; DECILES];
    for trace in traces {
        let total = trace.header.total_frames.max(1);
        for player in &trace.header.players {
            let mut view = PlayerView::new(player.player_id);
            let mut events = trace.events.iter().peekable();
            let mut acc = [(0.0, 0usize); DECILES];
            let mut frame = 0;
            while frame <= trace.header.total_frames {
                while let Some(e) = events.next_if(|e| e.frame < frame) {
                    reduce_event(&mut view, e);
                }
                let (seen, alive) = view.enemy_visibility();
                let d = ((frame as f64 / total as f64 * DECILES as f64) as usize).min(DECILES - 1);
                acc[d].0 += f64::from(seen) / f64::from(alive.max(1));
                acc[d].1 += 1;
                frame += stride;
            }
            for (d, (s, n)) in acc.iter().enumerate() {
                if *n > 0 {
                    sums[d] += s / *n as f64;
                    counts[d] += 1;
                }
            }
        }
    }
    std::array::from_fn(|d| {
        if counts[d] > 0 {
            sums[d] / counts[d] as f64
        } else {
            0.0
        }
    })
}

pub fn po_density_csv(deciles: &[f64; DECILES]) -> String {
    let mut s = String::from("decile,lower,upper,ratio\n");
    for (d, r) in deciles.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{:.1},{:.1},{r:.6}",
            d + 1,
            d as f64 / 10.0,
            (d + 1) as f64 / 10.0
        );
    }
    s
}

/// Published baseline accuracies (percent), kept for documentation and
/// regression context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceResults {
    pub note: String,
    pub replays_after_preprocessing: BTreeMap<Matchup, u32>,
    pub gse_global: BTreeMap<Matchup, f64>,
    pub bop_global: BTreeMap<Matchup, f64>,
    pub gse_global_spatial: BTreeMap<Matchup, f64>,
    pub bop_global_spatial: BTreeMap<Matchup, f64>,
    pub gse_phase_tvt: BTreeMap<String, Option<f64>>,
}

pub const REFERENCE_RESULTS_JSON: &str = include_str!("../data/reference_results.json");

pub fn reference_results() -> ReferenceResults {
    serde_json::from_str(REFERENCE_RESULTS_JSON).expect("bundled reference results parse")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartile_edges() {
        assert_eq!(quartile_of(0.0), 0);
        assert_eq!(quartile_of(0.2499), 0);
        assert_eq!(quartile_of(0.25), 1);
        assert_eq!(quartile_of(0.75), 3);
        assert_eq!(quartile_of(1.0), 3);
    }

    #[test]
    fn perfect_gse_predictor() {
        let won = [true, false, true, false];
        let preds = [0.9, 0.1, 0.7, 0.3];
        let r = gse_accuracy(&preds, &won, &[0.0, 0.3, 0.6, 0.9]).unwrap();
        assert_eq!(r.overall, 1.0);
        assert_eq!(r.quartiles, [Some(1.0); 4]);
    }

    #[test]
    fn constant_half_predicts_win() {
        // Two sequences of three steps, one winner: half the steps are right.
        let won = [true, true, true, false, false, false];
        let r = gse_accuracy(&[0.5; 6], &won, &[0.0, 0.4, 0.8, 0.0, 0.4, 0.8]).unwrap();
        assert_eq!(r.overall, 0.5);
        assert_eq!(r.counts, [2, 2, 0, 2]);
        assert_eq!(r.quartiles[2], None);
    }

    #[test]
    fn bop_uniform_tie_breaks_to_zero() {
        let d = vec![vec![0.25; 4]; 5];
        let labels = [0, 1, 0, 3, 0];
        let r = bop_accuracy(&d, &labels, &[0.0; 5]).unwrap();
        assert_eq!(r.overall, 3.0 / 5.0);
        assert!(matches!(
            bop_accuracy(&d[..1], &[4], &[0.0]),
            Err(EvalError::Label { label: 4, n: 4 })
        ));
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(gse_accuracy(&[], &[], &[]), Err(EvalError::Empty));
    }

    #[test]
    fn per_replay_mean() {
        let correct = [true, true, false, true];
        let r = EvalReport::from_steps(Task::Bop, &correct, &[0.0; 4])
            .unwrap()
            .with_per_replay(&correct, &[3, 1]);
        assert!((r.per_replay.unwrap() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn reference_numbers_load() {
        let r = reference_results();
        assert_eq!(r.gse_global[&Matchup::TvT], 61.1);
        assert_eq!(r.bop_global[&Matchup::TvT], 74.1);
        assert_eq!(r.replays_after_preprocessing.values().sum::<u32>(), 36_619);
        assert_eq!(r.gse_phase_tvt["q4"], Some(79.7));
    }
}
