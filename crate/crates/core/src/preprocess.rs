//! Replay quality filter and matchup grouping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::trace::{matchup_of, Matchup, TraceHeader};

/// A match must run strictly longer than this many frames.
pub const MIN_FRAMES: u64 = 10_000;
/// Both players' APM must be strictly above this.
pub const MIN_APM: f64 = 10.0;
/// Both players' MMR must be strictly above this.
pub const MIN_MMR: f64 = 1_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "player_id")]
pub enum RejectReason {
    TooShort,
    LowApm(u8),
    LowMmr(u8),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub accepted: bool,
    pub reasons: Vec<RejectReason>,
}

/// Applies the frame/APM/MMR criteria, reporting every violated one.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn filter_replay(header: &TraceHeader) -> FilterDecision {
    let mut reasons = Vec::new();
    if header.total_frames <= MIN_FRAMES {
        reasons.push(RejectReason::TooShort);
    }
    // NaN compares false, so missing or broken metadata is rejected too.
    for p in &header.players {
        if !(p.apm > MIN_APM) {
            reasons.push(RejectReason::LowApm(p.player_id));
        }
    }
    for p in &header.players {
        if !(p.mmr > MIN_MMR) {
            reasons.push(RejectReason::LowMmr(p.player_id));
        }
    }
    FilterDecision {
        accepted: reasons.is_empty(),
        reasons,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchupGroups {
    pub counts: BTreeMap<Matchup, usize>,
    pub ids: BTreeMap<Matchup, Vec<String>>,
}

impl MatchupGroups {
    pub fn count(&self, m: Matchup) -> usize {
        self.counts.get(&m).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Partitions accepted replays by matchup. Every matchup has a count entry,
/// zero included; id lists keep input order.
pub fn group_replays<'a>(headers: impl IntoIterator<Item = &'a TraceHeader>) -> MatchupGroups {
    let mut groups = MatchupGroups::default();
    for m in Matchup::ALL {
        groups.counts.insert(m, 0);
        groups.ids.insert(m, Vec::new());
    }
    for h in headers {
        let m = matchup_of(h);
        *groups.counts.entry(m).or_insert(0) += 1;
        groups.ids.entry(m).or_default().push(h.replay_id.clone());
    }
    groups
}

/// Replay counts per matchup after the full pipeline on the SC2LE corpus.
/// Documentation only; this code base never processes that corpus.
pub const SC2LE_REFERENCE_COUNTS: [(Matchup, usize); 6] = [
    (Matchup::TvT, 4897),
    (Matchup::TvP, 7894),
    (Matchup::TvZ, 9996),
    (Matchup::PvP, 4334),
    (Matchup::PvZ, 6509),
    (Matchup::ZvZ, 2989),
];
