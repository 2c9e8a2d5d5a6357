use std::collections::{HashMap, HashSet};
use std::fmt;

use super::{EventKind, Trace, GRID, MAX_HEIGHT};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationRule {
    PlayerCount(usize),
    PlayerIds,
    WinnerCount(usize),
    BadMetadata(u8),
    HeightMapShape,
    HeightOutOfRange { row: usize, col: usize },
    EmptyMap,
    ResourceOutOfBounds(usize),
    NonMonotoneFrame,
    FrameAfterEnd(u64),
    UnknownPlayer(u8),
    OutOfBounds { x: u32, y: u32 },
    DuplicateUnit(u64),
    UnknownUnit(u64),
    UnknownEnemy(u64),
    NotSighted(u64),
}

/// One broken invariant. `index` is the offending event's position in
/// `Trace::events`, or `None` for header-level rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: Option<usize>,
    pub rule: ViolationRule,
}

impl fmt::Display for ViolationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationRule::PlayerCount(n) => write!(f, "expected exactly 2 players, found {n}"),
            ViolationRule::PlayerIds => f.write_str("player ids must be 1 and 2"),
            ViolationRule::WinnerCount(n) => write!(f, "expected exactly one winner, found {n}"),
            ViolationRule::BadMetadata(p) => {
                write!(f, "negative or non-finite apm/mmr for player {p}")
            }
            ViolationRule::HeightMapShape => write!(f, "height map must be {GRID}x{GRID}"),
            ViolationRule::HeightOutOfRange { row, col } => {
                write!(f, "height above {MAX_HEIGHT} at row {row}, col {col}")
            }
            ViolationRule::EmptyMap => f.write_str("map size must be positive"),
            ViolationRule::ResourceOutOfBounds(i) => {
                write!(f, "resource field {i} outside the map")
            }
            ViolationRule::NonMonotoneFrame => f.write_str("non-monotone frame"),
            ViolationRule::FrameAfterEnd(frame) => write!(f, "frame {frame} after total_frames"),
            ViolationRule::UnknownPlayer(p) => write!(f, "unknown player id {p}"),
            ViolationRule::OutOfBounds { x, y } => {
                write!(f, "coordinates ({x}, {y}) outside the map")
            }
            ViolationRule::DuplicateUnit(id) => write!(f, "unit {id} born twice"),
            ViolationRule::UnknownUnit(id) => {
                write!(f, "unit {id} died but was never born or already dead")
            }
            ViolationRule::UnknownEnemy(id) => {
                write!(f, "sighted enemy {id} is not a live opposing unit")
            }
            ViolationRule::NotSighted(id) => write!(f, "enemy {id} lost but was never sighted"),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{} at index {i}", self.rule),
            None => write!(f, "{}", self.rule),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every header and event invariant, collecting all violations.
pub fn validate_trace(trace: &Trace) -> ValidationReport {
    let mut out = Vec::new();
    let mut header_rule = |rule| out.push(Violation { index: None, rule });
    let header = &trace.header;

    if header.players.len() != 2 {
        header_rule(ViolationRule::PlayerCount(header.players.len()));
    } else {
        let mut ids: Vec<u8> = header.players.iter().map(|p| p.player_id).collect();
        ids.sort_unstable();
        if ids != [1, 2] {
            header_rule(ViolationRule::PlayerIds);
        }
    }
    let winners = header.players.iter().filter(|p| p.result.is_win()).count();
    if winners != 1 {
        header_rule(ViolationRule::WinnerCount(winners));
    }
    for p in &header.players {
        if !(p.apm.is_finite() && p.mmr.is_finite() && p.apm >= 0.0 && p.mmr >= 0.0) {
            header_rule(ViolationRule::BadMetadata(p.player_id));
        }
    }
    let [map_w, map_h] = header.map_size;
    if map_w == 0 || map_h == 0 {
        header_rule(ViolationRule::EmptyMap);
    }
    for (i, [x, y]) in header.resources.iter().enumerate() {
        if *x >= map_w || *y >= map_h {
            header_rule(ViolationRule::ResourceOutOfBounds(i));
        }
    }
    let grid = &trace.height_map.0;
    if grid.len() != GRID || grid.iter().any(|row| row.len() != GRID) {
        header_rule(ViolationRule::HeightMapShape);
    } else if let Some((row, col)) = grid
        .iter()
        .enumerate()
        .find_map(|(r, row)| row.iter().position(|h| *h > MAX_HEIGHT).map(|c| (r, c)))
    {
        header_rule(ViolationRule::HeightOutOfRange { row, col });
    }

    // (owner, unit_id) of live units, and per-observer sighted sets.
    let mut alive: HashSet<(u8, u64)> = HashSet::new();
    let mut born: HashSet<(u8, u64)> = HashSet::new();
    let mut sighted: HashMap<u8, HashSet<u64>> = HashMap::new();
    let mut last_frame = 0u64;

    for (index, event) in trace.events.iter().enumerate() {
        let mut flag = |rule| {
            out.push(Violation {
                index: Some(index),
                rule,
            })
        };
        if event.frame < last_frame {
            flag(ViolationRule::NonMonotoneFrame);
        }
        last_frame = last_frame.max(event.frame);
        if event.frame > header.total_frames {
            flag(ViolationRule::FrameAfterEnd(event.frame));
        }
        let pid = event.player_id;
        if pid != 1 && pid != 2 {
            flag(ViolationRule::UnknownPlayer(pid));
            continue;
        }
        let enemy = 3 - pid;
        let in_bounds = |x: u32, y: u32| x < map_w && y < map_h;
        match &event.kind {
            EventKind::UnitBorn { unit_id, x, y, .. } => {
                if !in_bounds(*x, *y) {
                    flag(ViolationRule::OutOfBounds { x: *x, y: *y });
                }
                if !born.insert((pid, *unit_id)) {
                    flag(ViolationRule::DuplicateUnit(*unit_id));
                }
                alive.insert((pid, *unit_id));
            }
            EventKind::UnitDied { unit_id } => {
                if !alive.remove(&(pid, *unit_id)) {
                    flag(ViolationRule::UnknownUnit(*unit_id));
                }
            }
            EventKind::EnemySighted { unit_id, x, y, .. } => {
                if !in_bounds(*x, *y) {
                    flag(ViolationRule::OutOfBounds { x: *x, y: *y });
                }
                if !alive.contains(&(enemy, *unit_id)) {
                    flag(ViolationRule::UnknownEnemy(*unit_id));
                }
                sighted.entry(pid).or_default().insert(*unit_id);
            }
            EventKind::EnemyLost { unit_id } => {
                if !sighted.get_mut(&pid).is_some_and(|s| s.remove(unit_id)) {
                    flag(ViolationRule::NotSighted(*unit_id));
                }
            }
            EventKind::Action { .. }
            | EventKind::Stats { .. }
            | EventKind::UpgradeComplete { .. }
            | EventKind::TechComplete { .. }
            | EventKind::Alert { .. } => {}
        }
    }
    ValidationReport { violations: out }
}
