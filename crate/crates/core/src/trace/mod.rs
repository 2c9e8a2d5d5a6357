//! Canonical match-trace model.
//!
//! A trace is the engine-free stand-in for a replay: a header with both
//! players' metadata and the final result, a 64×64 terrain height grid, and
//! a frame-ordered stream of events from which each player's observations
//! can be reconstructed. On disk a trace is a JSON Lines file: the first
//! line holds the header (including `height_map`), every following line
//! one event.

mod io;
pub mod synth;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use io::{
    read_trace, read_trace_file, trace_file_name, write_trace, write_trace_file, TraceError,
};
pub use synth::{gen_synthetic, DifficultyProfile, SynthConfig, SynthError};
pub use validate::{validate_trace, ValidationReport, Violation, ViolationRule};

/// Side length of the terrain grid (and of the spatial feature planes).
pub const GRID: usize = 64;
/// Largest legal terrain height.
pub const MAX_HEIGHT: u16 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Race {
    Terran,
    Protoss,
    Zerg,
}

impl Race {
    pub const ALL: [Race; 3] = [Race::Terran, Race::Protoss, Race::Zerg];

    pub fn letter(self) -> char {
        match self {
            Race::Terran => 'T',
            Race::Protoss => 'P',
            Race::Zerg => 'Z',
        }
    }

    fn order(self) -> u8 {
        match self {
            Race::Terran => 0,
            Race::Protoss => 1,
            Race::Zerg => 2,
        }
    }
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Race::Terran => "terran",
            Race::Protoss => "protoss",
            Race::Zerg => "zerg",
        };
        f.write_str(name)
    }
}

/// Race-unordered pairing, normalized to Terran < Protoss < Zerg.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Matchup {
    TvT,
    TvP,
    TvZ,
    PvP,
    PvZ,
    ZvZ,
}

impl Matchup {
    pub const ALL: [Matchup; 6] = [
        Matchup::TvT,
        Matchup::TvP,
        Matchup::TvZ,
        Matchup::PvP,
        Matchup::PvZ,
        Matchup::ZvZ,
    ];

    pub fn from_races(a: Race, b: Race) -> Matchup {
        let (lo, hi) = if a.order() <= b.order() {
            (a, b)
        } else {
            (b, a)
        };
        match (lo, hi) {
            (Race::Terran, Race::Terran) => Matchup::TvT,
            (Race::Terran, Race::Protoss) => Matchup::TvP,
            (Race::Terran, Race::Zerg) => Matchup::TvZ,
            (Race::Protoss, Race::Protoss) => Matchup::PvP,
            (Race::Protoss, Race::Zerg) => Matchup::PvZ,
            (Race::Zerg, Race::Zerg) => Matchup::ZvZ,
            _ => unreachable!("races are ordered"),
        }
    }

    /// The two races in normalized order.
    pub fn races(self) -> (Race, Race) {
        match self {
            Matchup::TvT => (Race::Terran, Race::Terran),
            Matchup::TvP => (Race::Terran, Race::Protoss),
            Matchup::TvZ => (Race::Terran, Race::Zerg),
            Matchup::PvP => (Race::Protoss, Race::Protoss),
            Matchup::PvZ => (Race::Protoss, Race::Zerg),
            Matchup::ZvZ => (Race::Zerg, Race::Zerg),
        }
    }
}

impl fmt::Display for Matchup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.races();
        write!(f, "{}v{}", a.letter(), b.letter())
    }
}

impl std::str::FromStr for Matchup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let letters: Vec<char> = s.trim().to_ascii_uppercase().chars().collect();
        let race = |c: char| match c {
            'T' => Some(Race::Terran),
            'P' => Some(Race::Protoss),
            'Z' => Some(Race::Zerg),
            _ => None,
        };
        match letters.as_slice() {
            [a, 'V', b] => match (race(*a), race(*b)) {
                (Some(a), Some(b)) => Ok(Matchup::from_races(a, b)),
                _ => Err(format!("unknown matchup {s:?}")),
            },
            _ => Err(format!("unknown matchup {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GameResult {
    Win,
    Lose,
}

impl GameResult {
    pub fn is_win(self) -> bool {
        self == GameResult::Win
    }

    pub fn opposite(self) -> GameResult {
        match self {
            GameResult::Win => GameResult::Lose,
            GameResult::Lose => GameResult::Win,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerMeta {
    pub player_id: u8,
    pub race: Race,
    /// Missing metadata decodes as 0, which the quality filter rejects.
    #[serde(default)]
    pub apm: f64,
    #[serde(default)]
    pub mmr: f64,
    pub result: GameResult,
}

pub(crate) fn default_map_size() -> [u32; 2] {
    [GRID as u32, GRID as u32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub replay_id: String,
    pub map_name: String,
    pub total_frames: u64,
    pub players: Vec<PlayerMeta>,
    /// Playable map extent in map cells; event coordinates lie in `[0, w) × [0, h)`.
    #[serde(default = "default_map_size")]
    pub map_size: [u32; 2],
    /// Neutral resource field locations, in map cells.
    #[serde(default)]
    pub resources: Vec<[u32; 2]>,
}

impl TraceHeader {
    pub fn player(&self, player_id: u8) -> Option<&PlayerMeta> {
        self.players.iter().find(|p| p.player_id == player_id)
    }

    pub fn opponent(&self, player_id: u8) -> Option<&PlayerMeta> {
        self.players.iter().find(|p| p.player_id != player_id)
    }

    pub fn matchup(&self) -> Matchup {
        matchup_of(self)
    }
}

/// Normalizes the header's race pair to one of the six matchup labels.
///
/// Panics if the header does not carry two players; callers validate first.
pub fn matchup_of(header: &TraceHeader) -> Matchup {
    assert!(header.players.len() >= 2, "matchup_of needs two players");
    Matchup::from_races(header.players[0].race, header.players[1].race)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Build,
    Train,
    Research,
    Morph,
    Cancel,
    Halt,
    Stop,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Action {
        action: ActionKind,
        build_id: u32,
    },
    UnitBorn {
        unit_id: u64,
        unit_type: u32,
        x: u32,
        y: u32,
    },
    UnitDied {
        unit_id: u64,
    },
    Stats {
        minerals_collected: u64,
        vespene_collected: u64,
        minerals_used: u64,
        vespene_used: u64,
    },
    UpgradeComplete {
        upgrade_id: u32,
    },
    TechComplete {
        tech_id: u32,
    },
    Alert {
        alert_id: u32,
    },
    EnemySighted {
        unit_id: u64,
        unit_type: u32,
        x: u32,
        y: u32,
    },
    /// The observing player loses sight of an enemy unit (out of vision or destroyed).
    EnemyLost {
        unit_id: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub frame: u64,
    pub player_id: u8,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl Event {
    pub fn new(frame: u64, player_id: u8, kind: EventKind) -> Self {
        Event {
            frame,
            player_id,
            kind,
        }
    }

    pub fn action(&self) -> Option<(ActionKind, u32)> {
        match self.kind {
            EventKind::Action { action, build_id } => Some((action, build_id)),
            _ => None,
        }
    }
}

/// Terrain heights, row-major `[y][x]`, `GRID × GRID`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeightMap(pub Vec<Vec<u16>>);

impl HeightMap {
    pub fn flat(height: u16) -> Self {
        HeightMap(vec![vec![height; GRID]; GRID])
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.0[row][col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub height_map: HeightMap,
    pub events: Vec<Event>,
}

impl Trace {
    pub fn matchup(&self) -> Matchup {
        matchup_of(&self.header)
    }
}
