//! Replay parsing: observation reconstruction and action labelling.
//!
//! Every `n` frames the parser takes the current observation and the set of
//! commands issued since the previous one. The first macro command in that
//! window becomes the label of the *previous* observation; a window without
//! one labels it with the null action. Observations at frame `f` reflect all
//! events strictly before `f`, and a window covers `[f - n, f)`.

pub mod observation;
pub mod vocab;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ActionKind, GameResult, Race, Trace};

pub use observation::{reduce_event, ObservationSnapshot, PlayerView, Resources, UnitPos};
pub use vocab::{ActionGroup, ActionVocabulary, VocabEntry, NULL_ACTION};

/// Default observation stride in frames.
pub const DEFAULT_STRIDE: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParserConfig {
    pub n: u64,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig { n: DEFAULT_STRIDE }
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("player {0} is not in the trace header")]
    UnknownPlayer(u8),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot decode parsed line {line}: {message}")]
    Decode { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledObservation {
    pub label: usize,
    pub obs: ObservationSnapshot,
}

/// Header line of a parsed replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedHeader {
    pub replay_id: String,
    pub player_id: u8,
    pub result: GameResult,
    pub n: u64,
    pub race: Race,
    pub enemy_race: Race,
    pub total_frames: u64,
    #[serde(default)]
    pub warnings: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReplay {
    pub header: ParsedHeader,
    pub pairs: Vec<LabeledObservation>,
}

impl ParsedReplay {
    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.label)
    }
}

/// Label of a window: the first macro command's vocabulary index, or the null
/// action. A macro command whose id is missing from the race's vocabulary (or
/// whose group disagrees with its entry) labels the window null and bumps
/// `warnings`.
pub fn label_action<I>(
    actions: I,
    race: Race,
    vocab: &ActionVocabulary,
    warnings: &mut u32,
) -> usize
where
    I: IntoIterator<Item = (ActionKind, u32)>,
{
    for (kind, build_id) in actions {
        let Some(group) = ActionGroup::of_kind(kind) else {
            continue;
        };
        let label = vocab.label_of(race, build_id).filter(|&l| {
            vocab
                .entry_for_label(race, l)
                .is_some_and(|e| e.group == group)
        });
        return match label {
            Some(l) => l,
            None => {
                *warnings += 1;
                NULL_ACTION
            }
        };
    }
    NULL_ACTION
}

/// Parses one player's perspective of a trace into (observation, label) pairs.
pub fn parse_trace(
    trace: &Trace,
    player_id: u8,
    config: ParserConfig,
    vocab: &ActionVocabulary,
) -> Result<ParsedReplay, ParseError> {
    if config.n == 0 {
        return Err(ParseError::ZeroStride);
    }
    let header = &trace.header;
    let me = header
        .player(player_id)
        .ok_or(ParseError::UnknownPlayer(player_id))?;
    let enemy_race = header.opponent(player_id).map_or(me.race, |p| p.race);
    let n = config.n;
    let total = header.total_frames;

    let mut view = PlayerView::new(player_id);
    let mut events = trace.events.iter().peekable();
    let mut warnings = 0u32;
    let mut pairs = Vec::with_capacity((total / n) as usize);
    let mut previous = view.snapshot(0);
    let mut window: Vec<(ActionKind, u32)> = Vec::new();

    let mut frame = n;
    while frame <= total {
        window.clear();
        while let Some(event) = events.next_if(|e| e.frame < frame) {
            if event.player_id == player_id {
                if let Some(action) = event.action() {
                    window.push(action);
                }
            }
            reduce_event(&mut view, event);
        }
        let label = label_action(window.iter().copied(), me.race, vocab, &mut warnings);
        let current = view.snapshot(frame);
        pairs.push(LabeledObservation {
            label,
            obs: std::mem::replace(&mut previous, current),
        });
        view.clear_alerts();
        frame += n;
    }

    warnings += view.warnings;
    if warnings > 0 {
        log::warn!(
            "{}: player {player_id}: {warnings} unknown references",
            header.replay_id
        );
    }
    Ok(ParsedReplay {
        header: ParsedHeader {
            replay_id: header.replay_id.clone(),
            player_id,
            result: me.result,
            n,
            race: me.race,
            enemy_race,
            total_frames: total,
            warnings,
        },
        pairs,
    })
}

/// Both perspectives of a trace, in player-id order.
pub fn parse_both(
    trace: &Trace,
    config: ParserConfig,
    vocab: &ActionVocabulary,
) -> Result<Vec<ParsedReplay>, ParseError> {
    let mut ids: Vec<u8> = trace.header.players.iter().map(|p| p.player_id).collect();
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| parse_trace(trace, id, config, vocab))
        .collect()
}

pub fn parsed_file_name(replay_id: &str, player_id: u8) -> String {
    format!("{replay_id}.p{player_id}.parsed.jsonl")
}

pub fn write_parsed<W: Write>(mut out: W, parsed: &ParsedReplay) -> io::Result<()> {
    serde_json::to_writer(&mut out, &parsed.header)?;
    out.write_all(b"\n")?;
    for pair in &parsed.pairs {
        serde_json::to_writer(&mut out, pair)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_parsed_file(path: &Path, parsed: &ParsedReplay) -> Result<(), ParseError> {
    let io_err = |source| ParseError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_parsed(BufWriter::new(file), parsed).map_err(|source| ParseError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_parsed<R: BufRead>(input: R) -> Result<ParsedReplay, ParseError> {
    let decode = |line: usize, e: &dyn std::fmt::Display| ParseError::Decode {
        line,
        message: e.to_string(),
    };
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| decode(1, &"empty file"))?
        .map_err(|e| decode(1, &e))?;
    let header: ParsedHeader = serde_json::from_str(&first).map_err(|e| decode(1, &e))?;
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| decode(i + 2, &e))?;
        if line.is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line).map_err(|e| decode(i + 2, &e))?);
    }
    Ok(ParsedReplay { header, pairs })
}

pub fn read_parsed_file(path: &Path) -> Result<ParsedReplay, ParseError> {
    let file = File::open(path).map_err(|source| ParseError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_parsed(BufReader::new(file))
}

/// Whether a label is a macro action (anything but the null action).
pub fn is_macro(label: usize) -> bool {
    label != NULL_ACTION
}
