//! Feature extraction and null-action balancing.

mod balance;
mod global;
mod spatial;

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{ActionVocabulary, ParsedReplay};
use crate::trace::{GameResult, Race, Trace};

pub use balance::{balance_indices, balance_sample, retained_null_target, BALANCE_FLOOR};
pub use global::{extract_global, FeatureLayout, ALERT_SLOTS};
pub use spatial::{
    extract_spatial, SpatialContext, SpatialTensor, CHANNELS, CH_CREEP, CH_ENEMY_BUILDING,
    CH_ENEMY_UNIT, CH_FRIENDLY_BUILDING, CH_FRIENDLY_UNIT, CH_HEIGHT, CH_NEUTRAL, CH_PROGRESS,
    CH_REL_ENEMY, CH_REL_FRIENDLY, CH_RESOURCE, CH_UNIT_TYPE, CH_VISIBILITY, SPATIAL_SHAPE,
};

/// Saturation constants: every raw quantity is divided by its cap and
/// clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationCaps {
    pub max_unit_count: f64,
    pub max_resource: f64,
    pub max_frame: f64,
    pub max_density: f64,
}

impl Default for NormalizationCaps {
    fn default() -> Self {
        NormalizationCaps {
            max_unit_count: 200.0,
            max_resource: 100_000.0,
            max_frame: 131_072.0,
            max_density: 8.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("normalization cap {0} must be positive")]
    BadCap(&'static str),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot decode sample line {line}: {message}")]
    Decode { line: usize, message: String },
    #[error("cannot decode caps: {0}")]
    Caps(#[from] serde_json::Error),
}

impl NormalizationCaps {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let named = [
            ("max_unit_count", self.max_unit_count),
            ("max_resource", self.max_resource),
            ("max_frame", self.max_frame),
            ("max_density", self.max_density),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FeatureError::BadCap(name));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text = fs::read_to_string(path).map_err(|source| FeatureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let caps: NormalizationCaps = serde_json::from_str(&text)?;
        caps.validate()?;
        Ok(caps)
    }
}

pub(crate) fn norm(value: f64, cap: f64) -> f32 {
    (value / cap).clamp(0.0, 1.0) as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleHeader {
    pub replay_id: String,
    pub player_id: u8,
    pub result: GameResult,
    pub global_dim: usize,
    pub spatial_shape: [usize; 3],
    pub n_a: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStep {
    pub frame: u64,
    pub label: usize,
    pub global: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial: Option<Vec<f32>>,
}

/// One player's balanced, featurized sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSequence {
    pub header: SampleHeader,
    pub steps: Vec<SampleStep>,
}

impl SampleSequence {
    pub fn key(&self) -> String {
        sequence_key(&self.header.replay_id, self.header.player_id)
    }

    pub fn won(&self) -> bool {
        self.header.result.is_win()
    }
}

/// Stable name of one player's sequence, e.g. `replay.p1`.
pub fn sequence_key(replay_id: &str, player_id: u8) -> String {
    format!("{replay_id}.p{player_id}")
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExtractOptions {
    pub caps: NormalizationCaps,
    pub seed: u64,
    pub spatial: bool,
}

/// Balances a parsed replay and featurizes the surviving pairs.
pub fn extract_sequence(
    parsed: &ParsedReplay,
    trace: &Trace,
    vocab: &ActionVocabulary,
    options: &ExtractOptions,
) -> SampleSequence {
    let h = &parsed.header;
    let layout = FeatureLayout::new(vocab, h.race, h.enemy_race);
    let key = sequence_key(&h.replay_id, h.player_id);
    let kept = balance_sample(&parsed.pairs, &key, options.seed);
    let ctx = SpatialContext::from_trace(trace, h.race);
    let steps = kept
        .iter()
        .map(|pair| SampleStep {
            frame: pair.obs.frame,
            label: pair.label,
            global: extract_global(&pair.obs, &options.caps, &layout),
            spatial: options
                .spatial
                .then(|| extract_spatial(&pair.obs, &ctx, &options.caps, vocab).into_vec()),
        })
        .collect();
    SampleSequence {
        header: SampleHeader {
            replay_id: h.replay_id.clone(),
            player_id: h.player_id,
            result: h.result,
            global_dim: layout.dim(),
            spatial_shape: SPATIAL_SHAPE,
            n_a: vocab.n_actions(h.race),
        },
        steps,
    }
}

/// Input width for a matchup: both sides of a mirror or mixed match share it
/// only when the vocabulary lists are the same length, which holds for the
/// standard vocabulary.
pub fn global_dim(vocab: &ActionVocabulary, race: Race, enemy: Race) -> usize {
    FeatureLayout::new(vocab, race, enemy).dim()
}

pub fn sample_file_name(replay_id: &str, player_id: u8) -> String {
    format!("{}.sample.jsonl", sequence_key(replay_id, player_id))
}

pub fn write_samples<W: Write>(mut out: W, seq: &SampleSequence) -> io::Result<()> {
    serde_json::to_writer(&mut out, &seq.header)?;
    out.write_all(b"\n")?;
    for step in &seq.steps {
        serde_json::to_writer(&mut out, step)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_sample_file(path: &Path, seq: &SampleSequence) -> Result<(), FeatureError> {
    let err = |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(err)?;
    write_samples(BufWriter::new(file), seq).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_samples<R: BufRead>(input: R) -> Result<SampleSequence, FeatureError> {
    let decode = |line: usize, e: &dyn std::fmt::Display| FeatureError::Decode {
        line,
        message: e.to_string(),
    };
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| decode(1, &"empty file"))?
        .map_err(|e| decode(1, &e))?;
    let header: SampleHeader = serde_json::from_str(&first).map_err(|e| decode(1, &e))?;
    let mut steps = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| decode(i + 2, &e))?;
        if line.is_empty() {
            continue;
        }
        let step: SampleStep = serde_json::from_str(&line).map_err(|e| decode(i + 2, &e))?;
        if step.global.len() != header.global_dim {
            return Err(decode(
                i + 2,
                &format!(
                    "global length {} != {}",
                    step.global.len(),
                    header.global_dim
                ),
            ));
        }
        steps.push(step);
    }
    Ok(SampleSequence { header, steps })
}

pub fn read_sample_file(path: &Path) -> Result<SampleSequence, FeatureError> {
    let file = File::open(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_samples(BufReader::new(file))
}
