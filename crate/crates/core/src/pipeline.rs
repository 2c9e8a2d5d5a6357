//! Resumable end-to-end pipeline: filter → parse → extract → split.
//!
//! Every stage records, per item, a fingerprint of its inputs and the CRC32
//! of each output it wrote. On a rerun an item whose fingerprint still
//! matches and whose outputs still carry their recorded checksums is
//! skipped; an output whose checksum no longer matches is reported as
//! corrupted. Outputs are written as `<name>.partial` and renamed once the
//! item succeeds, so a failed item leaves its partial files behind.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    split_dataset, write_shards, DatasetError, DatasetManifest, SequenceId, Split,
};
use crate::features::{
    extract_sequence, read_sample_file, sample_file_name, write_samples, ExtractOptions,
    FeatureError, NormalizationCaps, SampleHeader, SampleSequence,
};
use crate::models::TrainConfig;
use crate::parser::{
    parse_both, parsed_file_name, read_parsed_file, write_parsed, ActionVocabulary, ParseError,
    ParserConfig,
};
use crate::preprocess::{filter_replay, group_replays, RejectReason};
use crate::trace::{read_trace_file, trace_file_name, validate_trace, Matchup, Trace, TraceError};
use crate::util::{crc32_file, crc32_hex, fnv1a};

pub const TRACE_SUFFIX: &str = ".trace.jsonl";
pub const PARSED_SUFFIX: &str = ".parsed.jsonl";
pub const SAMPLE_SUFFIX: &str = ".sample.jsonl";
pub const FILTER_FILE: &str = "filter.json";
pub const RUN_LOG_FILE: &str = "pipeline.jsonl";
/// Per-stage resume state, kept next to the stage outputs.
pub const STATE_FILE: &str = ".msc-state.json";
pub const PARTIAL_SUFFIX: &str = ".partial";

/// Standard layout of a work directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkDir {
    pub root: PathBuf,
}

impl WorkDir {
    pub const SUBDIRS: [&'static str; 6] =
        ["traces", "parsed", "samples", "dataset", "ckpt", "reports"];

    pub fn new(root: impl Into<PathBuf>) -> Self {
        WorkDir { root: root.into() }
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }
    pub fn parsed(&self) -> PathBuf {
        self.root.join("parsed")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn ckpt(&self) -> PathBuf {
        self.root.join("ckpt")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn create(&self) -> Result<(), PipelineError> {
        for sub in Self::SUBDIRS {
            let dir = self.root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Directory of trace files; defaults to `<work_dir>/traces`.
    pub input_dir: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub parser: ParserConfig,
    pub caps: NormalizationCaps,
    pub train: TrainConfig,
    pub seed: u64,
    /// Restrict parsing and splitting to one matchup group.
    pub matchup: Option<Matchup>,
    /// Also extract spatial tensors.
    pub spatial: bool,
    /// Keep both perspectives of a replay in the same split.
    pub pair_lock: bool,
    /// Threads for per-replay work (0 = all cores).
    pub workers: usize,
    /// Vocabulary file; the built-in vocabulary when absent.
    pub vocab: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input_dir: None,
            work_dir: PathBuf::from("msc-work"),
            parser: ParserConfig::default(),
            caps: NormalizationCaps::default(),
            train: TrainConfig::default(),
            seed: 0,
            matchup: None,
            spatial: false,
            pair_lock: true,
            workers: 1,
            vocab: None,
        }
    }
}

impl PipelineConfig {
    pub fn work(&self) -> WorkDir {
        WorkDir::new(&self.work_dir)
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.input_dir
            .clone()
            .unwrap_or_else(|| self.work().traces())
    }

    pub fn load_vocab(&self) -> Result<ActionVocabulary, PipelineError> {
        match &self.vocab {
            Some(path) => ActionVocabulary::load(path).map_err(|e| PipelineError::Config {
                message: format!("vocabulary {}: {e}", path.display()),
            }),
            None => Ok(ActionVocabulary::standard()),
        }
    }

    pub fn extract_options(&self) -> ExtractOptions {
        ExtractOptions {
            caps: self.caps,
            seed: self.seed,
            spatial: self.spatial,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {message}")]
    Config { message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupted intermediate file {path}: crc32 {actual}, recorded {expected}")]
    Corrupt {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("bad trace file {path}: {source}")]
    Trace {
        path: PathBuf,
        #[source]
        source: TraceError,
    },
    #[error("{path} holds replay {replay_id}; expected file name {expected}")]
    MisnamedTrace {
        path: PathBuf,
        replay_id: String,
        expected: String,
    },
    #[error("bad parsed file {path}: {source}")]
    Parsed {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("parse failed for {replay_id}: {source}")]
    Parse {
        replay_id: String,
        #[source]
        source: ParseError,
    },
    #[error("bad sample file {path}: {source}")]
    Sample {
        path: PathBuf,
        #[source]
        source: FeatureError,
    },
    #[error("bad state file {path}: {source}")]
    State {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl PipelineError {
    fn io(path: &Path, source: io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Output of the filter stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterManifest {
    pub accepted: Vec<String>,
    pub rejected: Vec<Rejected>,
    /// Traces that decode but break a trace invariant.
    #[serde(default)]
    pub invalid: Vec<Invalid>,
    pub counts: BTreeMap<Matchup, usize>,
    /// Matchup of every accepted replay.
    #[serde(default)]
    pub matchups: BTreeMap<String, Matchup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub id: String,
    pub reasons: Vec<RejectReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invalid {
    pub id: String,
    pub violations: Vec<String>,
}

impl FilterManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| PipelineError::State {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("filter manifest serializes");
        s.push('\n');
        s
    }

    /// Accepted replay ids, optionally restricted to one matchup.
    pub fn selected(&self, matchup: Option<Matchup>) -> Vec<String> {
        self.accepted
            .iter()
            .filter(|id| matchup.is_none() || self.matchups.get(*id).copied() == matchup)
            .cloned()
            .collect()
    }
}

/// One JSON log line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub stage: String,
    pub replay_id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Done,
    Skipped,
    Rejected,
    Invalid,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub processed: usize,
    pub skipped: usize,
    pub failed: usize,
}

impl StageSummary {
    pub fn all_skipped(&self) -> bool {
        self.processed == 0 && self.failed == 0
    }
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub stages: Vec<StageSummary>,
    pub log: Vec<LogLine>,
    pub manifest: DatasetManifest,
}

// ---------------------------------------------------------------------------
// Resume state

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct StageState {
    items: BTreeMap<String, ItemRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ItemRecord {
    fingerprint: String,
    /// Output path relative to the stage directory → crc32 hex.
    outputs: BTreeMap<String, String>,
}

impl StageState {
    fn load(path: &Path) -> Result<Self, PipelineError> {
        if !path.is_file() {
            return Ok(StageState::default());
        }
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| PipelineError::State {
            path: path.to_path_buf(),
            source,
        })
    }

    fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(self).expect("state serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// Whether `id` can be skipped. Errors when a recorded output exists
    /// but its checksum changed.
    fn can_skip(&self, id: &str, fingerprint: &str, dir: &Path) -> Result<bool, PipelineError> {
        let Some(rec) = self.items.get(id) else {
            return Ok(false);
        };
        if rec.fingerprint != fingerprint {
            return Ok(false);
        }
        let mut all_present = true;
        for (rel, expected) in &rec.outputs {
            let path = dir.join(rel);
            if !path.is_file() {
                all_present = false;
                continue;
            }
            let actual = file_crc(&path)?;
            if &actual != expected {
                return Err(PipelineError::Corrupt {
                    path,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(all_present)
    }
}

fn file_crc(path: &Path) -> Result<String, PipelineError> {
    crc32_file(path)
        .map(crc32_hex)
        .map_err(|e| PipelineError::io(path, e))
}

fn hash_hex(parts: &[&str]) -> String {
    let mut joined = String::new();
    for p in parts {
        joined.push_str(p);
        joined.push('\u{1f}');
    }
    format!("{:016x}", fnv1a(joined.as_bytes()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = partial_path(path);
    fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(PARTIAL_SUFFIX);
    PathBuf::from(s)
}

/// Writes every output as `.partial`, then renames them all.
fn commit_outputs(
    dir: &Path,
    outputs: &[(String, Vec<u8>)],
) -> Result<BTreeMap<String, String>, PipelineError> {
    for (rel, bytes) in outputs {
        let tmp = partial_path(&dir.join(rel));
        fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    }
    let mut crcs = BTreeMap::new();
    for (rel, bytes) in outputs {
        let path = dir.join(rel);
        fs::rename(partial_path(&path), &path).map_err(|e| PipelineError::io(&path, e))?;
        crcs.insert(rel.clone(), crc32_hex(crc32fast::hash(bytes)));
    }
    Ok(crcs)
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
}

/// Runs per-item work with resume bookkeeping. `work` returns the outputs
/// to write (relative to `dir`) and an optional log detail.
fn run_items<F>(
    stage: &str,
    dir: &Path,
    items: &[(String, String)],
    workers: usize,
    log: &mut Vec<LogLine>,
    work: F,
) -> Result<StageSummary, PipelineError>
where
    F: Fn(&str) -> Result<(Vec<(String, Vec<u8>)>, Option<String>), PipelineError> + Sync,
{
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let state_path = dir.join(STATE_FILE);
    let state = StageState::load(&state_path)?;

    type ItemResult = Result<(Status, Option<ItemRecord>, Option<String>), PipelineError>;
    let results: Vec<ItemResult> = pool(workers).install(|| {
        items
            .par_iter()
            .map(|(id, fp)| {
                if state.can_skip(id, fp, dir)? {
                    return Ok((Status::Skipped, state.items.get(id).cloned(), None));
                }
                let (outputs, detail) = work(id)?;
                let crcs = commit_outputs(dir, &outputs)?;
                let rec = ItemRecord {
                    fingerprint: fp.clone(),
                    outputs: crcs,
                };
                Ok((Status::Done, Some(rec), detail))
            })
            .collect()
    });

    let mut next = StageState::default();
    let mut summary = StageSummary {
        stage: stage.to_string(),
        ..StageSummary::default()
    };
    let mut first_err = None;
    for ((id, _), res) in items.iter().zip(results) {
        let line = match res {
            Ok((status, rec, detail)) => {
                if let Some(rec) = rec {
                    next.items.insert(id.clone(), rec);
                }
                match status {
                    Status::Skipped => summary.skipped += 1,
                    _ => summary.processed += 1,
                }
                LogLine {
                    stage: stage.to_string(),
                    replay_id: id.clone(),
                    status,
                    detail,
                }
            }
            Err(e) => {
                summary.failed += 1;
                let line = LogLine {
                    stage: stage.to_string(),
                    replay_id: id.clone(),
                    status: Status::Failed,
                    detail: Some(e.to_string()),
                };
                first_err.get_or_insert(e);
                line
            }
        };
        emit(log, line);
    }
    next.save(&state_path)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

fn emit(log: &mut Vec<LogLine>, line: LogLine) {
    log::info!(
        "{}",
        serde_json::to_string(&line).expect("log line serializes")
    );
    log.push(line);
}

// ---------------------------------------------------------------------------
// Stages

/// Trace files of a directory, sorted by name.
pub fn list_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(suffix))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn load_trace(path: &Path) -> Result<Trace, PipelineError> {
    read_trace_file(path).map_err(|source| PipelineError::Trace {
        path: path.to_path_buf(),
        source,
    })
}

/// Filters every trace in `input_dir` and writes the filter manifest to
/// `out`. The whole stage is one resumable item keyed by the trace CRCs.
pub fn filter_stage(
    input_dir: &Path,
    out: &Path,
    workers: usize,
    log: &mut Vec<LogLine>,
) -> Result<(FilterManifest, StageSummary), PipelineError> {
    let files = list_files(input_dir, TRACE_SUFFIX)?;
    let crcs = pool(workers).install(|| {
        files
            .par_iter()
            .map(|p| file_crc(p))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut parts: Vec<String> = vec!["filter".into()];
    for (p, c) in files.iter().zip(&crcs) {
        parts.push(format!(
            "{}={c}",
            p.file_name().unwrap_or_default().to_string_lossy()
        ));
    }
    let fp = hash_hex(&parts.iter().map(String::as_str).collect::<Vec<_>>());
    let dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| FILTER_FILE.to_string());

    let mut inner = Vec::new();
    let summary = run_items("filter", &dir, &[(name.clone(), fp)], 1, &mut inner, |_| {
        let decisions = pool(workers).install(|| {
            files
                .par_iter()
                .map(|p| filter_one(p))
                .collect::<Result<Vec<_>, _>>()
        })?;
        let manifest = build_filter_manifest(decisions);
        Ok((vec![(name.clone(), manifest.to_json().into_bytes())], None))
    })?;
    let manifest = FilterManifest::load(out)?;
    let skipped = summary.skipped > 0;
    for id in &manifest.accepted {
        emit(
            log,
            filter_line(
                id,
                if skipped {
                    Status::Skipped
                } else {
                    Status::Done
                },
                None,
            ),
        );
    }
    for r in &manifest.rejected {
        let detail = serde_json::to_string(&r.reasons).expect("reasons serialize");
        emit(log, filter_line(&r.id, Status::Rejected, Some(detail)));
    }
    for r in &manifest.invalid {
        emit(
            log,
            filter_line(&r.id, Status::Invalid, Some(r.violations.join("; "))),
        );
    }
    Ok((manifest, summary))
}

fn filter_line(id: &str, status: Status, detail: Option<String>) -> LogLine {
    LogLine {
        stage: "filter".into(),
        replay_id: id.to_string(),
        status,
        detail,
    }
}

enum FilterOutcome {
    Accepted(String, Matchup),
    Rejected(Rejected),
    Invalid(Invalid),
}

fn filter_one(path: &Path) -> Result<FilterOutcome, PipelineError> {
    let trace = load_trace(path)?;
    let id = trace.header.replay_id.clone();
    let expected = trace_file_name(&id);
    if path.file_name().and_then(|n| n.to_str()) != Some(expected.as_str()) {
        return Err(PipelineError::MisnamedTrace {
            path: path.to_path_buf(),
            replay_id: id,
            expected,
        });
    }
    let report = validate_trace(&trace);
    if !report.is_ok() {
        return Ok(FilterOutcome::Invalid(Invalid {
            id,
            violations: report.violations.iter().map(ToString::to_string).collect(),
        }));
    }
    let decision = filter_replay(&trace.header);
    Ok(if decision.accepted {
        FilterOutcome::Accepted(id, trace.matchup())
    } else {
        FilterOutcome::Rejected(Rejected {
            id,
            reasons: decision.reasons,
        })
    })
}

fn build_filter_manifest(decisions: Vec<FilterOutcome>) -> FilterManifest {
    let mut m = FilterManifest::default();
    for d in decisions {
        match d {
            FilterOutcome::Accepted(id, mu) => {
                m.matchups.insert(id.clone(), mu);
                m.accepted.push(id);
            }
            FilterOutcome::Rejected(r) => m.rejected.push(r),
            FilterOutcome::Invalid(r) => m.invalid.push(r),
        }
    }
    m.accepted.sort();
    m.rejected.sort_by(|a, b| a.id.cmp(&b.id));
    m.invalid.sort_by(|a, b| a.id.cmp(&b.id));
    // Counts come from the grouping of accepted replays.
    let mut groups = group_replays(std::iter::empty());
    for (id, mu) in &m.matchups {
        *groups.counts.entry(*mu).or_insert(0) += 1;
        groups.ids.entry(*mu).or_default().push(id.clone());
    }
    m.counts = groups.counts;
    m
}

fn vocab_hash(vocab: &ActionVocabulary) -> String {
    hash_hex(&[&serde_json::to_string(vocab).expect("vocabulary serializes")])
}

/// Parses both perspectives of every listed replay into `out_dir`.
pub fn parse_stage(
    ids: &[String],
    traces_dir: &Path,
    out_dir: &Path,
    config: ParserConfig,
    vocab: &ActionVocabulary,
    workers: usize,
    log: &mut Vec<LogLine>,
) -> Result<StageSummary, PipelineError> {
    let vh = vocab_hash(vocab);
    let n = config.n.to_string();
    let items = fingerprint_items(ids, workers, |id| {
        let crc = file_crc(&traces_dir.join(trace_file_name(id)))?;
        Ok(hash_hex(&["parse", &crc, &n, &vh]))
    })?;
    run_items("parse", out_dir, &items, workers, log, |id| {
        let trace = load_trace(&traces_dir.join(trace_file_name(id)))?;
        let parsed = parse_both(&trace, config, vocab).map_err(|source| PipelineError::Parse {
            replay_id: id.to_string(),
            source,
        })?;
        let warnings: u32 = parsed.iter().map(|p| p.header.warnings).sum();
        let outputs = parsed
            .iter()
            .map(|p| {
                let mut buf = Vec::new();
                write_parsed(&mut buf, p).expect("in-memory write");
                (parsed_file_name(id, p.header.player_id), buf)
            })
            .collect();
        let pairs: Vec<String> = parsed.iter().map(|p| p.pairs.len().to_string()).collect();
        let mut detail = format!("pairs {}", pairs.join("/"));
        if warnings > 0 {
            detail.push_str(&format!(", {warnings} unknown references"));
        }
        Ok((outputs, Some(detail)))
    })
}

fn fingerprint_items(
    ids: &[String],
    workers: usize,
    f: impl Fn(&str) -> Result<String, PipelineError> + Sync,
) -> Result<Vec<(String, String)>, PipelineError> {
    pool(workers).install(|| ids.par_iter().map(|id| Ok((id.clone(), f(id)?))).collect())
}

/// Parsed files of one replay in `dir`, in player order.
fn parsed_files(dir: &Path, id: &str) -> Vec<PathBuf> {
    (1..=2)
        .map(|p| dir.join(parsed_file_name(id, p)))
        .filter(|p| p.is_file())
        .collect()
}

/// Balances and featurizes every listed replay's parsed sequences.
#[allow(clippy::too_many_arguments)]
pub fn extract_stage(
    ids: &[String],
    traces_dir: &Path,
    parsed_dir: &Path,
    out_dir: &Path,
    options: &ExtractOptions,
    vocab: &ActionVocabulary,
    workers: usize,
    log: &mut Vec<LogLine>,
) -> Result<StageSummary, PipelineError> {
    options.caps.validate().map_err(|e| PipelineError::Config {
        message: e.to_string(),
    })?;
    let opts = serde_json::to_string(&(options.caps, options.seed, options.spatial))
        .expect("options serialize");
    let vh = vocab_hash(vocab);
    let items = fingerprint_items(ids, workers, |id| {
        let mut parts = vec!["extract".to_string(), opts.clone(), vh.clone()];
        parts.push(file_crc(&traces_dir.join(trace_file_name(id)))?);
        for p in parsed_files(parsed_dir, id) {
            parts.push(file_crc(&p)?);
        }
        Ok(hash_hex(
            &parts.iter().map(String::as_str).collect::<Vec<_>>(),
        ))
    })?;
    run_items("extract", out_dir, &items, workers, log, |id| {
        let trace = load_trace(&traces_dir.join(trace_file_name(id)))?;
        let files = parsed_files(parsed_dir, id);
        if files.is_empty() {
            return Err(PipelineError::Parsed {
                path: parsed_dir.join(parsed_file_name(id, 1)),
                source: ParseError::Decode {
                    line: 0,
                    message: "no parsed files for replay".into(),
                },
            });
        }
        let mut outputs = Vec::new();
        let mut steps = Vec::new();
        for path in files {
            let parsed = read_parsed_file(&path).map_err(|source| PipelineError::Parsed {
                path: path.clone(),
                source,
            })?;
            let seq = extract_sequence(&parsed, &trace, vocab, options);
            steps.push(seq.steps.len().to_string());
            let mut buf = Vec::new();
            write_samples(&mut buf, &seq).expect("in-memory write");
            outputs.push((sample_file_name(id, parsed.header.player_id), buf));
        }
        Ok((outputs, Some(format!("steps {}", steps.join("/")))))
    })
}

/// First line of a sample file.
pub fn read_sample_header(path: &Path) -> Result<SampleHeader, PipelineError> {
    let bad = |message: String| PipelineError::Sample {
        path: path.to_path_buf(),
        source: FeatureError::Decode { line: 1, message },
    };
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut line = String::new();
    BufReader::new(file)
        .read_line(&mut line)
        .map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&line).map_err(|e| bad(e.to_string()))
}

/// Splits the sample files of the listed replays and writes the dataset.
pub fn split_stage(
    ids: &[String],
    samples_dir: &Path,
    dataset_dir: &Path,
    seed: u64,
    pair_lock: bool,
    matchup: Option<Matchup>,
    log: &mut Vec<LogLine>,
) -> Result<(DatasetManifest, StageSummary), PipelineError> {
    let mut files = Vec::new();
    for id in ids {
        for p in 1..=2u8 {
            let path = samples_dir.join(sample_file_name(id, p));
            if path.is_file() {
                files.push(path);
            }
        }
    }
    let mut parts = vec![
        "split".to_string(),
        seed.to_string(),
        pair_lock.to_string(),
        format!("{matchup:?}"),
    ];
    for f in &files {
        parts.push(format!(
            "{}={}",
            f.file_name().unwrap_or_default().to_string_lossy(),
            file_crc(f)?
        ));
    }
    let fp = hash_hex(&parts.iter().map(String::as_str).collect::<Vec<_>>());
    let manifest_name = crate::dataset::MANIFEST_FILE.to_string();

    let summary = run_dataset_item(dataset_dir, &fp, || {
        let mut seqs = Vec::with_capacity(files.len());
        for f in &files {
            let h = read_sample_header(f)?;
            seqs.push(SequenceId::new(h.replay_id, h.player_id, h.result));
        }
        let mut manifest = split_dataset(&seqs, seed, pair_lock)?;
        if let Some(m) = matchup {
            manifest = manifest.with_matchup(m);
        }
        for split in Split::ALL {
            let dir = dataset_dir.join(split.as_str());
            if dir.is_dir() {
                fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
            }
        }
        Ok(write_shards(&manifest, samples_dir, dataset_dir)?)
    })?;
    let manifest = DatasetManifest::load(&dataset_dir.join(&manifest_name))?;
    let status = if summary.skipped > 0 {
        Status::Skipped
    } else {
        Status::Done
    };
    let mut by_replay: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for e in &manifest.entries {
        by_replay
            .entry(&e.replay_id)
            .or_default()
            .push(format!("p{}:{}", e.player_id, e.split));
    }
    for (id, splits) in by_replay {
        emit(
            log,
            LogLine {
                stage: "split".into(),
                replay_id: id.to_string(),
                status,
                detail: Some(splits.join(",")),
            },
        );
    }
    Ok((manifest, summary))
}

/// The split stage as a single resumable item whose outputs are the
/// manifest and every shard.
fn run_dataset_item(
    dataset_dir: &Path,
    fingerprint: &str,
    work: impl FnOnce() -> Result<DatasetManifest, PipelineError>,
) -> Result<StageSummary, PipelineError> {
    const ITEM: &str = "dataset";
    fs::create_dir_all(dataset_dir).map_err(|e| PipelineError::io(dataset_dir, e))?;
    let state_path = dataset_dir.join(STATE_FILE);
    let state = StageState::load(&state_path)?;
    let mut summary = StageSummary {
        stage: "split".into(),
        ..StageSummary::default()
    };
    if state.can_skip(ITEM, fingerprint, dataset_dir)? {
        summary.skipped = 1;
        return Ok(summary);
    }
    let manifest = work()?;
    let mut outputs = BTreeMap::new();
    let manifest_path = dataset_dir.join(crate::dataset::MANIFEST_FILE);
    outputs.insert(
        crate::dataset::MANIFEST_FILE.to_string(),
        file_crc(&manifest_path)?,
    );
    for e in &manifest.entries {
        let rel = format!("{}/{}", e.split.as_str(), e.file_name());
        outputs.insert(rel, e.crc32.clone().expect("write_shards fills checksums"));
    }
    let mut next = StageState::default();
    next.items.insert(
        ITEM.to_string(),
        ItemRecord {
            fingerprint: fingerprint.to_string(),
            outputs,
        },
    );
    next.save(&state_path)?;
    summary.processed = 1;
    Ok(summary)
}

/// Runs filter → parse → extract → split under `config.work_dir`.
///
/// Writes one JSON line per replay and stage to `reports/pipeline.jsonl`
/// (also sent to the logger). On failure the log is still written.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineSummary, PipelineError> {
    if config.parser.n == 0 {
        return Err(PipelineError::Config {
            message: "parser stride n must be at least 1".into(),
        });
    }
    let work = config.work();
    work.create()?;
    let mut log = Vec::new();
    let result = run_stages(config, &work, &mut log);
    let log_path = work.reports().join(RUN_LOG_FILE);
    let mut text = Vec::new();
    for line in &log {
        serde_json::to_writer(&mut text, line).expect("log line serializes");
        text.write_all(b"\n").expect("in-memory write");
    }
    write_atomic(&log_path, &text)?;
    let (stages, manifest) = result?;
    Ok(PipelineSummary {
        stages,
        log,
        manifest,
    })
}

fn run_stages(
    config: &PipelineConfig,
    work: &WorkDir,
    log: &mut Vec<LogLine>,
) -> Result<(Vec<StageSummary>, DatasetManifest), PipelineError> {
    let workers = config.workers;
    let vocab = config.load_vocab()?;
    let traces = config.traces_dir();
    let (filter, s_filter) =
        filter_stage(&traces, &work.reports().join(FILTER_FILE), workers, log)?;
    let ids = filter.selected(config.matchup);
    let s_parse = parse_stage(
        &ids,
        &traces,
        &work.parsed(),
        config.parser,
        &vocab,
        workers,
        log,
    )?;
    let s_extract = extract_stage(
        &ids,
        &traces,
        &work.parsed(),
        &work.samples(),
        &config.extract_options(),
        &vocab,
        workers,
        log,
    )?;
    let (manifest, s_split) = split_stage(
        &ids,
        &work.samples(),
        &work.dataset(),
        config.seed,
        config.pair_lock,
        config.matchup,
        log,
    )?;
    Ok((vec![s_filter, s_parse, s_extract, s_split], manifest))
}

// ---------------------------------------------------------------------------
// In-memory path

/// Parses, balances and featurizes one trace without touching the disk.
pub fn samples_from_trace(
    trace: &Trace,
    parser: ParserConfig,
    vocab: &ActionVocabulary,
    options: &ExtractOptions,
) -> Result<Vec<SampleSequence>, PipelineError> {
    let parsed = parse_both(trace, parser, vocab).map_err(|source| PipelineError::Parse {
        replay_id: trace.header.replay_id.clone(),
        source,
    })?;
    Ok(parsed
        .iter()
        .map(|p| extract_sequence(p, trace, vocab, options))
        .collect())
}

/// Splits in-memory sequences the same way the split stage does; returns
/// the manifest and the sequences of each split in manifest order.
pub fn split_in_memory(
    seqs: Vec<SampleSequence>,
    seed: u64,
    pair_lock: bool,
) -> Result<(DatasetManifest, [Vec<SampleSequence>; 3]), PipelineError> {
    let ids: Vec<SequenceId> = seqs
        .iter()
        .map(|s| {
            SequenceId::new(
                s.header.replay_id.clone(),
                s.header.player_id,
                s.header.result,
            )
        })
        .collect();
    let manifest = split_dataset(&ids, seed, pair_lock)?;
    let mut by_key: BTreeMap<String, SampleSequence> =
        seqs.into_iter().map(|s| (s.key(), s)).collect();
    let mut out: [Vec<SampleSequence>; 3] = Default::default();
    for e in &manifest.entries {
        let s = by_key
            .remove(&e.key())
            .expect("manifest built from these sequences");
        out[e.split.index()].push(s);
    }
    Ok((manifest, out))
}

/// Reads every sample file of a split directory (for tooling that works
/// without a manifest).
pub fn read_sample_dir(dir: &Path) -> Result<Vec<SampleSequence>, PipelineError> {
    list_files(dir, SAMPLE_SUFFIX)?
        .into_iter()
        .map(|p| read_sample_file(&p).map_err(|source| PipelineError::Sample { path: p, source }))
        .collect()
}

/// Replay ids of the `*.parsed.jsonl` files in a directory.
pub fn parsed_replay_ids(dir: &Path) -> Result<Vec<String>, PipelineError> {
    replay_ids(dir, PARSED_SUFFIX)
}

/// Replay ids of the `*.sample.jsonl` files in a directory.
pub fn sample_replay_ids(dir: &Path) -> Result<Vec<String>, PipelineError> {
    replay_ids(dir, SAMPLE_SUFFIX)
}

/// Replay ids of the `*.trace.jsonl` files in a directory.
pub fn trace_replay_ids(dir: &Path) -> Result<Vec<String>, PipelineError> {
    Ok(list_files(dir, TRACE_SUFFIX)?
        .iter()
        .filter_map(|p| {
            p.file_name()?
                .to_str()?
                .strip_suffix(TRACE_SUFFIX)
                .map(String::from)
        })
        .collect())
}

fn replay_ids(dir: &Path, suffix: &str) -> Result<Vec<String>, PipelineError> {
    let mut ids: Vec<String> = list_files(dir, suffix)?
        .iter()
        .filter_map(|p| {
            let stem = p.file_name()?.to_str()?.strip_suffix(suffix)?;
            let (id, player) = stem.rsplit_once(".p")?;
            player.parse::<u8>().ok()?;
            Some(id.to_string())
        })
        .collect();
    ids.sort();
    ids.dedup();
    Ok(ids)
}
