use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Event, HeightMap, Trace, TraceHeader};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot decode trace line {line}: {message}")]
    Decode { line: usize, message: String },
    #[error("trace file is empty")]
    Empty,
}

#[derive(Serialize)]
struct HeaderLineRef<'a> {
    #[serde(flatten)]
    header: &'a TraceHeader,
    height_map: &'a HeightMap,
}

#[derive(Deserialize)]
struct HeaderLine {
    #[serde(flatten)]
    header: TraceHeader,
    height_map: HeightMap,
}

pub fn trace_file_name(replay_id: &str) -> String {
    format!("{replay_id}.trace.jsonl")
}

pub fn write_trace<W: Write>(mut out: W, trace: &Trace) -> io::Result<()> {
    let header = HeaderLineRef {
        header: &trace.header,
        height_map: &trace.height_map,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for event in &trace.events {
        serde_json::to_writer(&mut out, event)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Decodes a trace. Structural problems (bad JSON, missing fields) are decode
/// errors; semantic problems are left to [`super::validate_trace`].
pub fn read_trace<R: BufRead>(input: R) -> Result<Trace, TraceError> {
    let mut lines = input.lines().enumerate();
    let (header, height_map) = loop {
        match lines.next() {
            None => return Err(TraceError::Empty),
            Some((idx, line)) => {
                let line = line.map_err(|e| TraceError::Decode {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: HeaderLine =
                    serde_json::from_str(&line).map_err(|e| TraceError::Decode {
                        line: idx + 1,
                        message: e.to_string(),
                    })?;
                break (parsed.header, parsed.height_map);
            }
        }
    };
    let mut events = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| TraceError::Decode {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(&line).map_err(|e| TraceError::Decode {
            line: idx + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(Trace {
        header,
        height_map,
        events,
    })
}

pub fn read_trace_file(path: &Path) -> Result<Trace, TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_trace(BufReader::new(file))
}

/// Writes `<dir>/<replay_id>.trace.jsonl` and returns its path.
pub fn write_trace_file(dir: &Path, trace: &Trace) -> Result<PathBuf, TraceError> {
    let path = dir.join(trace_file_name(&trace.header.replay_id));
    let io_err = |source| TraceError::Io {
        path: path.clone(),
        source,
    };
    let file = File::create(&path).map_err(io_err)?;
    write_trace(BufWriter::new(file), trace).map_err(|source| TraceError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
