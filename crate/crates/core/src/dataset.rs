//! Winner-balanced 7:1:2 train/val/test split and shard manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    read_sample_file, sample_file_name, sequence_key, FeatureError, SampleSequence,
};
use crate::trace::{GameResult, Matchup};
use crate::util::{crc32_file, crc32_hex};

/// Smallest corpus the splitter accepts.
pub const MIN_SEQUENCES: usize = 10;
/// Split ratio train:val:test, out of 10.
pub const SPLIT_RATIO: [usize; 3] = [7, 1, 2];
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, val or test)"
            )),
        }
    }
}

/// One player-perspective sequence to be assigned a split.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SequenceId {
    pub replay_id: String,
    pub player_id: u8,
    pub result: GameResult,
}

impl SequenceId {
    pub fn new(replay_id: impl Into<String>, player_id: u8, result: GameResult) -> Self {
        SequenceId {
            replay_id: replay_id.into(),
            player_id,
            result,
        }
    }

    pub fn key(&self) -> String {
        sequence_key(&self.replay_id, self.player_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub replay_id: String,
    pub player_id: u8,
    pub result: GameResult,
    pub split: Split,
    /// CRC32 of the shard file, filled in by [`write_shards`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crc32: Option<String>,
}

impl ManifestEntry {
    pub fn key(&self) -> String {
        sequence_key(&self.replay_id, self.player_id)
    }

    pub fn file_name(&self) -> String {
        sample_file_name(&self.replay_id, self.player_id)
    }

    /// Location of the shard relative to the dataset directory.
    pub fn shard_path(&self, dataset_dir: &Path) -> PathBuf {
        dataset_dir.join(self.split.as_str()).join(self.file_name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultCounts {
    pub win: usize,
    pub lose: usize,
}

impl ResultCounts {
    pub fn total(&self) -> usize {
        self.win + self.lose
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matchup: Option<Matchup>,
    #[serde(default)]
    pub pair_lock: bool,
    pub counts: BTreeMap<Split, ResultCounts>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn with_matchup(mut self, matchup: Matchup) -> Self {
        self.matchup = Some(matchup);
        self
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.counts.get(&split).map_or(0, ResultCounts::total)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_json()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need at least {MIN_SEQUENCES} sequences to split, got {0}")]
    TooSmall(usize),
    #[error("winner/loser counts differ by more than one ({win} wins, {lose} losses)")]
    Imbalanced { win: usize, lose: usize },
    #[error("pair lock needs exactly one winner and one loser for replay {0}")]
    Unpaired(String),
    #[error("duplicate sequence {0}")]
    Duplicate(String),
    #[error("missing sample file for {replay_id} (player {player_id}): {path}")]
    Missing {
        replay_id: String,
        player_id: u8,
        path: PathBuf,
    },
    #[error("corrupted shard {path}: crc32 {actual}, manifest says {expected}")]
    Corrupt {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("manifest entry {0} has no checksum; write shards first")]
    NoChecksum(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad manifest {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad shard {path}: {source}")]
    Shard {
        path: PathBuf,
        #[source]
        source: FeatureError,
    },
}

/// Largest-remainder apportionment of `n` items over `SPLIT_RATIO`.
/// Equal remainders go to the earlier split.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let denom: usize = SPLIT_RATIO.iter().sum();
    let mut sizes = SPLIT_RATIO.map(|r| n * r / denom);
    let rems = SPLIT_RATIO.map(|r| n * r % denom);
    let mut order = [0, 1, 2];
    order.sort_by(|a, b| rems[*b].cmp(&rems[*a]).then(a.cmp(b)));
    let short = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    sizes
}

/// Winners per split: half of each split, the odd splits sharing whatever is
/// left over in split order.
fn winner_sizes(sizes: [usize; 3], winners: usize) -> [usize; 3] {
    let mut w = sizes.map(|s| s / 2);
    let mut extra = winners - w.iter().sum::<usize>();
    for (i, s) in sizes.iter().enumerate() {
        if extra > 0 && s % 2 == 1 {
            w[i] += 1;
            extra -= 1;
        }
    }
    debug_assert_eq!(extra, 0);
    w
}

/// Assigns every sequence to a split.
///
/// Split sizes are fixed first by largest-remainder rounding of the total;
/// winners and losers are then shuffled independently and dealt into the
/// splits so that every split is balanced to within one. With `pair_lock`
/// both perspectives of a replay are dealt together, so the unit of
/// assignment is the replay.
pub fn split_dataset(
    sequences: &[SequenceId],
    seed: u64,
    pair_lock: bool,
) -> Result<DatasetManifest, DatasetError> {
    if sequences.len() < MIN_SEQUENCES {
        return Err(DatasetError::TooSmall(sequences.len()));
    }
    let mut sorted = sequences.to_vec();
    sorted.sort();
    if let Some(w) = sorted
        .windows(2)
        .find(|w| w[0].replay_id == w[1].replay_id && w[0].player_id == w[1].player_id)
    {
        return Err(DatasetError::Duplicate(w[0].key()));
    }
    let (mut winners, mut losers): (Vec<SequenceId>, Vec<SequenceId>) =
        sorted.iter().cloned().partition(|s| s.result.is_win());
    if winners.len().abs_diff(losers.len()) > 1 {
        return Err(DatasetError::Imbalanced {
            win: winners.len(),
            lose: losers.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(sorted.len());
    let mut push = |s: &SequenceId, split: Split| {
        entries.push(ManifestEntry {
            replay_id: s.replay_id.clone(),
            player_id: s.player_id,
            result: s.result,
            split,
            crc32: None,
        })
    };
    if pair_lock {
        let mut replays: BTreeMap<&str, Vec<&SequenceId>> = BTreeMap::new();
        for s in &sorted {
            replays.entry(&s.replay_id).or_default().push(s);
        }
        let mut pairs = Vec::with_capacity(replays.len());
        for (id, group) in replays {
            match group.as_slice() {
                [a, b] if a.result != b.result => pairs.push((*a, *b)),
                _ => return Err(DatasetError::Unpaired(id.to_string())),
            }
        }
        pairs.shuffle(&mut rng);
        let sizes = split_sizes(pairs.len());
        let mut it = pairs.into_iter();
        for split in Split::ALL {
            for (a, b) in it.by_ref().take(sizes[split.index()]) {
                push(a, split);
                push(b, split);
            }
        }
    } else {
        winners.shuffle(&mut rng);
        losers.shuffle(&mut rng);
        let sizes = split_sizes(sorted.len());
        let w = winner_sizes(sizes, winners.len());
        let (mut wi, mut li) = (winners.iter(), losers.iter());
        for split in Split::ALL {
            let i = split.index();
            for s in wi.by_ref().take(w[i]) {
                push(s, split);
            }
            for s in li.by_ref().take(sizes[i] - w[i]) {
                push(s, split);
            }
        }
    }
    entries.sort_by(|a, b| {
        (a.split, &a.replay_id, a.player_id).cmp(&(b.split, &b.replay_id, b.player_id))
    });

    let mut counts: BTreeMap<Split, ResultCounts> = Split::ALL
        .iter()
        .map(|s| (*s, ResultCounts::default()))
        .collect();
    for e in &entries {
        let c = counts.get_mut(&e.split).expect("all splits present");
        if e.result.is_win() {
            c.win += 1;
        } else {
            c.lose += 1;
        }
    }
    Ok(DatasetManifest {
        seed,
        matchup: None,
        pair_lock,
        counts,
        entries,
    })
}

/// Copies every referenced sample file from `samples_dir` into
/// `dataset_dir/<split>/`, records its CRC32 and writes the manifest.
/// Returns the manifest with checksums filled in.
pub fn write_shards(
    manifest: &DatasetManifest,
    samples_dir: &Path,
    dataset_dir: &Path,
) -> Result<DatasetManifest, DatasetError> {
    for split in Split::ALL {
        let dir = dataset_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|source| DatasetError::Io { path: dir, source })?;
    }
    let crcs = manifest
        .entries
        .par_iter()
        .map(|e| {
            let src = samples_dir.join(e.file_name());
            if !src.is_file() {
                return Err(DatasetError::Missing {
                    replay_id: e.replay_id.clone(),
                    player_id: e.player_id,
                    path: src,
                });
            }
            let dst = e.shard_path(dataset_dir);
            fs::copy(&src, &dst).map_err(|source| DatasetError::Io {
                path: dst.clone(),
                source,
            })?;
            let crc = crc32_file(&dst).map_err(|source| DatasetError::Io { path: dst, source })?;
            Ok(crc32_hex(crc))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = manifest.clone();
    for (e, crc) in out.entries.iter_mut().zip(crcs) {
        e.crc32 = Some(crc);
    }
    out.save(&dataset_dir.join(MANIFEST_FILE))?;
    Ok(out)
}

/// Checks one shard against its recorded checksum.
pub fn verify_shard(entry: &ManifestEntry, dataset_dir: &Path) -> Result<PathBuf, DatasetError> {
    let path = entry.shard_path(dataset_dir);
    let expected = entry
        .crc32
        .clone()
        .ok_or_else(|| DatasetError::NoChecksum(entry.key()))?;
    if !path.is_file() {
        return Err(DatasetError::Missing {
            replay_id: entry.replay_id.clone(),
            player_id: entry.player_id,
            path,
        });
    }
    let actual = crc32_hex(crc32_file(&path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })?);
    if actual != expected {
        return Err(DatasetError::Corrupt {
            path,
            expected,
            actual,
        });
    }
    Ok(path)
}

/// Reads one split back in manifest order, verifying checksums.
pub fn read_split<'a>(
    manifest: &'a DatasetManifest,
    dataset_dir: &'a Path,
    split: Split,
) -> impl Iterator<Item = Result<SampleSequence, DatasetError>> + 'a {
    manifest.split_entries(split).map(move |e| {
        let path = verify_shard(e, dataset_dir)?;
        read_sample_file(&path).map_err(|source| DatasetError::Shard { path, source })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n_win: usize, n_lose: usize) -> Vec<SequenceId> {
        let w = (0..n_win).map(|i| SequenceId::new(format!("r{i:04}"), 1, GameResult::Win));
        let l = (0..n_lose).map(|i| SequenceId::new(format!("r{i:04}"), 2, GameResult::Lose));
        w.chain(l).collect()
    }

    fn counts(m: &DatasetManifest) -> Vec<(usize, usize)> {
        Split::ALL
            .iter()
            .map(|s| (m.counts[s].win, m.counts[s].lose))
            .collect()
    }

    #[test]
    fn largest_remainder_sizes() {
        assert_eq!(split_sizes(10), [7, 1, 2]);
        assert_eq!(split_sizes(100), [70, 10, 20]);
        assert_eq!(split_sizes(20), [14, 2, 4]);
        // 25.9 / 3.7 / 7.4
        assert_eq!(split_sizes(37), [26, 4, 7]);
        assert_eq!(split_sizes(11), [8, 1, 2]);
    }

    #[test]
    fn hundred_is_exact() {
        let m = split_dataset(&corpus(50, 50), 1, false).unwrap();
        assert_eq!(counts(&m), vec![(35, 35), (5, 5), (10, 10)]);
    }

    #[test]
    fn ten_is_seven_one_two() {
        let m = split_dataset(&corpus(5, 5), 4, false).unwrap();
        let sizes: Vec<usize> = Split::ALL.iter().map(|s| m.split_len(*s)).collect();
        assert_eq!(sizes, vec![7, 1, 2]);
        for (w, l) in counts(&m) {
            assert!(w.abs_diff(l) <= 1);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let c = corpus(50, 50);
        let a = split_dataset(&c, 9, false).unwrap();
        assert_eq!(a, split_dataset(&c, 9, false).unwrap());
        let b = split_dataset(&c, 10, false).unwrap();
        assert_ne!(a.entries, b.entries);
        assert_eq!(counts(&a), counts(&b));
        let mut shuffled = c.clone();
        shuffled.reverse();
        assert_eq!(a, split_dataset(&shuffled, 9, false).unwrap());
    }

    #[test]
    fn pair_lock_keeps_replays_together() {
        let m = split_dataset(&corpus(20, 20), 2, true).unwrap();
        assert_eq!(counts(&m), vec![(14, 14), (2, 2), (4, 4)]);
        let mut by_replay: BTreeMap<&str, Vec<Split>> = BTreeMap::new();
        for e in &m.entries {
            by_replay.entry(&e.replay_id).or_default().push(e.split);
        }
        assert!(by_replay.values().all(|s| s.len() == 2 && s[0] == s[1]));
        let err = split_dataset(&corpus(11, 10), 2, true).unwrap_err();
        assert!(matches!(err, DatasetError::Unpaired(id) if id == "r0010"));
    }

    #[test]
    fn refuses_small_or_skewed_input() {
        assert!(matches!(
            split_dataset(&corpus(4, 5), 0, false),
            Err(DatasetError::TooSmall(9))
        ));
        assert!(matches!(
            split_dataset(&corpus(8, 4), 0, false),
            Err(DatasetError::Imbalanced { win: 8, lose: 4 })
        ));
        let mut dup = corpus(5, 5);
        dup[1] = dup[0].clone();
        assert!(matches!(
            split_dataset(&dup, 0, false),
            Err(DatasetError::Duplicate(_))
        ));
    }

    #[test]
    fn manifest_json_round_trip() {
        let m = split_dataset(&corpus(6, 6), 3, false)
            .unwrap()
            .with_matchup(Matchup::TvZ);
        let back: DatasetManifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(m.to_json().contains("\"split\": \"train\""));
    }
}
