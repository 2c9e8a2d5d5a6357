//! Acceptance criteria for the pipeline and the baselines.
//!
//! Every criterion prints one `criterion N (...): PASS|FAIL` line to stderr
//! (bypassing the test harness' output capture) and then asserts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use msc_core::dataset::{read_split, split_dataset, SequenceId, Split, MANIFEST_FILE};
use msc_core::features::{
    balance_indices, extract_global, extract_spatial, read_sample_file, ExtractOptions,
    FeatureLayout, SampleSequence, SpatialContext, SPATIAL_SHAPE,
};
use msc_core::models::{
    evaluate, init_network, segment_inputs, segment_loss, tbptt_gradients, train, FeatureSet,
    NetConfig, Network, SeqNet, Task, TrainConfig, TrainSeq,
};
use msc_core::nn::{
    adam_update, bce_loss, flatten, grad_check, nll_loss, relu, Adam, AdamConfig, Conv2d, Gru,
    Linear, Params, DEFAULT_H,
};
use msc_core::parser::{parse_trace, ObservationSnapshot, ParserConfig, Resources, UnitPos};
use msc_core::pipeline::{
    list_files, run_pipeline, samples_from_trace, split_in_memory, PipelineConfig, SAMPLE_SUFFIX,
};
use msc_core::preprocess::filter_replay;
use msc_core::trace::{
    gen_synthetic, write_trace_file, ActionKind, HeightMap, SynthConfig, GRID, MAX_HEIGHT,
};
use msc_core::{
    ActionGroup, ActionVocabulary, Event, EventKind, GameResult, Matchup, PlayerMeta, Race, Trace,
    TraceHeader,
};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {n} ({name}): {verdict} -- {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn player(player_id: u8, race: Race, apm: f64, mmr: f64, result: GameResult) -> PlayerMeta {
    PlayerMeta {
        player_id,
        race,
        apm,
        mmr,
        result,
    }
}

fn trace(total_frames: u64, races: [Race; 2], events: Vec<Event>) -> Trace {
    Trace {
        header: TraceHeader {
            replay_id: "hand".into(),
            map_name: "flat".into(),
            total_frames,
            players: vec![
                player(1, races[0], 120.0, 3000.0, GameResult::Win),
                player(2, races[1], 120.0, 3000.0, GameResult::Lose),
            ],
            map_size: [GRID as u32, GRID as u32],
            resources: Vec::new(),
        },
        height_map: HeightMap::flat(0),
        events,
    }
}

// ---------------------------------------------------------------------------
// 1. Quality filter boundaries

#[test]
fn criterion_01_filter_boundaries() {
    let header = |frames: u64, apm: f64, mmr: f64| {
        let mut t = trace(frames, [Race::Terran, Race::Zerg], Vec::new());
        t.header.players[1].apm = apm;
        t.header.players[1].mmr = mmr;
        t.header
    };
    let ok = (20_000, 200.0, 4000.0);
    let cases: Vec<(&str, (u64, f64, f64), bool)> = vec![
        ("frames = 10000", (10_000, ok.1, ok.2), false),
        ("frames = 10001", (10_001, ok.1, ok.2), true),
        ("apm = 10", (ok.0, 10.0, ok.2), false),
        ("apm just above 10", (ok.0, 10f64.next_up(), ok.2), true),
        ("mmr = 1000", (ok.0, ok.1, 1000.0), false),
        ("mmr just above 1000", (ok.0, ok.1, 1000f64.next_up()), true),
        ("comfortable", ok, true),
    ];
    let mut wrong = Vec::new();
    for (name, (f, a, m), expect) in &cases {
        let d = filter_replay(&header(*f, *a, *m));
        if d.accepted != *expect || d.accepted != d.reasons.is_empty() {
            wrong.push(format!(
                "{name}: accepted={} reasons={:?}",
                d.accepted, d.reasons
            ));
        }
    }
    report(
        1,
        "filter boundaries",
        wrong.is_empty(),
        &format!("{} boundary cases, wrong: {wrong:?}", cases.len()),
    );
}

// ---------------------------------------------------------------------------
// 2. Parser oracle

fn group_matches(group: ActionGroup, kind: ActionKind) -> bool {
    matches!(
        (group, kind),
        (ActionGroup::Build, ActionKind::Build)
            | (ActionGroup::Train, ActionKind::Train)
            | (ActionGroup::Research, ActionKind::Research)
            | (ActionGroup::Morph, ActionKind::Morph)
            | (ActionGroup::Cancel, ActionKind::Cancel)
            | (ActionGroup::Halt, ActionKind::Halt)
            | (ActionGroup::Stop, ActionKind::Stop)
    )
}

/// Straight-line reference: for every window `[(k−1)n, kn)` with `kn ≤ total`,
/// the observation frame and the label of the player's first macro command.
fn naive_pairs(t: &Trace, pid: u8, n: u64, vocab: &ActionVocabulary) -> Vec<(u64, usize)> {
    let race = t
        .header
        .players
        .iter()
        .find(|p| p.player_id == pid)
        .unwrap()
        .race;
    let entries = vocab.entries(race);
    (1..=t.header.total_frames / n)
        .map(|k| {
            let (lo, hi) = ((k - 1) * n, k * n);
            let first = t
                .events
                .iter()
                .filter(|e| e.player_id == pid && e.frame >= lo && e.frame < hi)
                .find_map(|e| match e.kind {
                    EventKind::Action { action, build_id } if action != ActionKind::Other => {
                        Some((action, build_id))
                    }
                    _ => None,
                });
            let label = first.map_or(0, |(kind, id)| {
                entries
                    .iter()
                    .position(|en| en.id == id && group_matches(en.group, kind))
                    .map_or(0, |i| i + 1)
            });
            (lo, label)
        })
        .collect()
}

fn random_trace(rng: &mut ChaCha8Rng, vocab: &ActionVocabulary) -> (Trace, u64) {
    let races = [
        *Race::ALL.choose(rng).unwrap(),
        *Race::ALL.choose(rng).unwrap(),
    ];
    let total = rng.gen_range(1..3000u64);
    let n = rng.gen_range(1..=16u64);
    let kinds = [
        ActionKind::Build,
        ActionKind::Train,
        ActionKind::Research,
        ActionKind::Morph,
        ActionKind::Cancel,
        ActionKind::Halt,
        ActionKind::Stop,
        ActionKind::Other,
    ];
    let mut events: Vec<Event> = (0..rng.gen_range(0..400))
        .map(|_| {
            let frame = rng.gen_range(0..total + 2 * n);
            let pid = rng.gen_range(1..=2u8);
            let kind = if rng.gen_bool(0.7) {
                let own = vocab.entries(races[pid as usize - 1]);
                let any = *Race::ALL.choose(rng).unwrap();
                let build_id = match rng.gen_range(0..10) {
                    0..=5 => own.choose(rng).unwrap().id,
                    6..=7 => vocab.entries(any).choose(rng).unwrap().id,
                    _ => rng.gen_range(0..5000),
                };
                // Mostly the entry's own group, so matching labels are common.
                let action = if rng.gen_bool(0.6) {
                    vocab
                        .lookup(build_id)
                        .map_or(ActionKind::Other, |(_, e)| e.group.kind())
                } else {
                    *kinds.choose(rng).unwrap()
                };
                EventKind::Action { action, build_id }
            } else if rng.gen_bool(0.5) {
                EventKind::Alert {
                    alert_id: rng.gen_range(0..20),
                }
            } else {
                EventKind::Stats {
                    minerals_collected: rng.gen_range(0..10_000),
                    vespene_collected: 0,
                    minerals_used: 0,
                    vespene_used: 0,
                }
            };
            Event::new(frame, pid, kind)
        })
        .collect();
    events.sort_by_key(|e| e.frame);
    (trace(total, races, events), n)
}

#[test]
fn criterion_02_parser_oracle() {
    let vocab = ActionVocabulary::standard();
    let terran = vocab.entries(Race::Terran);
    let train_at = terran
        .iter()
        .position(|e| e.group == ActionGroup::Train)
        .unwrap();
    let build_at = terran
        .iter()
        .position(|e| e.group == ActionGroup::Build)
        .unwrap();
    let hand = trace(
        32,
        [Race::Terran, Race::Terran],
        vec![
            Event::new(
                12,
                1,
                EventKind::Action {
                    action: ActionKind::Train,
                    build_id: terran[train_at].id,
                },
            ),
            Event::new(
                20,
                1,
                EventKind::Action {
                    action: ActionKind::Build,
                    build_id: terran[build_at].id,
                },
            ),
        ],
    );
    let parsed = parse_trace(&hand, 1, ParserConfig { n: 8 }, &vocab).unwrap();
    let got: Vec<(u64, usize)> = parsed
        .pairs
        .iter()
        .map(|p| (p.obs.frame, p.label))
        .collect();
    let want = vec![(0, 0), (8, train_at + 1), (16, build_at + 1), (24, 0)];
    let hand_ok = got == want;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = Vec::new();
    let mut windows = 0;
    for i in 0..200 {
        let (t, n) = random_trace(&mut rng, &vocab);
        for pid in [1, 2] {
            let parsed = parse_trace(&t, pid, ParserConfig { n }, &vocab).unwrap();
            let got: Vec<(u64, usize)> = parsed
                .pairs
                .iter()
                .map(|p| (p.obs.frame, p.label))
                .collect();
            let want = naive_pairs(&t, pid, n, &vocab);
            windows += want.len();
            if got != want {
                mismatches.push((i, pid));
            }
        }
    }
    report(
        2,
        "parser oracle",
        hand_ok && mismatches.is_empty(),
        &format!(
            "hand-built {got:?} (expected {want:?}); 200 random traces, {windows} windows, \
             mismatching perspectives {mismatches:?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Split invariants

#[test]
fn criterion_03_split_invariants() {
    let ratio = [0.7, 0.1, 0.2];
    let mut failures = Vec::new();
    let mut runs = 0;
    for n in [10usize, 37, 100, 1001] {
        let ids: Vec<SequenceId> = (0..n)
            .map(|i| {
                let result = if i % 2 == 0 {
                    GameResult::Win
                } else {
                    GameResult::Lose
                };
                SequenceId::new(format!("r{i:05}"), 1 + (i % 2) as u8, result)
            })
            .collect();
        for seed in 0..20u64 {
            runs += 1;
            let m = split_dataset(&ids, seed, false).unwrap();
            let keys: BTreeSet<String> = m.entries.iter().map(|e| e.key()).collect();
            if keys.len() != n || m.entries.len() != n {
                failures.push(format!("n={n} seed={seed}: not a partition"));
            }
            for split in Split::ALL {
                let entries: Vec<_> = m.split_entries(split).collect();
                let size = entries.len();
                let wins = entries.iter().filter(|e| e.result.is_win()).count();
                let target = n as f64 * ratio[split.index()];
                if (size as f64 - target).abs() > 1.0 {
                    failures.push(format!(
                        "n={n} seed={seed} {split}: size {size} vs {target}"
                    ));
                }
                if wins.abs_diff(size - wins) > 1 {
                    failures.push(format!(
                        "n={n} seed={seed} {split}: {wins} winners of {size}"
                    ));
                }
            }
        }
    }
    // With pair locking the replay is the unit: both perspectives share a split.
    for replays in [5usize, 50, 500] {
        let ids: Vec<SequenceId> = (0..replays)
            .flat_map(|i| {
                [
                    SequenceId::new(format!("r{i:05}"), 1, GameResult::Win),
                    SequenceId::new(format!("r{i:05}"), 2, GameResult::Lose),
                ]
            })
            .collect();
        for seed in 0..20u64 {
            runs += 1;
            let m = split_dataset(&ids, seed, true).unwrap();
            let mut split_of: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
            for e in &m.entries {
                split_of.entry(&e.replay_id).or_default().insert(e.split);
            }
            if split_of.values().any(|s| s.len() != 1) {
                failures.push(format!(
                    "pair-lock {replays} seed={seed}: replay split apart"
                ));
            }
            for split in Split::ALL {
                let c = m.counts[&split];
                let target = replays as f64 * ratio[split.index()];
                if c.win != c.lose || (c.win as f64 - target).abs() > 1.0 {
                    failures.push(format!("pair-lock {replays} seed={seed} {split}: {c:?}"));
                }
            }
        }
    }
    report(
        3,
        "split invariants",
        failures.is_empty(),
        &format!("{runs} splits, violations: {failures:?}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Balance sampling

#[test]
fn criterion_04_balance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    let cases = 1000;
    for case in 0..cases {
        let len = rng.gen_range(0..500);
        let p_null: f64 = rng.gen();
        let labels: Vec<usize> = (0..len)
            .map(|_| {
                if rng.gen_bool(p_null) {
                    0
                } else {
                    rng.gen_range(1..20)
                }
            })
            .collect();
        let key = format!("seq{case}");
        let seed = rng.gen();
        let kept = balance_indices(&labels, &key, seed);
        let count_null = labels.iter().filter(|l| **l == 0).count();
        let count_macro = len - count_null;
        let expected_null = count_null.min(count_macro.max(10));
        let kept_null = kept.iter().filter(|&&i| labels[i] == 0).count();
        let kept_macro = kept.iter().filter(|&&i| labels[i] != 0).count();
        let sorted = kept.windows(2).all(|w| w[0] < w[1]);
        if kept_null != expected_null || kept_macro != count_macro || !sorted {
            failures.push(format!(
                "case {case}: null {kept_null}/{expected_null}, macro {kept_macro}/{count_macro}"
            ));
        }
        let once: Vec<usize> = kept.iter().map(|&i| labels[i]).collect();
        let twice = balance_indices(&once, &key, seed);
        if twice != (0..once.len()).collect::<Vec<_>>() {
            failures.push(format!("case {case}: balancing is not idempotent"));
        }
        if balance_indices(&labels, &key, seed) != kept {
            failures.push(format!("case {case}: not deterministic"));
        }
    }
    report(
        4,
        "balance",
        failures.is_empty(),
        &format!("{cases} random label sequences, violations: {failures:?}"),
    );
}

// ---------------------------------------------------------------------------
// 5. Feature ranges

fn random_units(rng: &mut ChaCha8Rng, ids: &[u32], max_xy: [u32; 2]) -> Vec<UnitPos> {
    (0..rng.gen_range(0..120))
        .map(|_| UnitPos {
            unit_type: if rng.gen_bool(0.9) {
                *ids.choose(rng).unwrap()
            } else {
                rng.gen_range(0..100_000)
            },
            x: rng.gen_range(0..max_xy[0]),
            y: rng.gen_range(0..max_xy[1]),
        })
        .collect()
}

fn random_counts(rng: &mut ChaCha8Rng, ids: &[u32]) -> BTreeMap<u32, u32> {
    (0..rng.gen_range(0..30))
        .map(|_| (*ids.choose(rng).unwrap(), rng.gen_range(0..1000)))
        .collect()
}

#[test]
fn criterion_05_feature_range() {
    let vocab = ActionVocabulary::standard();
    let ids: Vec<u32> = Race::ALL
        .iter()
        .flat_map(|r| vocab.entries(*r).iter().map(|e| e.id))
        .collect();
    let n_obs = 10_000u64;
    let spatial_len: usize = SPATIAL_SHAPE.iter().product();
    let bad: Vec<String> = (0..n_obs)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + i);
            let race = *Race::ALL.choose(&mut rng).unwrap();
            let enemy = *Race::ALL.choose(&mut rng).unwrap();
            let map_size = [rng.gen_range(16..=256), rng.gen_range(16..=256)];
            let total_frames = rng.gen_range(1..200_000);
            let set = |rng: &mut ChaCha8Rng| -> BTreeSet<u32> {
                (0..rng.gen_range(0..10))
                    .map(|_| *ids.choose(rng).unwrap())
                    .collect()
            };
            let obs = ObservationSnapshot {
                frame: rng.gen_range(0..=total_frames * 2),
                own_unit_counts: random_counts(&mut rng, &ids),
                own_upgrades: set(&mut rng),
                own_techs: set(&mut rng),
                own_alerts: (0..rng.gen_range(0..6))
                    .map(|_| rng.gen_range(0..40))
                    .collect(),
                resources: Resources {
                    minerals_collected: rng.gen_range(0..500_000),
                    vespene_collected: rng.gen_range(0..500_000),
                    minerals_used: rng.gen_range(0..500_000),
                    vespene_used: rng.gen_range(0..500_000),
                },
                observed_enemy_counts: random_counts(&mut rng, &ids),
                own_unit_positions: random_units(&mut rng, &ids, map_size),
                observed_enemy_positions: random_units(&mut rng, &ids, map_size),
                total_enemy_count_ground_truth: rng.gen_range(0..500),
            };
            let height_map = HeightMap(
                (0..GRID)
                    .map(|_| (0..GRID).map(|_| rng.gen_range(0..=MAX_HEIGHT)).collect())
                    .collect(),
            );
            let resources: Vec<[u32; 2]> = (0..rng.gen_range(0..20))
                .map(|_| [rng.gen_range(0..map_size[0]), rng.gen_range(0..map_size[1])])
                .collect();
            let caps = ExtractOptions::default().caps;
            let layout = FeatureLayout::new(&vocab, race, enemy);
            let global = extract_global(&obs, &caps, &layout);
            let ctx = SpatialContext {
                height_map: &height_map,
                map_size,
                resources: &resources,
                total_frames,
                race,
            };
            let spatial = extract_spatial(&obs, &ctx, &caps, &vocab);
            let in_range = |v: &f32| (0.0..=1.0).contains(v);
            if global.len() != layout.dim() || !global.iter().all(in_range) {
                return Some(format!("observation {i}: global out of range"));
            }
            if spatial.as_slice().len() != spatial_len || !spatial.as_slice().iter().all(in_range) {
                return Some(format!("observation {i}: spatial out of range"));
            }
            None
        })
        .collect();
    report(
        5,
        "feature range",
        bad.is_empty() && SPATIAL_SHAPE == [13, 64, 64],
        &format!(
            "{n_obs} random observations, spatial shape {SPATIAL_SHAPE:?}, failures: {:?}",
            &bad[..bad.len().min(5)]
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Gradient checks

const GRAD_TOL: f64 = 1e-4;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn worst_input_error(
    x: &Array2<f64>,
    analytic: &Array2<f64>,
    mut loss: impl FnMut(&Array2<f64>) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = x[[r, c]];
        probe[[r, c]] = orig + DEFAULT_H;
        let plus = loss(&probe);
        probe[[r, c]] = orig - DEFAULT_H;
        let minus = loss(&probe);
        probe[[r, c]] = orig;
        let numeric = (plus - minus) / (2.0 * DEFAULT_H);
        worst = worst.max(msc_core::nn::relative_error(analytic[[r, c]], numeric));
    }
    worst
}

fn weighted_sum(a: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (a * w).sum()
}

/// Parameter and input gradient errors of the three layer types.
fn layer_errors(seed: u64) -> [(&'static str, f64); 6] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut lin = Linear::new(7, 5, &mut rng);
    let x = random_matrix(&mut rng, 3, 7);
    let w = random_matrix(&mut rng, 3, 5);
    let mut g = lin.zeros_like();
    lin.backward_params(&x, &w, &mut g);
    let dx = lin.backward_input(&w);
    let lin_p = grad_check(&mut lin, &g, DEFAULT_H, |l| {
        weighted_sum(&l.forward(&x).unwrap(), &w)
    })
    .unwrap()
    .max_rel_error;
    let lin_x = worst_input_error(&x, &dx, |x| weighted_sum(&lin.forward(x).unwrap(), &w));

    let mut gru = Gru::new(4, 6, &mut rng);
    let xs: Vec<Array2<f64>> = (0..5).map(|_| random_matrix(&mut rng, 2, 4)).collect();
    let ws: Vec<Array2<f64>> = (0..5).map(|_| random_matrix(&mut rng, 2, 6)).collect();
    let h0 = random_matrix(&mut rng, 2, 6);
    let gru_loss = |gru: &Gru, h0: &Array2<f64>| {
        let mut h = h0.clone();
        let mut total = 0.0;
        for (x, w) in xs.iter().zip(&ws) {
            h = gru.forward(x, &h).unwrap().0;
            total += weighted_sum(&h, w);
        }
        total
    };
    let mut caches = Vec::new();
    let mut h = h0.clone();
    for x in &xs {
        let (next, cache) = gru.forward(x, &h).unwrap();
        caches.push(cache);
        h = next;
    }
    let mut g = gru.zeros_like();
    let mut dh = Array2::zeros((2, 6));
    for (cache, w) in caches.iter().zip(&ws).rev() {
        dh += w;
        dh = gru.backward(cache, &dh, &mut g).1;
    }
    let gru_p = grad_check(&mut gru, &g, DEFAULT_H, |gru| gru_loss(gru, &h0))
        .unwrap()
        .max_rel_error;
    let gru_h = worst_input_error(&h0, &dh, |h0| gru_loss(&gru, h0));

    let mut conv = Conv2d::new([3, 7, 6], 4, [3, 3], 2, 1, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 2, conv.in_len());
    let w = random_matrix(&mut rng, 2, conv.out_len());
    let mut g = conv.zeros_like();
    let dx = conv.backward(&x, &w, &mut g, true).unwrap();
    let conv_p = grad_check(&mut conv, &g, DEFAULT_H, |c| {
        weighted_sum(&c.forward(&x).unwrap(), &w)
    })
    .unwrap()
    .max_rel_error;
    let conv_x = worst_input_error(&x, &dx, |x| weighted_sum(&conv.forward(x).unwrap(), &w));

    [
        ("linear params", lin_p),
        ("linear input", lin_x),
        ("gru params", gru_p),
        ("gru state", gru_h),
        ("conv params", conv_p),
        ("conv input", conv_x),
    ]
}

fn toy_batch(
    rng: &mut ChaCha8Rng,
    lengths: &[usize],
    global_dim: usize,
    spatial: Option<usize>,
    n_a: usize,
) -> Vec<TrainSeq> {
    lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| TrainSeq {
            key: format!("toy.p{i}"),
            won: rng.gen_bool(0.5),
            labels: (0..len).map(|_| rng.gen_range(0..n_a)).collect(),
            global: Array2::from_shape_fn((len, global_dim), |_| rng.gen_range(0.0..1.0)),
            spatial: spatial.map(|sd| {
                (0..len)
                    .map(|_| (0..sd).map(|_| rng.gen_range(0.0f32..1.0)).collect())
                    .collect()
            }),
        })
        .collect()
}

fn mean_loss(net: &Network, seqs: &[TrainSeq]) -> f64 {
    let refs: Vec<&TrainSeq> = seqs.iter().collect();
    let t = seqs.iter().map(TrainSeq::len).max().unwrap();
    let out = net
        .forward(&segment_inputs(&refs, 0, t), &net.init_state(seqs.len()))
        .unwrap();
    let (sum, n, _) = segment_loss(net.task(), &out.probs, &refs, 0);
    sum / n as f64
}

fn analytic_grads(net: &Network, seqs: &[TrainSeq]) -> Network {
    let refs: Vec<&TrainSeq> = seqs.iter().collect();
    let t = seqs.iter().map(TrainSeq::len).max().unwrap();
    let out = net
        .forward(&segment_inputs(&refs, 0, t), &net.init_state(seqs.len()))
        .unwrap();
    let (_, _, dprobs) = segment_loss(net.task(), &out.probs, &refs, 0);
    net.backward(&out, &dprobs)
}

const GDIM: usize = 23;
const N_A: usize = 6;

/// Smallest distance of any ReLU pre-activation from the kink over the
/// batch. Pre-activations sit before the recurrent layers, so they depend
/// on the inputs only.
fn relu_margin(net: &Network, seqs: &[TrainSeq]) -> f64 {
    let refs: Vec<&TrainSeq> = seqs.iter().collect();
    let t = seqs.iter().map(TrainSeq::len).max().unwrap();
    let closest = |z: &Array2<f64>| z.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let mut margin = f64::INFINITY;
    for step in segment_inputs(&refs, 0, t) {
        let pre = match net {
            Network::Global(n) => {
                let za = n.a.forward(&step.global).unwrap();
                let zb = n.b.forward(&relu(&za)).unwrap();
                vec![za, zb]
            }
            Network::Combined(n) => {
                let za = n.conv_a.forward(step.spatial.as_ref().unwrap()).unwrap();
                let zb = n.conv_b.forward(&relu(&za)).unwrap();
                let zc = n.c.forward(&step.global).unwrap();
                let cat = ndarray::concatenate![ndarray::Axis(1), relu(&zb), relu(&zc)];
                let zd = n.d.forward(&cat).unwrap();
                vec![za, zb, zc, zd]
            }
        };
        margin = pre.iter().map(closest).fold(margin, f64::min);
    }
    margin
}

/// Central differences are meaningless where a perturbation of size `h`
/// can cross a ReLU kink, so inputs are redrawn until every pre-activation
/// is at least this far from zero.
const KINK_MARGIN: f64 = 1e-4;

/// Max relative error of one network, and how many input draws were
/// rejected for sitting on a kink.
fn net_check(task: Task, features: FeatureSet, spatial: [usize; 3], seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NetConfig::new(task, features, GDIM, spatial, N_A, 1.0 / 64.0).unwrap();
    let mut net = Network::new(&cfg, task, seed).unwrap();
    let sd = (features == FeatureSet::Both).then(|| spatial.iter().product());
    let mut redraws = 0;
    let seqs = loop {
        let seqs = toy_batch(&mut rng, &[5, 5], GDIM, sd, N_A);
        if relu_margin(&net, &seqs) >= KINK_MARGIN {
            break seqs;
        }
        redraws += 1;
    };
    let g = analytic_grads(&net, &seqs);
    let err = grad_check(&mut net, &g, DEFAULT_H, |n| mean_loss(n, &seqs))
        .unwrap()
        .max_rel_error;
    (err, redraws)
}

#[test]
fn criterion_06_gradient_checks() {
    let start = Instant::now();
    let small = [13, 16, 16];
    let nets = [
        ("gse net", Task::Gse, FeatureSet::Global),
        ("bop net", Task::Bop, FeatureSet::Global),
        ("combined gse net", Task::Gse, FeatureSet::Both),
        ("combined bop net", Task::Bop, FeatureSet::Both),
    ];
    let per_seed: Vec<Vec<(&str, f64, usize)>> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let mut out: Vec<(&str, f64, usize)> = layer_errors(seed)
                .into_iter()
                .map(|(n, e)| (n, e, 0))
                .collect();
            for (name, task, features) in nets {
                let (e, r) = net_check(task, features, small, seed);
                out.push((name, e, r));
            }
            out
        })
        .collect();
    let (full_err, full_redraws) = net_check(Task::Gse, FeatureSet::Both, SPATIAL_SHAPE, 99);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut redraws = full_redraws;
    for (name, e, r) in
        per_seed
            .into_iter()
            .flatten()
            .chain([("combined net, 13x64x64", full_err, 0)])
    {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
        redraws += r;
    }
    let all_pass = worst.values().all(|e| *e <= GRAD_TOL);

    // Negative controls: a sign error in one tensor and a 1% scale error
    // must both be caught.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = NetConfig::new(Task::Gse, FeatureSet::Global, GDIM, small, N_A, 1.0 / 64.0).unwrap();
    let mut net = Network::new(&cfg, Task::Gse, 7).unwrap();
    let seqs = toy_batch(&mut rng, &[5, 5], GDIM, None, N_A);
    let mut flipped = analytic_grads(&net, &seqs);
    let mut tensor = 0;
    flipped.visit_mut(&mut |_, d| {
        if tensor == 2 {
            d.iter_mut().for_each(|v| *v = -*v);
        }
        tensor += 1;
    });
    let mut scaled = analytic_grads(&net, &seqs);
    scaled.visit_mut(&mut |_, d| d.iter_mut().for_each(|v| *v *= 1.01));
    let flip_err = grad_check(&mut net, &flipped, DEFAULT_H, |n| mean_loss(n, &seqs))
        .unwrap()
        .max_rel_error;
    let scale_err = grad_check(&mut net, &scaled, DEFAULT_H, |n| mean_loss(n, &seqs))
        .unwrap()
        .max_rel_error;
    let controls_fail = flip_err > GRAD_TOL && scale_err > GRAD_TOL;

    report(
        6,
        "gradient checks",
        all_pass && controls_fail,
        &format!(
            "20 seeds, width 1/64, T=5, h={DEFAULT_H:e}, tolerance {GRAD_TOL:e}; worst {worst:?}; \
             corrupted controls sign={flip_err:.3e} scale={scale_err:.3e} (must exceed tolerance); \
             {redraws} input draws rejected within {KINK_MARGIN:e} of a ReLU kink; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Loss and optimizer unit values

#[test]
#[allow(clippy::approx_constant)]
fn criterion_07_unit_values() {
    let bce_win = bce_loss(0.5, 1.0).0;
    let bce_lose = bce_loss(0.5, 0.0).0;
    let nll: Vec<f64> = (0..4).map(|k| nll_loss(&[0.25; 4], k).0).collect();
    let loss_ok = (bce_win - 0.693147).abs() <= 1e-6
        && (bce_lose - 0.693147).abs() <= 1e-6
        && nll.iter().all(|v| (v - 1.386294).abs() <= 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut lin = Linear::new(4, 3, &mut rng);
    let before = flatten(&lin);
    let mut ones = lin.zeros_like();
    ones.visit_mut(&mut |_, d| d.fill(1.0));
    let mut adam = Adam::new(
        &lin,
        AdamConfig {
            lr: 0.001,
            ..AdamConfig::default()
        },
    );
    adam.step(&mut lin, &ones);
    let moves: Vec<f64> = flatten(&lin)
        .iter()
        .zip(&before)
        .map(|(a, b)| a - b)
        .collect();
    let mut theta = [0.5];
    let (mut m, mut v) = ([0.0], [0.0]);
    adam_update(
        &mut theta,
        &[1.0],
        &mut m,
        &mut v,
        1,
        &AdamConfig::default(),
    );
    let adam_ok =
        moves.iter().all(|d| (d + 0.001).abs() <= 1e-6) && (theta[0] - 0.5 + 0.001).abs() <= 1e-6;
    let worst_move = moves.iter().map(|d| (d + 0.001).abs()).fold(0.0, f64::max);
    report(
        7,
        "unit values",
        loss_ok && adam_ok,
        &format!(
            "bce(0.5)={bce_win:.7}/{bce_lose:.7}, nll(uniform-4)={:.7}, first adam step \
             deviates from -0.001 by at most {worst_move:.2e} over {} parameters",
            nll[0],
            moves.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. End-to-end learning on synthetic traces

/// Batch size for this criterion: five epochs at the full 256 give too few
/// optimizer steps on a 280-sequence training set.
const E2E_BATCH: usize = 8;

struct Run {
    accuracy: f64,
    quartiles: [Option<f64>; 4],
    params: Vec<f64>,
    curves: String,
}

fn train_once(task: Task, splits: &[Vec<TrainSeq>; 3], header: &SampleSequence) -> Run {
    let h = &header.header;
    let cfg = TrainConfig {
        task,
        width: 1.0 / 16.0,
        epochs: 5,
        seed: 1,
        batch_size: E2E_BATCH,
        ..TrainConfig::default()
    };
    let nc = NetConfig::new(
        task,
        FeatureSet::Global,
        h.global_dim,
        h.spatial_shape,
        h.n_a,
        cfg.width,
    )
    .unwrap();
    let net = init_network(&nc, task, cfg.seed).unwrap();
    let out = train(net, &splits[0], &splits[1], &cfg, |_, _, _, _| Ok(())).unwrap();
    let e = evaluate(&out.net, &splits[2], 64).unwrap();
    let report = e.report.unwrap();
    Run {
        accuracy: e.accuracy,
        quartiles: report.quartiles,
        params: flatten(&out.net),
        curves: msc_core::models::curves_csv(&out.curves),
    }
}

#[test]
fn criterion_08_end_to_end_learning() {
    let start = Instant::now();
    let vocab = ActionVocabulary::standard();
    let traces = gen_synthetic(&SynthConfig::new(Matchup::TvT, 200), 8).unwrap();
    let seqs: Vec<SampleSequence> = traces
        .par_iter()
        .flat_map(|t| {
            samples_from_trace(
                t,
                ParserConfig::default(),
                &vocab,
                &ExtractOptions::default(),
            )
            .unwrap()
        })
        .collect();
    drop(traces);
    let first = seqs[0].clone();
    let (_, parts) = split_in_memory(seqs, 8, true).unwrap();
    let splits = parts.map(|p| {
        p.iter()
            .map(|s| TrainSeq::from_sample(s, false).unwrap())
            .collect::<Vec<_>>()
    });

    let gse = train_once(Task::Gse, &splits, &first);
    let gse_again = train_once(Task::Gse, &splits, &first);
    let bop = train_once(Task::Bop, &splits, &first);
    let bop_again = train_once(Task::Bop, &splits, &first);
    let elapsed = start.elapsed().as_secs_f64();

    let same = |a: &Run, b: &Run| {
        a.params
            .iter()
            .map(|v| v.to_bits())
            .eq(b.params.iter().map(|v| v.to_bits()))
            && a.curves == b.curves
    };
    let deterministic = same(&gse, &gse_again) && same(&bop, &bop_again);
    let q1 = gse.quartiles[0].unwrap_or(f64::NAN);
    let q4 = gse.quartiles[3].unwrap_or(f64::NAN);
    let pass =
        q4 >= 0.90 && q1 <= 0.60 && bop.accuracy >= 0.80 && deterministic && elapsed <= 600.0;
    report(
        8,
        "end-to-end learning",
        pass,
        &format!(
            "200 TvT traces, width 1/16, 5 epochs, batch {E2E_BATCH}: GSE first quartile {q1:.4} \
             (<= 0.60), last quartile {q4:.4} (>= 0.90), overall {:.4}; BOP top-1 {:.4} \
             (>= 0.80); bit-deterministic reruns: {deterministic}; {elapsed:.0}s for four \
             trainings (<= 600s)",
            gse.accuracy, bop.accuracy
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Pipeline rerun determinism and shard round trip

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_09_pipeline_rerun() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("input");
    fs::create_dir_all(&input).unwrap();
    let traces = gen_synthetic(&SynthConfig::new(Matchup::TvT, 20), 9).unwrap();
    for t in &traces {
        write_trace_file(&input, t).unwrap();
    }
    let config = |name: &str, workers: usize| PipelineConfig {
        input_dir: Some(input.clone()),
        work_dir: tmp.path().join(name),
        seed: 9,
        workers,
        ..PipelineConfig::default()
    };
    let a = config("a", 1);
    let b = config("b", 2);
    let first = run_pipeline(&a).unwrap();
    let second = run_pipeline(&b).unwrap();

    let mut problems = Vec::new();
    let manifest_a = fs::read(a.work().dataset().join(MANIFEST_FILE)).unwrap();
    let manifest_b = fs::read(b.work().dataset().join(MANIFEST_FILE)).unwrap();
    if manifest_a != manifest_b || first.manifest != second.manifest {
        problems.push("manifests differ between runs".to_string());
    }
    let samples_a = snapshot(&a.work().samples());
    let samples_b = snapshot(&b.work().samples());
    let n_samples = list_files(&a.work().samples(), SAMPLE_SUFFIX)
        .unwrap()
        .len();
    if samples_a != samples_b || n_samples != 40 {
        problems.push(format!("sample files differ ({n_samples} written)"));
    }
    let dataset_a = snapshot(&a.work().dataset());
    if dataset_a != snapshot(&b.work().dataset()) {
        problems.push("dataset directories differ".into());
    }

    // Resuming in place must skip everything and leave every byte alone.
    let before = (snapshot(&a.work().parsed()), samples_a, dataset_a);
    let again = run_pipeline(&a).unwrap();
    if !again.stages.iter().all(|s| s.all_skipped()) {
        problems.push(format!("rerun reprocessed work: {:?}", again.stages));
    }
    let after = (
        snapshot(&a.work().parsed()),
        snapshot(&a.work().samples()),
        snapshot(&a.work().dataset()),
    );
    if before != after {
        problems.push("rerun changed artifacts".into());
    }

    // Shard read-back equals what went in, both as files and as featurized
    // sequences recomputed in memory.
    let vocab = ActionVocabulary::standard();
    let opts = a.extract_options();
    let in_memory: BTreeMap<String, SampleSequence> = traces
        .iter()
        .flat_map(|t| samples_from_trace(t, a.parser, &vocab, &opts).unwrap())
        .map(|s| (s.key(), s))
        .collect();
    let dataset_dir = a.work().dataset();
    let mut read_back = 0;
    for split in Split::ALL {
        let entries: Vec<_> = first.manifest.split_entries(split).collect();
        for (entry, seq) in entries
            .iter()
            .zip(read_split(&first.manifest, &dataset_dir, split))
        {
            let seq = seq.unwrap();
            let written = read_sample_file(&a.work().samples().join(entry.file_name())).unwrap();
            if seq != written || Some(&seq) != in_memory.get(&entry.key()) {
                problems.push(format!("shard {} differs from its input", entry.key()));
            }
            read_back += 1;
        }
    }
    if read_back != first.manifest.entries.len() {
        problems.push("not every shard was read".into());
    }
    report(
        9,
        "pipeline rerun",
        problems.is_empty(),
        &format!(
            "20 traces, 2 fresh runs (1 and 2 workers) + 1 resume, {read_back} shards read \
             back; problems: {problems:?}; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Truncated BPTT with a long window equals full backprop

/// Full backprop of the mean loss over all real steps, one sequence at a
/// time: each sequence contributes its own per-step loss derivatives scaled
/// by `1 / total_steps`.
fn full_bptt_reference(net: &Network, seqs: &[TrainSeq]) -> (f64, Vec<f64>) {
    let total: usize = seqs.iter().map(TrainSeq::len).sum();
    let mut grads = vec![0.0; flatten(net).len()];
    let mut loss = 0.0;
    for s in seqs {
        let out = net
            .forward(&segment_inputs(&[s], 0, s.len()), &net.init_state(1))
            .unwrap();
        let dprobs: Vec<Array2<f64>> = out
            .probs
            .iter()
            .enumerate()
            .map(|(t, p)| {
                let mut d = Array2::zeros(p.raw_dim());
                match net.task() {
                    Task::Gse => {
                        let (q, r) = (p[[0, 0]], if s.won { 1.0 } else { 0.0 });
                        loss += -(r * q.ln() + (1.0 - r) * (1.0 - q).ln());
                        d[[0, 0]] = (-r / q + (1.0 - r) / (1.0 - q)) / total as f64;
                    }
                    Task::Bop => {
                        let q = p[[0, s.labels[t]]];
                        loss += -q.ln();
                        d[[0, s.labels[t]]] = -1.0 / q / total as f64;
                    }
                }
                d
            })
            .collect();
        for (acc, g) in grads.iter_mut().zip(flatten(&net.backward(&out, &dprobs))) {
            *acc += g;
        }
    }
    (loss / total as f64, grads)
}

#[test]
fn criterion_10_tbptt_equivalence() {
    let start = Instant::now();
    let lengths = [7, 5, 3, 6];
    let mut worst = 0.0f64;
    let mut truncated_differs = true;
    let mut checked = 0;
    for (task, features) in [
        (Task::Gse, FeatureSet::Global),
        (Task::Bop, FeatureSet::Global),
        (Task::Gse, FeatureSet::Both),
        (Task::Bop, FeatureSet::Both),
    ] {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let shape = [13, 8, 8];
            let cfg = NetConfig::new(task, features, GDIM, shape, N_A, 1.0 / 32.0).unwrap();
            let net = Network::new(&cfg, task, seed).unwrap();
            let sd = (features == FeatureSet::Both).then(|| shape.iter().product());
            let seqs = toy_batch(&mut rng, &lengths, GDIM, sd, N_A);
            let refs: Vec<&TrainSeq> = seqs.iter().collect();
            let (ref_loss, reference) = full_bptt_reference(&net, &seqs);
            for window in [7, 8, 50] {
                let segs = tbptt_gradients(&net, &refs, window).unwrap();
                assert_eq!(segs.len(), 1);
                let got = flatten(&segs[0].grads);
                let diff = got
                    .iter()
                    .zip(&reference)
                    .map(|(a, b)| (a - b).abs())
                    .fold((segs[0].loss - ref_loss).abs(), f64::max);
                worst = worst.max(diff);
                checked += 1;
            }
            // A window shorter than the batch must cut gradient paths.
            let total_steps = lengths.iter().sum::<usize>() as f64;
            let short = tbptt_gradients(&net, &refs, 2).unwrap();
            let mut summed = vec![0.0; reference.len()];
            for s in &short {
                for (acc, g) in summed.iter_mut().zip(flatten(&s.grads)) {
                    *acc += g * s.n_valid as f64 / total_steps;
                }
            }
            let gap = summed
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            truncated_differs &= gap > 1e-8;
        }
    }
    report(
        10,
        "tbptt equivalence",
        worst <= 1e-10 && truncated_differs,
        &format!(
            "{checked} comparisons (GSE/BOP x global/combined x 3 seeds x windows 7, 8, 50) on \
             sequences of length {lengths:?}: max |tbptt - full| = {worst:.2e} (<= 1e-10); \
             window 2 differs from full backprop: {truncated_differs}; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    );
}
