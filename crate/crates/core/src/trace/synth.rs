//! Seeded synthetic trace generator.
//!
//! The generated matches are not simulations of combat; they carry just
//! enough structure for the pipeline and the baselines to be exercised:
//!
//! * each player runs a race-specific scripted build order (a fixed opening
//!   followed by a repeating production cycle) with seeded swaps and the
//!   odd cancel/halt/stop;
//! * every scripted command is preceded, in the previous 8-frame window, by a
//!   production alert whose id names the command's vocabulary slot;
//! * the winner gains an economic and military edge that only starts to grow
//!   after `onset` of the match, so late observations separate winners from
//!   losers while early ones do not;
//! * enemy units are sighted with a probability that grows with game
//!   progress and lost from sight with one that shrinks.
//!
//! Traces are a pure function of `(config, seed)`: trace `i` draws from its
//! own ChaCha stream seeded by mixing `seed` with `i`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    ActionKind, Event, EventKind, GameResult, HeightMap, Matchup, PlayerMeta, Race, Trace,
    TraceHeader, GRID, MAX_HEIGHT,
};
use crate::parser::vocab::{ActionGroup, ActionVocabulary};
use crate::util::mix_seed;

/// Longest trace the generator accepts, in frames.
pub const MAX_LENGTH: u64 = 1 << 20;
/// Alert id for "base under attack"; production cues use `1 + slot`.
pub const ALERT_UNDER_ATTACK: u32 = 0;
const STATS_PERIOD: u64 = 160;
const SCOUT_PERIOD: u64 = 200;
const CUE_STRIDE: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyProfile {
    /// Probability that a scripted command comes without its production alert.
    pub cue_dropout: f64,
    /// Probability of swapping the next two script items.
    pub swap_prob: f64,
    /// Probability of an unscripted cancel/halt/stop after a command.
    pub interrupt_prob: f64,
    /// Final size of the winner's edge, in `[0, 1]`.
    pub advantage: f64,
    /// Game progress at which the edge starts to grow.
    pub onset: f64,
}

impl DifficultyProfile {
    pub fn easy() -> Self {
        DifficultyProfile {
            cue_dropout: 0.0,
            swap_prob: 0.0,
            interrupt_prob: 0.0,
            advantage: 1.0,
            onset: 0.3,
        }
    }

    pub fn standard() -> Self {
        DifficultyProfile {
            cue_dropout: 0.03,
            swap_prob: 0.05,
            interrupt_prob: 0.02,
            advantage: 1.0,
            onset: 0.3,
        }
    }

    pub fn hard() -> Self {
        DifficultyProfile {
            cue_dropout: 0.15,
            swap_prob: 0.15,
            interrupt_prob: 0.06,
            advantage: 0.6,
            onset: 0.4,
        }
    }
}

impl Default for DifficultyProfile {
    fn default() -> Self {
        DifficultyProfile::standard()
    }
}

impl FromStr for DifficultyProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(DifficultyProfile::easy()),
            "standard" => Ok(DifficultyProfile::standard()),
            "hard" => Ok(DifficultyProfile::hard()),
            other => Err(format!(
                "unknown difficulty profile {other:?} (easy|standard|hard)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub matchup: Matchup,
    pub count: usize,
    /// Inclusive range of `total_frames`.
    pub length: (u64, u64),
    pub profile: DifficultyProfile,
}

impl SynthConfig {
    pub fn new(matchup: Matchup, count: usize) -> Self {
        SynthConfig {
            matchup,
            count,
            length: (10_400, 14_400),
            profile: DifficultyProfile::standard(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("synthetic config asks for zero traces")]
    EmptyConfig,
    #[error("invalid length range {0}..={1} (must satisfy min <= max <= 2^20)")]
    InvalidLength(u64, u64),
}

/// Generates `config.count` traces. Trace `i` depends only on `(config, seed, i)`.
pub fn gen_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<Trace>, SynthError> {
    if config.count == 0 {
        return Err(SynthError::EmptyConfig);
    }
    let (lo, hi) = config.length;
    if lo > hi || hi > MAX_LENGTH {
        return Err(SynthError::InvalidLength(lo, hi));
    }
    let vocab = ActionVocabulary::standard();
    Ok((0..config.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let replay_id = format!(
                "syn-{}-s{seed}-{i:05}",
                config.matchup.to_string().to_lowercase()
            );
            generate_one(config, &vocab, replay_id, &mut rng)
        })
        .collect())
}

/// Slots (indices into a race's standard vocabulary list) by role.
struct RaceScript {
    base: usize,
    worker: usize,
    army: &'static [usize],
    opening: &'static [usize],
    cycle: &'static [usize],
    interrupts: [usize; 3],
}

fn script(race: Race) -> RaceScript {
    match race {
        Race::Terran => RaceScript {
            base: 0,
            worker: 7,
            army: &[8, 9, 10, 11],
            opening: &[
                7, 7, 1, 7, 2, 3, 7, 14, 8, 0, 1, 7, 8, 4, 12, 7, 8, 5, 1, 9, 6, 13, 7,
            ],
            cycle: &[8, 8, 7, 1, 9, 8, 10, 7, 8, 11],
            interrupts: [15, 16, 17],
        },
        Race::Protoss => RaceScript {
            base: 0,
            worker: 7,
            army: &[8, 9, 10, 11],
            opening: &[
                7, 7, 1, 7, 2, 3, 7, 4, 7, 9, 0, 1, 12, 7, 9, 14, 5, 1, 10, 6, 13, 7, 11,
            ],
            cycle: &[9, 8, 7, 1, 9, 10, 7, 9, 11, 1],
            interrupts: [15, 16, 17],
        },
        Race::Zerg => RaceScript {
            base: 0,
            worker: 7,
            army: &[9, 10, 11],
            opening: &[
                7, 7, 8, 7, 1, 7, 0, 2, 7, 11, 9, 9, 8, 14, 7, 3, 12, 8, 10, 4, 13, 7, 6,
            ],
            cycle: &[7, 10, 10, 8, 9, 9, 7, 10, 11, 8],
            interrupts: [15, 16, 17],
        },
    }
}

fn completion_time(group: ActionGroup, is_worker: bool) -> u64 {
    match group {
        ActionGroup::Build => 400,
        ActionGroup::Train if is_worker => 150,
        ActionGroup::Train => 220,
        ActionGroup::Research => 1200,
        ActionGroup::Morph => 600,
        ActionGroup::Cancel | ActionGroup::Halt | ActionGroup::Stop => 0,
    }
}

fn cost(group: ActionGroup) -> (u64, u64) {
    match group {
        ActionGroup::Build => (150, 0),
        ActionGroup::Train => (75, 25),
        ActionGroup::Research => (100, 100),
        ActionGroup::Morph => (150, 100),
        ActionGroup::Cancel | ActionGroup::Halt | ActionGroup::Stop => (0, 0),
    }
}

/// Events are ordered by frame, then by this rank, then by creation order.
fn rank(kind: &EventKind) -> u8 {
    match kind {
        EventKind::UnitBorn { .. } => 0,
        EventKind::Stats { .. }
        | EventKind::UpgradeComplete { .. }
        | EventKind::TechComplete { .. } => 1,
        EventKind::Alert { .. } | EventKind::Action { .. } => 2,
        EventKind::EnemySighted { .. } => 3,
        EventKind::UnitDied { .. } => 4,
        EventKind::EnemyLost { .. } => 5,
    }
}

struct Unit {
    id: u64,
    slot: usize,
    x: u32,
    y: u32,
    born: u64,
    died: Option<u64>,
}

impl Unit {
    fn alive_at(&self, frame: u64) -> bool {
        self.born < frame && self.died.is_none_or(|d| d > frame)
    }
}

struct PlayerSim {
    id: u8,
    race: Race,
    won: bool,
    base: (f64, f64),
    econ: f64,
    units: Vec<Unit>,
    next_unit: u64,
    events: Vec<(u64, u64, Event)>,
}

struct World {
    total: u64,
    map: (u32, u32),
    profile: DifficultyProfile,
    counter: u64,
}

impl World {
    fn progress(&self, frame: u64) -> f64 {
        frame as f64 / self.total.max(1) as f64
    }

    /// Winner's edge at a frame, in `[0, advantage]`.
    fn edge(&self, frame: u64) -> f64 {
        let p = self.progress(frame);
        let span = (0.8 - self.profile.onset).max(1e-6);
        self.profile.advantage * ((p - self.profile.onset) / span).clamp(0.0, 1.0)
    }

    fn push(&mut self, sim: &mut PlayerSim, frame: u64, player_id: u8, kind: EventKind) {
        self.counter += 1;
        sim.events
            .push((frame, self.counter, Event::new(frame, player_id, kind)));
    }

    fn clamp_pos(&self, x: f64, y: f64) -> (u32, u32) {
        let cx = x.round().clamp(0.0, f64::from(self.map.0 - 1)) as u32;
        let cy = y.round().clamp(0.0, f64::from(self.map.1 - 1)) as u32;
        (cx, cy)
    }
}

fn generate_one(
    config: &SynthConfig,
    vocab: &ActionVocabulary,
    replay_id: String,
    rng: &mut ChaCha8Rng,
) -> Trace {
    let (lo, hi) = config.length;
    let total = rng.gen_range(lo..=hi);
    let side = rng.gen_range(128u32..=176);
    let mut world = World {
        total,
        map: (side, side),
        profile: config.profile,
        counter: 0,
    };

    let (mut race1, mut race2) = config.matchup.races();
    if race1 != race2 && rng.gen_bool(0.5) {
        std::mem::swap(&mut race1, &mut race2);
    }
    let winner: u8 = if rng.gen_bool(0.5) { 1 } else { 2 };
    let s = f64::from(side);
    let starts = [(0.15 * s, 0.15 * s), (0.85 * s, 0.85 * s)];
    let mut sims: Vec<PlayerSim> = [(1u8, race1), (2u8, race2)]
        .into_iter()
        .map(|(id, race)| PlayerSim {
            id,
            race,
            won: id == winner,
            base: starts[usize::from(id - 1)],
            econ: rng.gen_range(0.92..1.08),
            units: Vec::new(),
            next_unit: u64::from(id) * 1_000_000,
            events: Vec::new(),
        })
        .collect();

    let resources = resource_fields(&world, &starts, rng);
    let height_map = height_map(rng);

    for sim in &mut sims {
        run_script(&mut world, sim, vocab, rng);
    }
    run_battles(&mut world, &mut sims, rng);
    for sim in &mut sims {
        emit_unit_lifecycle(&mut world, sim, vocab);
        emit_stats(&mut world, sim, vocab, rng);
    }
    for observer in 0..2 {
        let (a, b) = sims.split_at_mut(1);
        let (obs, enemy) = if observer == 0 {
            (&mut a[0], &b[0])
        } else {
            (&mut b[0], &a[0])
        };
        emit_scouting(&mut world, obs, enemy, vocab, rng);
    }

    let mut all: Vec<(u64, u8, u64, Event)> = sims
        .iter_mut()
        .flat_map(|sim| sim.events.drain(..))
        .map(|(frame, ctr, ev)| (frame, rank(&ev.kind), ctr, ev))
        .collect();
    all.sort_by_key(|(frame, r, ctr, _)| (*frame, *r, *ctr));

    let players = sims
        .iter()
        .map(|sim| PlayerMeta {
            player_id: sim.id,
            race: sim.race,
            apm: f64::from(rng.gen_range(60u32..=300)),
            mmr: f64::from(rng.gen_range(2000u32..=6500)),
            result: if sim.won {
                GameResult::Win
            } else {
                GameResult::Lose
            },
        })
        .collect();

    Trace {
        header: TraceHeader {
            replay_id,
            map_name: format!("Synthetic{side}"),
            total_frames: total,
            players,
            map_size: [side, side],
            resources,
        },
        height_map,
        events: all.into_iter().map(|(_, _, _, ev)| ev).collect(),
    }
}

fn resource_fields(world: &World, starts: &[(f64, f64); 2], rng: &mut ChaCha8Rng) -> Vec<[u32; 2]> {
    let s = f64::from(world.map.0);
    let naturals = [(0.15 * s, 0.45 * s), (0.85 * s, 0.55 * s)];
    let mut out = Vec::new();
    for (cx, cy) in starts.iter().chain(naturals.iter()) {
        for _ in 0..8 {
            let (x, y) =
                world.clamp_pos(cx + rng.gen_range(-7.0..7.0), cy + rng.gen_range(-7.0..7.0));
            out.push([x, y]);
        }
    }
    out
}

fn height_map(rng: &mut ChaCha8Rng) -> HeightMap {
    let hills: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            (
                rng.gen_range(0.0..GRID as f64),
                rng.gen_range(0.0..GRID as f64),
                rng.gen_range(4.0..14.0),
                rng.gen_range(20.0..90.0),
            )
        })
        .collect();
    let grid = (0..GRID)
        .map(|row| {
            (0..GRID)
                .map(|col| {
                    let h: f64 = hills
                        .iter()
                        .map(|(x, y, r, amp)| {
                            let d2 = (col as f64 - x).powi(2) + (row as f64 - y).powi(2);
                            amp * (-d2 / (2.0 * r * r)).exp()
                        })
                        .sum();
                    (60.0 + h).round().clamp(0.0, f64::from(MAX_HEIGHT)) as u16
                })
                .collect()
        })
        .collect();
    HeightMap(grid)
}

fn entry_id(vocab: &ActionVocabulary, race: Race, slot: usize) -> (u32, ActionGroup) {
    let e = &vocab.entries(race)[slot];
    (e.id, e.group)
}

/// Scripted commands, their cues and their effects (births, research).
fn run_script(
    world: &mut World,
    sim: &mut PlayerSim,
    vocab: &ActionVocabulary,
    rng: &mut ChaCha8Rng,
) {
    let plan = script(sim.race);
    let total = world.total;

    // Starting base and workers.
    spawn(world, sim, plan.base, 0, rng);
    for _ in 0..12 {
        spawn(world, sim, plan.worker, 0, rng);
    }

    // Background non-macro commands.
    let mut f = rng.gen_range(5..30);
    while f < total {
        world.push(
            sim,
            f,
            sim.id,
            EventKind::Action {
                action: ActionKind::Other,
                build_id: 0,
            },
        );
        f += rng.gen_range(12..48);
    }

    let mut queue: Vec<usize> = Vec::new();
    let mut frame = rng.gen_range(80..160);
    let mut k = 0usize;
    while frame + 2 * CUE_STRIDE < total {
        if queue.is_empty() {
            let item = |i: usize| {
                if i < plan.opening.len() {
                    plan.opening[i]
                } else {
                    plan.cycle[(i - plan.opening.len()) % plan.cycle.len()]
                }
            };
            queue.push(item(k));
            queue.push(item(k + 1));
            k += 2;
            if rng.gen_bool(world.profile.swap_prob) {
                queue.swap(0, 1);
            }
            queue.reverse();
        }
        let slot = queue.pop().expect("refilled above");
        let (id, group) = entry_id(vocab, sim.race, slot);

        let window = frame / CUE_STRIDE;
        if window >= 1 && !rng.gen_bool(world.profile.cue_dropout) {
            let cue = (window - 1) * CUE_STRIDE + rng.gen_range(0..CUE_STRIDE);
            world.push(
                sim,
                cue,
                sim.id,
                EventKind::Alert {
                    alert_id: 1 + slot as u32,
                },
            );
        }
        if frame > window * CUE_STRIDE && rng.gen_bool(0.3) {
            let f = rng.gen_range(window * CUE_STRIDE..frame);
            world.push(
                sim,
                f,
                sim.id,
                EventKind::Action {
                    action: ActionKind::Other,
                    build_id: 0,
                },
            );
        }
        world.push(
            sim,
            frame,
            sim.id,
            EventKind::Action {
                action: group.kind(),
                build_id: id,
            },
        );

        let done = frame + completion_time(group, slot == plan.worker);
        if done < total {
            match group {
                ActionGroup::Research => world.push(
                    sim,
                    done,
                    sim.id,
                    EventKind::UpgradeComplete { upgrade_id: id },
                ),
                ActionGroup::Morph => {
                    world.push(sim, done, sim.id, EventKind::TechComplete { tech_id: id });
                    spawn(world, sim, slot, done, rng);
                }
                _ if group.produces_entity() => spawn(world, sim, slot, done, rng),
                _ => {}
            }
        }

        let gap = rng.gen_range(90..190);
        if rng.gen_bool(world.profile.interrupt_prob) {
            let s = plan.interrupts[rng.gen_range(0..3)];
            let (iid, igroup) = entry_id(vocab, sim.race, s);
            let at = frame + gap / 2;
            if at < total {
                world.push(
                    sim,
                    at,
                    sim.id,
                    EventKind::Action {
                        action: igroup.kind(),
                        build_id: iid,
                    },
                );
            }
        }
        frame += gap;
    }
}

/// Registers a unit; its birth/death events are emitted later.
fn spawn(world: &World, sim: &mut PlayerSim, slot: usize, frame: u64, rng: &mut ChaCha8Rng) {
    let spread = if slot == script(sim.race).base {
        2.0
    } else {
        10.0
    };
    let (x, y) = world.clamp_pos(
        sim.base.0 + rng.gen_range(-spread..spread),
        sim.base.1 + rng.gen_range(-spread..spread),
    );
    sim.next_unit += 1;
    sim.units.push(Unit {
        id: sim.next_unit,
        slot,
        x,
        y,
        born: frame,
        died: None,
    });
}

/// Skirmishes before the onset are symmetric; afterwards the loser bleeds
/// army, workers and eventually structures.
fn run_battles(world: &mut World, sims: &mut [PlayerSim], rng: &mut ChaCha8Rng) {
    let total = world.total;
    let mut f = (total as f64 * 0.2) as u64 + rng.gen_range(0..300);
    while f + 50 < total {
        let edge = world.edge(f);
        for sim in sims.iter_mut() {
            let plan = script(sim.race);
            let (army_loss, eco_loss) = if sim.won {
                (0.12 - 0.08 * edge, 0.0)
            } else {
                (0.12 + 0.5 * edge, 0.25 * edge)
            };
            for unit in sim.units.iter_mut().filter(|u| u.alive_at(f)) {
                let p = if plan.army.contains(&unit.slot) {
                    army_loss
                } else if unit.slot == plan.worker {
                    eco_loss
                } else {
                    eco_loss * 0.3
                };
                if rng.gen_bool(p.clamp(0.0, 1.0)) {
                    unit.died = Some(f + rng.gen_range(1..40));
                }
            }
            if (!sim.won && edge > 0.2) || edge == 0.0 {
                let id = sim.id;
                world.push(
                    sim,
                    f,
                    id,
                    EventKind::Alert {
                        alert_id: ALERT_UNDER_ATTACK,
                    },
                );
            }
        }
        f += rng.gen_range(300..500);
    }
}

fn emit_unit_lifecycle(world: &mut World, sim: &mut PlayerSim, vocab: &ActionVocabulary) {
    let units = std::mem::take(&mut sim.units);
    for u in &units {
        let (unit_type, _) = entry_id(vocab, sim.race, u.slot);
        world.push(
            sim,
            u.born,
            sim.id,
            EventKind::UnitBorn {
                unit_id: u.id,
                unit_type,
                x: u.x,
                y: u.y,
            },
        );
        if let Some(d) = u.died.filter(|d| *d < world.total) {
            world.push(sim, d, sim.id, EventKind::UnitDied { unit_id: u.id });
        }
    }
    sim.units = units;
}

/// Cumulative resource counters every `STATS_PERIOD` frames.
fn emit_stats(
    world: &mut World,
    sim: &mut PlayerSim,
    vocab: &ActionVocabulary,
    rng: &mut ChaCha8Rng,
) {
    let plan = script(sim.race);
    let gas_slot = 3;
    let mut spent: Vec<(u64, u64, u64)> = sim
        .events
        .iter()
        .filter_map(|(f, _, ev)| match ev.kind {
            EventKind::Action { action, build_id } if action != ActionKind::Other => {
                let group = vocab.lookup(build_id).map(|(_, e)| e.group)?;
                let (m, g) = cost(group);
                Some((*f, m, g))
            }
            _ => None,
        })
        .collect();
    spent.sort_unstable();

    let (mut minerals, mut gas) = (0.0f64, 0.0f64);
    let (mut used_m, mut used_g) = (0u64, 0u64);
    let mut next_spend = 0;
    let mut f = STATS_PERIOD;
    while f < world.total {
        let workers = sim
            .units
            .iter()
            .filter(|u| u.slot == plan.worker && u.alive_at(f))
            .count() as f64;
        let geysers = sim
            .units
            .iter()
            .filter(|u| u.slot == gas_slot && u.alive_at(f))
            .count() as f64;
        let edge = world.edge(f);
        let mult = if sim.won {
            1.0 + 0.6 * edge
        } else {
            1.0 - 0.4 * edge
        };
        let rate = sim.econ * mult * rng.gen_range(0.95..1.05);
        minerals += workers.min(24.0) * 0.9 * rate * STATS_PERIOD as f64 / 16.0;
        gas += geysers.min(2.0) * 3.0 * rate * STATS_PERIOD as f64 / 16.0;
        while next_spend < spent.len() && spent[next_spend].0 < f {
            used_m += spent[next_spend].1;
            used_g += spent[next_spend].2;
            next_spend += 1;
        }
        let id = sim.id;
        world.push(
            sim,
            f,
            id,
            EventKind::Stats {
                minerals_collected: minerals as u64,
                vespene_collected: gas as u64,
                minerals_used: used_m,
                vespene_used: used_g,
            },
        );
        f += STATS_PERIOD;
    }
}

/// Enemy sightings: seen with probability rising in game progress, lost from
/// sight with probability falling in it, and always lost on death.
fn emit_scouting(
    world: &mut World,
    observer: &mut PlayerSim,
    enemy: &PlayerSim,
    vocab: &ActionVocabulary,
    rng: &mut ChaCha8Rng,
) {
    let mut seen = vec![false; enemy.units.len()];
    let mut f = SCOUT_PERIOD;
    while f < world.total {
        let p = world.progress(f);
        let sight = 0.02 + 0.35 * p;
        let lose = 0.25 * (1.0 - p);
        for (i, u) in enemy.units.iter().enumerate() {
            if !u.alive_at(f) {
                continue;
            }
            let (unit_type, _) = entry_id(vocab, enemy.race, u.slot);
            let id = observer.id;
            if seen[i] {
                if rng.gen_bool(lose) {
                    seen[i] = false;
                    world.push(observer, f, id, EventKind::EnemyLost { unit_id: u.id });
                }
            } else if rng.gen_bool(sight) {
                seen[i] = true;
                world.push(
                    observer,
                    f,
                    id,
                    EventKind::EnemySighted {
                        unit_id: u.id,
                        unit_type,
                        x: u.x,
                        y: u.y,
                    },
                );
            }
        }
        // Units that died since the last check drop out of sight at their death frame.
        let next = f + SCOUT_PERIOD;
        for (i, u) in enemy.units.iter().enumerate() {
            if let Some(d) = u.died {
                if seen[i] && d > f && d <= next.min(world.total) && d < world.total {
                    seen[i] = false;
                    let id = observer.id;
                    world.push(observer, d, id, EventKind::EnemyLost { unit_id: u.id });
                }
            }
        }
        f = next;
    }
}

impl fmt::Display for DifficultyProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cue_dropout={} swap={} interrupt={} advantage={} onset={}",
            self.cue_dropout, self.swap_prob, self.interrupt_prob, self.advantage, self.onset
        )
    }
}
