use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::trace::{Event, EventKind};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resources {
    pub minerals_collected: u64,
    pub vespene_collected: u64,
    pub minerals_used: u64,
    pub vespene_used: u64,
}

/// An entity on the map, serialized compactly as `[unit_type, x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(u32, u32, u32)", into = "(u32, u32, u32)")]
pub struct UnitPos {
    pub unit_type: u32,
    pub x: u32,
    pub y: u32,
}

impl From<(u32, u32, u32)> for UnitPos {
    fn from((unit_type, x, y): (u32, u32, u32)) -> Self {
        UnitPos { unit_type, x, y }
    }
}

impl From<UnitPos> for (u32, u32, u32) {
    fn from(p: UnitPos) -> Self {
        (p.unit_type, p.x, p.y)
    }
}

/// One player's view of the match at a frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationSnapshot {
    pub frame: u64,
    pub own_unit_counts: BTreeMap<u32, u32>,
    pub own_upgrades: BTreeSet<u32>,
    pub own_techs: BTreeSet<u32>,
    /// Alerts received since the previous observation.
    pub own_alerts: BTreeSet<u32>,
    pub resources: Resources,
    pub observed_enemy_counts: BTreeMap<u32, u32>,
    pub own_unit_positions: Vec<UnitPos>,
    pub observed_enemy_positions: Vec<UnitPos>,
    /// Live opposing entities, known only from the full trace. Evaluation only.
    pub total_enemy_count_ground_truth: u32,
}

impl ObservationSnapshot {
    pub fn observed_enemy_total(&self) -> u32 {
        self.observed_enemy_counts.values().sum()
    }
}

/// Event-sourced state of one player's view. Fold events in with
/// [`reduce_event`]; take observations with [`PlayerView::snapshot`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerView {
    pub player_id: u8,
    pub frame: u64,
    own_units: BTreeMap<u64, UnitPos>,
    own_counts: BTreeMap<u32, u32>,
    upgrades: BTreeSet<u32>,
    techs: BTreeSet<u32>,
    alerts: BTreeSet<u32>,
    resources: Resources,
    enemy_seen: BTreeMap<u64, UnitPos>,
    enemy_alive: BTreeSet<u64>,
    /// References to ids this view has never seen.
    pub warnings: u32,
}

impl PlayerView {
    pub fn new(player_id: u8) -> Self {
        PlayerView {
            player_id,
            frame: 0,
            own_units: BTreeMap::new(),
            own_counts: BTreeMap::new(),
            upgrades: BTreeSet::new(),
            techs: BTreeSet::new(),
            alerts: BTreeSet::new(),
            resources: Resources::default(),
            enemy_seen: BTreeMap::new(),
            enemy_alive: BTreeSet::new(),
            warnings: 0,
        }
    }

    /// Alerts only live for one stride window.
    pub fn clear_alerts(&mut self) {
        self.alerts.clear();
    }

    /// `(currently observed enemy entities, live enemy entities)`.
    pub fn enemy_visibility(&self) -> (u32, u32) {
        (self.enemy_seen.len() as u32, self.enemy_alive.len() as u32)
    }

    pub fn snapshot(&self, frame: u64) -> ObservationSnapshot {
        let mut observed_enemy_counts = BTreeMap::new();
        for u in self.enemy_seen.values() {
            *observed_enemy_counts.entry(u.unit_type).or_insert(0) += 1;
        }
        ObservationSnapshot {
            frame,
            own_unit_counts: self.own_counts.clone(),
            own_upgrades: self.upgrades.clone(),
            own_techs: self.techs.clone(),
            own_alerts: self.alerts.clone(),
            resources: self.resources,
            observed_enemy_counts,
            own_unit_positions: self.own_units.values().copied().collect(),
            observed_enemy_positions: self.enemy_seen.values().copied().collect(),
            total_enemy_count_ground_truth: self.enemy_alive.len() as u32,
        }
    }
}

/// Applies one event to a player's view.
///
/// The view's own events update owned entities, resources, research and
/// sightings; the opponent's births and deaths only move the ground-truth
/// enemy count.
pub fn reduce_event(view: &mut PlayerView, event: &Event) {
    debug_assert!(
        event.frame >= view.frame,
        "events must be folded in frame order"
    );
    view.frame = view.frame.max(event.frame);
    if event.player_id != view.player_id {
        match event.kind {
            EventKind::UnitBorn { unit_id, .. } => {
                view.enemy_alive.insert(unit_id);
            }
            EventKind::UnitDied { unit_id } => {
                view.enemy_alive.remove(&unit_id);
            }
            _ => {}
        }
        return;
    }
    match event.kind {
        EventKind::UnitBorn {
            unit_id,
            unit_type,
            x,
            y,
        } => {
            if view
                .own_units
                .insert(unit_id, UnitPos { unit_type, x, y })
                .is_some()
            {
                view.warnings += 1;
            } else {
                *view.own_counts.entry(unit_type).or_insert(0) += 1;
            }
        }
        EventKind::UnitDied { unit_id } => match view.own_units.remove(&unit_id) {
            Some(unit) => {
                if let Some(count) = view.own_counts.get_mut(&unit.unit_type) {
                    *count = count.saturating_sub(1);
                    if *count == 0 {
                        view.own_counts.remove(&unit.unit_type);
                    }
                }
            }
            None => view.warnings += 1,
        },
        EventKind::Stats {
            minerals_collected,
            vespene_collected,
            minerals_used,
            vespene_used,
        } => {
            view.resources = Resources {
                minerals_collected,
                vespene_collected,
                minerals_used,
                vespene_used,
            };
        }
        EventKind::UpgradeComplete { upgrade_id } => {
            view.upgrades.insert(upgrade_id);
        }
        EventKind::TechComplete { tech_id } => {
            view.techs.insert(tech_id);
        }
        EventKind::Alert { alert_id } => {
            view.alerts.insert(alert_id);
        }
        EventKind::EnemySighted {
            unit_id,
            unit_type,
            x,
            y,
        } => {
            view.enemy_seen.insert(unit_id, UnitPos { unit_type, x, y });
        }
        EventKind::EnemyLost { unit_id } => {
            if view.enemy_seen.remove(&unit_id).is_none() {
                view.warnings += 1;
            }
        }
        EventKind::Action { .. } => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MARINE: u32 = 9;
    const ZERGLING: u32 = 210;

    #[test]
    fn birth_and_death_of_own_unit() {
        let mut view = PlayerView::new(1);
        reduce_event(
            &mut view,
            &Event::new(
                0,
                1,
                EventKind::UnitBorn {
                    unit_id: 5,
                    unit_type: MARINE,
                    x: 1,
                    y: 2,
                },
            ),
        );
        assert_eq!(view.snapshot(0).own_unit_counts.get(&MARINE), Some(&1));
        reduce_event(
            &mut view,
            &Event::new(1, 1, EventKind::UnitDied { unit_id: 5 }),
        );
        let snap = view.snapshot(1);
        assert_eq!(snap.own_unit_counts.get(&MARINE).copied().unwrap_or(0), 0);
        assert!(snap.own_unit_positions.is_empty());
        // A second death of the same id floors at zero and counts a warning.
        reduce_event(
            &mut view,
            &Event::new(2, 1, EventKind::UnitDied { unit_id: 5 }),
        );
        assert_eq!(view.warnings, 1);
        assert!(view.snapshot(2).own_unit_counts.is_empty());
    }

    #[test]
    fn sighting_and_losing_enemy() {
        let mut view = PlayerView::new(1);
        reduce_event(
            &mut view,
            &Event::new(
                0,
                2,
                EventKind::UnitBorn {
                    unit_id: 9,
                    unit_type: ZERGLING,
                    x: 0,
                    y: 0,
                },
            ),
        );
        reduce_event(
            &mut view,
            &Event::new(
                3,
                1,
                EventKind::EnemySighted {
                    unit_id: 9,
                    unit_type: ZERGLING,
                    x: 4,
                    y: 4,
                },
            ),
        );
        let snap = view.snapshot(4);
        assert_eq!(snap.observed_enemy_counts.get(&ZERGLING), Some(&1));
        assert_eq!(snap.total_enemy_count_ground_truth, 1);
        assert!(
            snap.own_unit_counts.is_empty(),
            "enemy births never count as own"
        );
        reduce_event(
            &mut view,
            &Event::new(5, 1, EventKind::EnemyLost { unit_id: 9 }),
        );
        assert_eq!(view.snapshot(5).observed_enemy_total(), 0);
        assert_eq!(view.snapshot(5).total_enemy_count_ground_truth, 1);
    }

    #[test]
    fn stats_overwrite_and_sets_accumulate() {
        let mut view = PlayerView::new(2);
        let stats = |m| EventKind::Stats {
            minerals_collected: m,
            vespene_collected: 1,
            minerals_used: 2,
            vespene_used: 3,
        };
        reduce_event(&mut view, &Event::new(0, 2, stats(100)));
        reduce_event(&mut view, &Event::new(1, 2, stats(50)));
        reduce_event(
            &mut view,
            &Event::new(1, 2, EventKind::UpgradeComplete { upgrade_id: 13 }),
        );
        reduce_event(
            &mut view,
            &Event::new(1, 2, EventKind::TechComplete { tech_id: 15 }),
        );
        reduce_event(
            &mut view,
            &Event::new(1, 2, EventKind::Alert { alert_id: 4 }),
        );
        let snap = view.snapshot(2);
        assert_eq!(snap.resources.minerals_collected, 50);
        assert!(snap.own_upgrades.contains(&13) && snap.own_techs.contains(&15));
        assert!(snap.own_alerts.contains(&4));
        view.clear_alerts();
        assert!(view.snapshot(3).own_alerts.is_empty());
    }

    #[test]
    fn unit_pos_serializes_as_triple() {
        let p = UnitPos {
            unit_type: 3,
            x: 4,
            y: 5,
        };
        assert_eq!(serde_json::to_string(&p).unwrap(), "[3,4,5]");
    }
}
