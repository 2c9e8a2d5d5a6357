use crate::parser::{ActionGroup, ActionVocabulary, ObservationSnapshot};
use crate::trace::Race;

use super::{norm, NormalizationCaps};

/// Alert ids `0..ALERT_SLOTS` get one indicator each; higher ids are dropped.
pub const ALERT_SLOTS: usize = 16;

/// Slot assignment of the global feature vector for one (race, enemy race).
///
/// Order: frame, 4 resource counters, alerts, upgrades (own research
/// entries), techniques (own morph entries), own units and buildings,
/// observed enemy units and buildings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub upgrades: Vec<u32>,
    pub techs: Vec<u32>,
    pub own: Vec<u32>,
    pub enemy: Vec<u32>,
}

impl FeatureLayout {
    pub fn new(vocab: &ActionVocabulary, race: Race, enemy: Race) -> Self {
        let ids = |r: Race, keep: &dyn Fn(ActionGroup) -> bool| {
            vocab
                .entries(r)
                .iter()
                .filter(|e| keep(e.group))
                .map(|e| e.id)
                .collect::<Vec<_>>()
        };
        FeatureLayout {
            upgrades: ids(race, &|g| g == ActionGroup::Research),
            techs: ids(race, &|g| g == ActionGroup::Morph),
            own: ids(race, &|g| g.produces_entity()),
            enemy: ids(enemy, &|g| g.produces_entity()),
        }
    }

    pub fn dim(&self) -> usize {
        1 + 4
            + ALERT_SLOTS
            + self.upgrades.len()
            + self.techs.len()
            + self.own.len()
            + self.enemy.len()
    }

    pub fn alert_offset(&self) -> usize {
        5
    }

    pub fn own_offset(&self) -> usize {
        5 + ALERT_SLOTS + self.upgrades.len() + self.techs.len()
    }

    pub fn enemy_offset(&self) -> usize {
        self.own_offset() + self.own.len()
    }
}

pub fn extract_global(
    obs: &ObservationSnapshot,
    caps: &NormalizationCaps,
    layout: &FeatureLayout,
) -> Vec<f32> {
    let mut v = Vec::with_capacity(layout.dim());
    v.push(norm(obs.frame as f64, caps.max_frame));
    let r = &obs.resources;
    for x in [
        r.minerals_collected,
        r.vespene_collected,
        r.minerals_used,
        r.vespene_used,
    ] {
        v.push(norm(x as f64, caps.max_resource));
    }
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    v.extend((0..ALERT_SLOTS as u32).map(|a| flag(obs.own_alerts.contains(&a))));
    v.extend(
        layout
            .upgrades
            .iter()
            .map(|id| flag(obs.own_upgrades.contains(id))),
    );
    v.extend(
        layout
            .techs
            .iter()
            .map(|id| flag(obs.own_techs.contains(id))),
    );
    let count = |m: &std::collections::BTreeMap<u32, u32>, id: &u32| {
        norm(
            f64::from(m.get(id).copied().unwrap_or(0)),
            caps.max_unit_count,
        )
    };
    v.extend(layout.own.iter().map(|id| count(&obs.own_unit_counts, id)));
    v.extend(
        layout
            .enemy
            .iter()
            .map(|id| count(&obs.observed_enemy_counts, id)),
    );
    debug_assert_eq!(v.len(), layout.dim());
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::Resources;

    fn layout() -> FeatureLayout {
        FeatureLayout::new(&ActionVocabulary::standard(), Race::Terran, Race::Zerg)
    }

    #[test]
    fn standard_layout_dimension() {
        let l = layout();
        assert_eq!(
            (l.upgrades.len(), l.techs.len(), l.own.len(), l.enemy.len()),
            (2, 1, 13, 13)
        );
        assert_eq!(l.dim(), 50);
    }

    #[test]
    fn empty_observation_is_zero() {
        let v = extract_global(
            &ObservationSnapshot::default(),
            &NormalizationCaps::default(),
            &layout(),
        );
        assert_eq!(v.len(), 50);
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn resources_divide_by_cap() {
        let obs = ObservationSnapshot {
            resources: Resources {
                minerals_collected: 10_000,
                ..Default::default()
            },
            ..Default::default()
        };
        let v = extract_global(&obs, &NormalizationCaps::default(), &layout());
        assert_eq!(v[1], 0.1);
    }

    #[test]
    fn counts_clamp_at_cap() {
        let l = layout();
        let mut obs = ObservationSnapshot::default();
        obs.own_unit_counts.insert(l.own[3], 300);
        obs.own_unit_counts.insert(l.own[4], 50);
        obs.observed_enemy_counts.insert(l.enemy[0], 2);
        obs.own_alerts.insert(3);
        obs.own_alerts.insert(99);
        let v = extract_global(&obs, &NormalizationCaps::default(), &l);
        assert_eq!(v[l.own_offset() + 3], 1.0);
        assert_eq!(v[l.own_offset() + 4], 0.25);
        assert_eq!(v[l.enemy_offset()], 0.01);
        assert_eq!(v[l.alert_offset() + 3], 1.0);
        assert_eq!(v.iter().filter(|x| **x > 0.0).count(), 4);
    }
}
