//! High-level action vocabulary.
//!
//! Each race has an ordered list of macro actions. Label `0` is the null
//! action ("doing nothing"); entry `i` of a race list has label `i + 1`.
//! Entry ids are unique across all races so that unit types seen in events
//! identify their race unambiguously.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ActionKind, Race};

/// Label index of the null action.
pub const NULL_ACTION: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionGroup {
    Build,
    Train,
    Research,
    Morph,
    Cancel,
    Halt,
    Stop,
}

impl ActionGroup {
    /// Maps a raw command kind onto the macro action space; `Other` is outside it.
    pub fn of_kind(kind: ActionKind) -> Option<ActionGroup> {
        match kind {
            ActionKind::Build => Some(ActionGroup::Build),
            ActionKind::Train => Some(ActionGroup::Train),
            ActionKind::Research => Some(ActionGroup::Research),
            ActionKind::Morph => Some(ActionGroup::Morph),
            ActionKind::Cancel => Some(ActionGroup::Cancel),
            ActionKind::Halt => Some(ActionGroup::Halt),
            ActionKind::Stop => Some(ActionGroup::Stop),
            ActionKind::Other => None,
        }
    }

    pub fn kind(self) -> ActionKind {
        match self {
            ActionGroup::Build => ActionKind::Build,
            ActionGroup::Train => ActionKind::Train,
            ActionGroup::Research => ActionKind::Research,
            ActionGroup::Morph => ActionKind::Morph,
            ActionGroup::Cancel => ActionKind::Cancel,
            ActionGroup::Halt => ActionKind::Halt,
            ActionGroup::Stop => ActionKind::Stop,
        }
    }

    /// Whether completing this action leaves an entity on the map.
    pub fn produces_entity(self) -> bool {
        matches!(
            self,
            ActionGroup::Build | ActionGroup::Train | ActionGroup::Morph
        )
    }

    pub fn is_structure(self) -> bool {
        matches!(self, ActionGroup::Build | ActionGroup::Morph)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: u32,
    pub name: String,
    pub group: ActionGroup,
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("duplicate action id {id} in {race} vocabulary")]
    DuplicateId { race: Race, id: u32 },
    #[error("{race} vocabulary is empty")]
    Empty { race: Race },
    #[error("action id {id} appears in more than one race")]
    SharedId { id: u32 },
    #[error("cannot read vocabulary: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot decode vocabulary: {0}")]
    Decode(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionVocabulary {
    pub terran: Vec<VocabEntry>,
    pub protoss: Vec<VocabEntry>,
    pub zerg: Vec<VocabEntry>,
}

impl ActionVocabulary {
    pub fn entries(&self, race: Race) -> &[VocabEntry] {
        match race {
            Race::Terran => &self.terran,
            Race::Protoss => &self.protoss,
            Race::Zerg => &self.zerg,
        }
    }

    /// `n_a`: race entries plus the null action.
    pub fn n_actions(&self, race: Race) -> usize {
        self.entries(race).len() + 1
    }

    pub fn label_of(&self, race: Race, id: u32) -> Option<usize> {
        self.entries(race)
            .iter()
            .position(|e| e.id == id)
            .map(|i| i + 1)
    }

    pub fn entry_for_label(&self, race: Race, label: usize) -> Option<&VocabEntry> {
        label.checked_sub(1).and_then(|i| self.entries(race).get(i))
    }

    /// Finds an entry by id in any race.
    pub fn lookup(&self, id: u32) -> Option<(Race, &VocabEntry)> {
        Race::ALL.into_iter().find_map(|race| {
            self.entries(race)
                .iter()
                .find(|e| e.id == id)
                .map(|e| (race, e))
        })
    }

    /// One past the largest id; the denominator of the unit-type plane.
    pub fn n_types(&self) -> u32 {
        Race::ALL
            .into_iter()
            .flat_map(|r| self.entries(r).iter().map(|e| e.id))
            .max()
            .map_or(1, |m| m + 1)
    }

    pub fn validate(&self) -> Result<(), VocabError> {
        let mut all = HashSet::new();
        for race in Race::ALL {
            let entries = self.entries(race);
            if entries.is_empty() {
                return Err(VocabError::Empty { race });
            }
            let mut seen = HashSet::new();
            for e in entries {
                if !seen.insert(e.id) {
                    return Err(VocabError::DuplicateId { race, id: e.id });
                }
                if !all.insert(e.id) {
                    return Err(VocabError::SharedId { id: e.id });
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let vocab: ActionVocabulary = serde_json::from_str(&fs::read_to_string(path)?)?;
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// The built-in vocabulary: 18 macro actions per race.
    pub fn standard() -> Self {
        use ActionGroup::*;
        fn list(base: u32, items: &[(&str, ActionGroup)]) -> Vec<VocabEntry> {
            items
                .iter()
                .enumerate()
                .map(|(i, (name, group))| VocabEntry {
                    id: base + i as u32,
                    name: (*name).to_string(),
                    group: *group,
                })
                .collect()
        }
        ActionVocabulary {
            terran: list(
                1,
                &[
                    ("CommandCenter", Build),
                    ("SupplyDepot", Build),
                    ("Barracks", Build),
                    ("Refinery", Build),
                    ("Factory", Build),
                    ("Starport", Build),
                    ("EngineeringBay", Build),
                    ("SCV", Train),
                    ("Marine", Train),
                    ("Marauder", Train),
                    ("SiegeTank", Train),
                    ("Medivac", Train),
                    ("Stimpack", Research),
                    ("InfantryWeapons1", Research),
                    ("OrbitalCommand", Morph),
                    ("CancelQueue", Cancel),
                    ("HaltBuilding", Halt),
                    ("StopProduction", Stop),
                ],
            ),
            protoss: list(
                101,
                &[
                    ("Nexus", Build),
                    ("Pylon", Build),
                    ("Gateway", Build),
                    ("Assimilator", Build),
                    ("CyberneticsCore", Build),
                    ("RoboticsFacility", Build),
                    ("Forge", Build),
                    ("Probe", Train),
                    ("Zealot", Train),
                    ("Stalker", Train),
                    ("Immortal", Train),
                    ("Observer", Train),
                    ("WarpGateResearch", Research),
                    ("GroundWeapons1", Research),
                    ("WarpGate", Morph),
                    ("CancelQueue", Cancel),
                    ("HaltBuilding", Halt),
                    ("StopProduction", Stop),
                ],
            ),
            zerg: list(
                201,
                &[
                    ("Hatchery", Build),
                    ("SpawningPool", Build),
                    ("Extractor", Build),
                    ("RoachWarren", Build),
                    ("EvolutionChamber", Build),
                    ("SporeCrawler", Build),
                    ("HydraliskDen", Build),
                    ("Drone", Train),
                    ("Overlord", Train),
                    ("Zergling", Train),
                    ("Roach", Train),
                    ("Queen", Train),
                    ("MetabolicBoost", Research),
                    ("MissileWeapons1", Research),
                    ("Lair", Morph),
                    ("CancelQueue", Cancel),
                    ("HaltMorph", Halt),
                    ("StopProduction", Stop),
                ],
            ),
        }
    }
}

impl Default for ActionVocabulary {
    fn default() -> Self {
        ActionVocabulary::standard()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocabulary_is_valid() {
        let v = ActionVocabulary::standard();
        v.validate().unwrap();
        for race in Race::ALL {
            assert_eq!(v.n_actions(race), 19);
        }
        assert_eq!(v.label_of(Race::Terran, 1), Some(1));
        assert_eq!(v.label_of(Race::Terran, 101), None);
        assert_eq!(v.entry_for_label(Race::Zerg, 0), None);
        assert_eq!(v.entry_for_label(Race::Zerg, 1).unwrap().name, "Hatchery");
        assert_eq!(v.n_types(), 219);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut v = ActionVocabulary::standard();
        v.terran[1].id = v.terran[0].id;
        assert!(matches!(v.validate(), Err(VocabError::DuplicateId { .. })));
        let mut v = ActionVocabulary::standard();
        v.zerg[0].id = v.terran[0].id;
        assert!(matches!(v.validate(), Err(VocabError::SharedId { .. })));
    }

    #[test]
    fn json_layout() {
        let s = serde_json::to_string(&ActionVocabulary::standard()).unwrap();
        assert!(s.starts_with(r#"{"terran":[{"id":1,"name":"CommandCenter","group":"build"}"#));
    }
}
