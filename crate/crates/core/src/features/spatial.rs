//! 13×64×64 spatial planes.
//!
//! Channel map:
//!
//! | ch | content                                                  |
//! |----|----------------------------------------------------------|
//! | 0  | friendly unit density                                    |
//! | 1  | observed enemy unit density                              |
//! | 2  | friendly building density                                |
//! | 3  | observed enemy building density                          |
//! | 4  | unit type: largest type id in the cell / `n_types`       |
//! | 5  | player-relative: friendly                                |
//! | 6  | player-relative: enemy                                   |
//! | 7  | player-relative: neutral (visible resource field)        |
//! | 8  | terrain height / max height                              |
//! | 9  | visibility (within sight of a friendly entity)           |
//! | 10 | creep (Zerg only, around friendly buildings)             |
//! | 11 | visible resource field density                           |
//! | 12 | game progress, broadcast                                 |
//!
//! Map coordinates are rescaled linearly onto the grid and floored.
//! Planes 5–7 are one-hot with priority friendly > enemy > neutral.

use crate::parser::{ActionVocabulary, ObservationSnapshot, UnitPos};
use crate::trace::{HeightMap, Race, Trace, GRID, MAX_HEIGHT};

use super::{norm, NormalizationCaps};

pub const CHANNELS: usize = 13;
pub const SPATIAL_SHAPE: [usize; 3] = [CHANNELS, GRID, GRID];

pub const CH_FRIENDLY_UNIT: usize = 0;
pub const CH_ENEMY_UNIT: usize = 1;
pub const CH_FRIENDLY_BUILDING: usize = 2;
pub const CH_ENEMY_BUILDING: usize = 3;
pub const CH_UNIT_TYPE: usize = 4;
pub const CH_REL_FRIENDLY: usize = 5;
pub const CH_REL_ENEMY: usize = 6;
pub const CH_NEUTRAL: usize = 7;
pub const CH_HEIGHT: usize = 8;
pub const CH_VISIBILITY: usize = 9;
pub const CH_CREEP: usize = 10;
pub const CH_RESOURCE: usize = 11;
pub const CH_PROGRESS: usize = 12;

/// Sight radius of a friendly entity, in grid cells.
const VISION_RADIUS: i64 = 4;
const CREEP_RADIUS: i64 = 3;

/// Static map context of one trace, seen from one player.
#[derive(Debug, Clone)]
pub struct SpatialContext<'a> {
    pub height_map: &'a HeightMap,
    pub map_size: [u32; 2],
    pub resources: &'a [[u32; 2]],
    pub total_frames: u64,
    pub race: Race,
}

impl<'a> SpatialContext<'a> {
    pub fn from_trace(trace: &'a Trace, race: Race) -> Self {
        SpatialContext {
            height_map: &trace.height_map,
            map_size: trace.header.map_size,
            resources: &trace.header.resources,
            total_frames: trace.header.total_frames,
            race,
        }
    }

    fn cell(&self, x: u32, y: u32) -> (usize, usize) {
        let scale = |v: u32, extent: u32| {
            let extent = u64::from(extent.max(1));
            ((u64::from(v) * GRID as u64 / extent) as usize).min(GRID - 1)
        };
        (scale(y, self.map_size[1]), scale(x, self.map_size[0]))
    }
}

/// Channel-major `[c][row][col]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTensor(Vec<f32>);

impl SpatialTensor {
    fn zeros() -> Self {
        SpatialTensor(vec![0.0; CHANNELS * GRID * GRID])
    }

    fn idx(c: usize, row: usize, col: usize) -> usize {
        (c * GRID + row) * GRID + col
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.0[Self::idx(c, row, col)]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.0[c * GRID * GRID..(c + 1) * GRID * GRID]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

pub fn extract_spatial(
    obs: &ObservationSnapshot,
    ctx: &SpatialContext<'_>,
    caps: &NormalizationCaps,
    vocab: &ActionVocabulary,
) -> SpatialTensor {
    let cells = GRID * GRID;
    let is_structure = |u: &UnitPos| {
        vocab
            .lookup(u.unit_type)
            .is_some_and(|(_, e)| e.group.is_structure())
    };
    let n_types = f64::from(vocab.n_types());

    let mut density = vec![[0u32; 4]; cells];
    let mut max_type = vec![0u32; cells];
    let mut visible = vec![false; cells];
    let mut creep = vec![false; cells];

    let stamp = |mask: &mut [bool], row: usize, col: usize, radius: i64| {
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                if dr * dr + dc * dc > radius * radius {
                    continue;
                }
                let (r, c) = (row as i64 + dr, col as i64 + dc);
                if (0..GRID as i64).contains(&r) && (0..GRID as i64).contains(&c) {
                    mask[r as usize * GRID + c as usize] = true;
                }
            }
        }
    };

    for u in &obs.own_unit_positions {
        let (row, col) = ctx.cell(u.x, u.y);
        let structure = is_structure(u);
        density[row * GRID + col][if structure {
            CH_FRIENDLY_BUILDING
        } else {
            CH_FRIENDLY_UNIT
        }] += 1;
        max_type[row * GRID + col] = max_type[row * GRID + col].max(u.unit_type);
        stamp(&mut visible, row, col, VISION_RADIUS);
        if structure && ctx.race == Race::Zerg {
            stamp(&mut creep, row, col, CREEP_RADIUS);
        }
    }
    for u in &obs.observed_enemy_positions {
        let (row, col) = ctx.cell(u.x, u.y);
        let ch = if is_structure(u) {
            CH_ENEMY_BUILDING
        } else {
            CH_ENEMY_UNIT
        };
        density[row * GRID + col][ch] += 1;
        max_type[row * GRID + col] = max_type[row * GRID + col].max(u.unit_type);
    }
    let mut fields = vec![0u32; cells];
    for [x, y] in ctx.resources {
        let (row, col) = ctx.cell(*x, *y);
        if visible[row * GRID + col] {
            fields[row * GRID + col] += 1;
        }
    }

    let progress = norm(obs.frame as f64, ctx.total_frames.max(1) as f64);
    let mut t = SpatialTensor::zeros();
    for row in 0..GRID {
        for col in 0..GRID {
            let i = row * GRID + col;
            let d = density[i];
            for ch in [
                CH_FRIENDLY_UNIT,
                CH_ENEMY_UNIT,
                CH_FRIENDLY_BUILDING,
                CH_ENEMY_BUILDING,
            ] {
                t.0[SpatialTensor::idx(ch, row, col)] = norm(f64::from(d[ch]), caps.max_density);
            }
            t.0[SpatialTensor::idx(CH_UNIT_TYPE, row, col)] = norm(f64::from(max_type[i]), n_types);
            let friendly = d[CH_FRIENDLY_UNIT] + d[CH_FRIENDLY_BUILDING] > 0;
            let enemy = d[CH_ENEMY_UNIT] + d[CH_ENEMY_BUILDING] > 0;
            let rel = if friendly {
                Some(CH_REL_FRIENDLY)
            } else if enemy {
                Some(CH_REL_ENEMY)
            } else if fields[i] > 0 {
                Some(CH_NEUTRAL)
            } else {
                None
            };
            if let Some(ch) = rel {
                t.0[SpatialTensor::idx(ch, row, col)] = 1.0;
            }
            let h = ctx
                .height_map
                .0
                .get(row)
                .and_then(|r| r.get(col))
                .copied()
                .unwrap_or(0);
            t.0[SpatialTensor::idx(CH_HEIGHT, row, col)] =
                norm(f64::from(h), f64::from(MAX_HEIGHT));
            t.0[SpatialTensor::idx(CH_VISIBILITY, row, col)] = if visible[i] { 1.0 } else { 0.0 };
            t.0[SpatialTensor::idx(CH_CREEP, row, col)] = if creep[i] { 1.0 } else { 0.0 };
            t.0[SpatialTensor::idx(CH_RESOURCE, row, col)] =
                norm(f64::from(fields[i]), caps.max_density);
            t.0[SpatialTensor::idx(CH_PROGRESS, row, col)] = progress;
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(h: &'a HeightMap, resources: &'a [[u32; 2]]) -> SpatialContext<'a> {
        SpatialContext {
            height_map: h,
            map_size: [64, 64],
            resources,
            total_frames: 1000,
            race: Race::Terran,
        }
    }

    #[test]
    fn single_friendly_unit_density() {
        let h = HeightMap::flat(0);
        let marine = ActionVocabulary::standard().terran[8].id;
        let obs = ObservationSnapshot {
            own_unit_positions: vec![UnitPos {
                unit_type: marine,
                x: 32,
                y: 32,
            }],
            ..Default::default()
        };
        let t = extract_spatial(
            &obs,
            &ctx(&h, &[]),
            &NormalizationCaps::default(),
            &ActionVocabulary::standard(),
        );
        let ch0 = t.channel(CH_FRIENDLY_UNIT);
        assert_eq!(ch0.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(t.get(CH_FRIENDLY_UNIT, 32, 32), 0.125);
        assert_eq!(t.get(CH_REL_FRIENDLY, 32, 32), 1.0);
        assert_eq!(t.channel(CH_FRIENDLY_BUILDING).iter().sum::<f32>(), 0.0);
        assert!(t.get(CH_VISIBILITY, 32, 36) == 1.0 && t.get(CH_VISIBILITY, 32, 37) == 0.0);
    }

    #[test]
    fn empty_observation_planes() {
        let h = HeightMap::flat(51);
        let t = extract_spatial(
            &ObservationSnapshot::default(),
            &ctx(&h, &[[5, 5]]),
            &NormalizationCaps::default(),
            &ActionVocabulary::standard(),
        );
        for ch in (0..=7).chain([CH_RESOURCE]) {
            assert!(t.channel(ch).iter().all(|v| *v == 0.0), "channel {ch}");
        }
        assert!(t.channel(CH_HEIGHT).iter().all(|v| *v == 0.2));
        assert_eq!(t.as_slice().len(), 13 * 64 * 64);
    }

    #[test]
    fn rescaling_floors_onto_grid() {
        let h = HeightMap::flat(0);
        let c = SpatialContext {
            height_map: &h,
            map_size: [128, 96],
            resources: &[],
            total_frames: 1,
            race: Race::Zerg,
        };
        assert_eq!(c.cell(0, 0), (0, 0));
        assert_eq!(c.cell(1, 1), (0, 0));
        assert_eq!(c.cell(2, 3), (2, 1));
        assert_eq!(c.cell(127, 95), (63, 63));
    }

    #[test]
    fn zerg_buildings_spread_creep_and_resources_need_vision() {
        let h = HeightMap::flat(0);
        let vocab = ActionVocabulary::standard();
        let hatch = vocab.zerg[0].id;
        let obs = ObservationSnapshot {
            own_unit_positions: vec![UnitPos {
                unit_type: hatch,
                x: 10,
                y: 10,
            }],
            ..Default::default()
        };
        let mut c = ctx(&h, &[[12, 10], [40, 40]]);
        c.race = Race::Zerg;
        let t = extract_spatial(&obs, &c, &NormalizationCaps::default(), &vocab);
        assert_eq!(t.get(CH_CREEP, 10, 13), 1.0);
        assert_eq!(t.get(CH_FRIENDLY_BUILDING, 10, 10), 0.125);
        assert_eq!(t.get(CH_NEUTRAL, 10, 12), 1.0);
        assert_eq!(t.get(CH_RESOURCE, 10, 12), 0.125);
        assert_eq!(t.get(CH_RESOURCE, 40, 40), 0.0);
        assert!((t.get(CH_UNIT_TYPE, 10, 10) - hatch as f32 / 219.0).abs() < 1e-7);
    }
}
