//! Integer-grid brick geometry.
//!
//! Bricks are axis-aligned cuboids. The x and y axes are measured in studs,
//! z in plates. A placement names a catalog part, the min-corner cell it
//! occupies and a rotation about the vertical axis.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Cell = [i32; 3];

/// Ordered list of placement indices into [`BrickModel::placements`].
pub type AssemblySequence = Vec<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Rotation {
    #[default]
    R0,
    R90,
}

impl Rotation {
    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
        }
    }

    pub fn from_degrees(deg: u32) -> Option<Self> {
        match deg {
            0 => Some(Rotation::R0),
            90 => Some(Rotation::R90),
            _ => None,
        }
    }

    /// Applies the rotation to `(x, y, z)` extents.
    pub fn apply(self, size: [u32; 3]) -> [u32; 3] {
        match self {
            Rotation::R0 => size,
            Rotation::R90 => [size[1], size[0], size[2]],
        }
    }
}

impl Serialize for Rotation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u32(self.degrees())
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let deg = u32::deserialize(d)?;
        Rotation::from_degrees(deg)
            .ok_or_else(|| serde::de::Error::custom(format!("rotation must be 0 or 90, got {deg}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartShape {
    pub part_id: u32,
    /// Studs in x, studs in y, plates in z.
    pub size: [u32; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub part_id: u32,
    pub pos: [i32; 3],
    pub rot: Rotation,
}

impl Placement {
    pub fn new(part_id: u32, pos: [i32; 3], rot: Rotation) -> Self {
        Self { part_id, pos, rot }
    }

    /// Lexicographic `(z, y, x, part_id)` key used for deterministic tie-breaks.
    pub fn zyx_key(&self) -> (i32, i32, i32, u32) {
        (self.pos[2], self.pos[1], self.pos[0], self.part_id)
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "part {} at ({}, {}, {}) rot {}",
            self.part_id,
            self.pos[0],
            self.pos[1],
            self.pos[2],
            self.rot.degrees()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelativeOffset(pub [i32; 3]);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrickModel {
    pub name: String,
    pub catalog: Vec<PartShape>,
    pub placements: Vec<Placement>,
}

pub fn find_part(catalog: &[PartShape], part_id: u32) -> Result<&PartShape> {
    catalog.iter().find(|p| p.part_id == part_id).ok_or(Error::UnknownPart(part_id))
}

/// Cells covered by `p`; x/y extents swap under a 90° rotation.
pub fn footprint_cells(p: &Placement, catalog: &[PartShape]) -> Result<Vec<Cell>> {
    let shape = find_part(catalog, p.part_id)?;
    let [sx, sy, sz] = p.rot.apply(shape.size);
    let mut cells = Vec::with_capacity((sx * sy * sz) as usize);
    for dz in 0..sz as i32 {
        for dy in 0..sy as i32 {
            for dx in 0..sx as i32 {
                cells.push([p.pos[0] + dx, p.pos[1] + dy, p.pos[2] + dz]);
            }
        }
    }
    Ok(cells)
}

/// Offsets between consecutive placements of `seq`; empty when `seq` has
/// fewer than two elements.
pub fn relative_offsets(seq: &[usize], model: &BrickModel) -> Vec<RelativeOffset> {
    seq.windows(2)
        .map(|w| {
            let a = model.placements[w[0]].pos;
            let b = model.placements[w[1]].pos;
            RelativeOffset([b[0] - a[0], b[1] - a[1], b[2] - a[2]])
        })
        .collect()
}

impl BrickModel {
    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn part(&self, part_id: u32) -> Result<&PartShape> {
        find_part(&self.catalog, part_id)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let model: BrickModel = serde_json::from_str(s)?;
        model.check_structure()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    /// Checks everything but buildability: non-empty, positive sizes, unique
    /// part ids, resolvable parts, z ≥ 0 and pairwise-disjoint footprints.
    pub fn check_structure(&self) -> Result<()> {
        if self.placements.is_empty() {
            return Err(Error::InvalidModel("model has no placements".into()));
        }
        let mut ids = HashSet::new();
        for part in &self.catalog {
            if part.size.contains(&0) {
                return Err(Error::InvalidModel(format!("part {} has a zero extent", part.part_id)));
            }
            if !ids.insert(part.part_id) {
                return Err(Error::InvalidModel(format!("duplicate part id {}", part.part_id)));
            }
        }
        let mut occupied = HashSet::new();
        for (i, p) in self.placements.iter().enumerate() {
            if p.pos[2] < 0 {
                return Err(Error::InvalidModel(format!("placement {i} is below the baseplate")));
            }
            for c in footprint_cells(p, &self.catalog)? {
                if !occupied.insert(c) {
                    return Err(Error::InvalidModel(format!("placement {i} overlaps another placement at {c:?}")));
                }
            }
        }
        Ok(())
    }
}
