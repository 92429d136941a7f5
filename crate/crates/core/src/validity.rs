//! Legality rules for assembly orders.
//!
//! A step is legal when the new brick does not overlap anything already
//! built and is supported: it either rests on the baseplate (z = 0) or at
//! least one cell of its bottom layer sits directly on an occupied cell.
//! Side contact alone never supports a brick.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::brick::{footprint_cells, BrickModel, Cell, PartShape, Placement};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SupportRule {
    /// Also accept contact between the brick's top layer and the underside
    /// of an already placed brick.
    pub allow_underside_attach: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Collision,
    Overhang,
    DuplicateBrick,
    UnknownBrick,
    /// The order is legal as far as it goes but does not place every brick.
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub ok: bool,
    pub first_violation: Option<Violation>,
}

impl ValidityReport {
    fn ok() -> Self {
        Self { ok: true, first_violation: None }
    }

    fn fail(step: usize, kind: ViolationKind) -> Self {
        Self { ok: false, first_violation: Some(Violation { step, kind }) }
    }
}

pub fn collides(p: &Placement, placed: &HashSet<Cell>, catalog: &[PartShape]) -> Result<bool> {
    Ok(footprint_cells(p, catalog)?.iter().any(|c| placed.contains(c)))
}

pub fn supported(p: &Placement, placed: &HashSet<Cell>, catalog: &[PartShape], rule: SupportRule) -> Result<bool> {
    let cells = footprint_cells(p, catalog)?;
    Ok(supported_cells(p.pos[2], &cells, placed, rule))
}

fn supported_cells(z0: i32, cells: &[Cell], placed: &HashSet<Cell>, rule: SupportRule) -> bool {
    if z0 == 0 {
        return true;
    }
    let below = cells.iter().filter(|c| c[2] == z0).any(|c| placed.contains(&[c[0], c[1], c[2] - 1]));
    if below || !rule.allow_underside_attach {
        return below;
    }
    let top = cells.iter().map(|c| c[2]).max().unwrap_or(z0);
    cells.iter().filter(|c| c[2] == top).any(|c| placed.contains(&[c[0], c[1], c[2] + 1]))
}

/// A model with every footprint precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedModel {
    pub model: BrickModel,
    pub cells: Vec<Vec<Cell>>,
    pub rule: SupportRule,
}

impl PreparedModel {
    pub fn new(model: BrickModel) -> Result<Self> {
        Self::with_rule(model, SupportRule::default())
    }

    pub fn with_rule(model: BrickModel, rule: SupportRule) -> Result<Self> {
        let cells = model.placements.iter().map(|p| footprint_cells(p, &model.catalog)).collect::<Result<Vec<_>>>()?;
        Ok(Self { model, cells, rule })
    }

    pub fn len(&self) -> usize {
        self.model.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model.placements.is_empty()
    }

    pub fn placement(&self, idx: usize) -> &Placement {
        &self.model.placements[idx]
    }
}

/// Occupied cells plus the set of placed bricks, updated one step at a time.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Occupancy {
    pub cells: HashSet<Cell>,
    pub placed: Vec<bool>,
    pub count: usize,
}

impl Occupancy {
    pub fn new(n: usize) -> Self {
        Self { cells: HashSet::new(), placed: vec![false; n], count: 0 }
    }

    pub fn is_complete(&self) -> bool {
        self.count == self.placed.len()
    }

    /// Why `idx` cannot be placed now, if it cannot.
    pub fn check(&self, pm: &PreparedModel, idx: usize) -> Option<ViolationKind> {
        if idx >= pm.len() {
            return Some(ViolationKind::UnknownBrick);
        }
        if self.placed[idx] {
            return Some(ViolationKind::DuplicateBrick);
        }
        let cells = &pm.cells[idx];
        if cells.iter().any(|c| self.cells.contains(c)) {
            return Some(ViolationKind::Collision);
        }
        if !supported_cells(pm.placement(idx).pos[2], cells, &self.cells, pm.rule) {
            return Some(ViolationKind::Overhang);
        }
        None
    }

    pub fn is_legal(&self, pm: &PreparedModel, idx: usize) -> bool {
        self.check(pm, idx).is_none()
    }

    pub fn place(&mut self, pm: &PreparedModel, idx: usize) {
        debug_assert!(!self.placed[idx]);
        self.cells.extend(pm.cells[idx].iter().copied());
        self.placed[idx] = true;
        self.count += 1;
    }

    pub fn remove(&mut self, pm: &PreparedModel, idx: usize) {
        debug_assert!(self.placed[idx]);
        for c in &pm.cells[idx] {
            self.cells.remove(c);
        }
        self.placed[idx] = false;
        self.count -= 1;
    }

    /// Unplaced bricks that are legal right now, in index order.
    pub fn frontier(&self, pm: &PreparedModel) -> Vec<usize> {
        (0..pm.len()).filter(|&i| !self.placed[i] && self.is_legal(pm, i)).collect()
    }
}

/// Replays `seq` and reports the first illegal step. With `require_complete`
/// the order must also be a full permutation of the model's placements.
fn replay(seq: &[usize], pm: &PreparedModel, require_complete: bool) -> ValidityReport {
    let mut occ = Occupancy::new(pm.len());
    for (step, &idx) in seq.iter().enumerate() {
        if let Some(kind) = occ.check(pm, idx) {
            return ValidityReport::fail(step, kind);
        }
        occ.place(pm, idx);
    }
    if require_complete && !occ.is_complete() {
        return ValidityReport::fail(seq.len(), ViolationKind::Incomplete);
    }
    ValidityReport::ok()
}

pub fn validate_sequence(seq: &[usize], model: &BrickModel) -> Result<ValidityReport> {
    validate_sequence_with(seq, model, SupportRule::default())
}

pub fn validate_sequence_with(seq: &[usize], model: &BrickModel, rule: SupportRule) -> Result<ValidityReport> {
    let pm = PreparedModel::with_rule(model.clone(), rule)?;
    Ok(replay(seq, &pm, true))
}

pub fn validate_prepared(seq: &[usize], pm: &PreparedModel) -> ValidityReport {
    replay(seq, pm, true)
}

/// Like [`validate_sequence`] but accepts a legal partial order.
pub fn validate_prefix(seq: &[usize], pm: &PreparedModel) -> ValidityReport {
    replay(seq, pm, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brick::Rotation;
    use proptest::prelude::*;

    fn cat() -> Vec<PartShape> {
        vec![PartShape { part_id: 1, size: [2, 4, 1] }, PartShape { part_id: 2, size: [1, 1, 1] }]
    }

    fn cells_of(ps: &[Placement]) -> HashSet<Cell> {
        ps.iter().flat_map(|p| footprint_cells(p, &cat()).unwrap()).collect()
    }

    fn tower(n: i32) -> BrickModel {
        BrickModel {
            name: "tower".into(),
            catalog: cat(),
            placements: (0..n).map(|z| Placement::new(2, [0, 0, z], Rotation::R0)).collect(),
        }
    }

    #[test]
    fn collision_cases() {
        let p = Placement::new(1, [0, 0, 0], Rotation::R0);
        let overlapping = cells_of(&[Placement::new(1, [1, 0, 0], Rotation::R0)]);
        assert!(collides(&p, &overlapping, &cat()).unwrap());
        let beside = cells_of(&[Placement::new(1, [2, 0, 0], Rotation::R0)]);
        assert!(!collides(&p, &beside, &cat()).unwrap());
        let stacked = Placement::new(1, [0, 0, 1], Rotation::R0);
        let below = cells_of(&[p]);
        assert!(!collides(&stacked, &below, &cat()).unwrap());
    }

    #[test]
    fn support_cases() {
        let rule = SupportRule::default();
        let empty = HashSet::new();
        assert!(supported(&Placement::new(1, [7, -3, 0], Rotation::R90), &empty, &cat(), rule).unwrap());
        assert!(!supported(&Placement::new(2, [0, 0, 2], Rotation::R0), &empty, &cat(), rule).unwrap());
        let base = cells_of(&[Placement::new(2, [0, 0, 0], Rotation::R0)]);
        assert!(supported(&Placement::new(2, [0, 0, 1], Rotation::R0), &base, &cat(), rule).unwrap());
        // side contact does not support
        let side = cells_of(&[Placement::new(2, [1, 0, 1], Rotation::R0)]);
        assert!(!supported(&Placement::new(2, [0, 0, 1], Rotation::R0), &side, &cat(), rule).unwrap());
    }

    #[test]
    fn underside_attach_flag() {
        let above = cells_of(&[Placement::new(2, [0, 0, 2], Rotation::R0)]);
        let p = Placement::new(2, [0, 0, 1], Rotation::R0);
        assert!(!supported(&p, &above, &cat(), SupportRule::default()).unwrap());
        let rule = SupportRule { allow_underside_attach: true };
        assert!(supported(&p, &above, &cat(), rule).unwrap());
    }

    #[test]
    fn tower_orders() {
        let m = tower(3);
        assert_eq!(validate_sequence(&[0, 1, 2], &m).unwrap(), ValidityReport::ok());
        let top_first = validate_sequence(&[2, 1, 0], &m).unwrap();
        assert_eq!(top_first.first_violation, Some(Violation { step: 0, kind: ViolationKind::Overhang }));
        let dup = validate_sequence(&[0, 0, 1], &m).unwrap();
        assert_eq!(dup.first_violation, Some(Violation { step: 1, kind: ViolationKind::DuplicateBrick }));
        let unknown = validate_sequence(&[0, 7], &m).unwrap();
        assert_eq!(unknown.first_violation, Some(Violation { step: 1, kind: ViolationKind::UnknownBrick }));
        let short = validate_sequence(&[0, 1], &m).unwrap();
        assert!(!short.ok);
        let pm = PreparedModel::new(m).unwrap();
        assert!(validate_prefix(&[0, 1], &pm).ok);
    }

    #[test]
    fn occupancy_place_remove_roundtrip() {
        let pm = PreparedModel::new(tower(3)).unwrap();
        let mut occ = Occupancy::new(3);
        let before = occ.clone();
        assert_eq!(occ.frontier(&pm), vec![0]);
        occ.place(&pm, 0);
        assert_eq!(occ.frontier(&pm), vec![1]);
        occ.remove(&pm, 0);
        assert_eq!(occ, before);
    }

    proptest! {
        // Support is monotone in the occupied set.
        #[test]
        fn support_monotone(extra in proptest::collection::vec((-3i32..3, -3i32..3, 0i32..4), 0..10),
                            base in proptest::collection::vec((-3i32..3, -3i32..3, 0i32..4), 0..10),
                            px in -3i32..3, py in -3i32..3, pz in 0i32..4) {
            let p = Placement::new(2, [px, py, pz], Rotation::R0);
            let s: HashSet<Cell> = base.iter().map(|&(x, y, z)| [x, y, z]).collect();
            let mut s2 = s.clone();
            s2.extend(extra.iter().map(|&(x, y, z)| [x, y, z]));
            let rule = SupportRule::default();
            if supported(&p, &s, &cat(), rule).unwrap() && !collides(&p, &s2, &cat()).unwrap() {
                prop_assert!(supported(&p, &s2, &cat(), rule).unwrap());
            }
        }
    }
}
