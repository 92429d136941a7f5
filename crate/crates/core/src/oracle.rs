//! Rule-based search for valid assembly orders.
//!
//! [`order_sequence`] is a greedy frontier search with depth-first
//! backtracking: at every step the candidates are the unplaced bricks that
//! are legal right now, tried in strategy order. [`enumerate_valid_orderings`]
//! is the brute-force reference used by tests.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brick::BrickModel;
use crate::error::{Error, Result};
use crate::seed;
use crate::validity::{validate_sequence_with, Occupancy, PreparedModel, SupportRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Lowest `(z, y, x, part_id)` first.
    Deterministic,
    /// Uniformly random frontier order.
    Randomized,
    /// Lowest layer first, then nearest to the previous brick, random among ties.
    Local,
    /// Reverse of the deterministic tie-break.
    Adversarial,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "det" | "deterministic" => Ok(Strategy::Deterministic),
            "rand" | "randomized" => Ok(Strategy::Randomized),
            "local" => Ok(Strategy::Local),
            "adv" | "adversarial" => Ok(Strategy::Adversarial),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Deterministic => "deterministic",
            Strategy::Randomized => "randomized",
            Strategy::Local => "local",
            Strategy::Adversarial => "adversarial",
        })
    }
}

/// Search statistics from one [`order_sequence`] run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub expanded: usize,
    pub backtracks: usize,
}

struct Frame {
    candidates: Vec<usize>,
    next: usize,
}

fn manhattan(a: [i32; 3], b: [i32; 3]) -> i32 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

fn ordered_frontier<R: Rng>(
    pm: &PreparedModel,
    occ: &Occupancy,
    last: Option<usize>,
    strategy: Strategy,
    rng: &mut R,
) -> Vec<usize> {
    let mut frontier = occ.frontier(pm);
    let key = |i: usize| (pm.placement(i).zyx_key(), i);
    match strategy {
        Strategy::Deterministic => frontier.sort_by_key(|&i| key(i)),
        Strategy::Adversarial => frontier.sort_by_key(|&i| std::cmp::Reverse(key(i))),
        Strategy::Randomized => frontier.shuffle(rng),
        Strategy::Local => {
            frontier.shuffle(rng);
            let anchor = last.map(|l| pm.placement(l).pos);
            frontier.sort_by_key(|&i| {
                let p = pm.placement(i).pos;
                (p[2], anchor.map_or(0, |a| manhattan(a, p)))
            });
        }
    }
    frontier
}

pub fn order_sequence(model: &BrickModel, seed: u64, strategy: Strategy) -> Result<Vec<usize>> {
    let pm = PreparedModel::new(model.clone())?;
    order_prepared(&pm, seed, strategy).map(|(seq, _)| seq)
}

/// Searches for a full valid order of `pm`.
///
/// Failed placed-sets are memoized; whether a partial build can be completed
/// depends only on which bricks are placed, not on their order.
pub fn order_prepared(pm: &PreparedModel, seed: u64, strategy: Strategy) -> Result<(Vec<usize>, SearchStats)> {
    let n = pm.len();
    if n == 0 {
        return Err(Error::InvalidModel("model has no placements".into()));
    }
    let mut rng = seed::rng(seed, "oracle", 0);
    let mut occ = Occupancy::new(n);
    let mut seq: Vec<usize> = Vec::with_capacity(n);
    let mut dead: HashSet<Vec<bool>> = HashSet::new();
    let mut stats = SearchStats::default();
    let mut stack = vec![Frame { candidates: ordered_frontier(pm, &occ, None, strategy, &mut rng), next: 0 }];

    while let Some(frame) = stack.last_mut() {
        if seq.len() == n {
            return Ok((seq, stats));
        }
        if frame.next >= frame.candidates.len() {
            // dead end: undo the brick that led here
            stack.pop();
            if let Some(idx) = seq.pop() {
                dead.insert(occ.placed.clone());
                occ.remove(pm, idx);
                stats.backtracks += 1;
            }
            continue;
        }
        let idx = frame.candidates[frame.next];
        frame.next += 1;
        occ.place(pm, idx);
        if dead.contains(&occ.placed) {
            occ.remove(pm, idx);
            continue;
        }
        seq.push(idx);
        stats.expanded += 1;
        let candidates = ordered_frontier(pm, &occ, Some(idx), strategy, &mut rng);
        stack.push(Frame { candidates, next: 0 });
    }
    Err(Error::NoValidOrdering(pm.model.name.clone()))
}

/// Checks that some valid order exists; used when ingesting external models.
pub fn check_buildable(model: &BrickModel) -> Result<()> {
    order_sequence(model, 0, Strategy::Deterministic).map(|_| ())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Enumeration {
    pub orderings: Vec<Vec<usize>>,
    pub truncated: bool,
}

/// Every permutation accepted by `validate_sequence`, stopping at `cap`.
/// Brute force over all n! permutations in lexicographic order.
pub fn enumerate_valid_orderings(model: &BrickModel, cap: usize) -> Result<Enumeration> {
    enumerate_valid_orderings_with(model, cap, SupportRule::default())
}

pub fn enumerate_valid_orderings_with(model: &BrickModel, cap: usize, rule: SupportRule) -> Result<Enumeration> {
    let mut perm: Vec<usize> = (0..model.len()).collect();
    let mut orderings = Vec::new();
    loop {
        if validate_sequence_with(&perm, model, rule)?.ok {
            if orderings.len() == cap {
                return Ok(Enumeration { orderings, truncated: true });
            }
            orderings.push(perm.clone());
        }
        if !next_permutation(&mut perm) {
            return Ok(Enumeration { orderings, truncated: false });
        }
    }
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brick::{PartShape, Placement, Rotation};

    fn unit_model(positions: &[[i32; 3]]) -> BrickModel {
        BrickModel {
            name: "m".into(),
            catalog: vec![PartShape { part_id: 0, size: [1, 1, 1] }, PartShape { part_id: 1, size: [2, 2, 1] }],
            placements: positions.iter().map(|&p| Placement::new(0, p, Rotation::R0)).collect(),
        }
    }

    #[test]
    fn tower_has_unique_bottom_up_order() {
        let m = unit_model(&[[0, 0, 2], [0, 0, 0], [0, 0, 1]]);
        for strategy in [Strategy::Deterministic, Strategy::Randomized, Strategy::Local, Strategy::Adversarial] {
            assert_eq!(order_sequence(&m, 3, strategy).unwrap(), vec![1, 2, 0]);
        }
        assert_eq!(enumerate_valid_orderings(&m, usize::MAX).unwrap().orderings, vec![vec![1, 2, 0]]);
    }

    #[test]
    fn deterministic_tie_break() {
        let m = unit_model(&[[3, 0, 0], [0, 0, 0]]);
        assert_eq!(order_sequence(&m, 0, Strategy::Deterministic).unwrap(), vec![1, 0]);
        let m = unit_model(&[[0, 1, 0], [5, 0, 0]]);
        assert_eq!(order_sequence(&m, 0, Strategy::Deterministic).unwrap(), vec![1, 0]);
        assert_eq!(order_sequence(&m, 0, Strategy::Adversarial).unwrap(), vec![0, 1]);
    }

    #[test]
    fn enumeration_counts() {
        let two_tower = unit_model(&[[0, 0, 0], [0, 0, 1]]);
        assert_eq!(enumerate_valid_orderings(&two_tower, 100).unwrap().orderings.len(), 1);
        let two = unit_model(&[[0, 0, 0], [4, 0, 0]]);
        assert_eq!(enumerate_valid_orderings(&two, 100).unwrap().orderings.len(), 2);
        let three = unit_model(&[[0, 0, 0], [4, 0, 0], [8, 0, 0]]);
        let e = enumerate_valid_orderings(&three, 100).unwrap();
        assert_eq!(e.orderings.len(), 6);
        assert!(!e.truncated);
        let capped = enumerate_valid_orderings(&three, 4).unwrap();
        assert_eq!(capped.orderings.len(), 4);
        assert!(capped.truncated);
    }

    #[test]
    fn plate_arrangement_output_is_enumerated() {
        let m = unit_model(&[[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]);
        let all = enumerate_valid_orderings(&m, usize::MAX).unwrap();
        assert_eq!(all.orderings.len(), 24);
        for seed in 0..10 {
            for strategy in [Strategy::Deterministic, Strategy::Randomized, Strategy::Local] {
                let seq = order_sequence(&m, seed, strategy).unwrap();
                assert!(all.orderings.contains(&seq));
            }
        }
    }

    #[test]
    fn randomized_is_seed_deterministic() {
        let m = unit_model(&[[0, 0, 0], [2, 0, 0], [4, 0, 0], [6, 0, 0], [0, 0, 1], [2, 0, 1]]);
        let a = order_sequence(&m, 11, Strategy::Randomized).unwrap();
        assert_eq!(a, order_sequence(&m, 11, Strategy::Randomized).unwrap());
        let distinct: HashSet<Vec<usize>> =
            (0..20).map(|s| order_sequence(&m, s, Strategy::Randomized).unwrap()).collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn unbuildable_model_reports_no_ordering() {
        // floating brick with nothing underneath
        let m = unit_model(&[[0, 0, 0], [5, 5, 3]]);
        assert!(matches!(order_sequence(&m, 0, Strategy::Deterministic), Err(Error::NoValidOrdering(_))));
        assert!(enumerate_valid_orderings(&m, 10).unwrap().orderings.is_empty());
    }

    #[test]
    fn next_permutation_visits_all() {
        let mut v = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut v) {
            count += 1;
        }
        assert_eq!(count, 24);
    }
}
