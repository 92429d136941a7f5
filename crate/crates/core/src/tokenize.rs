//! Interleaved brick / relative-position token streams.
//!
//! A sequence of `n` bricks becomes `BOS t1 pr1 t2 pr2 ... tn EOS`, where each
//! `ti` names the part and rotation and each `pri` is the discretized offset
//! from brick `i` to brick `i + 1`. Absolute positions are never encoded; a
//! decoded stream is anchored at a caller-supplied cell.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::brick::{relative_offsets, BrickModel, RelativeOffset, Rotation};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const UNK: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscretizationConfig {
    /// Grid length per axis that one class step corresponds to.
    pub l: [i32; 3],
    /// Largest class index per axis; classes run over `0..=l_max`.
    pub l_max: u32,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        Self { l: [1, 1, 1], l_max: 8 }
    }
}

impl DiscretizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_max < 1 || self.l.iter().any(|&l| l < 1) {
            return Err(Error::ConfigMismatch(format!("invalid discretization config {self:?}")));
        }
        Ok(())
    }

    pub fn classes_per_axis(&self) -> u32 {
        self.l_max + 1
    }

    pub fn num_classes(&self) -> u32 {
        self.classes_per_axis().pow(3)
    }
}

/// `clamp(floor(d / l + l_max / 2), 0, l_max)` per component, with a true
/// floor toward negative infinity. Evaluated in integers as
/// `floor((2d + l_max * l) / 2l)`.
pub fn discretize(d: RelativeOffset, cfg: &DiscretizationConfig) -> [u32; 3] {
    let mut out = [0u32; 3];
    for j in 0..3 {
        let l = i64::from(cfg.l[j]);
        let num = 2 * i64::from(d.0[j]) + i64::from(cfg.l_max) * l;
        let class = num.div_euclid(2 * l);
        out[j] = class.clamp(0, i64::from(cfg.l_max)) as u32;
    }
    out
}

/// Smallest integer offset in each class: `ceil((pd - l_max / 2) * l)`.
/// For even `l_max` this is exactly `(pd - l_max / 2) * l`.
pub fn dediscretize(pd: [u32; 3], cfg: &DiscretizationConfig) -> RelativeOffset {
    let mut out = [0i32; 3];
    for j in 0..3 {
        let l = i64::from(cfg.l[j]);
        let num = (2 * i64::from(pd[j]) - i64::from(cfg.l_max)) * l;
        out[j] = (-(-num).div_euclid(2)) as i32;
    }
    RelativeOffset(out)
}

/// True when `d` survives a discretize/dediscretize round trip unchanged.
pub fn offset_in_range(d: RelativeOffset, cfg: &DiscretizationConfig) -> bool {
    dediscretize(discretize(d, cfg), cfg) == d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Special,
    Brick,
    Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrickToken {
    pub part_id: u32,
    pub rot: u32,
    pub id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub disc: DiscretizationConfig,
    pub brick_tokens: Vec<BrickToken>,
    pub position_base: u32,
    index: HashMap<(u32, Rotation), u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    l_max: u32,
    l: [i32; 3],
    brick_tokens: Vec<BrickToken>,
    position_base: u32,
}

impl Vocabulary {
    /// One brick token per `(part_id, rotation)` pair, ordered by part id then
    /// rotation, followed by `(l_max + 1)^3` position tokens.
    pub fn new(pairs: impl IntoIterator<Item = (u32, Rotation)>, disc: DiscretizationConfig) -> Result<Self> {
        disc.validate()?;
        let pairs: BTreeSet<(u32, Rotation)> = pairs.into_iter().collect();
        let brick_tokens: Vec<BrickToken> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(part_id, rot))| BrickToken { part_id, rot: rot.degrees(), id: NUM_SPECIAL + i as u32 })
            .collect();
        let position_base = NUM_SPECIAL + brick_tokens.len() as u32;
        Self::from_parts(disc, brick_tokens, position_base)
    }

    /// Vocabulary covering both rotations of every part in the given catalogs.
    pub fn from_models<'a>(
        models: impl IntoIterator<Item = &'a BrickModel>,
        disc: DiscretizationConfig,
    ) -> Result<Self> {
        let mut pairs = BTreeSet::new();
        for m in models {
            for p in &m.catalog {
                pairs.insert((p.part_id, Rotation::R0));
                pairs.insert((p.part_id, Rotation::R90));
            }
        }
        Self::new(pairs, disc)
    }

    fn from_parts(disc: DiscretizationConfig, brick_tokens: Vec<BrickToken>, position_base: u32) -> Result<Self> {
        disc.validate()?;
        let mut index = HashMap::new();
        for (i, t) in brick_tokens.iter().enumerate() {
            let rot = Rotation::from_degrees(t.rot)
                .ok_or_else(|| Error::ConfigMismatch(format!("brick token with rotation {}", t.rot)))?;
            if t.id != NUM_SPECIAL + i as u32 {
                return Err(Error::ConfigMismatch("brick token ids must be contiguous from 5".into()));
            }
            if index.insert((t.part_id, rot), t.id).is_some() {
                return Err(Error::ConfigMismatch(format!("duplicate brick token {t:?}")));
            }
        }
        if position_base != NUM_SPECIAL + brick_tokens.len() as u32 {
            return Err(Error::ConfigMismatch("position_base must follow the brick tokens".into()));
        }
        Ok(Self { disc, brick_tokens, position_base, index })
    }

    pub fn size(&self) -> usize {
        (self.position_base + self.disc.num_classes()) as usize
    }

    pub fn brick_id(&self, part_id: u32, rot: Rotation) -> Option<u32> {
        self.index.get(&(part_id, rot)).copied()
    }

    pub fn brick_of(&self, id: u32) -> Option<(u32, Rotation)> {
        let i = id.checked_sub(NUM_SPECIAL)? as usize;
        let t = self.brick_tokens.get(i)?;
        Some((t.part_id, Rotation::from_degrees(t.rot)?))
    }

    pub fn kind(&self, id: u32) -> Option<TokenKind> {
        if id < NUM_SPECIAL {
            Some(TokenKind::Special)
        } else if id < self.position_base {
            Some(TokenKind::Brick)
        } else if (id as usize) < self.size() {
            Some(TokenKind::Position)
        } else {
            None
        }
    }

    pub fn brick_range(&self) -> std::ops::Range<u32> {
        NUM_SPECIAL..self.position_base
    }

    pub fn position_range(&self) -> std::ops::Range<u32> {
        self.position_base..self.size() as u32
    }

    /// Mixed-radix id `base + pd1 (l_max+1)^2 + pd2 (l_max+1) + pd3`.
    pub fn position_token_id(&self, pd: [u32; 3]) -> Result<u32> {
        let r = self.disc.classes_per_axis();
        if pd.iter().any(|&c| c >= r) {
            return Err(Error::InvalidClass(pd.map(i64::from), self.disc.l_max));
        }
        Ok(self.position_base + pd[0] * r * r + pd[1] * r + pd[2])
    }

    pub fn position_class(&self, id: u32) -> Option<[u32; 3]> {
        if self.kind(id) != Some(TokenKind::Position) {
            return None;
        }
        let r = self.disc.classes_per_axis();
        let k = id - self.position_base;
        Some([k / (r * r), (k / r) % r, k % r])
    }

    pub fn offset_token(&self, d: RelativeOffset) -> u32 {
        self.position_token_id(discretize(d, &self.disc)).expect("discretize output is always in range")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabularyFile {
            l_max: self.disc.l_max,
            l: self.disc.l,
            brick_tokens: self.brick_tokens.clone(),
            position_base: self.position_base,
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: VocabularyFile = serde_json::from_str(s)?;
        Self::from_parts(DiscretizationConfig { l: f.l, l_max: f.l_max }, f.brick_tokens, f.position_base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VocabularyFile {
            l_max: self.disc.l_max,
            l: self.disc.l,
            brick_tokens: self.brick_tokens.clone(),
            position_base: self.position_base,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = VocabularyFile::deserialize(d)?;
        Self::from_parts(DiscretizationConfig { l: f.l, l_max: f.l_max }, f.brick_tokens, f.position_base)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub kinds: Vec<TokenKind>,
}

impl TokenStream {
    fn push(&mut self, id: u32, kind: TokenKind) {
        self.ids.push(id);
        self.kinds.push(kind);
    }

    pub fn from_ids(ids: Vec<u32>, vocab: &Vocabulary) -> Result<Self> {
        let kinds = ids
            .iter()
            .map(|&id| {
                vocab.kind(id).ok_or_else(|| Error::MalformedStream(format!("token id {id} outside vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { ids, kinds })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub stream: TokenStream,
    /// Steps whose `(part_id, rot)` was missing from the vocabulary.
    pub unknown_bricks: Vec<usize>,
}

/// Token id of the brick at `model.placements[idx]`, or UNK.
pub fn brick_token(model: &BrickModel, idx: usize, vocab: &Vocabulary) -> Option<u32> {
    let p = &model.placements[idx];
    vocab.brick_id(p.part_id, p.rot)
}

/// Content tokens (no BOS/EOS) for `seq`.
pub fn content_tokens(model: &BrickModel, seq: &[usize], vocab: &Vocabulary) -> (Vec<u32>, Vec<usize>) {
    let offsets = relative_offsets(seq, model);
    let mut ids = Vec::with_capacity(2 * seq.len());
    let mut unknown = Vec::new();
    for (step, &idx) in seq.iter().enumerate() {
        if step > 0 {
            ids.push(vocab.offset_token(offsets[step - 1]));
        }
        match brick_token(model, idx, vocab) {
            Some(id) => ids.push(id),
            None => {
                unknown.push(step);
                ids.push(UNK);
            }
        }
    }
    (ids, unknown)
}

pub fn encode(model: &BrickModel, seq: &[usize], vocab: &Vocabulary) -> Encoded {
    let (content, unknown_bricks) = content_tokens(model, seq, vocab);
    if !unknown_bricks.is_empty() {
        log::warn!("model `{}`: {} brick(s) missing from vocabulary", model.name, unknown_bricks.len());
    }
    let mut stream = TokenStream::default();
    stream.push(BOS, TokenKind::Special);
    for (i, id) in content.into_iter().enumerate() {
        let kind = if id == UNK {
            TokenKind::Special
        } else if i % 2 == 0 {
            TokenKind::Brick
        } else {
            TokenKind::Position
        };
        stream.push(id, kind);
    }
    stream.push(EOS, TokenKind::Special);
    Encoded { stream, unknown_bricks }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedBrick {
    pub part_id: u32,
    pub rot: Rotation,
    pub pos: [i32; 3],
}

/// Inverse of [`encode`] up to discretization loss; the first brick lands at
/// `anchor`.
pub fn decode(stream: &TokenStream, anchor: [i32; 3], vocab: &Vocabulary) -> Result<Vec<DecodedBrick>> {
    let ids = &stream.ids;
    let mut body: &[u32] = ids;
    if body.first() == Some(&BOS) {
        body = &body[1..];
    }
    if body.last() == Some(&EOS) {
        body = &body[..body.len() - 1];
    }
    if body.is_empty() {
        return Err(Error::MalformedStream("no brick tokens".into()));
    }
    if body.len().is_multiple_of(2) {
        return Err(Error::MalformedStream("stream must end on a brick token".into()));
    }
    let mut out = Vec::with_capacity(body.len() / 2 + 1);
    let mut pos = anchor;
    for (i, &id) in body.iter().enumerate() {
        if i % 2 == 0 {
            let (part_id, rot) = vocab
                .brick_of(id)
                .ok_or_else(|| Error::MalformedStream(format!("expected brick token at {}, got {id}", i + 1)))?;
            out.push(DecodedBrick { part_id, rot, pos });
        } else {
            let pd = vocab
                .position_class(id)
                .ok_or_else(|| Error::MalformedStream(format!("expected position token at {}, got {id}", i + 1)))?;
            let d = dediscretize(pd, &vocab.disc);
            for k in 0..3 {
                pos[k] += d.0[k];
            }
        }
    }
    Ok(out)
}

/// Reads a JSON-lines file of token-id arrays.
pub fn read_token_lines(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

pub fn write_token_lines(path: impl AsRef<Path>, seqs: &[Vec<u32>]) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brick::{PartShape, Placement};
    use proptest::prelude::*;

    fn cfg8() -> DiscretizationConfig {
        DiscretizationConfig::default()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new([(0, Rotation::R0), (0, Rotation::R90), (3, Rotation::R0)], cfg8()).unwrap()
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(RelativeOffset([0, 0, 0]), &cfg8()), [4, 4, 4]);
        assert_eq!(discretize(RelativeOffset([3, -2, 1]), &cfg8()), [7, 2, 5]);
        assert_eq!(discretize(RelativeOffset([100, 0, -100]), &cfg8()), [8, 4, 0]);
    }

    #[test]
    fn discretize_uses_true_floor() {
        let cfg = DiscretizationConfig { l: [2, 2, 2], l_max: 8 };
        // -1/2 + 4 = 3.5 -> 3, truncation toward zero would also give 3; -3/2 + 4 = 2.5 -> 2
        assert_eq!(discretize(RelativeOffset([-1, -3, 1]), &cfg), [3, 2, 4]);
        let odd = DiscretizationConfig { l: [1, 1, 1], l_max: 3 };
        // -2 + 1.5 = -0.5 -> floor -1 -> clamp 0
        assert_eq!(discretize(RelativeOffset([-2, -1, 0]), &odd), [0, 0, 1]);
    }

    #[test]
    fn position_token_examples() {
        let v = vocab();
        assert_eq!(v.position_base, 8);
        assert_eq!(v.position_token_id([0, 0, 0]).unwrap(), v.position_base);
        assert_eq!(v.position_token_id([4, 4, 4]).unwrap(), v.position_base + 364);
        assert_eq!(v.position_token_id([8, 8, 8]).unwrap(), v.position_base + 728);
        assert!(matches!(v.position_token_id([9, 0, 0]), Err(Error::InvalidClass(..))));
        assert_eq!(v.size(), 5 + 3 + 729);
    }

    #[test]
    fn encode_shapes() {
        let v = vocab();
        let model = BrickModel {
            name: "s".into(),
            catalog: vec![PartShape { part_id: 0, size: [1, 1, 1] }, PartShape { part_id: 3, size: [2, 2, 1] }],
            placements: vec![
                Placement::new(0, [0, 0, 0], Rotation::R0),
                Placement::new(3, [0, 0, 1], Rotation::R0),
                Placement::new(0, [1, 0, 2], Rotation::R90),
            ],
        };
        let one = encode(&model, &[0], &v).stream;
        assert_eq!(one.ids, vec![BOS, 5, EOS]);
        let two = encode(&model, &[0, 1], &v).stream;
        let up = v.position_token_id([4, 4, 5]).unwrap();
        assert_eq!(two.ids, vec![BOS, 5, up, 7, EOS]);
        assert_eq!(
            two.kinds,
            vec![TokenKind::Special, TokenKind::Brick, TokenKind::Position, TokenKind::Brick, TokenKind::Special]
        );
        let three = encode(&model, &[0, 1, 2], &v).stream;
        assert_eq!(three.ids.len(), 2 * 3 + 1);
        let back = decode(&three, [10, 10, 0], &v).unwrap();
        assert_eq!(back[2], DecodedBrick { part_id: 0, rot: Rotation::R90, pos: [11, 10, 2] });
    }

    #[test]
    fn unknown_brick_becomes_unk() {
        let v = vocab();
        let model = BrickModel {
            name: "u".into(),
            catalog: vec![PartShape { part_id: 9, size: [1, 1, 1] }],
            placements: vec![Placement::new(9, [0, 0, 0], Rotation::R0)],
        };
        let enc = encode(&model, &[0], &v);
        assert_eq!(enc.stream.ids, vec![BOS, UNK, EOS]);
        assert_eq!(enc.unknown_bricks, vec![0]);
    }

    #[test]
    fn decode_rejects_bad_alternation() {
        let v = vocab();
        let s = TokenStream::from_ids(vec![BOS, 5, 5, EOS], &v).unwrap();
        assert!(matches!(decode(&s, [0, 0, 0], &v), Err(Error::MalformedStream(_))));
        let s = TokenStream::from_ids(vec![BOS, 5, 5, 6, EOS], &v).unwrap();
        assert!(matches!(decode(&s, [0, 0, 0], &v), Err(Error::MalformedStream(_))));
    }

    #[test]
    fn clamped_offset_decodes_to_boundary() {
        let v = vocab();
        let pd = discretize(RelativeOffset([100, 0, 0]), &v.disc);
        assert_eq!(dediscretize(pd, &v.disc), RelativeOffset([4, 0, 0]));
        assert!(!offset_in_range(RelativeOffset([100, 0, 0]), &v.disc));
        assert!(offset_in_range(RelativeOffset([-4, 4, 0]), &v.disc));
    }

    #[test]
    fn vocabulary_json_roundtrip() {
        let v = vocab();
        let back = Vocabulary::from_json_str(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_json_str(r#"{"l_max":8,"l":[1,1,1],"brick_tokens":[],"position_base":6}"#).is_err());
    }

    #[test]
    fn vocabulary_ids_are_distinct_and_typed() {
        for l_max in [1, 2, 4, 8] {
            let v =
                Vocabulary::new([(0, Rotation::R0), (1, Rotation::R90)], DiscretizationConfig { l: [1, 1, 1], l_max })
                    .unwrap();
            let r = l_max + 1;
            assert_eq!(v.size() as u32, 5 + 2 + r * r * r);
            let mut seen = vec![false; v.size()];
            for id in 0..v.size() as u32 {
                assert!(v.kind(id).is_some());
                assert!(!std::mem::replace(&mut seen[id as usize], true));
            }
        }
    }

    proptest! {
        #[test]
        fn discretize_monotone(a in -50i32..50, b in -50i32..50, l in 1i32..4, l_max in 1u32..10) {
            let cfg = DiscretizationConfig { l: [l, l, l], l_max };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let x = discretize(RelativeOffset([lo, lo, lo]), &cfg);
            let y = discretize(RelativeOffset([hi, hi, hi]), &cfg);
            prop_assert!(x[0] <= y[0]);
        }

        #[test]
        fn dediscretize_lands_in_its_class(c in 0u32..9, l in 1i32..4, l_max in 1u32..9) {
            prop_assume!(c <= l_max);
            let cfg = DiscretizationConfig { l: [l, l, l], l_max };
            let d = dediscretize([c, c, c], &cfg);
            prop_assert_eq!(discretize(d, &cfg), [c, c, c]);
        }
    }
}
