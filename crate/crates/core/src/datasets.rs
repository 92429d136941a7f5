//! Synthetic brick models and training corpora.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brick::{BrickModel, PartShape, Placement, Rotation};
use crate::error::{Error, Result};
use crate::oracle::{order_prepared, Strategy};
use crate::seed;
use crate::tokenize::{encode, write_token_lines, DiscretizationConfig, Vocabulary};
use crate::validity::{Occupancy, PreparedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tower,
    Wall,
    Pyramid,
    RandomStack,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Tower, ModelKind::Wall, ModelKind::Pyramid, ModelKind::RandomStack];

    pub fn max_bricks(self) -> usize {
        match self {
            ModelKind::Tower => 64,
            _ => 400,
        }
    }
}

/// Shared part catalog for every synthetic model.
pub fn standard_catalog() -> Vec<PartShape> {
    vec![
        PartShape { part_id: 0, size: [1, 1, 1] },
        PartShape { part_id: 1, size: [2, 1, 1] },
        PartShape { part_id: 2, size: [2, 2, 1] },
        PartShape { part_id: 3, size: [4, 1, 1] },
        PartShape { part_id: 4, size: [4, 2, 1] },
    ]
}

fn tower(n: usize) -> Vec<Placement> {
    (0..n).map(|z| Placement::new(0, [0, 0, z as i32], Rotation::R0)).collect()
}

/// Running-bond wall of 2×1 bricks, filled row by row.
fn wall(n: usize) -> Vec<Placement> {
    let cols = ((1.5 * n as f64).sqrt().ceil() as usize).max(1);
    (0..n)
        .map(|i| {
            let (row, col) = (i / cols, i % cols);
            let x = 2 * col as i32 + (row % 2) as i32;
            Placement::new(1, [x, 0, row as i32], Rotation::R0)
        })
        .collect()
}

/// Square layers of 2×2 bricks, each layer one brick narrower and shifted
/// by one stud so it straddles the layer below.
fn pyramid(n: usize) -> Vec<Placement> {
    let mut side = 1usize;
    while (1..=side).map(|s| s * s).sum::<usize>() < n {
        side += 1;
    }
    let mut out = Vec::with_capacity(n);
    'layers: for z in 0..side {
        let s = side - z;
        for j in 0..s {
            for i in 0..s {
                if out.len() == n {
                    break 'layers;
                }
                let pos = [2 * i as i32 + z as i32, 2 * j as i32 + z as i32, z as i32];
                out.push(Placement::new(2, pos, Rotation::R0));
            }
        }
    }
    out
}

/// Grows a structure by sampling supported, non-colliding placements next to
/// a random existing brick. The growth order is itself a valid sequence.
fn random_stack(n: usize, seed: u64) -> Result<Vec<Placement>> {
    let catalog = standard_catalog();
    let mut rng = seed::rng(seed, "random_stack", n as u64);
    let mut placed: Vec<Placement> = Vec::with_capacity(n);
    let mut occ = std::collections::HashSet::new();
    let first = Placement::new(
        rng.gen_range(0..catalog.len() as u32),
        [0, 0, 0],
        if rng.gen() { Rotation::R90 } else { Rotation::R0 },
    );
    occ.extend(crate::brick::footprint_cells(&first, &catalog)?);
    placed.push(first);
    let max_attempts = 200 * n.max(1);
    let mut attempts = 0;
    while placed.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::GenerationFailed(format!("random_stack stalled at {} of {n} bricks", placed.len())));
        }
        let anchor = *placed.choose(&mut rng).expect("non-empty");
        let part = rng.gen_range(0..catalog.len() as u32);
        let rot = if rng.gen() { Rotation::R90 } else { Rotation::R0 };
        let size = rot.apply(catalog[part as usize].size);
        let asize = anchor.rot.apply(catalog[anchor.part_id as usize].size);
        let z = anchor.pos[2] + rng.gen_range(0..=1);
        let x = rng.gen_range(anchor.pos[0] - size[0] as i32..=anchor.pos[0] + asize[0] as i32);
        let y = rng.gen_range(anchor.pos[1] - size[1] as i32..=anchor.pos[1] + asize[1] as i32);
        let p = Placement::new(part, [x, y, z], rot);
        let cells = crate::brick::footprint_cells(&p, &catalog)?;
        if cells.iter().any(|c| occ.contains(c)) {
            continue;
        }
        let supported = z == 0 || cells.iter().any(|c| c[2] == z && occ.contains(&[c[0], c[1], z - 1]));
        if !supported {
            continue;
        }
        occ.extend(cells);
        placed.push(p);
    }
    Ok(placed)
}

/// Deterministic buildable model with exactly `n` placements.
pub fn synth_model(kind: ModelKind, n: usize, seed: u64) -> Result<BrickModel> {
    if n == 0 || n > kind.max_bricks() {
        return Err(Error::GenerationFailed(format!("{kind:?} supports 1..={} bricks, got {n}", kind.max_bricks())));
    }
    let mut placements = match kind {
        ModelKind::Tower => tower(n),
        ModelKind::Wall => wall(n),
        ModelKind::Pyramid => pyramid(n),
        ModelKind::RandomStack => random_stack(n, seed)?,
    };
    // hide the construction order from the placement list
    placements.shuffle(&mut seed::rng(seed, "shuffle_placements", n as u64));
    let model =
        BrickModel { name: format!("{kind:?}-{n}-{seed}").to_lowercase(), catalog: standard_catalog(), placements };
    model.check_structure()?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: ModelKind,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub models: Vec<ManifestEntry>,
    pub sequences_per_model: usize,
    pub strategy: Strategy,
    pub splits: Splits,
    pub discretization: DiscretizationConfig,
    pub vocabulary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub models: usize,
    pub min_n: usize,
    pub max_n: usize,
    pub sequences_per_model: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub discretization: DiscretizationConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            models: 64,
            min_n: 8,
            max_n: 40,
            sequences_per_model: 4,
            seed: 0,
            strategy: Strategy::Local,
            discretization: DiscretizationConfig::default(),
        }
    }
}

/// Manifest with kinds cycling through [`ModelKind::ALL`] and an 80/10/10
/// split over a seeded shuffle of model indices.
pub fn make_manifest(spec: &DatasetSpec) -> DatasetManifest {
    let mut rng = seed::rng(spec.seed, "manifest", 0);
    let models: Vec<ManifestEntry> = (0..spec.models)
        .map(|i| {
            let kind = ModelKind::ALL[i % 4];
            let hi = spec.max_n.min(kind.max_bricks()).max(spec.min_n);
            ManifestEntry { kind, n: rng.gen_range(spec.min_n..=hi), seed: seed::derive(spec.seed, "model", i as u64) }
        })
        .collect();
    let mut idx: Vec<usize> = (0..spec.models).collect();
    idx.shuffle(&mut rng);
    let n_val = spec.models / 10;
    let n_test = spec.models / 10;
    let n_train = spec.models - n_val - n_test;
    let mut splits = Splits {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    };
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    DatasetManifest {
        seed: spec.seed,
        models,
        sequences_per_model: spec.sequences_per_model,
        strategy: spec.strategy,
        splits,
        discretization: spec.discretization,
        vocabulary: "vocab.json".into(),
    }
}

pub fn build_models(manifest: &DatasetManifest) -> Result<Vec<BrickModel>> {
    manifest.models.iter().map(|e| synth_model(e.kind, e.n, e.seed)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub model: usize,
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub records: Vec<SequenceRecord>,
    pub streams: Vec<Vec<u32>>,
}

impl Corpus {
    /// Token streams of records whose model is in `models`.
    pub fn streams_for(&self, models: &[usize]) -> Vec<Vec<u32>> {
        self.records
            .iter()
            .zip(&self.streams)
            .filter(|(r, _)| models.contains(&r.model))
            .map(|(_, s)| s.clone())
            .collect()
    }
}

/// Oracle orders for every model, `sequences_per_model` each, as token
/// streams. Models the oracle cannot order are skipped with a warning.
pub fn build_corpus(
    models: &[BrickModel],
    sequences_per_model: usize,
    strategy: Strategy,
    disc: DiscretizationConfig,
    seed: u64,
) -> Result<Corpus> {
    let vocab = Vocabulary::from_models(models, disc)?;
    let mut records = Vec::new();
    let mut streams = Vec::new();
    for (mi, model) in models.iter().enumerate() {
        let pm = PreparedModel::new(model.clone())?;
        for j in 0..sequences_per_model {
            let s = seed::derive(seed, "corpus", (mi * sequences_per_model + j) as u64);
            match order_prepared(&pm, s, strategy) {
                Ok((order, _)) => {
                    streams.push(encode(model, &order, &vocab).stream.ids);
                    records.push(SequenceRecord { model: mi, order });
                }
                Err(Error::NoValidOrdering(name)) => {
                    log::warn!("skipping model `{name}`: no valid ordering");
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(Corpus { vocab, records, streams })
}

fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// A dataset on disk: manifest, vocabulary, models, oracle orders and
/// per-split token corpora.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub models: Vec<BrickModel>,
    pub corpus: Corpus,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let manifest = make_manifest(spec);
        let models = build_models(&manifest)?;
        let corpus = build_corpus(&models, spec.sequences_per_model, spec.strategy, spec.discretization, spec.seed)?;
        Ok(Self { manifest, models, corpus })
    }

    pub fn split_streams(&self, split: &[usize]) -> Vec<Vec<u32>> {
        self.corpus.streams_for(split)
    }

    pub fn max_stream_len(&self) -> usize {
        self.corpus.streams.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        self.corpus.vocab.save(dir.join(&self.manifest.vocabulary))?;
        write_json_lines(&dir.join("models.jsonl"), &self.models)?;
        write_json_lines(&dir.join("sequences.jsonl"), &self.corpus.records)?;
        let s = &self.manifest.splits;
        for (name, split) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
            write_token_lines(dir.join(format!("corpus_{name}.jsonl")), &self.split_streams(split))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let vocab = Vocabulary::load(dir.join(&manifest.vocabulary))?;
        let models: Vec<BrickModel> = read_json_lines(&dir.join("models.jsonl"))?;
        for m in &models {
            m.check_structure()?;
        }
        let records: Vec<SequenceRecord> = read_json_lines(&dir.join("sequences.jsonl"))?;
        let streams = records
            .iter()
            .map(|r| {
                let model = models
                    .get(r.model)
                    .ok_or_else(|| Error::InvalidModel(format!("sequence refers to missing model {}", r.model)))?;
                Ok(encode(model, &r.order, &vocab).stream.ids)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, models, corpus: Corpus { vocab, records, streams } })
    }
}

/// Checks a model is structurally sound and has at least one valid order.
pub fn ingest_model(model: &BrickModel) -> Result<PreparedModel> {
    model.check_structure()?;
    let pm = PreparedModel::new(model.clone())?;
    let mut occ = Occupancy::new(pm.len());
    // support is monotone and model placements never overlap, so greedy
    // placement succeeds iff the model is buildable
    loop {
        let frontier = occ.frontier(&pm);
        if frontier.is_empty() {
            break;
        }
        for idx in frontier {
            occ.place(&pm, idx);
        }
    }
    if !occ.is_complete() {
        return Err(Error::NoValidOrdering(model.name.clone()));
    }
    Ok(pm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{enumerate_valid_orderings, order_sequence};
    use crate::tokenize::decode;
    use crate::validity::validate_sequence;

    #[test]
    fn tower_has_one_ordering() {
        let m = synth_model(ModelKind::Tower, 5, 1).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(enumerate_valid_orderings(&m, 1000).unwrap().orderings.len(), 1);
    }

    #[test]
    fn wall_layout() {
        let m = synth_model(ModelKind::Wall, 6, 0).unwrap();
        let mut rows = std::collections::BTreeMap::new();
        for p in &m.placements {
            *rows.entry(p.pos[2]).or_insert(0) += 1;
        }
        assert_eq!(rows.into_values().collect::<Vec<_>>(), vec![3, 3]);
        let seq = order_sequence(&m, 0, Strategy::Deterministic).unwrap();
        assert!(validate_sequence(&seq, &m).unwrap().ok);
    }

    #[test]
    fn every_kind_is_buildable_and_deterministic() {
        for kind in ModelKind::ALL {
            for n in [1, 7, 20, 41] {
                let a = synth_model(kind, n, 7).unwrap();
                assert_eq!(a, synth_model(kind, n, 7).unwrap());
                assert_eq!(a.len(), n);
                ingest_model(&a).unwrap();
                let seq = order_sequence(&a, 7, Strategy::Randomized).unwrap();
                assert!(validate_sequence(&seq, &a).unwrap().ok);
            }
        }
        assert!(synth_model(ModelKind::Tower, 0, 0).is_err());
        assert!(synth_model(ModelKind::Tower, 65, 0).is_err());
    }

    #[test]
    fn corpus_contract() {
        let models =
            vec![synth_model(ModelKind::RandomStack, 9, 2).unwrap(), synth_model(ModelKind::Tower, 4, 2).unwrap()];
        let corpus = build_corpus(&models, 3, Strategy::Local, DiscretizationConfig::default(), 5).unwrap();
        assert_eq!(corpus.streams.len(), 6);
        let vs = corpus.vocab.size() as u32;
        assert!(corpus.streams.iter().flatten().all(|&id| id < vs));
        for (rec, stream) in corpus.records.iter().zip(&corpus.streams) {
            let model = &models[rec.model];
            assert!(validate_sequence(&rec.order, model).unwrap().ok);
            let ts = crate::tokenize::TokenStream::from_ids(stream.clone(), &corpus.vocab).unwrap();
            assert_eq!(decode(&ts, [0, 0, 0], &corpus.vocab).unwrap().len(), model.len());
        }
        let tower: Vec<_> = corpus.records.iter().filter(|r| r.model == 1).collect();
        assert!(tower.windows(2).all(|w| w[0].order == w[1].order));
    }

    #[test]
    fn unbuildable_ingest_rejected() {
        let m = BrickModel {
            name: "float".into(),
            catalog: standard_catalog(),
            placements: vec![Placement::new(0, [0, 0, 0], Rotation::R0), Placement::new(0, [3, 3, 2], Rotation::R0)],
        };
        assert!(matches!(ingest_model(&m), Err(Error::NoValidOrdering(_))));
    }

    #[test]
    fn saved_dataset_is_byte_identical_and_reloads() {
        let spec =
            DatasetSpec { models: 8, min_n: 4, max_n: 10, sequences_per_model: 2, seed: 3, ..DatasetSpec::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&spec).unwrap();
        ds.save(a.path()).unwrap();
        Dataset::generate(&spec).unwrap().save(b.path()).unwrap();
        for f in [
            "manifest.json",
            "vocab.json",
            "models.jsonl",
            "sequences.jsonl",
            "corpus_train.jsonl",
            "corpus_test.jsonl",
        ] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        assert_eq!(Dataset::load(a.path()).unwrap(), ds);
        let s = &ds.manifest.splits;
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }
}
