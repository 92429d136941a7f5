//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "BPLM" | version: u16 | header_len: u32 | header (JSON) | f32 data
//! ```
//!
//! The header holds the model config, the vocabulary the model was trained
//! with (optional) and a tensor index of names, shapes and byte offsets
//! relative to the start of the data section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{LMConfig, LMParams};
use crate::error::{Error, Result};
use crate::tokenize::Vocabulary;

const MAGIC: &[u8; 4] = b"BPLM";
const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: LMConfig,
    #[serde(default)]
    vocabulary: Option<Vocabulary>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: LMParams,
    pub vocabulary: Option<Vocabulary>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &LMParams, vocabulary: Option<&Vocabulary>) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    for (name, shape, values) in params.tensors() {
        tensors.push(TensorEntry { name, shape, offset: data.len() });
        for &x in values {
            data.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let header =
        serde_json::to_vec(&Header { config: params.config.clone(), vocabulary: vocabulary.cloned(), tensors })?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&data)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing BPLM magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[10..data_start])?;
    header.config.validate()?;
    if let Some(v) = &header.vocabulary {
        if v.size() != header.config.vocab_size {
            return Err(Error::Checkpoint("vocabulary size disagrees with config".into()));
        }
    }
    let data = &bytes[data_start..];
    let mut params = LMParams::zeros(&header.config);
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", expected.len(), header.tensors.len())));
    }
    for ((slot, (name, shape)), entry) in params.tensors_mut().into_iter().zip(expected).zip(&header.tensors) {
        if entry.name != name || entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let end = entry.offset + 4 * slot.len();
        let raw = data
            .get(entry.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past end of file")))?;
        for (x, chunk) in slot.iter_mut().zip(raw.chunks_exact(4)) {
            *x = f64::from(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
    }
    Ok(Checkpoint { params, vocabulary: header.vocabulary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brick::Rotation;
    use crate::tokenize::DiscretizationConfig;

    #[test]
    fn roundtrip_at_f32_precision() {
        let vocab = Vocabulary::new([(0, Rotation::R0)], DiscretizationConfig { l: [1, 1, 1], l_max: 2 }).unwrap();
        let cfg = LMConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ffn_dim: 8,
            max_seq_len: 10,
            vocab_size: vocab.size(),
            mask_fraction: 0.15,
            seed: 2,
            tie_output: false,
        };
        let p = LMParams::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bplm");
        save_checkpoint(&path, &p, Some(&vocab)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.vocabulary.as_ref(), Some(&vocab));
        for ((_, _, a), (_, _, b)) in p.tensors().into_iter().zip(ck.params.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // saving the loaded params reproduces the file byte for byte
        let again = dir.path().join("again.bplm");
        save_checkpoint(&again, &ck.params, Some(&vocab)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOPE0000000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
