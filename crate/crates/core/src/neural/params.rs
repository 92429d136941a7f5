use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LMConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub mask_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_tie")]
    pub tie_output: bool,
}

fn default_tie() -> bool {
    true
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::ConfigMismatch("layer, head and width counts must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::ConfigMismatch(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::ConfigMismatch("mask_fraction must lie in (0, 1)".into()));
        }
        if self.max_seq_len < 3 || self.vocab_size < 6 {
            return Err(Error::ConfigMismatch("max_seq_len and vocab_size too small".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Named size presets. `Paper` keeps the published encoder shape, `Desk`
/// is small enough to train on a laptop CPU in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile `{other}`")),
        }
    }
}

impl Profile {
    pub fn lm_config(self, vocab_size: usize, max_seq_len: usize, seed: u64) -> LMConfig {
        let (layers, heads, model_dim, ffn_dim) = match self {
            Profile::Desk => (2, 2, 64, 256),
            Profile::Paper => (6, 12, 768, 3072),
        };
        LMConfig {
            layers,
            heads,
            model_dim,
            ffn_dim,
            max_seq_len,
            vocab_size,
            mask_fraction: 0.15,
            seed,
            tie_output: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2)
    };
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        }
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
        macro_rules! push {
            ($($f:ident),*) => {
                $(out.push((format!("{prefix}.{}", stringify!($f)), self.$f.shape().to_vec(),
                    self.$f.as_slice().expect("standard layout")));)*
            };
        }
        layer_fields!(push);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        macro_rules! push {
            ($($f:ident),*) => {
                $(out.push(self.$f.as_slice_mut().expect("standard layout"));)*
            };
        }
        layer_fields!(push);
    }
}

/// All trainable weights. The same type doubles as a gradient accumulator
/// and as optimizer moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct LMParams {
    pub config: LMConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    /// Untied output projection; `None` when the head reuses `tok_emb`.
    pub out_w: Option<Array2<f64>>,
    pub out_b: Array1<f64>,
}

impl LMParams {
    /// Every tensor zero, gains included. Used for gradients and moments.
    pub fn zeros(config: &LMConfig) -> Self {
        let (v, d, f, l) = (config.vocab_size, config.model_dim, config.ffn_dim, config.max_seq_len);
        Self {
            config: config.clone(),
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((l, d)),
            layers: (0..config.layers).map(|_| LayerParams::zeros(d, f)).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            out_w: if config.tie_output { None } else { Some(Array2::zeros((v, d))) },
            out_b: Array1::zeros(v),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Normal(0, 0.02) weights, unit normalization gains, zero biases.
    pub fn init(config: &LMConfig) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = seed::rng(config.seed, "init", 0);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut fill = |a: &mut [f64]| a.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        fill(p.tok_emb.as_slice_mut().unwrap());
        fill(p.pos_emb.as_slice_mut().unwrap());
        for layer in &mut p.layers {
            layer.ln1_g.fill(1.0);
            layer.ln2_g.fill(1.0);
            for w in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo, &mut layer.w1, &mut layer.w2] {
                fill(w.as_slice_mut().unwrap());
            }
        }
        p.lnf_g.fill(1.0);
        if let Some(w) = p.out_w.as_mut() {
            fill(w.as_slice_mut().unwrap());
        }
        Ok(p)
    }

    /// Named tensors in a fixed order: name, shape, flat row-major data.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        out.push(("tok_emb".to_string(), self.tok_emb.shape().to_vec(), self.tok_emb.as_slice().unwrap()));
        out.push(("pos_emb".to_string(), self.pos_emb.shape().to_vec(), self.pos_emb.as_slice().unwrap()));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.push_tensors(&format!("layers.{i}"), &mut out);
        }
        out.push(("lnf_g".to_string(), self.lnf_g.shape().to_vec(), self.lnf_g.as_slice().unwrap()));
        out.push(("lnf_b".to_string(), self.lnf_b.shape().to_vec(), self.lnf_b.as_slice().unwrap()));
        if let Some(w) = &self.out_w {
            out.push(("out_w".to_string(), w.shape().to_vec(), w.as_slice().unwrap()));
        }
        out.push(("out_b".to_string(), self.out_b.shape().to_vec(), self.out_b.as_slice().unwrap()));
        out
    }

    /// Mutable views in the same order as [`LMParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.tok_emb.as_slice_mut().unwrap());
        out.push(self.pos_emb.as_slice_mut().unwrap());
        for layer in &mut self.layers {
            layer.push_tensors_mut(&mut out);
        }
        out.push(self.lnf_g.as_slice_mut().unwrap());
        out.push(self.lnf_b.as_slice_mut().unwrap());
        if let Some(w) = self.out_w.as_mut() {
            out.push(w.as_slice_mut().unwrap());
        }
        out.push(self.out_b.as_slice_mut().unwrap());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, _, d)| d.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LMConfig {
        LMConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_seq_len: 12,
            vocab_size: 20,
            mask_fraction: 0.15,
            seed: 5,
            tie_output: true,
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = LMParams::init(&tiny()).unwrap();
        let b = LMParams::init(&tiny()).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        let names: Vec<String> = a.tensors().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names.len(), 2 + 2 * 16 + 3);
        assert_eq!(names[2], "layers.0.ln1_g");
        let mut untied = tiny();
        untied.tie_output = false;
        assert_eq!(LMParams::init(&untied).unwrap().tensors().len(), names.len() + 1);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 3;
        assert!(matches!(LMParams::init(&c), Err(Error::ConfigMismatch(_))));
        let mut c = tiny();
        c.mask_fraction = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn profiles_keep_published_shape() {
        let p = Profile::Paper.lm_config(738, 200, 0);
        assert_eq!((p.layers, p.heads), (6, 12));
        p.validate().unwrap();
        let d = Profile::Desk.lm_config(738, 200, 0);
        assert_eq!((d.layers, d.heads, d.model_dim), (2, 2, 64));
    }
}
