//! Conditional-generation evaluation: given the first `p` bricks of a
//! reference order, continue for up to `horizon` bricks and score the
//! continuation against the reference's with BLEU-4 and ROUGE-1/2/L.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::brick::BrickModel;
use crate::error::Result;
use crate::generate::{commit_step, generate_conditional, Decode, SessionState};
use crate::metrics::{bleu4, rouge_l_with, rouge_n_with, RougeMode};
use crate::neural::LMParams;
use crate::oracle::{order_prepared, Strategy};
use crate::seed;
use crate::tokenize::{content_tokens, Vocabulary};
use crate::validity::PreparedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenBasis {
    /// Brick and position tokens, as the model emits them.
    #[default]
    Interleaved,
    BrickOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prefixes: Vec<usize>,
    pub horizon: usize,
    pub decode: Decode,
    pub basis: TokenBasis,
    pub rouge_mode: RougeMode,
    pub reference_strategy: Strategy,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prefixes: vec![10, 20, 30, 40],
            horizon: 80,
            decode: Decode::Greedy,
            basis: TokenBasis::Interleaved,
            rouge_mode: RougeMode::Recall,
            reference_strategy: Strategy::Local,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub prefix: usize,
    pub samples: usize,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub generator: String,
    pub decode: Decode,
    pub basis: TokenBasis,
    pub rouge_mode: RougeMode,
    pub horizon: usize,
    pub rows: Vec<GridRow>,
}

impl EvalGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("generator,prefix,samples,bleu4,rouge1,rouge2,rouge_l\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
                self.generator, r.prefix, r.samples, r.bleu4, r.rouge1, r.rouge2, r.rouge_l
            ));
        }
        out
    }
}

/// Who continues the prefix.
#[derive(Debug, Clone, Copy)]
pub enum Continuer<'a> {
    Model(&'a LMParams),
    /// Uniformly random legal placement at every step.
    RandomValid,
}

/// Tokens covering bricks `prefix_len..prefix_len + horizon` of `seq`,
/// including the position token that links the first of them to the prefix.
pub fn continuation_tokens(
    model: &BrickModel,
    seq: &[usize],
    prefix_len: usize,
    horizon: usize,
    vocab: &Vocabulary,
    basis: TokenBasis,
) -> Vec<u32> {
    let end = seq.len().min(prefix_len + horizon);
    if prefix_len >= end {
        return Vec::new();
    }
    match basis {
        TokenBasis::Interleaved => {
            let (content, _) = content_tokens(model, &seq[..end], vocab);
            content[(2 * prefix_len).saturating_sub(1)..].to_vec()
        }
        TokenBasis::BrickOnly => {
            let (content, _) = content_tokens(model, &seq[prefix_len..end], vocab);
            content.into_iter().step_by(2).collect()
        }
    }
}

pub fn random_valid_continuation(
    pm: Arc<PreparedModel>,
    vocab: Arc<Vocabulary>,
    prefix: &[usize],
    horizon: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = seed::rng(seed, "random_valid", 0);
    let mut state = SessionState::from_prefix(pm, vocab, prefix)?;
    for _ in 0..horizon {
        let frontier = state.frontier();
        let Some(&pick) = frontier.choose(&mut rng) else { break };
        commit_step(&mut state, pick)?;
    }
    Ok(state.prefix)
}

/// Runs the conditional task on every model longer than each prefix length
/// and macro-averages the scores per prefix length.
pub fn evaluate(
    continuer: Continuer<'_>,
    models: &[BrickModel],
    vocab: Arc<Vocabulary>,
    cfg: &EvalConfig,
) -> Result<EvalGrid> {
    let prepared = models.iter().map(|m| PreparedModel::new(m.clone()).map(Arc::new)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &p in &cfg.prefixes {
        let mut sums = [0.0; 4];
        let mut samples = 0;
        for (i, pm) in prepared.iter().enumerate() {
            if pm.len() <= p {
                continue;
            }
            let (reference, _) =
                order_prepared(pm, seed::derive(cfg.seed, "reference", i as u64), cfg.reference_strategy)?;
            let prefix = &reference[..p];
            let generated = match continuer {
                Continuer::Model(params) => {
                    let decode = match cfg.decode {
                        Decode::Greedy => Decode::Greedy,
                        Decode::Sampled(s) => Decode::Sampled(seed::derive(s, "eval", (i * 1000 + p) as u64)),
                    };
                    generate_conditional(params, pm.clone(), vocab.clone(), prefix, cfg.horizon, decode)?.sequence
                }
                Continuer::RandomValid => random_valid_continuation(
                    pm.clone(),
                    vocab.clone(),
                    prefix,
                    cfg.horizon,
                    seed::derive(cfg.seed, "baseline", (i * 1000 + p) as u64),
                )?,
            };
            let cand = continuation_tokens(&pm.model, &generated, p, cfg.horizon, &vocab, cfg.basis);
            let refr = continuation_tokens(&pm.model, &reference, p, cfg.horizon, &vocab, cfg.basis);
            if refr.len() < 2 || cand.is_empty() {
                continue;
            }
            sums[0] += bleu4(&cand, &refr);
            sums[1] += rouge_n_with(&cand, &refr, 1, cfg.rouge_mode)?;
            sums[2] += rouge_n_with(&cand, &refr, 2, cfg.rouge_mode)?;
            sums[3] += rouge_l_with(&cand, &refr, cfg.rouge_mode);
            samples += 1;
        }
        let avg = |s: f64| if samples == 0 { 0.0 } else { s / samples as f64 };
        rows.push(GridRow {
            prefix: p,
            samples,
            bleu4: avg(sums[0]),
            rouge1: avg(sums[1]),
            rouge2: avg(sums[2]),
            rouge_l: avg(sums[3]),
        });
    }
    Ok(EvalGrid {
        generator: match continuer {
            Continuer::Model(_) => "model".into(),
            Continuer::RandomValid => "random_valid".into(),
        },
        decode: cfg.decode,
        basis: cfg.basis,
        rouge_mode: cfg.rouge_mode,
        horizon: cfg.horizon,
        rows,
    })
}
