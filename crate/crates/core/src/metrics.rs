//! Perplexity, BLEU-4 and ROUGE-1/2/L.
//!
//! BLEU is unsmoothed, so a candidate with no matching 4-gram scores exactly
//! zero. ROUGE defaults to the recall form; F1 is available through
//! [`RougeMode`]. All scores are percentages.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{mask_for_eval, masked_nll, LMParams};
use crate::seed;
use crate::tokenize::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeMode {
    #[default]
    Recall,
    F1,
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Clipped matches of `candidate` n-grams against `reference`.
fn clipped_matches<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], n: usize) -> usize {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    cand.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum()
}

fn ngram_total(len: usize, n: usize) -> usize {
    (len + 1).saturating_sub(n)
}

pub fn bleu4<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let total = ngram_total(candidate.len(), n);
        let matched = clipped_matches(candidate, reference, n);
        if total == 0 || matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * (log_sum / 4.0).exp()
}

pub fn rouge_n<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    rouge_n_with(candidate, reference, n, RougeMode::Recall)
}

pub fn rouge_n_with<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], n: usize, mode: RougeMode) -> Result<f64> {
    let ref_total = ngram_total(reference.len(), n);
    if n == 0 || ref_total == 0 {
        return Err(Error::Undefined(format!("reference of length {} has no {n}-grams", reference.len())));
    }
    let matched = clipped_matches(candidate, reference, n) as f64;
    let recall = matched / ref_total as f64;
    Ok(100.0
        * match mode {
            RougeMode::Recall => recall,
            RougeMode::F1 => {
                let cand_total = ngram_total(candidate.len(), n);
                f1(if cand_total == 0 { 0.0 } else { matched / cand_total as f64 }, recall)
            }
        })
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    rouge_l_with(candidate, reference, RougeMode::Recall)
}

pub fn rouge_l_with<T: Eq>(candidate: &[T], reference: &[T], mode: RougeMode) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let recall = lcs / reference.len() as f64;
    100.0
        * match mode {
            RougeMode::Recall => recall,
            RougeMode::F1 => f1(lcs / candidate.len() as f64, recall),
        }
}

/// `exp(mean masked cross-entropy)` over `corpus`, with the mask pattern
/// fixed by `mask_seed`. Selected tokens are replaced by MASK.
pub fn perplexity(params: &LMParams, corpus: &[Vec<u32>], vocab: &Vocabulary, mask_seed: u64) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = seed::rng(mask_seed, "perplexity", 0);
    let examples: Vec<_> =
        corpus.iter().filter_map(|ids| mask_for_eval(ids, vocab, params.config.mask_fraction, &mut rng)).collect();
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (nll, count) = masked_nll(params, &examples)?;
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        let x = toks("a b c d e f");
        assert!((bleu4(&x, &x) - 100.0).abs() < 1e-9);
        assert_eq!(bleu4(&toks("a b c d"), &toks("d c b a")), 0.0);
        // p1..p4 = 4/5, 3/4, 2/3, 1/2; BP = 1
        let expected = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu4(&toks("a b c d e"), &toks("a b c d f")) - expected).abs() < 1e-9);
        assert_eq!(bleu4(&toks("a b c"), &toks("a b c")), 0.0);
    }

    #[test]
    fn rouge_examples() {
        let x = toks("a b c d");
        assert!((rouge_n(&x, &x, 1).unwrap() - 100.0).abs() < 1e-9);
        assert!((rouge_n(&x, &x, 2).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(rouge_n(&toks("e f"), &x, 1).unwrap(), 0.0);
        let r = rouge_n(&toks("a b b"), &toks("a b c"), 1).unwrap();
        assert!((r - 200.0 / 3.0).abs() < 1e-9);
        assert!(matches!(rouge_n(&x, &toks("a"), 2), Err(Error::Undefined(_))));
    }

    #[test]
    fn rouge_l_examples() {
        assert!((rouge_l(&toks("a c b d"), &toks("a b c d")) - 75.0).abs() < 1e-9);
        let fwd = toks("a b c d e");
        let rev: Vec<&str> = fwd.iter().rev().copied().collect();
        assert!((rouge_l(&rev, &fwd) - 20.0).abs() < 1e-9);
        assert!((rouge_l(&fwd, &fwd) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn f1_variants() {
        let cand = toks("a b");
        let refr = toks("a b c d");
        // precision 1, recall 0.5
        assert!((rouge_n_with(&cand, &refr, 1, RougeMode::F1).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert!((rouge_l_with(&cand, &refr, RougeMode::F1) - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn rouge1_is_bag_level_but_bleu_is_not() {
        let refr = toks("a b c d e f g");
        let cand = toks("a b c d e f g");
        let shuffled = toks("g a c b e d f");
        assert_eq!(rouge_n(&cand, &refr, 1).unwrap(), rouge_n(&shuffled, &refr, 1).unwrap());
        assert!(bleu4(&cand, &refr) > bleu4(&shuffled, &refr));
    }
}
