//! Automatic text metrics over tokenized hypotheses and references, plus
//! the evaluation report shape.
//!
//! BLEU is corpus-level: clipped n-gram matches and candidate totals are
//! summed over the whole corpus before any division, orders 1..=n enter a
//! geometric mean, and a brevity penalty compares total lengths. A zero
//! match count for any order falls back to a small epsilon so the
//! geometric mean stays defined.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Substituted for a zero n-gram precision before the geometric mean.
pub const BLEU_EPS: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Usage(format!(
            "{} hypotheses against {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Usage("empty corpus".into()));
    }
    Ok(())
}

/// Corpus BLEU-n: geometric mean of clipped modified precisions for
/// orders 1..=n, times the brevity penalty.
pub fn bleu_n(hyps: &[Vec<String>], refs: &[Vec<String>], n: usize) -> Result<f64> {
    check_corpus(hyps, refs)?;
    if n == 0 {
        return Err(Error::Usage("BLEU order must be at least 1".into()));
    }
    let mut log_sum = 0.0;
    for m in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (h, r) in hyps.iter().zip(refs) {
            let rc = ngram_counts(r, m);
            for (gram, count) in ngram_counts(h, m) {
                matched += count.min(*rc.get(gram).unwrap_or(&0));
            }
            total += h.len().saturating_sub(m - 1);
        }
        let p = if matched == 0 || total == 0 {
            BLEU_EPS
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean ROUGE-L F1 over pairs: per pair, P = LCS/|hyp|, R = LCS/|ref|,
/// F1 = 2PR/(P+R); a pair with an empty hypothesis or reference, or no
/// common subsequence, scores 0.
pub fn rouge_l_f1(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let mut sum = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        if h.is_empty() || r.is_empty() {
            continue;
        }
        let l = lcs_len(h, r) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / h.len() as f64;
        let rec = l / r.len() as f64;
        sum += 2.0 * p * rec / (p + rec);
    }
    Ok(sum / hyps.len() as f64)
}

/// Distinct-n: unique n-grams across all hypotheses divided by the total
/// number of n-grams; 0 when there are no n-grams at all.
pub fn distinct_n(hyps: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Usage("distinct order must be at least 1".into()));
    }
    let mut seen: HashMap<&[String], ()> = HashMap::new();
    let mut total = 0usize;
    for h in hyps {
        if h.len() >= n {
            for w in h.windows(n) {
                seen.entry(w).or_insert(());
                total += 1;
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(seen.len() as f64 / total as f64)
}

/// exp(mean per-token negative log-likelihood).
pub fn perplexity(total_nll: f64, token_count: usize) -> Result<f64> {
    if token_count == 0 {
        return Err(Error::Usage("perplexity over zero tokens".into()));
    }
    Ok((total_nll / token_count as f64).exp())
}

/// The eight-key evaluation report. ACC, R-L, B-n, and D-n live in [0,1];
/// PPL ≥ 1 for any proper model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "ACC")]
    pub acc: f64,
    #[serde(rename = "PPL")]
    pub ppl: f64,
    #[serde(rename = "R-L")]
    pub rouge_l: f64,
    #[serde(rename = "B-2")]
    pub bleu_2: f64,
    #[serde(rename = "B-3")]
    pub bleu_3: f64,
    #[serde(rename = "B-4")]
    pub bleu_4: f64,
    #[serde(rename = "D-1")]
    pub distinct_1: f64,
    #[serde(rename = "D-2")]
    pub distinct_2: f64,
}
