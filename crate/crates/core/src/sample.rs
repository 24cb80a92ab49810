//! Token sampling for generation.
//!
//! The filter order is frozen for reproducibility: logits are divided by
//! the temperature, repetition-penalized, turned into probabilities,
//! restricted to the top-k ids, restricted again to the smallest nucleus
//! whose cumulative probability reaches top-p, renormalized, and sampled
//! under the caller's seeded generator. Greedy decoding takes the argmax
//! of the penalized, temperature-scaled logits and never touches the
//! generator.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Nucleus mass in (0, 1].
    pub top_p: f64,
    /// Keep at most this many candidates; must be positive.
    pub top_k: usize,
    /// Softmax temperature; must be positive.
    pub temperature: f64,
    /// Repetition penalty ≥ 1 applied to already-generated tokens.
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Deterministic argmax decoding instead of sampling.
    #[serde(default)]
    pub greedy: bool,
}

impl Default for DecodeConfig {
    fn default() -> DecodeConfig {
        DecodeConfig {
            top_p: 0.3,
            top_k: 30,
            temperature: 0.7,
            repetition_penalty: 1.03,
            max_new_tokens: 64,
            seed: 0,
            greedy: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Usage(format!("top_p {} not in (0,1]", self.top_p)));
        }
        if self.top_k == 0 {
            return Err(Error::Usage("top_k must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Usage(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::Usage(format!(
                "repetition penalty {} must be at least 1",
                self.repetition_penalty
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Usage("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// One sampling step's surviving candidates (probability-descending, ties
/// by ascending id), their renormalized probabilities, and the token
/// actually emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub candidates: Vec<usize>,
    pub probs: Vec<f64>,
    pub chosen: usize,
}

/// Divide logits by the temperature and penalize every distinct id in
/// `seen`, exactly once each: a positive scaled logit is divided by the
/// penalty, a negative one is multiplied by it (zero is unchanged).
pub fn penalized_scaled_logits(logits: &[f64], seen: &[usize], cfg: &DecodeConfig) -> Vec<f64> {
    let mut z: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    let distinct: HashSet<usize> = seen.iter().copied().collect();
    for id in distinct {
        if let Some(v) = z.get_mut(id) {
            if *v > 0.0 {
                *v /= cfg.repetition_penalty;
            } else {
                *v *= cfg.repetition_penalty;
            }
        }
    }
    z
}

/// Max-subtracted softmax over a single logit row.
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Usage("cannot sample from an empty logit row".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite logit in sampling".into()));
    }
    Ok(())
}

/// ids 0..n sorted by probability descending, ties by ascending id.
fn ranked_ids(probs: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    ids
}

/// The surviving candidate set: top-k ids of the penalized distribution,
/// then the smallest probability-descending prefix whose cumulative mass
/// reaches `top_p` (the element that crosses the threshold is included).
/// If the top-k set never reaches the mass, all of it survives.
pub fn candidate_set(logits: &[f64], seen: &[usize], cfg: &DecodeConfig) -> Result<StepTrace> {
    cfg.validate()?;
    check_logits(logits)?;
    let z = penalized_scaled_logits(logits, seen, cfg);
    let probs = softmax_probs(&z);
    let ranked = ranked_ids(&probs);
    let k = cfg.top_k.min(ranked.len());
    let mut kept = Vec::with_capacity(k);
    let mut mass = 0.0;
    for &id in &ranked[..k] {
        kept.push(id);
        mass += probs[id];
        if mass >= cfg.top_p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|&id| probs[id]).sum();
    let renorm: Vec<f64> = kept.iter().map(|&id| probs[id] / total).collect();
    Ok(StepTrace {
        candidates: kept,
        probs: renorm,
        chosen: usize::MAX,
    })
}

/// Sample one token under the frozen filter order, recording the
/// candidate set it was drawn from.
pub fn sample_step<R: Rng>(
    logits: &[f64],
    seen: &[usize],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<StepTrace> {
    let mut trace = candidate_set(logits, seen, cfg)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = *trace.candidates.last().expect("at least one candidate");
    for (&id, &p) in trace.candidates.iter().zip(&trace.probs) {
        acc += p;
        if u < acc {
            chosen = id;
            break;
        }
    }
    trace.chosen = chosen;
    Ok(trace)
}

/// Argmax of the penalized, temperature-scaled logits (ties go to the
/// lowest id).
pub fn greedy_step(logits: &[f64], seen: &[usize], cfg: &DecodeConfig) -> Result<usize> {
    cfg.validate()?;
    check_logits(logits)?;
    let z = penalized_scaled_logits(logits, seen, cfg);
    Ok(ranked_ids(&z)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_cfg() -> DecodeConfig {
        DecodeConfig {
            temperature: 1.0,
            repetition_penalty: 1.0,
            top_p: 1.0,
            top_k: 1000,
            ..DecodeConfig::default()
        }
    }

    /// Logits whose softmax equals the given distribution.
    fn logits_for(probs: &[f64]) -> Vec<f64> {
        probs.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn defaults_match_the_frozen_knobs() {
        let cfg = DecodeConfig::default();
        assert_eq!(cfg.top_p, 0.3);
        assert_eq!(cfg.top_k, 30);
        assert_eq!(cfg.temperature, 0.7);
        assert_eq!(cfg.repetition_penalty, 1.03);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn validation_rejects_out_of_range_knobs() {
        for bad in [
            DecodeConfig {
                top_p: 0.0,
                ..DecodeConfig::default()
            },
            DecodeConfig {
                top_p: 1.5,
                ..DecodeConfig::default()
            },
            DecodeConfig {
                top_k: 0,
                ..DecodeConfig::default()
            },
            DecodeConfig {
                temperature: 0.0,
                ..DecodeConfig::default()
            },
            DecodeConfig {
                repetition_penalty: 0.9,
                ..DecodeConfig::default()
            },
            DecodeConfig {
                max_new_tokens: 0,
                ..DecodeConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Usage(_))));
        }
    }

    #[test]
    fn sharp_nucleus_leaves_a_single_candidate() {
        // Distribution (0.7, 0.2, 0.1) with top_p = 0.3: the first prefix
        // already holds 0.7 ≥ 0.3, so only the strongest token survives.
        let cfg = DecodeConfig {
            top_p: 0.3,
            ..flat_cfg()
        };
        let logits = logits_for(&[0.7, 0.2, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = sample_step(&logits, &[], &cfg, &mut rng).unwrap();
            assert_eq!(t.candidates, vec![0]);
            assert_eq!(t.probs, vec![1.0]);
            assert_eq!(t.chosen, 0);
        }
    }

    #[test]
    fn nucleus_keeps_the_element_that_crosses_the_threshold() {
        let cfg = DecodeConfig {
            top_p: 0.5,
            ..flat_cfg()
        };
        let logits = logits_for(&[0.4, 0.35, 0.25]);
        let t = candidate_set(&logits, &[], &cfg).unwrap();
        assert_eq!(t.candidates, vec![0, 1]);
        let sum: f64 = t.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((t.probs[0] - 0.4 / 0.75).abs() < 1e-9);
    }

    #[test]
    fn top_k_truncates_and_ties_break_by_id() {
        let cfg = DecodeConfig {
            top_k: 2,
            ..flat_cfg()
        };
        let t = candidate_set(&[1.0, 1.0, 1.0, 1.0], &[], &cfg).unwrap();
        assert_eq!(t.candidates, vec![0, 1]);
        assert!((t.probs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nucleus_never_reached_keeps_the_whole_top_k() {
        // Four equal tokens, k = 2 keeps mass 0.5 < top_p = 0.9: both stay.
        let cfg = DecodeConfig {
            top_k: 2,
            top_p: 0.9,
            ..flat_cfg()
        };
        let t = candidate_set(&[2.0, 2.0, 2.0, 2.0], &[], &cfg).unwrap();
        assert_eq!(t.candidates, vec![0, 1]);
        let sum: f64 = t.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn a_lone_seen_token_never_gains_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = DecodeConfig {
            repetition_penalty: 1.03,
            temperature: 0.7,
            ..flat_cfg()
        };
        for _ in 0..200 {
            let n = 2 + (rng.random::<u32>() % 30) as usize;
            let logits: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let seen = (rng.random::<u32>() as usize) % n;
            let base = softmax_probs(&penalized_scaled_logits(&logits, &[], &cfg));
            let pen = softmax_probs(&penalized_scaled_logits(&logits, &[seen], &cfg));
            assert!(
                pen[seen] <= base[seen] + 1e-15,
                "seen token rose from {} to {}",
                base[seen],
                pen[seen]
            );
            // Relative to any unseen token, the odds always drop.
            for u in 0..n {
                if u != seen {
                    assert!(pen[seen] * base[u] <= base[seen] * pen[u] + 1e-15);
                }
            }
        }
    }

    #[test]
    fn penalty_is_applied_once_per_distinct_token() {
        let cfg = DecodeConfig {
            repetition_penalty: 2.0,
            temperature: 1.0,
            ..flat_cfg()
        };
        let once = penalized_scaled_logits(&[4.0, -4.0], &[0, 1], &cfg);
        let thrice = penalized_scaled_logits(&[4.0, -4.0], &[0, 1, 0, 1, 0, 1], &cfg);
        assert_eq!(once, thrice);
        assert_eq!(once, vec![2.0, -8.0]);
    }

    #[test]
    fn greedy_is_argmax_and_penalty_can_flip_it() {
        let cfg = DecodeConfig::default();
        let logits = [2.0, 1.99, -3.0];
        assert_eq!(greedy_step(&logits, &[], &cfg).unwrap(), 0);
        // 2.0/1.03 ≈ 1.9417 < 1.99: the repeated token loses the argmax.
        assert_eq!(greedy_step(&logits, &[0], &cfg).unwrap(), 1);
    }

    #[test]
    fn fixed_seed_reproduces_an_identical_draw_sequence() {
        let cfg = DecodeConfig::default();
        let mut rng_a = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut rng_b = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut logit_rng = ChaCha8Rng::seed_from_u64(7);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..40).map(|_| logit_rng.random::<f64>() * 6.0 - 3.0).collect())
            .collect();
        for row in &rows {
            a.push(sample_step(row, &a, &cfg, &mut rng_a).unwrap().chosen);
        }
        for row in &rows {
            b.push(sample_step(row, &b, &cfg, &mut rng_b).unwrap().chosen);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn every_sample_lands_in_its_candidate_set() {
        let cfg = DecodeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut logit_rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = Vec::new();
        for _ in 0..300 {
            let row: Vec<f64> = (0..60).map(|_| logit_rng.random::<f64>() * 10.0 - 5.0).collect();
            let t = sample_step(&row, &seen, &cfg, &mut rng).unwrap();
            assert!(t.candidates.contains(&t.chosen));
            assert!(t.candidates.len() <= cfg.top_k);
            let sum: f64 = t.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            seen.push(t.chosen);
        }
    }

    #[test]
    fn non_finite_logits_are_a_numeric_error() {
        let cfg = DecodeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sample_step(&[1.0, f64::NAN], &[], &cfg, &mut rng);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(matches!(
            greedy_step(&[], &[], &cfg),
            Err(Error::Usage(_))
        ));
    }
}
