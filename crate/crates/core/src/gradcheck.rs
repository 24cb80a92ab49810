//! Central finite-difference oracles for verifying backward passes.
//!
//! The oracle only ever calls the forward path: a scalar function of a set
//! of flat parameter buffers is probed coordinate-by-coordinate (or along a
//! random direction for large parameter sets) with a symmetric step, and
//! the result is compared against the analytic gradient from
//! [`crate::tensor::Graph::backward`]. Because the probe never touches the
//! backward code, agreement is meaningful evidence rather than a tautology.

use crate::scalar::Scalar;

/// Default symmetric step for f64 checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Symmetric relative error between two gradients: `|a-b| / max(|a|+|b|, floor)`.
/// The floor keeps the measure stable around zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Largest relative error over a pair of gradient sets.
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (ga, gn) in analytic.iter().zip(numeric) {
        for (a, b) in ga.iter().zip(gn) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    worst
}

/// Central finite-difference gradient of `f` at `at`, coordinate by
/// coordinate: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn fd_gradient<S: Scalar>(
    f: &mut dyn FnMut(&[Vec<S>]) -> S,
    at: &[Vec<S>],
    step: f64,
) -> Vec<Vec<f64>> {
    let h = S::from_f64(step);
    let mut grads = Vec::with_capacity(at.len());
    let mut point: Vec<Vec<S>> = at.to_vec();
    for p in 0..at.len() {
        let mut g = Vec::with_capacity(at[p].len());
        for i in 0..at[p].len() {
            let orig = point[p][i];
            point[p][i] = orig + h;
            let up = f(&point);
            point[p][i] = orig - h;
            let down = f(&point);
            point[p][i] = orig;
            g.push((up - down).to_f64() / (2.0 * step));
        }
        grads.push(g);
    }
    grads
}

/// Central finite-difference directional derivative of `f` at `at` along
/// `dir` (same shapes as `at`): `(f(x + h d) - f(x - h d)) / 2h`.
pub fn fd_directional<S: Scalar>(
    f: &mut dyn FnMut(&[Vec<S>]) -> S,
    at: &[Vec<S>],
    dir: &[Vec<f64>],
    step: f64,
) -> f64 {
    let shift = |sign: f64| -> Vec<Vec<S>> {
        at.iter()
            .zip(dir)
            .map(|(buf, d)| {
                buf.iter()
                    .zip(d)
                    .map(|(v, dv)| *v + S::from_f64(sign * step * dv))
                    .collect()
            })
            .collect()
    };
    let up = f(&shift(1.0));
    let down = f(&shift(-1.0));
    (up - down).to_f64() / (2.0 * step)
}

/// Dot product of an analytic gradient with a direction, for comparison
/// against [`fd_directional`].
pub fn grad_dot_dir(grads: &[Vec<f64>], dir: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .zip(dir)
        .flat_map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b))
        .sum()
}

/// Below this relative error a coordinate is accepted without trying a
/// smaller finite-difference step.
const REFINE_THRESHOLD: f64 = 1e-4;

/// Outcome of [`model_forward_fd_error`]: the worst coordinate found and
/// the two derivative estimates that disagreed most.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub worst: f64,
    pub parameter: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub finite_diff: f64,
}

/// End-to-end oracle: build a small model on a fixed four-turn fixture,
/// backpropagate one teacher-forced loss, then probe `coords` randomly
/// chosen parameter coordinates with central differences (each probe is a
/// fresh forward pass, so agreement is evidence against the whole tape).
/// Returns the worst relative error. `corpus_seed` alternates between an
/// example with and without supporter turns in its context so both effect
/// paths and the strategy-history encoder are exercised.
pub fn model_forward_fd_error(
    config: &crate::model::ModelConfig,
    corpus_seed: u64,
    coords: usize,
    step: f64,
    pick_seed: u64,
) -> crate::error::Result<FdReport> {
    use crate::cause::{annotate_lexicon, default_lexicon};
    use crate::corpus::{examples_from, Conversation, Speaker, Utterance, Vocabulary};
    use crate::effects::{build_bundle, TrigramEffectProvider};
    use crate::model::{build_input, Model, TargetSpec};
    use rand::{Rng, SeedableRng};

    let say = |speaker: Speaker, text: &str, strategy: Option<usize>| Utterance {
        speaker,
        text: text.to_string(),
        strategy,
    };
    let conv = Conversation {
        id: "fd-fixture".to_string(),
        situation: "i have been sad since the breakup and my debt keeps growing".to_string(),
        utterances: vec![
            say(Speaker::Seeker, "i feel sad and lost lately", None),
            say(Speaker::Supporter, "tell me more about what happened", Some(0)),
            say(Speaker::Seeker, "the debt is getting worse every week", None),
            say(Speaker::Supporter, "that sounds really heavy to carry", Some(3)),
        ],
    };
    let corpus = vec![conv];
    let vocab = Vocabulary::build(&corpus, 1);
    let mut cfg = config.clone();
    cfg.vocab = vocab.size();
    let annotation = annotate_lexicon(&corpus[0], &default_lexicon())?;
    let provider = TrigramEffectProvider::new(cfg.effect_dim);
    let bundle = build_bundle(&corpus[0], &provider);
    let examples = examples_from(&corpus[0]);
    let ex = &examples[(corpus_seed as usize) % examples.len()];
    let input = build_input(ex, &vocab, &annotation, &bundle)?;
    let target = TargetSpec::from_example(ex, &vocab);

    let mut model: Model = Model::new(cfg, &vocab)?;
    let out = model.forward(&input, &target, None)?;
    model.graph.backward(out.loss)?;
    let params = model.parameters().to_vec();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, id)| {
            model
                .graph
                .grad(*id)
                .expect("parameters receive gradients")
                .to_vec()
        })
        .collect();
    let total: usize = analytic.iter().map(Vec::len).sum();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(pick_seed);
    let mut report = FdReport {
        worst: 0.0,
        parameter: String::new(),
        coordinate: 0,
        analytic: 0.0,
        finite_diff: 0.0,
    };
    for _ in 0..coords {
        let mut flat = (rng.random::<u64>() as usize) % total;
        let mut pi = 0usize;
        while flat >= analytic[pi].len() {
            flat -= analytic[pi].len();
            pi += 1;
        }
        let id = params[pi].1;
        let orig = model.graph.data(id)[flat];
        let mut probe = |v: f64| -> crate::error::Result<f64> {
            model.graph.apply_to_data(id, |data, _| data[flat] = v);
            model.reset_graph();
            let o = model.forward(&input, &target, None)?;
            model.graph.item(o.loss)
        };
        // A large step can straddle a relu kink (the straddle error saturates
        // at half the slope change, so it looks constant across large steps)
        // and a small step amplifies roundoff; both artifacts are
        // step-dependent, while a genuine backward bug disagrees at every
        // step. Refine only when the first estimate disagrees.
        let mut err = f64::INFINITY;
        let mut fd = 0.0f64;
        for h in [step, step / 10.0, step / 100.0] {
            let up = probe(orig + h)?;
            let down = probe(orig - h)?;
            let estimate = (up - down) / (2.0 * h);
            let e = rel_err(analytic[pi][flat], estimate);
            if e < err {
                err = e;
                fd = estimate;
            }
            if err < REFINE_THRESHOLD {
                break;
            }
        }
        model.graph.apply_to_data(id, |data, _| data[flat] = orig);
        if err > report.worst {
            report = FdReport {
                worst: err,
                parameter: params[pi].0.clone(),
                coordinate: flat,
                analytic: analytic[pi][flat],
                finite_diff: fd,
            };
        }
    }
    Ok(report)
}
