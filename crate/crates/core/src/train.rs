//! Training loop, generation driver, and evaluation.
//!
//! Each optimizer step encodes the strategy descriptions once, runs
//! teacher-forced forwards over a deterministic shuffled batch, averages
//! the two loss components across the batch, and reports L = L_s + L_r as
//! an exact graph-level sum. Evaluation reuses the same teacher-forced
//! pass for perplexity (so PPL = exp of the mean per-token NLL of exactly
//! that pass) and generates responses for the text metrics.

use crate::corpus::{examples_from, Conversation, Vocabulary, NUM_STRATEGIES, STRATEGIES};
use crate::cause::CauseAnnotation;
use crate::effects::EffectBundle;
use crate::error::{Error, Result};
use crate::metrics::{bleu_n, distinct_n, perplexity, rouge_l_f1, EvalReport};
use crate::model::{build_input, Model, ModelConfig, ModelInput, TargetSpec, Variant};
use crate::optim::Optimizer;
use crate::sample::{greedy_step, sample_step, DecodeConfig, StepTrace};
use crate::tensor::TensorId;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

// ── prepared data ───────────────────────────────────────────────────────

/// One example with everything the model consumes, already truncated to
/// the model's context and target budgets.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub conversation_id: String,
    pub input: ModelInput,
    pub target: TargetSpec,
}

/// Clamp an input to the model's budgets: shrink the context (oldest
/// utterances first) and truncate the situation, keeping the cause flags
/// aligned throughout.
pub fn clamp_input(input: &mut ModelInput, config: &ModelConfig) {
    shrink_context(input, config.max_context);
    if input.situation_ids.len() > config.max_context {
        input.situation_ids.truncate(config.max_context);
        input.cause_situation.truncate(config.max_context);
    }
}

/// Drop oldest utterances (then trailing tokens) until the serialized
/// context fits `max_len`; the cause flags are trimmed in lockstep.
fn shrink_context(input: &mut ModelInput, max_len: usize) {
    while input.context.len() > max_len && input.context.utterance_count() > 1 {
        let cut = input
            .context
            .utterance_index
            .iter()
            .position(|&u| u != 0)
            .expect("more than one utterance");
        input.context.ids.drain(..cut);
        input.context.roles.drain(..cut);
        input.context.utterance_index.drain(..cut);
        for u in &mut input.context.utterance_index {
            *u -= 1;
        }
        input.cause_context.drain(..cut);
    }
    if input.context.len() > max_len {
        input.context.ids.truncate(max_len);
        input.context.roles.truncate(max_len);
        input.context.utterance_index.truncate(max_len);
        input.cause_context.truncate(max_len);
    }
}

/// Build every training example from parallel slices of conversations,
/// annotations, and effect bundles, truncating to the model's budgets.
pub fn prepare_examples(
    conversations: &[Conversation],
    vocab: &Vocabulary,
    annotations: &[CauseAnnotation],
    bundles: &[EffectBundle],
    config: &ModelConfig,
) -> Result<Vec<PreparedExample>> {
    if annotations.len() != conversations.len() || bundles.len() != conversations.len() {
        return Err(Error::Usage(format!(
            "{} conversations but {} annotations and {} effect bundles",
            conversations.len(),
            annotations.len(),
            bundles.len()
        )));
    }
    let mut out = Vec::new();
    for ((conv, ann), bundle) in conversations.iter().zip(annotations).zip(bundles) {
        for ex in examples_from(conv) {
            let mut input = build_input(&ex, vocab, ann, bundle)?;
            clamp_input(&mut input, config);
            let mut target = TargetSpec::from_example(&ex, vocab);
            if target.response_ids.len() > config.max_target {
                target.response_ids.truncate(config.max_target - 1);
                target.response_ids.push(vocab.eos_id());
            }
            out.push(PreparedExample {
                conversation_id: ex.conversation_id.clone(),
                input,
                target,
            });
        }
    }
    Ok(out)
}

// ── training ────────────────────────────────────────────────────────────

/// One reported optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub strategy_loss: f64,
    pub response_loss: f64,
    /// Exactly strategy_loss + response_loss as computed in the graph.
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate on dev every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Batch shuffling seed.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 500,
            batch_size: 5,
            eval_every: 50,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<LossReport>,
    /// (step, dev loss) of the retained checkpoint, when dev ran.
    pub best_dev: Option<(usize, f64)>,
    pub final_loss: f64,
}

/// Mean teacher-forced loss over a set of examples.
pub fn mean_loss(model: &mut Model, examples: &[PreparedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Usage("loss over an empty example set".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        model.reset_graph();
        let out = model.forward(&ex.input, &ex.target, None)?;
        total += model.graph.item(out.loss)?;
    }
    model.reset_graph();
    Ok(total / examples.len() as f64)
}

/// Run the optimizer for `cfg.steps` steps. When a dev set and checkpoint
/// path are given, the lowest-dev-loss parameters are saved there (the
/// final parameters otherwise).
pub fn train(
    model: &mut Model,
    optimizer: &mut Optimizer,
    train_set: &[PreparedExample],
    dev_set: &[PreparedExample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Usage("steps and batch_size must be positive".into()));
    }
    let params = model.parameters().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut pool: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut best_dev: Option<(usize, f64)> = None;
    model.set_train_mode(true);

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if pool.is_empty() {
                pool = (0..train_set.len()).collect();
                pool.shuffle(&mut rng);
            }
            batch.push(pool.pop().expect("pool refilled"));
        }

        model.reset_graph();
        let shared = model.encode_descriptions()?;
        let mut ls_sum: Option<TensorId> = None;
        let mut lr_sum: Option<TensorId> = None;
        let mut tokens = 0usize;
        for &i in &batch {
            let ex = &train_set[i];
            let out = model.forward(&ex.input, &ex.target, Some(&shared))?;
            tokens += out.token_count;
            ls_sum = Some(match ls_sum {
                None => out.strategy_loss,
                Some(acc) => model.graph.add(acc, out.strategy_loss)?,
            });
            lr_sum = Some(match lr_sum {
                None => out.response_loss,
                Some(acc) => model.graph.add(acc, out.response_loss)?,
            });
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let ls_mean = model.graph.scale(ls_sum.expect("nonempty batch"), inv);
        let lr_mean = model.graph.scale(lr_sum.expect("nonempty batch"), inv);
        let total = model.graph.add(ls_mean, lr_mean)?;

        let report = LossReport {
            step,
            strategy_loss: model.graph.item(ls_mean)?,
            response_loss: model.graph.item(lr_mean)?,
            loss: model.graph.item(total)?,
            tokens,
        };
        if !report.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: L_s={}, L_r={}",
                report.strategy_loss, report.response_loss
            )));
        }
        model.graph.backward(total)?;
        optimizer.step(&mut model.graph, &params)?;
        optimizer.zero_grads(&mut model.graph, &params);
        curve.push(report);

        let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if (due || step == cfg.steps) && !dev_set.is_empty() {
            model.set_train_mode(false);
            let dl = mean_loss(model, dev_set)?;
            model.set_train_mode(true);
            if best_dev.is_none_or(|(_, best)| dl < best) {
                best_dev = Some((step, dl));
                if let Some(path) = checkpoint {
                    model.save_checkpoint(path)?;
                }
            }
        }
    }
    model.set_train_mode(false);
    model.reset_graph();
    if best_dev.is_none() {
        if let Some(path) = checkpoint {
            model.save_checkpoint(path)?;
        }
    }
    Ok(TrainOutcome {
        final_loss: curve.last().expect("at least one step").loss,
        curve,
        best_dev,
    })
}

/// Loss curve CSV: step,L_s,L_r,L.
pub fn write_loss_curve(path: &Path, curve: &[LossReport]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,L_s,L_r,L")?;
    for p in curve {
        writeln!(f, "{},{},{},{}", p.step, p.strategy_loss, p.response_loss, p.loss)?;
    }
    Ok(())
}

// ── generation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub strategy: usize,
    /// Generated response ids, without the terminating end marker.
    pub token_ids: Vec<usize>,
    pub text: String,
    /// Per-step candidate instrumentation (empty under greedy decoding).
    pub traces: Vec<StepTrace>,
}

/// Generate the next supporter turn for a prepared input. Non-single
/// variants pick the strategy as argmax of the selection distribution and
/// keep its soft mixture for decoding; the single variant emits a
/// strategy marker at the first step (always by argmax over the marker
/// columns) and continues from it.
pub fn generate(
    model: &mut Model,
    input: &ModelInput,
    dc: &DecodeConfig,
) -> Result<GenerationOutput> {
    dc.validate()?;
    model.set_train_mode(false);
    model.reset_graph();
    let enc = model.encode(input, None)?;
    let (x, _segments) = model.build_x(&enc)?;
    let vocab_size = model.config.vocab;
    let (eos, bos) = (model.vocab().eos_id(), model.vocab().bos_id());

    let single = model.config.variant == Variant::Single;
    let (p, mut strategy) = if single {
        (None, 0)
    } else {
        let p = model.select_strategy(&enc)?;
        let probs = model.graph.data(p);
        let strategy = (1..NUM_STRATEGIES).fold(0, |best, i| {
            if probs[i] > probs[best] {
                i
            } else {
                best
            }
        });
        (Some(p), strategy)
    };

    let mut prefix = vec![bos];
    let mut rng = ChaCha8Rng::seed_from_u64(dc.seed);
    let mut ids = Vec::new();
    let mut traces = Vec::new();
    let mark = model.graph.mark();

    if single {
        let logits = model.decode(&prefix, x, &enc, None, None)?;
        let row = model.graph.data(logits).to_vec();
        let first = model.vocab().marker_id(0);
        strategy = (1..NUM_STRATEGIES).fold(0, |best, i| {
            if row[first + i] > row[first + best] {
                i
            } else {
                best
            }
        });
        prefix.push(model.vocab().marker_id(strategy));
        model.graph.truncate_to(mark);
    }

    for _ in 0..dc.max_new_tokens {
        let logits = model.decode(&prefix, x, &enc, p, None)?;
        let data = model.graph.data(logits);
        let row = data[data.len() - vocab_size..].to_vec();
        model.graph.truncate_to(mark);
        let next = if dc.greedy {
            greedy_step(&row, &ids, dc)?
        } else {
            let trace = sample_step(&row, &ids, dc, &mut rng)?;
            let chosen = trace.chosen;
            traces.push(trace);
            chosen
        };
        if next == eos {
            break;
        }
        prefix.push(next);
        ids.push(next);
    }
    model.reset_graph();
    let text = model.vocab().decode(&ids)?.join(" ");
    Ok(GenerationOutput {
        strategy,
        token_ids: ids,
        text,
        traces,
    })
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    /// confusion[annotated][predicted].
    pub confusion: [[usize; NUM_STRATEGIES]; NUM_STRATEGIES],
    pub total_nll: f64,
    pub total_tokens: usize,
}

/// Teacher-forced strategy accuracy and perplexity plus text metrics over
/// generated responses.
pub fn evaluate(
    model: &mut Model,
    examples: &[PreparedExample],
    dc: &DecodeConfig,
) -> Result<EvalOutput> {
    if examples.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    model.set_train_mode(false);
    let mut confusion = [[0usize; NUM_STRATEGIES]; NUM_STRATEGIES];
    let mut hits = 0usize;
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    let mut hyps = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    for ex in examples {
        model.reset_graph();
        let out = model.forward(&ex.input, &ex.target, None)?;
        let pred = (1..NUM_STRATEGIES).fold(0, |best, i| {
            if out.strategy_scores[i] > out.strategy_scores[best] {
                i
            } else {
                best
            }
        });
        confusion[ex.target.strategy][pred] += 1;
        if pred == ex.target.strategy {
            hits += 1;
        }
        total_nll += out.nll_sum;
        total_tokens += out.token_count;

        let generated = generate(model, &ex.input, dc)?;
        hyps.push(model.vocab().decode(&generated.token_ids)?);
        let ref_ids = &ex.target.response_ids[..ex.target.response_ids.len() - 1];
        refs.push(model.vocab().decode(ref_ids)?);
    }
    model.reset_graph();
    let report = EvalReport {
        acc: hits as f64 / examples.len() as f64,
        ppl: perplexity(total_nll, total_tokens)?,
        rouge_l: rouge_l_f1(&hyps, &refs)?,
        bleu_2: bleu_n(&hyps, &refs, 2)?,
        bleu_3: bleu_n(&hyps, &refs, 3)?,
        bleu_4: bleu_n(&hyps, &refs, 4)?,
        distinct_1: distinct_n(&hyps, 1)?,
        distinct_2: distinct_n(&hyps, 2)?,
    };
    Ok(EvalOutput {
        report,
        confusion,
        total_nll,
        total_tokens,
    })
}

/// Confusion counts as CSV with strategy names on both axes.
pub fn write_confusion_csv(
    path: &Path,
    confusion: &[[usize; NUM_STRATEGIES]; NUM_STRATEGIES],
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let names: Vec<&str> = STRATEGIES.iter().map(|s| s.name).collect();
    writeln!(f, "annotated/predicted,{}", names.join(","))?;
    for (row, name) in confusion.iter().zip(&names) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        writeln!(f, "{},{}", name, cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cause::{annotate_lexicon, default_lexicon};
    use crate::corpus::synthetic_corpus;
    use crate::effects::{build_bundle, TrigramEffectProvider};
    use crate::optim::OptimConfig;

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            hidden: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn: 32,
            vocab,
            effect_dim: 8,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    struct Setup {
        vocab: Vocabulary,
        examples: Vec<PreparedExample>,
        config: ModelConfig,
    }

    fn setup(n: usize) -> Setup {
        let convs = synthetic_corpus(n, 3);
        let vocab = Vocabulary::build(&convs, 1);
        let lexicon = default_lexicon();
        let provider = TrigramEffectProvider::new(8);
        let annotations: Vec<_> = convs
            .iter()
            .map(|c| annotate_lexicon(c, &lexicon).unwrap())
            .collect();
        let bundles: Vec<_> = convs.iter().map(|c| build_bundle(c, &provider)).collect();
        let config = tiny_config(vocab.size());
        let examples = prepare_examples(&convs, &vocab, &annotations, &bundles, &config).unwrap();
        Setup {
            vocab,
            examples,
            config,
        }
    }

    #[test]
    fn preparation_emits_one_example_per_supporter_turn() {
        let s = setup(6);
        // Synthetic conversations have exactly one supporter turn each.
        assert_eq!(s.examples.len(), 6);
        for ex in &s.examples {
            assert_eq!(ex.input.cause_context.len(), ex.input.context.len());
            assert_eq!(
                *ex.target.response_ids.last().unwrap(),
                s.vocab.eos_id()
            );
        }
    }

    #[test]
    fn preparation_truncates_to_model_budgets() {
        let convs = synthetic_corpus(2, 9);
        let vocab = Vocabulary::build(&convs, 1);
        let provider = TrigramEffectProvider::new(8);
        let lexicon = default_lexicon();
        let annotations: Vec<_> = convs
            .iter()
            .map(|c| annotate_lexicon(c, &lexicon).unwrap())
            .collect();
        let bundles: Vec<_> = convs.iter().map(|c| build_bundle(c, &provider)).collect();
        let mut config = tiny_config(vocab.size());
        config.max_context = 4;
        config.max_target = 3;
        let examples = prepare_examples(&convs, &vocab, &annotations, &bundles, &config).unwrap();
        for ex in &examples {
            assert!(ex.input.context.len() <= 4);
            assert_eq!(ex.input.cause_context.len(), ex.input.context.len());
            assert!(ex.target.response_ids.len() <= 3);
            assert_eq!(*ex.target.response_ids.last().unwrap(), vocab.eos_id());
        }
    }

    #[test]
    fn training_reduces_the_loss_and_reports_exact_sums() {
        let s = setup(4);
        let mut model = Model::new(s.config.clone(), &s.vocab).unwrap();
        let mut opt = Optimizer::new(OptimConfig {
            learning_rate: 3e-3,
            warmup_steps: 5,
            ..OptimConfig::default()
        });
        let cfg = TrainConfig {
            steps: 40,
            batch_size: 2,
            eval_every: 0,
            shuffle_seed: 1,
        };
        let out = train(&mut model, &mut opt, &s.examples, &[], &cfg, None).unwrap();
        assert_eq!(out.curve.len(), 40);
        for p in &out.curve {
            assert!(p.loss.is_finite() && p.strategy_loss >= 0.0 && p.response_loss >= 0.0);
            assert!((p.loss - (p.strategy_loss + p.response_loss)).abs() < 1e-12);
        }
        assert!(
            out.final_loss < out.curve[0].loss,
            "no progress: {} -> {}",
            out.curve[0].loss,
            out.final_loss
        );
    }

    #[test]
    fn training_is_deterministic_under_a_fixed_seed() {
        let s = setup(3);
        let run = || {
            let mut model = Model::new(s.config.clone(), &s.vocab).unwrap();
            let mut opt = Optimizer::new(OptimConfig {
                learning_rate: 1e-3,
                ..OptimConfig::default()
            });
            let cfg = TrainConfig {
                steps: 10,
                batch_size: 2,
                eval_every: 0,
                shuffle_seed: 7,
            };
            let out = train(&mut model, &mut opt, &s.examples, &[], &cfg, None).unwrap();
            let bits: Vec<u64> = model
                .parameters()
                .iter()
                .flat_map(|(_, id)| model.graph.data(*id).iter().map(|v| v.to_bits()))
                .collect();
            (out.curve, bits)
        };
        let (curve_a, bits_a) = run();
        let (curve_b, bits_b) = run();
        assert_eq!(curve_a, curve_b);
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn a_poisoned_parameter_aborts_with_a_numeric_error() {
        let s = setup(2);
        let mut model = Model::new(s.config.clone(), &s.vocab).unwrap();
        let id = model
            .parameters()
            .iter()
            .find(|(name, _)| name == "out_proj.w")
            .map(|(_, id)| *id)
            .unwrap();
        let (r, c) = model.graph.shape(id);
        model.graph.set_data(id, vec![1e308; r * c]).unwrap();
        let mut opt = Optimizer::new(OptimConfig::default());
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 1,
            eval_every: 0,
            shuffle_seed: 0,
        };
        let err = train(&mut model, &mut opt, &s.examples, &[], &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err:?}");
    }

    #[test]
    fn best_dev_checkpoint_is_saved_and_loadable() {
        let s = setup(3);
        let mut model = Model::new(s.config.clone(), &s.vocab).unwrap();
        let mut opt = Optimizer::new(OptimConfig {
            learning_rate: 1e-3,
            ..OptimConfig::default()
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.cesc");
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 2,
            eval_every: 3,
            shuffle_seed: 2,
        };
        let out = train(
            &mut model,
            &mut opt,
            &s.examples[..2],
            &s.examples[2..],
            &cfg,
            Some(&path),
        )
        .unwrap();
        assert!(out.best_dev.is_some());
        let loaded: Model = Model::load_checkpoint(&path, &s.vocab, Some(&s.config)).unwrap();
        assert_eq!(loaded.config, s.config);
    }

    #[test]
    fn loss_curve_csv_has_the_contracted_columns() {
        let curve = vec![LossReport {
            step: 1,
            strategy_loss: 2.0,
            response_loss: 3.5,
            loss: 5.5,
            tokens: 12,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_loss_curve(&path, &curve).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,L_s,L_r,L\n1,2,3.5,5.5\n");
    }

    #[test]
    fn generation_is_reproducible_and_stays_in_vocabulary() {
        let s = setup(3);
        let mut model = Model::new(s.config.clone(), &s.vocab).unwrap();
        let dc = DecodeConfig {
            max_new_tokens: 8,
            seed: 5,
            ..DecodeConfig::default()
        };
        let a = generate(&mut model, &s.examples[0].input, &dc).unwrap();
        let b = generate(&mut model, &s.examples[0].input, &dc).unwrap();
        assert_eq!(a.token_ids, b.token_ids);
        assert_eq!(a.strategy, b.strategy);
        assert!(a.token_ids.len() <= 8);
        assert!(a.token_ids.iter().all(|&t| t < s.vocab.size()));
        assert_eq!(a.traces.len(), a.token_ids.len().max(1).min(8));
        for (t, &id) in a.traces.iter().zip(&a.token_ids) {
            assert_eq!(t.chosen, id);
            assert!(t.candidates.contains(&id));
        }

        let greedy = DecodeConfig {
            greedy: true,
            ..dc.clone()
        };
        let g1 = generate(&mut model, &s.examples[0].input, &greedy).unwrap();
        let g2 = generate(&mut model, &s.examples[0].input, &greedy).unwrap();
        assert_eq!(g1.token_ids, g2.token_ids);
        assert!(g1.traces.is_empty());
    }

    #[test]
    fn single_variant_generation_reports_the_marker_strategy() {
        let s = setup(2);
        let mut cfg = s.config.clone();
        cfg.variant = Variant::Single;
        let mut model = Model::new(cfg, &s.vocab).unwrap();
        let dc = DecodeConfig {
            max_new_tokens: 6,
            greedy: true,
            ..DecodeConfig::default()
        };
        let out = generate(&mut model, &s.examples[0].input, &dc).unwrap();
        assert!(out.strategy < NUM_STRATEGIES);
        assert!(out.token_ids.len() <= 6);
    }

    #[test]
    fn evaluation_report_is_internally_consistent() {
        let s = setup(4);
        let mut model = Model::new(s.config.clone(), &s.vocab).unwrap();
        let dc = DecodeConfig {
            max_new_tokens: 6,
            greedy: true,
            ..DecodeConfig::default()
        };
        let out = evaluate(&mut model, &s.examples, &dc).unwrap();
        let r = &out.report;
        for v in [r.acc, r.rouge_l, r.bleu_2, r.bleu_3, r.bleu_4, r.distinct_1, r.distinct_2] {
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
        assert!(r.ppl >= 1.0 && r.ppl.is_finite());
        // PPL is exp of the mean per-token NLL of the same pass.
        let expected = (out.total_nll / out.total_tokens as f64).exp();
        assert_eq!(r.ppl.to_bits(), expected.to_bits());
        // Confusion rows partition the examples by annotated strategy.
        let total: usize = out.confusion.iter().flatten().sum();
        assert_eq!(total, s.examples.len());
        let diag: usize = (0..NUM_STRATEGIES).map(|i| out.confusion[i][i]).sum();
        assert!((r.acc - diag as f64 / s.examples.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn confusion_csv_labels_both_axes() {
        let mut confusion = [[0usize; NUM_STRATEGIES]; NUM_STRATEGIES];
        confusion[2][3] = 4;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("confusion.csv");
        write_confusion_csv(&path, &confusion).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 9);
        assert!(lines[0].starts_with("annotated/predicted,Question,"));
        assert!(lines[3].starts_with("Reflection of Feelings,"));
        assert!(lines[3].split(',').nth(4).unwrap() == "4");
    }
}
