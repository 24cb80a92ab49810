//! The seven subcommands, each a thin orchestration of the core library:
//! load inputs, run one operation, write artifacts under the output
//! directory, archive the config that produced them.

use std::collections::BTreeMap;
use std::path::Path;

use cauesc_core::agreement::{aggregate_ab, parse_votes_csv};
use cauesc_core::cause::{
    default_lexicon, ingest_annotations, load_lexicon, resolve_annotations, write_annotations,
    CauseAnnotation,
};
use cauesc_core::corpus::{
    global_strategy_distribution, load_esconv, split_corpus, strategy_progress, Conversation,
    SplitManifest, Vocabulary, STRATEGIES,
};
use cauesc_core::effects::{
    build_bundle, cache_bundles, load_cached_bundles, EffectBundle, TrigramEffectProvider,
};
use cauesc_core::model::{build_generation_input, Model};
use cauesc_core::optim::Optimizer;
use cauesc_core::train::{
    clamp_input, evaluate, generate, prepare_examples, train, write_confusion_csv,
    write_loss_curve, PreparedExample,
};
use cauesc_core::{Error, Result};
use serde_json::json;

use crate::config::*;

fn load_corpus(rc: &RunConfig) -> Result<Vec<Conversation>> {
    let path = rc.corpus_path()?;
    with_path(path, load_esconv(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_with_path(path, e))
}

// ── prepare ─────────────────────────────────────────────────────────────

pub fn cmd_prepare(rc: &RunConfig) -> Result<()> {
    let conversations = load_corpus(rc)?;
    let manifest = split_corpus(conversations.len(), rc.split_ratios, rc.seed)?;
    let train_convs: Vec<Conversation> = manifest
        .train
        .iter()
        .map(|&i| conversations[i].clone())
        .collect();
    let vocab = Vocabulary::build(&train_convs, rc.vocab_min_count);
    rc.archive()?;
    let out = rc.out_dir()?;
    manifest.save(&out.join(SPLIT_FILE))?;
    vocab.save(&out.join(VOCAB_FILE))?;
    let summary = json!({
        "conversations": conversations.len(),
        "train": manifest.train.len(),
        "dev": manifest.dev.len(),
        "test": manifest.test.len(),
        "vocab": vocab.size(),
    });
    log(json!({"event": "prepare", "summary": summary}));
    println!("{summary}");
    Ok(())
}

// ── annotate ────────────────────────────────────────────────────────────

pub fn cmd_annotate(rc: &RunConfig) -> Result<()> {
    let conversations = load_corpus(rc)?;
    let lexicon = match &rc.lexicon {
        Some(p) => with_path(p, load_lexicon(p))?,
        None => default_lexicon(),
    };
    // An externally produced annotation file takes precedence per
    // conversation; the lexicon fills every gap.
    let ingested = match &rc.annotations {
        Some(p) => Some(with_path(p, ingest_annotations(p, &conversations))?),
        None => None,
    };
    let annotations = resolve_annotations(&conversations, &lexicon, ingested.as_ref())?;
    rc.archive()?;
    let path = rc.out_dir()?.join(ANNOTATIONS_FILE);
    write_annotations(&path, &annotations)?;
    let cued: usize = annotations
        .iter()
        .map(|a| a.flags.iter().filter(|&&f| f != 0).count())
        .sum();
    let total: usize = annotations.iter().map(|a| a.flags.len()).sum();
    log(json!({
        "event": "annotate",
        "conversations": annotations.len(),
        "cued_utterances": cued,
        "utterances": total,
    }));
    println!(
        "{}",
        json!({"conversations": annotations.len(), "cued_utterances": cued})
    );
    Ok(())
}

// ── cache-effects ───────────────────────────────────────────────────────

pub fn cmd_cache_effects(rc: &RunConfig) -> Result<()> {
    let conversations = load_corpus(rc)?;
    let provider = TrigramEffectProvider::new(rc.model.effect_dim);
    let bundles: BTreeMap<String, EffectBundle> = conversations
        .iter()
        .map(|c| (c.id.clone(), build_bundle(c, &provider)))
        .collect();
    rc.archive()?;
    let path = rc.out_dir()?.join(EFFECTS_FILE);
    cache_bundles(&path, &bundles)?;
    log(json!({
        "event": "cache-effects",
        "conversations": bundles.len(),
        "effect_dim": rc.model.effect_dim,
    }));
    println!(
        "{}",
        json!({"conversations": bundles.len(), "effect_dim": rc.model.effect_dim})
    );
    Ok(())
}

// ── shared artifact loading ─────────────────────────────────────────────

fn load_vocab(rc: &RunConfig) -> Result<Vocabulary> {
    let path = rc.out_dir()?.join(VOCAB_FILE);
    with_path(&path, Vocabulary::load(&path))
}

fn load_manifest(rc: &RunConfig, n: usize) -> Result<SplitManifest> {
    let path = rc.out_dir()?.join(SPLIT_FILE);
    let manifest = with_path(&path, SplitManifest::load(&path))?;
    let max = manifest
        .train
        .iter()
        .chain(&manifest.dev)
        .chain(&manifest.test)
        .max()
        .copied();
    if let Some(m) = max {
        if m >= n {
            return Err(Error::Schema(format!(
                "split manifest references conversation {m} but the corpus has {n}"
            )));
        }
    }
    Ok(manifest)
}

/// Annotations and effect bundles aligned index-for-index with the corpus.
fn load_aligned(
    rc: &RunConfig,
    conversations: &[Conversation],
) -> Result<(Vec<CauseAnnotation>, Vec<EffectBundle>)> {
    let ann_path = rc.annotations_path()?;
    let ingested = with_path(&ann_path, ingest_annotations(&ann_path, conversations))?;
    let annotations: Vec<CauseAnnotation> = conversations
        .iter()
        .map(|c| {
            ingested.get(&c.id).cloned().ok_or_else(|| {
                Error::Schema(format!(
                    "no cause annotation for conversation '{}' in {}",
                    c.id,
                    ann_path.display()
                ))
            })
        })
        .collect::<Result<_>>()?;
    let eff_path = rc.effects_path()?;
    let cached = with_path(&eff_path, load_cached_bundles(&eff_path))?;
    let bundles: Vec<EffectBundle> = conversations
        .iter()
        .map(|c| {
            cached.get(&c.id).cloned().ok_or_else(|| {
                Error::Schema(format!(
                    "no cached effects for conversation '{}' in {}",
                    c.id,
                    eff_path.display()
                ))
            })
        })
        .collect::<Result<_>>()?;
    if let Some(b) = bundles.iter().find(|b| b.dim != rc.model.effect_dim) {
        return Err(Error::Schema(format!(
            "effect cache has dimension {} but the model expects {}",
            b.dim, rc.model.effect_dim
        )));
    }
    Ok((annotations, bundles))
}

fn select<'a, T: Clone>(items: &'a [T], indices: &[usize]) -> Vec<T> {
    indices.iter().map(|&i| items[i].clone()).collect()
}

fn prepare_split(
    conversations: &[Conversation],
    annotations: &[CauseAnnotation],
    bundles: &[EffectBundle],
    vocab: &Vocabulary,
    indices: &[usize],
    model_config: &cauesc_core::model::ModelConfig,
) -> Result<Vec<PreparedExample>> {
    prepare_examples(
        &select(conversations, indices),
        vocab,
        &select(annotations, indices),
        &select(bundles, indices),
        model_config,
    )
}

// ── train ───────────────────────────────────────────────────────────────

pub fn cmd_train(rc: &RunConfig) -> Result<()> {
    let conversations = load_corpus(rc)?;
    let vocab = load_vocab(rc)?;
    let manifest = load_manifest(rc, conversations.len())?;
    let (annotations, bundles) = load_aligned(rc, &conversations)?;

    let mut mc = rc.model.clone();
    mc.vocab = vocab.size();
    let train_set = prepare_split(
        &conversations,
        &annotations,
        &bundles,
        &vocab,
        &manifest.train,
        &mc,
    )?;
    let dev_set = prepare_split(
        &conversations,
        &annotations,
        &bundles,
        &vocab,
        &manifest.dev,
        &mc,
    )?;
    log(json!({
        "event": "train-start",
        "train_examples": train_set.len(),
        "dev_examples": dev_set.len(),
        "parameters_seed": mc.seed,
        "variant": mc.variant.to_string(),
    }));

    let mut model: Model = Model::new(mc, &vocab)?;
    let mut optimizer = Optimizer::new(rc.optimizer.clone());
    rc.archive()?;
    let out = rc.out_dir()?;
    let ckpt = rc.checkpoint_path()?;
    let outcome = train(
        &mut model,
        &mut optimizer,
        &train_set,
        &dev_set,
        &rc.train,
        Some(&ckpt),
    )?;
    write_loss_curve(&out.join(LOSS_CURVE_FILE), &outcome.curve)?;
    let summary = json!({
        "steps": rc.train.steps,
        "final_loss": outcome.final_loss,
        "best_dev_step": outcome.best_dev.map(|(s, _)| s),
        "best_dev_loss": outcome.best_dev.map(|(_, l)| l),
        "train_examples": train_set.len(),
        "dev_examples": dev_set.len(),
    });
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_text(&out.join(TRAIN_SUMMARY_FILE), &text)?;
    log(json!({"event": "train-done", "summary": summary}));
    println!("{summary}");
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

pub fn cmd_eval(rc: &RunConfig, split: &str) -> Result<()> {
    let conversations = load_corpus(rc)?;
    let vocab = load_vocab(rc)?;
    let manifest = load_manifest(rc, conversations.len())?;
    let (annotations, bundles) = load_aligned(rc, &conversations)?;
    let ckpt = rc.checkpoint_path()?;
    let mut model: Model = with_path(&ckpt, Model::load_checkpoint(&ckpt, &vocab, None))?;

    let indices = match split {
        "train" => &manifest.train,
        "dev" => &manifest.dev,
        "test" => &manifest.test,
        other => {
            return Err(Error::Usage(format!(
                "unknown split '{other}' (expected train|dev|test)"
            )))
        }
    };
    // Budgets and variant come from the checkpoint, not the local config.
    let mc = model.config.clone();
    let examples = prepare_split(
        &conversations,
        &annotations,
        &bundles,
        &vocab,
        indices,
        &mc,
    )?;
    let output = evaluate(&mut model, &examples, &rc.decode)?;
    rc.archive()?;
    let out = rc.out_dir()?;
    let mut text = serde_json::to_string_pretty(&output.report)?;
    text.push('\n');
    write_text(&out.join(EVAL_REPORT_FILE), &text)?;
    write_confusion_csv(&out.join(CONFUSION_FILE), &output.confusion)?;
    log(json!({
        "event": "eval",
        "split": split,
        "examples": examples.len(),
        "total_tokens": output.total_tokens,
    }));
    print!("{text}");
    Ok(())
}

// ── generate ────────────────────────────────────────────────────────────

pub fn cmd_generate(rc: &RunConfig, conversation: Option<&str>) -> Result<()> {
    let conversations = load_corpus(rc)?;
    if conversations.is_empty() {
        return Err(Error::Usage("the corpus has no conversations".into()));
    }
    let vocab = load_vocab(rc)?;
    let (annotations, bundles) = load_aligned(rc, &conversations)?;
    let ckpt = rc.checkpoint_path()?;
    let mut model: Model = with_path(&ckpt, Model::load_checkpoint(&ckpt, &vocab, None))?;

    let idx = match conversation {
        Some(id) => conversations
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| Error::Index(format!("no conversation with id '{id}'")))?,
        None => 0,
    };
    let mut input =
        build_generation_input(&conversations[idx], &vocab, &annotations[idx], &bundles[idx])?;
    clamp_input(&mut input, &model.config);
    let output = generate(&mut model, &input, &rc.decode)?;
    rc.archive()?;
    let record = json!({
        "conversation_id": conversations[idx].id,
        "strategy": output.strategy,
        "strategy_name": STRATEGIES[output.strategy].name,
        "token_ids": output.token_ids,
        "text": output.text,
        "greedy": rc.decode.greedy,
        "seed": rc.decode.seed,
    });
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    write_text(&rc.out_dir()?.join(GENERATION_FILE), &text)?;
    log(json!({
        "event": "generate",
        "conversation_id": conversations[idx].id,
        "tokens": output.token_ids.len(),
    }));
    print!("{text}");
    Ok(())
}

// ── analyze ─────────────────────────────────────────────────────────────

pub fn cmd_analyze(rc: &RunConfig) -> Result<()> {
    let conversations = load_corpus(rc)?;
    let distribution = global_strategy_distribution(&conversations);
    let progress = strategy_progress(&conversations, rc.progress_intervals)?;
    rc.archive()?;
    let out = rc.out_dir()?;

    let mut dist_csv = String::from("strategy,share\n");
    for (s, share) in STRATEGIES.iter().zip(&distribution) {
        dist_csv.push_str(&format!("{},{}\n", s.name, share));
    }
    write_text(&out.join(DISTRIBUTION_FILE), &dist_csv)?;

    let names: Vec<&str> = STRATEGIES.iter().map(|s| s.name).collect();
    let mut prog_csv = format!("interval,{}\n", names.join(","));
    for (i, row) in progress.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        prog_csv.push_str(&format!("{},{}\n", i + 1, cells.join(",")));
    }
    write_text(&out.join(PROGRESS_FILE), &prog_csv)?;

    let mut summary = serde_json::Map::new();
    for (s, share) in STRATEGIES.iter().zip(&distribution) {
        summary.insert(s.name.to_string(), json!(share));
    }
    let summary = serde_json::Value::Object(summary);

    if let Some(votes_path) = &rc.votes {
        let text =
            std::fs::read_to_string(votes_path).map_err(|e| io_with_path(votes_path, e))?;
        let votes = parse_votes_csv(&text)?;
        let ab = aggregate_ab(&votes)?;
        let mut ab_text = serde_json::to_string_pretty(&ab)?;
        ab_text.push('\n');
        write_text(&out.join(AB_FILE), &ab_text)?;
        log(json!({"event": "analyze-votes", "votes": votes.len()}));
    }

    log(json!({
        "event": "analyze",
        "conversations": conversations.len(),
        "intervals": rc.progress_intervals,
    }));
    println!("{summary}");
    Ok(())
}
