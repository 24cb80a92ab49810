//! The full model: cause-aware encoding of situation and context,
//! commonsense-effect refinement, key-value strategy selection, and a
//! decoder whose last layer mixes independently parameterized per-strategy
//! executors weighted by the strategy distribution.

use crate::attention::{
    attend, AttentionParams, CrossAttBlock, DecoderLayer, Diagnostics, EncoderLayer, NormParams,
    ParamBuilder,
};
use crate::cause::{expand_to_tokens, CauseAnnotation};
use crate::container::{read_container, write_container, Matrix};
use crate::corpus::{
    history_ids, serialize_context, Conversation, SerializedContext, TrainingExample, Vocabulary,
    NUM_STRATEGIES, STRATEGIES,
};
use crate::effects::EffectBundle;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Reduction, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

// ── configuration ───────────────────────────────────────────────────────

/// Strategy-modeling variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Per-strategy executors attending [X; encoded description_i].
    Full,
    /// Executors attend [X; label embedding_i] instead of descriptions.
    Label,
    /// One extra cross-attention over [X; Σ p_i · pooled description_i].
    Multi,
    /// No executors; the strategy is a marker token generated first.
    Single,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "label" => Ok(Variant::Label),
            "multi" => Ok(Variant::Multi),
            "single" => Ok(Variant::Single),
            other => Err(Error::Usage(format!(
                "unknown variant '{other}' (expected full|label|multi|single)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::Label => "label",
            Variant::Multi => "multi",
            Variant::Single => "single",
        };
        write!(f, "{s}")
    }
}

fn default_true() -> bool {
    true
}

/// Structural toggles; each removes one input path from the forward pass
/// without changing the parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Cause masks enter the encoder; off means plain self-attention.
    #[serde(default = "default_true")]
    pub use_cause: bool,
    /// Intra-relation effects (situation + seeker utterances).
    #[serde(default = "default_true")]
    pub use_intra: bool,
    /// Inter-relation effects (supporter utterances).
    #[serde(default = "default_true")]
    pub use_inter: bool,
    /// The executor sublayer in the last decoder layer.
    #[serde(default = "default_true")]
    pub use_executors: bool,
}

impl Default for Ablation {
    fn default() -> Ablation {
        Ablation {
            use_cause: true,
            use_intra: true,
            use_inter: true,
            use_executors: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub strategies: usize,
    pub effect_dim: usize,
    pub max_context: usize,
    pub max_target: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub ablation: Ablation,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            hidden: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn: 256,
            vocab: 0,
            strategies: NUM_STRATEGIES,
            effect_dim: 64,
            max_context: 256,
            max_target: 64,
            dropout: 0.0,
            variant: Variant::Full,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Usage(format!(
                "hidden {} not divisible into {} heads",
                self.hidden, self.heads
            )));
        }
        if self.strategies != NUM_STRATEGIES {
            return Err(Error::Usage(format!(
                "strategy count must be {NUM_STRATEGIES}, got {}",
                self.strategies
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Usage("need at least one layer on each side".into()));
        }
        if self.vocab < 15 {
            return Err(Error::Usage(format!(
                "vocab size {} is smaller than the reserved token block",
                self.vocab
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Usage(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }
}

// ── inputs ──────────────────────────────────────────────────────────────

/// Everything the model consumes for one example, already tokenized,
/// masked, and restricted to the example's context.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub situation_ids: Vec<usize>,
    pub context: SerializedContext,
    pub history_ids: Vec<usize>,
    /// Token-level cause flags over `context.ids`.
    pub cause_context: Vec<bool>,
    /// Token-level cause flags over `situation_ids` (all true by default:
    /// the situation describes the problem and is causal).
    pub cause_situation: Vec<bool>,
    pub effects: EffectBundle,
}

fn nonempty_ids(ids: Vec<usize>, vocab: &Vocabulary) -> Vec<usize> {
    if ids.is_empty() {
        vec![vocab.bos_id()]
    } else {
        ids
    }
}

/// Assemble the model input for a training example. The example-level
/// target (the last context utterance, a seeker turn) is always flagged in
/// the cause mask, mirroring the conversation-level annotation rule.
pub fn build_input(
    example: &TrainingExample,
    vocab: &Vocabulary,
    annotation: &CauseAnnotation,
    bundle: &EffectBundle,
) -> Result<ModelInput> {
    if example.target_index > annotation.flags.len() {
        return Err(Error::Index(format!(
            "annotation for conversation {} covers {} utterances, example targets index {}",
            example.conversation_id,
            annotation.flags.len(),
            example.target_index
        )));
    }
    let context = serialize_context(&example.context, vocab)?;
    let mut flags = annotation.flags[..example.target_index].to_vec();
    if let Some(last) = flags.last_mut() {
        *last = 1;
    }
    let cause_context = expand_to_tokens(&flags, &context)?;
    let situation_ids = nonempty_ids(vocab.encode_text(&example.situation), vocab);
    let cause_situation = vec![true; situation_ids.len()];
    Ok(ModelInput {
        situation_ids,
        context,
        history_ids: history_ids(&example.history, vocab),
        cause_context,
        cause_situation,
        effects: bundle.restricted_to(example.target_index),
    })
}

/// Assemble the input for generating the next supporter turn after a full
/// conversation.
pub fn build_generation_input(
    conversation: &Conversation,
    vocab: &Vocabulary,
    annotation: &CauseAnnotation,
    bundle: &EffectBundle,
) -> Result<ModelInput> {
    let context = serialize_context(&conversation.utterances, vocab)?;
    let cause_context = expand_to_tokens(&annotation.flags, &context)?;
    let history: Vec<usize> = conversation
        .utterances
        .iter()
        .filter_map(|u| u.strategy)
        .collect();
    let situation_ids = nonempty_ids(vocab.encode_text(&conversation.situation), vocab);
    let cause_situation = vec![true; situation_ids.len()];
    Ok(ModelInput {
        situation_ids,
        context,
        history_ids: history_ids(&history, vocab),
        cause_context,
        cause_situation,
        effects: bundle.clone(),
    })
}

/// The supervised target: response token ids (ending in `[EOS]`) and the
/// annotated strategy.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    pub response_ids: Vec<usize>,
    pub strategy: usize,
}

impl TargetSpec {
    pub fn from_example(example: &TrainingExample, vocab: &Vocabulary) -> TargetSpec {
        let mut ids = vocab.encode_text(&example.response);
        ids.push(vocab.eos_id());
        TargetSpec {
            response_ids: ids,
            strategy: example.strategy,
        }
    }
}

// ── encodings and outputs ───────────────────────────────────────────────

/// Description encodings shared across examples within one optimizer step
/// (parameters only change at step boundaries).
#[derive(Debug, Clone)]
pub struct SharedContext {
    pub h_d: Vec<TensorId>,
}

/// Encoder-side tensors for one example.
#[derive(Debug, Clone)]
pub struct EncodedContext {
    pub h_q: TensorId,
    pub h_c: TensorId,
    /// Strategy-history encoding; absent under the single variant.
    pub h_s: Option<TensorId>,
    /// Encoded strategy descriptions; empty unless the variant reads them.
    pub h_d: Vec<TensorId>,
    /// Effect rows refined by cross-attention over the context encoding.
    pub k_ec_hat: Option<TensorId>,
    /// Effect rows refined by cross-attention over the situation encoding.
    pub k_es_hat: Option<TensorId>,
}

/// Named spans of the concatenated causal representation X, in row order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub segments: Vec<(String, usize)>,
}

impl SegmentRecord {
    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|(_, n)| n).sum()
    }
}

/// Everything a forward pass reports. Graph ids stay valid until the graph
/// is reset.
#[derive(Debug)]
pub struct ForwardOutput {
    pub strategy_loss: TensorId,
    /// Negative log-likelihood summed over the response tokens.
    pub response_loss: TensorId,
    /// strategy_loss + response_loss, added as graph scalars.
    pub loss: TensorId,
    /// Pre-softmax strategy scores (marker-column logits of the first
    /// decoding position under the single variant); argmax gives the
    /// predicted strategy.
    pub strategy_scores: Vec<f64>,
    pub token_logits: TensorId,
    /// Summed response-token negative log-likelihood and token count, for
    /// corpus perplexity.
    pub nll_sum: f64,
    pub token_count: usize,
}

// ── the model ───────────────────────────────────────────────────────────

pub struct Model<S: Scalar = f64> {
    pub config: ModelConfig,
    pub graph: Graph<S>,
    pub diag: Diagnostics,
    names: Vec<(String, TensorId)>,
    vocab: Vocabulary,
    desc_ids: Vec<Vec<usize>>,

    tok_emb: TensorId,
    pos_emb: TensorId,
    pos_rows: usize,
    enc_layers: Vec<EncoderLayer>,
    dec_layers: Vec<DecoderLayer>,
    effect_w: TensorId,
    effect_b: TensorId,
    effect_norm: NormParams,
    interaction: CrossAttBlock,
    strategy_keys: Option<TensorId>,
    executors: Vec<AttentionParams>,
    executor_norm: Option<NormParams>,
    label_emb: Option<TensorId>,
    multi_block: Option<CrossAttBlock>,
    out_w: TensorId,
    out_b: TensorId,

    train_mode: bool,
    dropout_rng: ChaCha8Rng,
}

const INIT_STD: f64 = 0.02;

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, vocab: &Vocabulary) -> Result<Model<S>> {
        config.validate()?;
        if config.vocab != vocab.size() {
            return Err(Error::Usage(format!(
                "config vocab {} does not match vocabulary size {}",
                config.vocab,
                vocab.size()
            )));
        }
        let desc_ids: Vec<Vec<usize>> = STRATEGIES
            .iter()
            .map(|s| nonempty_ids(vocab.encode_text(s.description), vocab))
            .collect();
        let max_desc = desc_ids.iter().map(Vec::len).max().unwrap_or(1);
        let pos_rows = config
            .max_context
            .max(config.max_target + 2)
            .max(max_desc);

        let mut graph = Graph::new();
        let mut pb = ParamBuilder::new(&mut graph, config.seed, INIT_STD);
        let h = config.hidden;

        let tok_emb = pb.normal("tok_emb", config.vocab, h)?;
        let pos_emb = pb.normal("pos_emb", pos_rows, h)?;
        let enc_layers = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut pb, &format!("enc.{i}"), h, config.heads, config.ffn))
            .collect::<Result<Vec<_>>>()?;
        let dec_layers = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut pb, &format!("dec.{i}"), h, config.heads, config.ffn))
            .collect::<Result<Vec<_>>>()?;
        let effect_w = pb.normal("effect_proj.w", config.effect_dim, h)?;
        let effect_b = pb.constant("effect_proj.b", 1, h, 0.0)?;
        let effect_norm = NormParams::new(&mut pb, "effect_proj.norm", h)?;
        let interaction = CrossAttBlock::new(&mut pb, "interaction", h, config.heads)?;

        let needs_memory = config.variant != Variant::Single;
        let strategy_keys = if needs_memory {
            Some(pb.normal("strategy_keys", config.strategies, 2 * h)?)
        } else {
            None
        };
        let mut executors = Vec::new();
        let mut executor_norm = None;
        if matches!(config.variant, Variant::Full | Variant::Label) {
            for i in 0..config.strategies {
                executors.push(AttentionParams::new(
                    &mut pb,
                    &format!("exec.{i}"),
                    h,
                    config.heads,
                )?);
            }
            executor_norm = Some(NormParams::new(&mut pb, "exec_norm", h)?);
        }
        let label_emb = if config.variant == Variant::Label {
            Some(pb.normal("label_emb", config.strategies, h)?)
        } else {
            None
        };
        let multi_block = if config.variant == Variant::Multi {
            Some(CrossAttBlock::new(&mut pb, "multi", h, config.heads)?)
        } else {
            None
        };
        let out_w = pb.normal("out_proj.w", h, config.vocab)?;
        let out_b = pb.constant("out_proj.b", 1, config.vocab, 0.0)?;

        let names = pb.into_names();
        graph.mark_persistent();

        Ok(Model {
            dropout_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xd20),
            config,
            graph,
            diag: Diagnostics::new(),
            names,
            vocab: vocab.clone(),
            desc_ids,
            tok_emb,
            pos_emb,
            pos_rows,
            enc_layers,
            dec_layers,
            effect_w,
            effect_b,
            effect_norm,
            interaction,
            strategy_keys,
            executors,
            executor_norm,
            label_emb,
            multi_block,
            out_w,
            out_b,
            train_mode: false,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Named parameters in creation order.
    pub fn parameters(&self) -> &[(String, TensorId)] {
        &self.names
    }

    pub fn set_train_mode(&mut self, on: bool) {
        self.train_mode = on;
    }

    /// Drop all non-parameter nodes (activations from previous passes).
    pub fn reset_graph(&mut self) {
        let mark = self.graph.persistent_mark();
        self.graph.truncate_to(mark);
    }

    // ── building blocks ────────────────────────────────────────────────

    fn embed(&mut self, ids: &[usize]) -> Result<TensorId> {
        if ids.len() > self.pos_rows {
            return Err(Error::Usage(format!(
                "sequence of {} tokens exceeds the position table ({})",
                ids.len(),
                self.pos_rows
            )));
        }
        let tok = self.graph.embedding(self.tok_emb, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = self.graph.embedding(self.pos_emb, &positions)?;
        let sum = self.graph.add(tok, pos)?;
        if self.train_mode && self.config.dropout > 0.0 {
            self.graph.dropout(sum, self.config.dropout, &mut self.dropout_rng)
        } else {
            Ok(sum)
        }
    }

    fn run_encoder(&mut self, x: TensorId, cause: Option<&[bool]>) -> Result<TensorId> {
        let layers = self.enc_layers.clone();
        let mut h = x;
        for layer in &layers {
            h = layer.forward(&mut self.graph, h, cause, None, &self.diag)?;
        }
        Ok(h)
    }

    fn encode_sequence(&mut self, ids: &[usize], cause: Option<&[bool]>) -> Result<TensorId> {
        let emb = self.embed(ids)?;
        self.run_encoder(emb, cause)
    }

    /// Encode the eight strategy descriptions (no cause attention). Done
    /// once per optimizer step and shared across the batch.
    pub fn encode_descriptions(&mut self) -> Result<SharedContext> {
        let mut h_d = Vec::with_capacity(self.desc_ids.len());
        if matches!(self.config.variant, Variant::Full | Variant::Multi) {
            let all = self.desc_ids.clone();
            for ids in &all {
                h_d.push(self.encode_sequence(ids, None)?);
            }
        }
        Ok(SharedContext { h_d })
    }

    /// Project effect rows to the hidden size and refine them by
    /// cross-attention over `memory`. `None` when there are no rows.
    fn refine_effects(
        &mut self,
        rows: &[Vec<f64>],
        memory: TensorId,
    ) -> Result<Option<TensorId>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let dim = self.config.effect_dim;
        let data: Vec<S> = rows
            .iter()
            .flat_map(|r| r.iter().map(|v| S::from_f64(*v)))
            .collect();
        let raw = self.graph.leaf(rows.len(), dim, data)?;
        let proj = self.graph.matmul(raw, self.effect_w)?;
        let proj = self.graph.add_bias(proj, self.effect_b)?;
        let proj = self.effect_norm.apply(&mut self.graph, proj)?;
        let interaction = self.interaction.clone();
        Ok(Some(interaction.apply(
            &mut self.graph,
            proj,
            Some(memory),
            None,
            &self.diag,
        )?))
    }

    /// Encode one example: situation and context (cause-aware), strategy
    /// history and descriptions (plain), and the refined effect rows.
    pub fn encode(
        &mut self,
        input: &ModelInput,
        shared: Option<&SharedContext>,
    ) -> Result<EncodedContext> {
        if input.context.is_empty() {
            return Err(Error::Usage("cannot encode an empty context".into()));
        }
        if input.context.len() > self.config.max_context {
            return Err(Error::Usage(format!(
                "context of {} tokens exceeds max_context {}",
                input.context.len(),
                self.config.max_context
            )));
        }
        if input.cause_context.len() != input.context.len()
            || input.cause_situation.len() != input.situation_ids.len()
        {
            return Err(Error::Index(
                "cause masks must align with their token sequences".into(),
            ));
        }
        let use_cause = self.config.ablation.use_cause;
        let h_q = self.encode_sequence(
            &input.situation_ids,
            use_cause.then_some(&input.cause_situation[..]),
        )?;
        let h_c = self.encode_sequence(
            &input.context.ids,
            use_cause.then_some(&input.cause_context[..]),
        )?;
        let h_s = if self.config.variant != Variant::Single {
            Some(self.encode_sequence(&input.history_ids, None)?)
        } else {
            None
        };
        let h_d = match shared {
            Some(s) => s.h_d.clone(),
            None => self.encode_descriptions()?.h_d,
        };

        let mut ec_rows: Vec<Vec<f64>> = Vec::new();
        if self.config.ablation.use_intra {
            ec_rows.extend(input.effects.k_ec_intra.iter().cloned());
        }
        if self.config.ablation.use_inter {
            ec_rows.extend(input.effects.k_ec_inter.iter().cloned());
        }
        let k_ec_hat = self.refine_effects(&ec_rows, h_c)?;
        let k_es_hat = if self.config.ablation.use_intra {
            self.refine_effects(&input.effects.k_es, h_q)?
        } else {
            None
        };
        Ok(EncodedContext {
            h_q,
            h_c,
            h_s,
            h_d,
            k_ec_hat,
            k_es_hat,
        })
    }

    /// Pre-softmax strategy scores: pooled history ⊕ pooled context,
    /// dotted with each strategy key.
    pub fn strategy_scores(&mut self, enc: &EncodedContext) -> Result<TensorId> {
        let keys = self.strategy_keys.ok_or_else(|| {
            Error::Usage("the single variant has no strategy memory".into())
        })?;
        let h_s = enc.h_s.ok_or_else(|| {
            Error::Usage("strategy scoring needs an encoded history".into())
        })?;
        let s = self.graph.mean_rows(h_s, None)?;
        let c = self.graph.mean_rows(enc.h_c, None)?;
        let q = self.graph.concat_cols(&[s, c])?;
        let kt = self.graph.transpose(keys);
        self.graph.matmul(q, kt)
    }

    /// The strategy distribution p = softmax(scores).
    pub fn select_strategy(&mut self, enc: &EncodedContext) -> Result<TensorId> {
        let scores = self.strategy_scores(enc)?;
        self.graph.softmax(scores)
    }

    /// Concatenate the causal representation X = situation ⊕ context ⊕
    /// refined context effects ⊕ refined situation effects, with a record
    /// of which rows belong to which segment.
    pub fn build_x(&mut self, enc: &EncodedContext) -> Result<(TensorId, SegmentRecord)> {
        let mut parts = vec![("situation", enc.h_q), ("context", enc.h_c)];
        if let Some(k) = enc.k_ec_hat {
            parts.push(("effects_context", k));
        }
        if let Some(k) = enc.k_es_hat {
            parts.push(("effects_situation", k));
        }
        let ids: Vec<TensorId> = parts.iter().map(|(_, id)| *id).collect();
        let x = self.graph.concat_rows(&ids)?;
        let segments = parts
            .iter()
            .map(|(name, id)| (name.to_string(), self.graph.shape(*id).0))
            .collect();
        Ok((x, SegmentRecord { segments }))
    }

    /// Run the decoder over `prefix_ids`, applying the executor sublayer
    /// in the last layer, and project to vocabulary logits. `p` is the
    /// mixing distribution (required unless the variant/ablation drops
    /// the executors); `executor_subset` restricts which executors run
    /// (with matching weight indices into `p`).
    pub fn decode(
        &mut self,
        prefix_ids: &[usize],
        x: TensorId,
        enc: &EncodedContext,
        p: Option<TensorId>,
        executor_subset: Option<&[usize]>,
    ) -> Result<TensorId> {
        if prefix_ids.len() > self.config.max_target + 2 {
            return Err(Error::Usage(format!(
                "decoder prefix of {} exceeds max_target {} (+2)",
                prefix_ids.len(),
                self.config.max_target
            )));
        }
        let mut o = self.embed(prefix_ids)?;
        let layers = self.dec_layers.clone();
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            if i < last {
                o = layer.forward(&mut self.graph, o, Some(x), None, &self.diag)?;
            } else {
                o = layer.self_part(&mut self.graph, o)?;
                o = self.executor_sublayer(o, x, enc, p, executor_subset)?;
                o = layer.cross_part(&mut self.graph, o, Some(x), None, &self.diag)?;
            }
        }
        let logits = self.graph.matmul(o, self.out_w)?;
        self.graph.add_bias(logits, self.out_b)
    }

    /// The executor mixture between decoder self-attention and
    /// cross-attention: O^E = LayerNorm(O + Σ p_i · Attention_i(O over
    /// [X; memory_i])). Identity for the single variant or when executors
    /// are ablated; the multi variant runs one cross-attention over
    /// [X; Σ p_i · pooled description_i] instead.
    fn executor_sublayer(
        &mut self,
        o: TensorId,
        x: TensorId,
        enc: &EncodedContext,
        p: Option<TensorId>,
        executor_subset: Option<&[usize]>,
    ) -> Result<TensorId> {
        if self.config.variant == Variant::Single || !self.config.ablation.use_executors {
            return Ok(o);
        }
        let p = p.ok_or_else(|| {
            Error::Usage("decoding with executors needs a strategy distribution".into())
        })?;
        let (pr, pc) = self.graph.shape(p);
        if pr != 1 || pc != self.config.strategies {
            return Err(Error::Shape {
                op: "executor_sublayer",
                lhs: format!("{pr}x{pc}"),
                rhs: format!("1x{}", self.config.strategies),
            });
        }

        if self.config.variant == Variant::Multi {
            let weights: Vec<TensorId> = (0..self.config.strategies)
                .map(|i| self.graph.index_scalar(p, i))
                .collect::<Result<Vec<_>>>()?;
            let pooled: Vec<TensorId> = enc
                .h_d
                .iter()
                .map(|&d| self.graph.mean_rows(d, None))
                .collect::<Result<Vec<_>>>()?;
            let mixed = self.graph.mix_weighted(&weights, &pooled)?;
            let mem = self.graph.concat_rows(&[x, mixed])?;
            let block = self.multi_block.clone().expect("multi variant has its block");
            return block.apply(&mut self.graph, o, Some(mem), None, &self.diag);
        }

        let indices: Vec<usize> = match executor_subset {
            Some(s) => s.to_vec(),
            None => (0..self.config.strategies).collect(),
        };
        let mut weights = Vec::with_capacity(indices.len());
        let mut outputs = Vec::with_capacity(indices.len());
        for &i in &indices {
            if i >= self.config.strategies {
                return Err(Error::Index(format!("executor index {i} out of range")));
            }
            let mem = match self.config.variant {
                Variant::Full => {
                    let d = enc.h_d.get(i).copied().ok_or_else(|| {
                        Error::Usage("full variant needs encoded descriptions".into())
                    })?;
                    self.graph.concat_rows(&[x, d])?
                }
                Variant::Label => {
                    let table = self.label_emb.expect("label variant has its table");
                    let row = self.graph.embedding(table, &[i])?;
                    self.graph.concat_rows(&[x, row])?
                }
                _ => unreachable!("handled above"),
            };
            let exec = self.executors[i].clone();
            outputs.push(attend(&mut self.graph, &exec, o, mem, None, false)?);
            weights.push(self.graph.index_scalar(p, i)?);
        }
        let z = self.graph.mix_weighted(&weights, &outputs)?;
        let sum = self.graph.add(o, z)?;
        let norm = self.executor_norm.clone().expect("executor variants have a norm");
        norm.apply(&mut self.graph, sum)
    }

    // ── full passes ────────────────────────────────────────────────────

    /// Teacher-forced training/eval pass.
    pub fn forward(
        &mut self,
        input: &ModelInput,
        target: &TargetSpec,
        shared: Option<&SharedContext>,
    ) -> Result<ForwardOutput> {
        self.forward_impl(input, target, shared, None, None)
    }

    /// Like [`forward`], with the mixing distribution overridden (e.g. a
    /// one-hot vector for executor-isolation experiments).
    pub fn forward_with_p(
        &mut self,
        input: &ModelInput,
        target: &TargetSpec,
        shared: Option<&SharedContext>,
        p_override: &[f64],
        executor_subset: Option<&[usize]>,
    ) -> Result<ForwardOutput> {
        self.forward_impl(input, target, shared, Some(p_override), executor_subset)
    }

    fn forward_impl(
        &mut self,
        input: &ModelInput,
        target: &TargetSpec,
        shared: Option<&SharedContext>,
        p_override: Option<&[f64]>,
        executor_subset: Option<&[usize]>,
    ) -> Result<ForwardOutput> {
        if target.strategy >= self.config.strategies {
            return Err(Error::Index(format!(
                "strategy {} out of range",
                target.strategy
            )));
        }
        if target.response_ids.is_empty() {
            return Err(Error::Usage("target response is empty".into()));
        }
        if target.response_ids.len() > self.config.max_target {
            return Err(Error::Usage(format!(
                "target of {} tokens exceeds max_target {}",
                target.response_ids.len(),
                self.config.max_target
            )));
        }
        let enc = self.encode(input, shared)?;
        let (x, _segments) = self.build_x(&enc)?;
        let bos = self.vocab.bos_id();
        let pad = self.vocab.pad_id();

        if self.config.variant == Variant::Single {
            // Prefix: [BOS], marker, response[..-1]; targets: marker, response.
            let marker = self.vocab.marker_id(target.strategy);
            let mut prefix = vec![bos, marker];
            prefix.extend(&target.response_ids[..target.response_ids.len() - 1]);
            let mut full_targets = vec![marker];
            full_targets.extend(&target.response_ids);
            let logits = self.decode(&prefix, x, &enc, None, None)?;

            let mut s_targets = vec![pad; full_targets.len()];
            s_targets[0] = marker;
            let strategy_loss =
                self.graph
                    .cross_entropy(logits, &s_targets, Some(pad), Reduction::Sum)?;
            let mut r_targets = full_targets.clone();
            r_targets[0] = pad;
            let response_loss = self
                .graph
                .cross_entropy(logits, &r_targets, Some(pad), Reduction::Sum)?;
            let count = target.response_ids.len();
            let loss = self.graph.add(strategy_loss, response_loss)?;

            let v = self.config.vocab;
            let row0 = &self.graph.data(logits)[..v];
            let strategy_scores: Vec<f64> = (0..NUM_STRATEGIES)
                .map(|i| row0[self.vocab.marker_id(i)].to_f64())
                .collect();
            let nll_sum = self.graph.item(response_loss)?.to_f64();
            return Ok(ForwardOutput {
                strategy_loss,
                response_loss,
                loss,
                strategy_scores,
                token_logits: logits,
                nll_sum,
                token_count: count,
            });
        }

        let scores = self.strategy_scores(&enc)?;
        let strategy_loss =
            self.graph
                .cross_entropy(scores, &[target.strategy], None, Reduction::Sum)?;
        let p = match p_override {
            Some(data) => {
                if data.len() != self.config.strategies {
                    return Err(Error::Usage(format!(
                        "p override has {} entries, expected {}",
                        data.len(),
                        self.config.strategies
                    )));
                }
                let vals: Vec<S> = data.iter().map(|v| S::from_f64(*v)).collect();
                self.graph.leaf(1, self.config.strategies, vals)?
            }
            None => self.graph.softmax(scores)?,
        };

        let mut prefix = vec![bos];
        prefix.extend(&target.response_ids[..target.response_ids.len() - 1]);
        let logits = self.decode(&prefix, x, &enc, Some(p), executor_subset)?;
        let response_loss =
            self.graph
                .cross_entropy(logits, &target.response_ids, None, Reduction::Sum)?;
        let count = target.response_ids.len();
        let loss = self.graph.add(strategy_loss, response_loss)?;
        let strategy_scores = self.graph.data(scores).iter().map(|v| (*v).to_f64()).collect();
        let nll_sum = self.graph.item(response_loss)?.to_f64();
        Ok(ForwardOutput {
            strategy_loss,
            response_loss,
            loss,
            strategy_scores,
            token_logits: logits,
            nll_sum,
            token_count: count,
        })
    }

    // ── strategy relabeling ────────────────────────────────────────────

    /// Relabel strategies in place: new index i takes everything that
    /// belonged to `perm[i]` (key row, executor parameters, description,
    /// label row). Test hook for the relabeling symmetry.
    pub fn permute_strategies(&mut self, perm: &[usize]) -> Result<()> {
        let n = self.config.strategies;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Usage("not a permutation of the strategy ids".into()));
        }
        let permute_rows = |g: &mut Graph<S>, id: TensorId| {
            let (r, c) = g.shape(id);
            debug_assert_eq!(r, n);
            let old = g.data(id).to_vec();
            let mut new = Vec::with_capacity(r * c);
            for &src in perm {
                new.extend_from_slice(&old[src * c..(src + 1) * c]);
            }
            g.set_data(id, new).expect("same shape");
        };
        if let Some(keys) = self.strategy_keys {
            permute_rows(&mut self.graph, keys);
        }
        if let Some(table) = self.label_emb {
            permute_rows(&mut self.graph, table);
        }
        if !self.executors.is_empty() {
            // Read all source buffers first, then write: a cycle in the
            // permutation must not observe already-overwritten slots.
            let mut writes: Vec<(TensorId, Vec<S>)> = Vec::new();
            for (i, &src) in perm.iter().enumerate() {
                let dst = &self.executors[i];
                let from = &self.executors[src];
                for (d, s) in [
                    (dst.wq, from.wq),
                    (dst.bq, from.bq),
                    (dst.wk, from.wk),
                    (dst.bk, from.bk),
                    (dst.wv, from.wv),
                    (dst.bv, from.bv),
                    (dst.wo, from.wo),
                    (dst.bo, from.bo),
                ] {
                    writes.push((d, self.graph.data(s).to_vec()));
                }
            }
            for (id, data) in writes {
                self.graph.set_data(id, data)?;
            }
        }
        let old_desc = self.desc_ids.clone();
        for (i, &src) in perm.iter().enumerate() {
            self.desc_ids[i] = old_desc[src].clone();
        }
        Ok(())
    }

    // ── checkpoints ────────────────────────────────────────────────────

    /// Write every parameter (by name) plus the config into a container.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "checkpoint",
            "config": &self.config,
        });
        let matrices = self
            .names
            .iter()
            .map(|(name, id)| {
                let (r, c) = self.graph.shape(*id);
                let data: Vec<f64> =
                    self.graph.data(*id).iter().map(|v| (*v).to_f64()).collect();
                Matrix::new(name.clone(), r, c, data)
            })
            .collect::<Result<Vec<_>>>()?;
        write_container(path, &meta, &matrices)
    }

    /// Load a checkpoint written by [`save_checkpoint`]. When `expected`
    /// is given, a differing stored config is an error.
    pub fn load_checkpoint(
        path: &Path,
        vocab: &Vocabulary,
        expected: Option<&ModelConfig>,
    ) -> Result<Model<S>> {
        let container = read_container(path)?;
        let kind = container
            .meta
            .get("kind")
            .and_then(|v| v.as_str())
            .unwrap_or("");
        if kind != "checkpoint" {
            return Err(Error::Format(format!(
                "expected a checkpoint container, found kind '{kind}'"
            )));
        }
        let config: ModelConfig = serde_json::from_value(
            container
                .meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint is missing its config".into()))?,
        )
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if let Some(exp) = expected {
            if *exp != config {
                return Err(Error::Usage(format!(
                    "checkpoint config does not match the requested one: stored {config:?}, requested {exp:?}"
                )));
            }
        }
        let mut model = Model::new(config, vocab)?;
        for (name, id) in model.names.clone() {
            let m = container.require(&name)?;
            let (r, c) = model.graph.shape(id);
            if m.rows != r || m.cols != c {
                return Err(Error::Format(format!(
                    "checkpoint matrix {name} is {}x{}, expected {r}x{c}",
                    m.rows, m.cols
                )));
            }
            model
                .graph
                .set_data(id, m.data.iter().map(|v| S::from_f64(*v)).collect())?;
        }
        Ok(model)
    }
}
