//! Dialogue corpus: data model, JSON ingestion, tokenization, vocabulary,
//! context serialization, splits, and strategy statistics.
//!
//! A conversation is a situation line plus alternating-ish seeker/supporter
//! utterances; every supporter utterance carries one of eight support
//! strategies. Training examples are the supporter turns whose immediately
//! preceding utterance is a seeker turn: the example's context is everything
//! before the target turn, and the target is the turn's text plus strategy.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

// ── strategies ──────────────────────────────────────────────────────────

pub const NUM_STRATEGIES: usize = 8;

/// A support strategy: its canonical name and the description text the
/// model encodes as the strategy's reference document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Strategy {
    pub name: &'static str,
    pub description: &'static str,
}

/// The eight strategies, in canonical order. Indices into this table are
/// used as strategy ids everywhere.
pub const STRATEGIES: [Strategy; NUM_STRATEGIES] = [
    Strategy {
        name: "Question",
        description: "Asking for information related to the problem to help the help-seeker \
                      articulate the issues that they face. Open-ended questions are best, and \
                      closed questions can be used to get specific information.",
    },
    Strategy {
        name: "Restatement or Paraphrasing",
        description: "A simple, more concise rephrasing of the help-seeker's statements that \
                      could help them see their situation more clearly.",
    },
    Strategy {
        name: "Reflection of Feelings",
        description: "Articulate and describe the help-seeker's feelings.",
    },
    Strategy {
        name: "Self-disclosure",
        description: "Divulge similar experiences that you have had or emotions that you share \
                      with the help-seeker to express your empathy.",
    },
    Strategy {
        name: "Affirmation and Reassurance",
        description: "Affirm the help-seeker's strengths, motivation, and capabilities and \
                      provide reassurance and encouragement.",
    },
    Strategy {
        name: "Providing Suggestions",
        description: "Provide suggestions about how to change the situation, but be careful to \
                      not overstep and tell them what to do.",
    },
    Strategy {
        name: "Information",
        description: "Provide useful information to the help-seeker, for example with data, \
                      facts, opinions, resources, or by answering questions.",
    },
    Strategy {
        name: "Others",
        description: "Exchange pleasantries and use other support strategies that do not fall \
                      into the above categories.",
    },
];

/// Strategy id for a name. Matching ignores ASCII case: the public
/// corpus release writes "Reflection of feelings" where the reference
/// table capitalizes "Feelings".
pub fn strategy_index(name: &str) -> Result<usize> {
    STRATEGIES
        .iter()
        .position(|s| s.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Schema(format!("unknown strategy name '{name}'")))
}

/// Marker token surface form, e.g. `[Question]`.
pub fn strategy_marker(idx: usize) -> String {
    format!("[{}]", STRATEGIES[idx].name)
}

// ── conversations ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Supporter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    /// Strategy id; present on every supporter turn, never on seeker turns.
    pub strategy: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    /// Stable id: the conversation's index in its source file, as a string.
    pub id: String,
    pub situation: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    /// Number of supporter turns.
    pub fn supporter_turns(&self) -> usize {
        self.utterances
            .iter()
            .filter(|u| u.speaker == Speaker::Supporter)
            .count()
    }
}

// ── JSON ingestion ──────────────────────────────────────────────────────

#[derive(Deserialize)]
struct RawAnnotation {
    #[serde(default)]
    strategy: Option<String>,
}

#[derive(Deserialize)]
struct RawTurn {
    speaker: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    strategy: Option<String>,
    #[serde(default)]
    annotation: Option<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawConversation {
    situation: String,
    dialog: Vec<RawTurn>,
}

/// Parse a corpus from its JSON text: an array of objects with `situation`
/// and `dialog`. Both common field spellings are accepted per turn:
/// `text`/`content` for the utterance and `strategy`/`annotation.strategy`
/// for the supporter strategy.
pub fn parse_esconv(json_text: &str) -> Result<Vec<Conversation>> {
    let values: Vec<serde_json::Value> = serde_json::from_str(json_text)
        .map_err(|e| Error::Parse(format!("corpus is not a JSON array: {e}")))?;
    let mut out = Vec::with_capacity(values.len());
    for (ci, value) in values.into_iter().enumerate() {
        let raw: RawConversation = serde_json::from_value(value)
            .map_err(|e| Error::Parse(format!("conversation {ci}: {e}")))?;
        let mut utterances = Vec::with_capacity(raw.dialog.len());
        for (ti, turn) in raw.dialog.into_iter().enumerate() {
            let speaker = match turn.speaker.as_str() {
                "seeker" => Speaker::Seeker,
                "supporter" => Speaker::Supporter,
                other => {
                    return Err(Error::Schema(format!(
                        "conversation {ci} turn {ti}: unknown speaker '{other}'"
                    )))
                }
            };
            let text = turn.text.or(turn.content).ok_or_else(|| {
                Error::Schema(format!(
                    "conversation {ci} turn {ti}: missing text/content"
                ))
            })?;
            let strategy_name = turn
                .strategy
                .or(turn.annotation.and_then(|a| a.strategy));
            let strategy = match (speaker, strategy_name) {
                (Speaker::Supporter, Some(name)) => Some(strategy_index(&name).map_err(|_| {
                    Error::Schema(format!(
                        "conversation {ci} turn {ti}: unknown strategy name '{name}'"
                    ))
                })?),
                (Speaker::Supporter, None) => {
                    return Err(Error::Schema(format!(
                        "conversation {ci} turn {ti}: supporter turn without a strategy"
                    )))
                }
                (Speaker::Seeker, Some(name)) => {
                    return Err(Error::Schema(format!(
                        "conversation {ci} turn {ti}: seeker turn carries strategy '{name}'"
                    )))
                }
                (Speaker::Seeker, None) => None,
            };
            utterances.push(Utterance {
                speaker,
                text,
                strategy,
            });
        }
        out.push(Conversation {
            id: ci.to_string(),
            situation: raw.situation,
            utterances,
        });
    }
    Ok(out)
}

pub fn load_esconv(path: &Path) -> Result<Vec<Conversation>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_esconv(&text)
}

/// Write conversations in the compact fixture format (`text` + `strategy`).
pub fn write_esconv(path: &Path, conversations: &[Conversation]) -> Result<()> {
    let mut arr = Vec::with_capacity(conversations.len());
    for c in conversations {
        let dialog: Vec<serde_json::Value> = c
            .utterances
            .iter()
            .map(|u| {
                let mut turn = serde_json::Map::new();
                turn.insert(
                    "speaker".into(),
                    serde_json::Value::String(
                        match u.speaker {
                            Speaker::Seeker => "seeker",
                            Speaker::Supporter => "supporter",
                        }
                        .into(),
                    ),
                );
                turn.insert("text".into(), serde_json::Value::String(u.text.clone()));
                if let Some(s) = u.strategy {
                    turn.insert(
                        "strategy".into(),
                        serde_json::Value::String(STRATEGIES[s].name.into()),
                    );
                }
                serde_json::Value::Object(turn)
            })
            .collect();
        arr.push(serde_json::json!({
            "situation": c.situation,
            "dialog": dialog,
        }));
    }
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, &arr)?;
    file.write_all(b"\n")?;
    Ok(())
}

// ── tokenizer ───────────────────────────────────────────────────────────

/// Lowercase tokens: alphanumeric runs, with every other non-whitespace
/// character emitted as its own single-character token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

// ── vocabulary ──────────────────────────────────────────────────────────

pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const USER: &str = "[USER]";
pub const SUPPORTER: &str = "[SUPPORTER]";

/// Reserved tokens precede everything else: control tokens, role markers,
/// then one marker per strategy, so ids 0..15 are fixed for every corpus.
pub fn reserved_tokens() -> Vec<String> {
    let mut out: Vec<String> = [PAD, BOS, EOS, SEP, UNK, USER, SUPPORTER]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..NUM_STRATEGIES {
        out.push(strategy_marker(i));
    }
    out
}

/// Bijective token <-> id map with a fixed reserved prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from conversation texts (situations and utterances): reserved
    /// tokens first, then tokens with frequency >= `min_count` ordered by
    /// descending frequency with lexicographic tie-breaks. The order is a
    /// pure function of the corpus, so rebuilding is bit-identical.
    pub fn build(conversations: &[Conversation], min_count: usize) -> Vocabulary {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in conversations {
            for tok in tokenize(&c.situation) {
                *counts.entry(tok).or_insert(0) += 1;
            }
            for u in &c.utterances {
                for tok in tokenize(&u.text) {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let reserved = reserved_tokens();
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_count.max(1) && !reserved.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = reserved;
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Vocabulary::from_tokens(tokens).expect("construction cannot produce duplicates")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate vocabulary token '{t}'")));
            }
        }
        let reserved = reserved_tokens();
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err(Error::Schema(
                "vocabulary must start with the reserved token block".into(),
            ));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_id(&self) -> usize {
        0
    }
    pub fn bos_id(&self) -> usize {
        1
    }
    pub fn eos_id(&self) -> usize {
        2
    }
    pub fn sep_id(&self) -> usize {
        3
    }
    pub fn unk_id(&self) -> usize {
        4
    }
    pub fn user_id(&self) -> usize {
        5
    }
    pub fn supporter_id(&self) -> usize {
        6
    }

    /// Id of a strategy's marker token.
    pub fn marker_id(&self, strategy: usize) -> usize {
        7 + strategy
    }

    /// Strategy id if `id` is a marker token.
    pub fn strategy_of_marker(&self, id: usize) -> Option<usize> {
        (7..7 + NUM_STRATEGIES).contains(&id).then(|| id - 7)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of a token, falling back to `[UNK]`.
    pub fn encode_token(&self, token: &str) -> usize {
        self.id_of(token).unwrap_or(self.unk_id())
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    /// Tokenize and encode a raw text.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode_tokens(&tokenize(text))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Index(format!("token id {id} out of range for vocabulary of {}", self.size())))
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(String::from)).collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(file, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let file = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            tokens.push(line?);
        }
        Vocabulary::from_tokens(tokens)
    }
}

// ── context serialization ───────────────────────────────────────────────

/// A flattened dialogue context: token ids plus per-token bookkeeping.
/// `utterance_index` is non-decreasing and `role` is constant within an
/// utterance; marker and separator tokens belong to their utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedContext {
    pub ids: Vec<usize>,
    pub utterance_index: Vec<usize>,
    pub roles: Vec<Speaker>,
}

impl SerializedContext {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of utterances covered.
    pub fn utterance_count(&self) -> usize {
        self.utterance_index.last().map_or(0, |i| i + 1)
    }
}

/// Flatten utterances into the marker pattern: each utterance contributes
/// its role marker (`[USER]` for the seeker, the strategy marker for the
/// supporter), its tokens, and a `[SEP]` — one marker and one separator per
/// utterance. An empty slice serializes to an empty context.
pub fn serialize_context(utterances: &[Utterance], vocab: &Vocabulary) -> Result<SerializedContext> {
    let mut sc = SerializedContext {
        ids: Vec::new(),
        utterance_index: Vec::new(),
        roles: Vec::new(),
    };
    for (ui, u) in utterances.iter().enumerate() {
        let marker = match u.speaker {
            Speaker::Seeker => vocab.user_id(),
            Speaker::Supporter => {
                let s = u.strategy.ok_or_else(|| {
                    Error::Schema(format!("utterance {ui}: supporter turn without a strategy"))
                })?;
                vocab.marker_id(s)
            }
        };
        let mut ids = vec![marker];
        ids.extend(vocab.encode_text(&u.text));
        ids.push(vocab.sep_id());
        for id in ids {
            sc.ids.push(id);
            sc.utterance_index.push(ui);
            sc.roles.push(u.speaker);
        }
    }
    Ok(sc)
}

/// Marker-token ids for a strategy history; an empty history becomes a
/// single `[BOS]`.
pub fn history_ids(history: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    if history.is_empty() {
        vec![vocab.bos_id()]
    } else {
        history.iter().map(|&s| vocab.marker_id(s)).collect()
    }
}

// ── training examples ───────────────────────────────────────────────────

/// A single supervised target: everything before a supporter turn, plus
/// that turn's text and strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub conversation_id: String,
    pub situation: String,
    /// All utterances before the target turn; ends with a seeker turn.
    pub context: Vec<Utterance>,
    /// Strategies of the supporter turns inside `context`, in order.
    pub history: Vec<usize>,
    pub response: String,
    pub strategy: usize,
    /// Index of the target utterance within its conversation.
    pub target_index: usize,
}

/// Extract every usable example: supporter turns at index > 0 whose
/// immediately preceding utterance is a seeker turn.
pub fn examples_from(conversation: &Conversation) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for (i, u) in conversation.utterances.iter().enumerate() {
        if u.speaker != Speaker::Supporter || i == 0 {
            continue;
        }
        if conversation.utterances[i - 1].speaker != Speaker::Seeker {
            continue;
        }
        let context = conversation.utterances[..i].to_vec();
        let history = context
            .iter()
            .filter_map(|c| c.strategy)
            .collect();
        out.push(TrainingExample {
            conversation_id: conversation.id.clone(),
            situation: conversation.situation.clone(),
            context,
            history,
            response: u.text.clone(),
            strategy: u.strategy.expect("supporter turns always carry one"),
            target_index: i,
        });
    }
    out
}

// ── splits ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut file, self)?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SplitManifest> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Shuffle `0..n` with the given seed and cut train/dev/test by the ratios
/// (floored sizes; the remainder goes to test). Ratios must be positive and
/// sum to 1.
pub fn split_corpus(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitManifest> {
    let (r0, r1, r2) = ratios;
    if r0 <= 0.0 || r1 <= 0.0 || r2 <= 0.0 || ((r0 + r1 + r2) - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!(
            "split ratios must be positive and sum to 1, got {r0}, {r1}, {r2}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = ((n as f64) * r0 + 1e-9).floor() as usize;
    let n_dev = ((n as f64) * r1 + 1e-9).floor() as usize;
    let (train, rest) = indices.split_at(n_train.min(n));
    let (dev, test) = rest.split_at(n_dev.min(rest.len()));
    Ok(SplitManifest {
        train: train.to_vec(),
        dev: dev.to_vec(),
        test: test.to_vec(),
    })
}

// ── strategy statistics ─────────────────────────────────────────────────

/// Share of each strategy over all supporter turns.
pub fn global_strategy_distribution(conversations: &[Conversation]) -> [f64; NUM_STRATEGIES] {
    let mut counts = [0usize; NUM_STRATEGIES];
    for c in conversations {
        for u in &c.utterances {
            if let Some(s) = u.strategy {
                counts[s] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let mut out = [0.0; NUM_STRATEGIES];
    if total > 0 {
        for (o, c) in out.iter_mut().zip(&counts) {
            *o = *c as f64 / total as f64;
        }
    }
    out
}

/// Strategy distribution per progress interval. A supporter turn at
/// utterance index `j` of an `M`-utterance conversation falls into interval
/// `min(floor(j/M * intervals), intervals - 1)`. Non-empty rows are
/// normalized to sum to 1; empty rows stay zero.
pub fn strategy_progress(
    conversations: &[Conversation],
    intervals: usize,
) -> Result<Vec<[f64; NUM_STRATEGIES]>> {
    if intervals == 0 {
        return Err(Error::Usage("progress intervals must be positive".into()));
    }
    let mut counts = vec![[0usize; NUM_STRATEGIES]; intervals];
    for c in conversations {
        let m = c.utterances.len();
        if m == 0 {
            continue;
        }
        for (j, u) in c.utterances.iter().enumerate() {
            if let Some(s) = u.strategy {
                let frac = j as f64 / m as f64;
                let idx = ((frac * intervals as f64).floor() as usize).min(intervals - 1);
                counts[idx][s] += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            let mut out = [0.0; NUM_STRATEGIES];
            if total > 0 {
                for (o, c) in out.iter_mut().zip(&row) {
                    *o = *c as f64 / total as f64;
                }
            }
            out
        })
        .collect())
}

// ── synthetic fixtures ──────────────────────────────────────────────────

/// Deterministic miniature corpus for tests and demos: `n` two-turn
/// conversations with distinct contexts, short distinct responses, and
/// strategies cycling through all eight. The whole corpus stays under 200
/// distinct tokens.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Conversation> {
    let feelings = [
        "sad", "anxious", "angry", "lonely", "stressed", "afraid", "upset", "tired",
    ];
    let topics = [
        "job", "exam", "breakup", "family", "money", "health", "friend", "move",
    ];
    let actions = [
        "walk", "journal", "plan", "break", "talk", "routine", "list", "call",
    ];
    let rot = (seed % 8) as usize;
    (0..n)
        .map(|i| {
            let feeling = feelings[(i + rot) % 8];
            let topic = topics[((i / 3) + rot) % 8];
            let action = actions[(i + 2 * rot) % 8];
            let strategy = i % NUM_STRATEGIES;
            let response = match strategy {
                0 => format!("how long has the {topic} made you {feeling} ?"),
                1 => format!("so the {topic} is making you {feeling} ."),
                2 => format!("it sounds like you feel {feeling} about the {topic} ."),
                3 => format!("i once felt {feeling} about a {topic} too ."),
                4 => format!("you are strong enough to handle the {topic} ."),
                5 => format!("maybe a daily {action} could ease the {topic} ."),
                6 => format!("many people find a {action} helps with a {topic} ."),
                _ => format!("thanks for sharing about the {topic} with me ."),
            };
            Conversation {
                id: i.to_string(),
                situation: format!("i feel {feeling} about my {topic}"),
                utterances: vec![
                    Utterance {
                        speaker: Speaker::Seeker,
                        text: format!("my {topic} makes me {feeling} and i need a {action}"),
                        strategy: None,
                    },
                    Utterance {
                        speaker: Speaker::Supporter,
                        text: response,
                        strategy: Some(strategy),
                    },
                ],
            }
        })
        .collect()
}
