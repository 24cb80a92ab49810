//! Emotion-cause annotation: per-utterance binary masks that mark which
//! utterances carry the cause of the seeker's emotion.
//!
//! The baseline annotator is a cue-term lexicon; externally produced
//! annotations can be ingested from a JSON-lines file and take precedence.
//! Masks are anchored at the seeker's last utterance: that target is always
//! flagged. The situation line is treated as causal by default and carries
//! no explicit flag.

use crate::corpus::{tokenize, Conversation, SerializedContext, Speaker};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

/// One conversation's cause mask: a 0/1 flag per utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CauseAnnotation {
    pub conversation_id: String,
    /// Index of the seeker's last utterance — the emotion target.
    pub target_index: usize,
    /// One flag per utterance of the conversation, in order.
    pub flags: Vec<u8>,
    pub annotator: String,
}

impl CauseAnnotation {
    pub fn flag(&self, utterance: usize) -> bool {
        self.flags[utterance] != 0
    }

    fn validate_against(&self, conversation: &Conversation) -> Result<()> {
        if self.flags.len() != conversation.utterances.len() {
            return Err(Error::Schema(format!(
                "conversation {}: annotation has {} flags for {} utterances",
                self.conversation_id,
                self.flags.len(),
                conversation.utterances.len()
            )));
        }
        if self.flags.iter().any(|f| *f > 1) {
            return Err(Error::Schema(format!(
                "conversation {}: cause flags must be 0 or 1",
                self.conversation_id
            )));
        }
        if self.target_index >= conversation.utterances.len() {
            return Err(Error::Schema(format!(
                "conversation {}: target index {} out of range",
                self.conversation_id, self.target_index
            )));
        }
        Ok(())
    }
}

/// Cue terms that mark an utterance as cause-bearing. Single lowercase
/// tokens, matched against the tokenizer's output.
pub fn default_lexicon() -> HashSet<String> {
    [
        "sad", "sadness", "anxious", "anxiety", "angry", "anger", "fear", "afraid", "scared",
        "lonely", "alone", "depressed", "depression", "stress", "stressed", "upset", "worried",
        "worry", "cry", "crying", "hurt", "pain", "tired", "grief", "loss", "lost", "breakup",
        "divorce", "fired", "laid", "fail", "failed", "sick", "illness", "death", "died",
        "fight", "argument", "debt", "broke",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

/// Load a lexicon: one term per line, lowercased; blank lines ignored.
pub fn load_lexicon(path: &Path) -> Result<HashSet<String>> {
    let file = std::fs::File::open(path)?;
    let mut out = HashSet::new();
    for line in std::io::BufReader::new(file).lines() {
        let term = line?.trim().to_lowercase();
        if !term.is_empty() {
            out.insert(term);
        }
    }
    Ok(out)
}

/// Baseline annotator: an utterance is flagged when any of its tokens is a
/// cue term; the target (the seeker's last utterance) is always flagged.
pub fn annotate_lexicon(
    conversation: &Conversation,
    lexicon: &HashSet<String>,
) -> Result<CauseAnnotation> {
    if conversation.utterances.is_empty() {
        return Err(Error::Schema(format!(
            "conversation {}: cannot annotate an empty conversation",
            conversation.id
        )));
    }
    let target_index = conversation
        .utterances
        .iter()
        .rposition(|u| u.speaker == Speaker::Seeker)
        .ok_or_else(|| {
            Error::Schema(format!(
                "conversation {}: no seeker utterance to anchor the cause mask",
                conversation.id
            ))
        })?;
    let flags = conversation
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let cued = tokenize(&u.text).iter().any(|t| lexicon.contains(t));
            u8::from(cued || i == target_index)
        })
        .collect();
    Ok(CauseAnnotation {
        conversation_id: conversation.id.clone(),
        target_index,
        flags,
        annotator: "lexicon".into(),
    })
}

/// Write annotations as JSON lines, one record per line.
pub fn write_annotations(path: &Path, annotations: &[CauseAnnotation]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for a in annotations {
        serde_json::to_writer(&mut file, a)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a JSON-lines annotation file and validate each record against its
/// conversation (id known, flag count matches, flags binary, target in
/// range).
pub fn ingest_annotations(
    path: &Path,
    corpus: &[Conversation],
) -> Result<HashMap<String, CauseAnnotation>> {
    let by_id: HashMap<&str, &Conversation> =
        corpus.iter().map(|c| (c.id.as_str(), c)).collect();
    let file = std::fs::File::open(path)?;
    let mut out = HashMap::new();
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: CauseAnnotation = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("annotation line {}: {e}", ln + 1)))?;
        let conversation = by_id.get(ann.conversation_id.as_str()).ok_or_else(|| {
            Error::Schema(format!(
                "annotation line {}: unknown conversation id '{}'",
                ln + 1,
                ann.conversation_id
            ))
        })?;
        ann.validate_against(conversation)?;
        out.insert(ann.conversation_id.clone(), ann);
    }
    Ok(out)
}

/// One annotation per conversation: the ingested record when present,
/// otherwise the lexicon baseline.
pub fn resolve_annotations(
    corpus: &[Conversation],
    lexicon: &HashSet<String>,
    ingested: Option<&HashMap<String, CauseAnnotation>>,
) -> Result<Vec<CauseAnnotation>> {
    corpus
        .iter()
        .map(|c| match ingested.and_then(|m| m.get(&c.id)) {
            Some(a) => Ok(a.clone()),
            None => annotate_lexicon(c, lexicon),
        })
        .collect()
}

/// Expand per-utterance flags to per-token flags over a serialized context:
/// every token (markers and separators included) inherits the flag of the
/// utterance it belongs to. `flags` must cover exactly the utterances the
/// context covers.
pub fn expand_to_tokens(flags: &[u8], sc: &SerializedContext) -> Result<Vec<bool>> {
    if flags.len() != sc.utterance_count() {
        return Err(Error::Index(format!(
            "cause mask covers {} utterances but the context has {}",
            flags.len(),
            sc.utterance_count()
        )));
    }
    Ok(sc
        .utterance_index
        .iter()
        .map(|&ui| flags[ui] != 0)
        .collect())
}
