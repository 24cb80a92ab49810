//! Commonsense effect vectors: one fixed-dimension vector per
//! (utterance, causal relation) pair, plus the bundle that stacks them for
//! the model.
//!
//! Six relations are in scope. The `x` relations describe effects on the
//! speaker themself (intra) and are applied to the situation and to seeker
//! utterances; the `o` relations describe effects on others (inter) and are
//! applied to supporter utterances. The built-in provider is a seeded
//! random projection of character trigrams plus a per-relation base vector:
//! deterministic, text-sensitive, and relation-sensitive, with no external
//! model dependency. A learned encoder can replace it behind the same
//! trait, since both produce one vector per (text, relation).

use crate::container::{read_container, write_container, Container, Matrix};
use crate::corpus::{Conversation, Speaker};
use crate::error::{Error, Result};
use crate::tensor::randn_vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

// ── relations ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "xReact")]
    XReact,
    #[serde(rename = "xEffect")]
    XEffect,
    #[serde(rename = "xWant")]
    XWant,
    #[serde(rename = "oReact")]
    OReact,
    #[serde(rename = "oEffect")]
    OEffect,
    #[serde(rename = "oWant")]
    OWant,
}

/// Relations about the speaker themself, in canonical order.
pub const INTRA: [Relation; 3] = [Relation::XReact, Relation::XEffect, Relation::XWant];
/// Relations about others, in canonical order.
pub const INTER: [Relation; 3] = [Relation::OReact, Relation::OEffect, Relation::OWant];

impl Relation {
    pub fn name(self) -> &'static str {
        match self {
            Relation::XReact => "xReact",
            Relation::XEffect => "xEffect",
            Relation::XWant => "xWant",
            Relation::OReact => "oReact",
            Relation::OEffect => "oEffect",
            Relation::OWant => "oWant",
        }
    }

    pub fn from_name(name: &str) -> Result<Relation> {
        match name {
            "xReact" => Ok(Relation::XReact),
            "xEffect" => Ok(Relation::XEffect),
            "xWant" => Ok(Relation::XWant),
            "oReact" => Ok(Relation::OReact),
            "oEffect" => Ok(Relation::OEffect),
            "oWant" => Ok(Relation::OWant),
            other => Err(Error::Usage(format!("unsupported relation '{other}'"))),
        }
    }

    pub fn is_intra(self) -> bool {
        INTRA.contains(&self)
    }

    fn ordinal(self) -> usize {
        match self {
            Relation::XReact => 0,
            Relation::XEffect => 1,
            Relation::XWant => 2,
            Relation::OReact => 3,
            Relation::OEffect => 4,
            Relation::OWant => 5,
        }
    }
}

// ── provider ────────────────────────────────────────────────────────────

/// Anything that turns (text, relation) into one deterministic vector.
pub trait EffectProvider {
    fn dim(&self) -> usize;
    fn effect_of(&self, text: &str, relation: Relation) -> Vec<f64>;
}

const TRIGRAM_BUCKETS: usize = 512;
const PROVIDER_SEED: u64 = 17;

/// Built-in provider: L2-normalized bag of character trigrams, hashed into
/// a fixed number of buckets, sent through a seeded random projection, plus
/// a per-relation base vector. Empty text contributes nothing, so its
/// effect is exactly the relation's base vector.
pub struct TrigramEffectProvider {
    dim: usize,
    /// Row-major [dim × TRIGRAM_BUCKETS].
    projection: Vec<f64>,
    /// Six base vectors of length `dim`, indexed by relation ordinal.
    relation_base: Vec<Vec<f64>>,
}

impl TrigramEffectProvider {
    pub fn new(dim: usize) -> TrigramEffectProvider {
        let mut rng = ChaCha8Rng::seed_from_u64(PROVIDER_SEED);
        let projection = randn_vec::<f64, _>(dim * TRIGRAM_BUCKETS, 1.0, &mut rng);
        let relation_base = (0..6)
            .map(|_| randn_vec::<f64, _>(dim, 1.0, &mut rng))
            .collect();
        TrigramEffectProvider {
            dim,
            projection,
            relation_base,
        }
    }

    /// The vector returned for empty (null-event) text under a relation.
    pub fn null_event(&self, relation: Relation) -> Vec<f64> {
        self.relation_base[relation.ordinal()].clone()
    }
}

/// Lowercase and collapse whitespace runs to single spaces.
fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Bucketed trigram counts of the normalized text, L2-normalized; empty
/// text gives the zero vector.
fn trigram_bag(normalized: &str) -> Vec<f64> {
    let mut bag = vec![0.0; TRIGRAM_BUCKETS];
    let chars: Vec<char> = normalized.chars().collect();
    if chars.is_empty() {
        return bag;
    }
    let mut add = |gram: &[char]| {
        let s: String = gram.iter().collect();
        let bucket = (fnv1a(s.as_bytes()) % TRIGRAM_BUCKETS as u64) as usize;
        bag[bucket] += 1.0;
    };
    if chars.len() < 3 {
        add(&chars);
    } else {
        for w in chars.windows(3) {
            add(w);
        }
    }
    let norm: f64 = bag.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut bag {
            *v /= norm;
        }
    }
    bag
}

impl EffectProvider for TrigramEffectProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn effect_of(&self, text: &str, relation: Relation) -> Vec<f64> {
        let bag = trigram_bag(&normalize(text));
        let base = &self.relation_base[relation.ordinal()];
        (0..self.dim)
            .map(|i| {
                let row = &self.projection[i * TRIGRAM_BUCKETS..(i + 1) * TRIGRAM_BUCKETS];
                let dot: f64 = row.iter().zip(&bag).map(|(p, b)| p * b).sum();
                dot + base[i]
            })
            .collect()
    }
}

// ── bundles ─────────────────────────────────────────────────────────────

/// The stacked effect matrices for one conversation. Rows are ordered by
/// (utterance order) × (canonical relation order); `intra_rows` and
/// `inter_rows` record each row's (utterance index, relation).
#[derive(Debug, Clone, PartialEq)]
pub struct EffectBundle {
    pub dim: usize,
    /// 3 rows: intra relations applied to the situation.
    pub k_es: Vec<Vec<f64>>,
    /// 3 rows per seeker utterance.
    pub k_ec_intra: Vec<Vec<f64>>,
    /// 3 rows per supporter utterance.
    pub k_ec_inter: Vec<Vec<f64>>,
    pub intra_rows: Vec<(usize, Relation)>,
    pub inter_rows: Vec<(usize, Relation)>,
}

impl EffectBundle {
    /// Intra rows followed by inter rows.
    pub fn k_ec(&self) -> Vec<Vec<f64>> {
        let mut out = self.k_ec_intra.clone();
        out.extend(self.k_ec_inter.iter().cloned());
        out
    }

    /// Keep only rows from utterances with index < `utterance_limit`
    /// (the situation rows always stay). Used to slice a conversation-level
    /// bundle down to one example's context.
    pub fn restricted_to(&self, utterance_limit: usize) -> EffectBundle {
        let filter = |rows: &[Vec<f64>], idx: &[(usize, Relation)]| {
            let mut r = Vec::new();
            let mut i = Vec::new();
            for (row, &(u, rel)) in rows.iter().zip(idx) {
                if u < utterance_limit {
                    r.push(row.clone());
                    i.push((u, rel));
                }
            }
            (r, i)
        };
        let (k_ec_intra, intra_rows) = filter(&self.k_ec_intra, &self.intra_rows);
        let (k_ec_inter, inter_rows) = filter(&self.k_ec_inter, &self.inter_rows);
        EffectBundle {
            dim: self.dim,
            k_es: self.k_es.clone(),
            k_ec_intra,
            k_ec_inter,
            intra_rows,
            inter_rows,
        }
    }
}

/// Apply intra relations to the situation and every seeker utterance, and
/// inter relations to every supporter utterance.
pub fn build_bundle(
    conversation: &Conversation,
    provider: &dyn EffectProvider,
) -> EffectBundle {
    let dim = provider.dim();
    let k_es = INTRA
        .iter()
        .map(|&r| provider.effect_of(&conversation.situation, r))
        .collect();
    let mut k_ec_intra = Vec::new();
    let mut k_ec_inter = Vec::new();
    let mut intra_rows = Vec::new();
    let mut inter_rows = Vec::new();
    for (u, utt) in conversation.utterances.iter().enumerate() {
        match utt.speaker {
            Speaker::Seeker => {
                for &r in &INTRA {
                    k_ec_intra.push(provider.effect_of(&utt.text, r));
                    intra_rows.push((u, r));
                }
            }
            Speaker::Supporter => {
                for &r in &INTER {
                    k_ec_inter.push(provider.effect_of(&utt.text, r));
                    inter_rows.push((u, r));
                }
            }
        }
    }
    EffectBundle {
        dim,
        k_es,
        k_ec_intra,
        k_ec_inter,
        intra_rows,
        inter_rows,
    }
}

// ── caching ─────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    intra_rows: Vec<(usize, Relation)>,
    inter_rows: Vec<(usize, Relation)>,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    kind: String,
    dim: usize,
    bundles: BTreeMap<String, BundleMeta>,
}

fn to_matrix(name: String, rows: &[Vec<f64>], dim: usize) -> Result<Matrix> {
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Matrix::new(name, rows.len(), dim, data)
}

fn from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows)
        .map(|r| m.data[r * m.cols..(r + 1) * m.cols].to_vec())
        .collect()
}

/// Write bundles keyed by conversation id into one container file.
pub fn cache_bundles(path: &Path, bundles: &BTreeMap<String, EffectBundle>) -> Result<()> {
    let dim = bundles.values().map(|b| b.dim).next().unwrap_or(0);
    let mut meta = CacheMeta {
        kind: "effects".into(),
        dim,
        bundles: BTreeMap::new(),
    };
    let mut matrices = Vec::new();
    for (id, b) in bundles {
        if b.dim != dim {
            return Err(Error::Usage(format!(
                "bundle {id} has dim {} but the cache uses {dim}",
                b.dim
            )));
        }
        meta.bundles.insert(
            id.clone(),
            BundleMeta {
                intra_rows: b.intra_rows.clone(),
                inter_rows: b.inter_rows.clone(),
            },
        );
        matrices.push(to_matrix(format!("{id}.k_es"), &b.k_es, dim)?);
        matrices.push(to_matrix(format!("{id}.k_ec_intra"), &b.k_ec_intra, dim)?);
        matrices.push(to_matrix(format!("{id}.k_ec_inter"), &b.k_ec_inter, dim)?);
    }
    write_container(path, &serde_json::to_value(&meta)?, &matrices)
}

/// Read a bundle cache written by [`cache_bundles`].
pub fn load_cached_bundles(path: &Path) -> Result<BTreeMap<String, EffectBundle>> {
    let container: Container = read_container(path)?;
    let meta: CacheMeta = serde_json::from_value(container.meta.clone())
        .map_err(|e| Error::Format(format!("effect cache metadata: {e}")))?;
    if meta.kind != "effects" {
        return Err(Error::Format(format!(
            "expected an effects cache, found kind '{}'",
            meta.kind
        )));
    }
    let mut out = BTreeMap::new();
    for (id, bm) in meta.bundles {
        let k_es = from_matrix(container.require(&format!("{id}.k_es"))?);
        let k_ec_intra = from_matrix(container.require(&format!("{id}.k_ec_intra"))?);
        let k_ec_inter = from_matrix(container.require(&format!("{id}.k_ec_inter"))?);
        if k_ec_intra.len() != bm.intra_rows.len() || k_ec_inter.len() != bm.inter_rows.len() {
            return Err(Error::Format(format!(
                "effect cache for conversation {id}: row bookkeeping does not match matrices"
            )));
        }
        out.insert(
            id,
            EffectBundle {
                dim: meta.dim,
                k_es,
                k_ec_intra,
                k_ec_inter,
                intra_rows: bm.intra_rows,
                inter_rows: bm.inter_rows,
            },
        );
    }
    Ok(out)
}

/// Cache a single bundle.
pub fn cache_bundle(bundle: &EffectBundle, path: &Path) -> Result<()> {
    let mut map = BTreeMap::new();
    map.insert("bundle".to_string(), bundle.clone());
    cache_bundles(path, &map)
}

/// Load a single bundle written by [`cache_bundle`].
pub fn load_cached(path: &Path) -> Result<EffectBundle> {
    let mut map = load_cached_bundles(path)?;
    map.remove("bundle")
        .ok_or_else(|| Error::Format("cache does not hold a single bundle".into()))
}
