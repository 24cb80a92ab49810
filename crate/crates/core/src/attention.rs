//! Attention building blocks: multi-head scaled dot-product attention,
//! cause-restricted attention with a gated fusion of the two, residual
//! cross-attention blocks, feed-forward sublayers, and full encoder/decoder
//! layers composed from them.
//!
//! Cause attention is the same computation as self-attention — identical
//! projections — with the key set restricted to cause-flagged positions, so
//! an all-ones cause mask reproduces self-attention bit-exactly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{randn_vec, Graph, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicU64, Ordering};

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

// ── diagnostics ─────────────────────────────────────────────────────────

/// Counters for degenerate attention calls: cause masks that admit nothing
/// (fell back to self-attention) and cross-attention against an empty
/// memory (passed through as a plain layer norm).
#[derive(Debug, Default)]
pub struct Diagnostics {
    cause_fallbacks: AtomicU64,
    empty_memory: AtomicU64,
}

impl Diagnostics {
    pub fn new() -> Diagnostics {
        Diagnostics::default()
    }

    pub fn cause_fallbacks(&self) -> u64 {
        self.cause_fallbacks.load(Ordering::Relaxed)
    }

    pub fn empty_memory_passthroughs(&self) -> u64 {
        self.empty_memory.load(Ordering::Relaxed)
    }

    fn note_cause_fallback(&self) {
        self.cause_fallbacks.fetch_add(1, Ordering::Relaxed);
    }

    fn note_empty_memory(&self) {
        self.empty_memory.fetch_add(1, Ordering::Relaxed);
    }
}

// ── parameter construction ──────────────────────────────────────────────

/// Registers parameters in a graph under dotted names, with seeded normal
/// initialization for weights and fixed values for biases and norm gains.
pub struct ParamBuilder<'a, S: Scalar> {
    pub graph: &'a mut Graph<S>,
    names: Vec<(String, TensorId)>,
    rng: ChaCha8Rng,
    init_std: f64,
}

impl<'a, S: Scalar> ParamBuilder<'a, S> {
    pub fn new(graph: &'a mut Graph<S>, seed: u64, init_std: f64) -> ParamBuilder<'a, S> {
        ParamBuilder {
            graph,
            names: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            init_std,
        }
    }

    fn register(&mut self, name: String, id: TensorId) -> TensorId {
        self.names.push((name, id));
        id
    }

    /// Normal(0, init_std) weight matrix.
    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<TensorId> {
        let data = randn_vec(rows * cols, self.init_std, &mut self.rng);
        let id = self.graph.param(rows, cols, data)?;
        Ok(self.register(name.into(), id))
    }

    /// Constant-filled parameter (biases start at 0, norm gains at 1).
    pub fn constant(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        v: f64,
    ) -> Result<TensorId> {
        let id = self.graph.param(rows, cols, vec![S::from_f64(v); rows * cols])?;
        Ok(self.register(name.into(), id))
    }

    /// All `(name, id)` pairs registered so far, in creation order.
    pub fn into_names(self) -> Vec<(String, TensorId)> {
        self.names
    }
}

// ── multi-head attention ────────────────────────────────────────────────

/// Projection parameters of one multi-head attention: query/key/value
/// projections, their biases, and the output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: usize,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
}

impl AttentionParams {
    pub fn new<S: Scalar>(
        pb: &mut ParamBuilder<'_, S>,
        prefix: &str,
        hidden: usize,
        heads: usize,
    ) -> Result<AttentionParams> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Usage(format!(
                "hidden size {hidden} is not divisible into {heads} heads"
            )));
        }
        Ok(AttentionParams {
            heads,
            wq: pb.normal(format!("{prefix}.wq"), hidden, hidden)?,
            bq: pb.constant(format!("{prefix}.bq"), 1, hidden, 0.0)?,
            wk: pb.normal(format!("{prefix}.wk"), hidden, hidden)?,
            bk: pb.constant(format!("{prefix}.bk"), 1, hidden, 0.0)?,
            wv: pb.normal(format!("{prefix}.wv"), hidden, hidden)?,
            bv: pb.constant(format!("{prefix}.bv"), 1, hidden, 0.0)?,
            wo: pb.normal(format!("{prefix}.wo"), hidden, hidden)?,
            bo: pb.constant(format!("{prefix}.bo"), 1, hidden, 0.0)?,
        })
    }
}

/// Multi-head scaled dot-product attention of `queries` over `keys`.
/// `key_mask` marks admissible key positions (shared by all heads and
/// query rows); `causal` restricts position i to keys ≤ i and requires
/// equal query/key lengths. A mask admitting no keys yields an exact zero
/// matrix.
pub fn attend<S: Scalar>(
    g: &mut Graph<S>,
    p: &AttentionParams,
    queries: TensorId,
    keys: TensorId,
    key_mask: Option<&[bool]>,
    causal: bool,
) -> Result<TensorId> {
    let (nq, hidden) = g.shape(queries);
    if let Some(m) = key_mask {
        if !m.iter().any(|b| *b) {
            return g.zeros(nq, hidden);
        }
    }
    let q = g.matmul(queries, p.wq)?;
    let q = g.add_bias(q, p.bq)?;
    let k = g.matmul(keys, p.wk)?;
    let k = g.add_bias(k, p.bk)?;
    let v = g.matmul(keys, p.wv)?;
    let v = g.add_bias(v, p.bv)?;
    let dh = hidden / p.heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(p.heads);
    for head in 0..p.heads {
        let qh = g.slice_cols(q, head * dh, (head + 1) * dh)?;
        let kh = g.slice_cols(k, head * dh, (head + 1) * dh)?;
        let vh = g.slice_cols(v, head * dh, (head + 1) * dh)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let weights = g.masked_softmax(scores, key_mask, causal)?;
        head_outputs.push(g.matmul(weights, vh)?);
    }
    let concat = g.concat_cols(&head_outputs)?;
    let out = g.matmul(concat, p.wo)?;
    g.add_bias(out, p.bo)
}

/// Self-attention over valid (non-padded) positions.
pub fn self_attention<S: Scalar>(
    g: &mut Graph<S>,
    p: &AttentionParams,
    h: TensorId,
    padding_mask: Option<&[bool]>,
) -> Result<TensorId> {
    attend(g, p, h, h, padding_mask, false)
}

/// Attention restricted to cause-flagged key positions (intersected with
/// the padding mask). When nothing is flagged, falls back to plain
/// self-attention and bumps the diagnostics counter.
pub fn cause_attention<S: Scalar>(
    g: &mut Graph<S>,
    p: &AttentionParams,
    h: TensorId,
    cause_mask: &[bool],
    padding_mask: Option<&[bool]>,
    diag: &Diagnostics,
) -> Result<TensorId> {
    let (_, cols) = g.shape(h);
    let _ = cols;
    let effective: Vec<bool> = match padding_mask {
        Some(pm) => cause_mask.iter().zip(pm).map(|(c, p)| *c && *p).collect(),
        None => cause_mask.to_vec(),
    };
    if !effective.iter().any(|b| *b) {
        diag.note_cause_fallback();
        return self_attention(g, p, h, padding_mask);
    }
    attend(g, p, h, h, Some(&effective), false)
}

// ── fusion gate ─────────────────────────────────────────────────────────

/// Learns how much of the self-attention output to keep against the
/// cause-attention output: F = mu * A_s + (1 - mu) * A_c with
/// mu = ReLU([A_c; A_s] W + b).
#[derive(Debug, Clone)]
pub struct FusionGate {
    pub w: TensorId,
    pub b: TensorId,
}

impl FusionGate {
    pub fn new<S: Scalar>(
        pb: &mut ParamBuilder<'_, S>,
        prefix: &str,
        hidden: usize,
    ) -> Result<FusionGate> {
        Ok(FusionGate {
            w: pb.normal(format!("{prefix}.w"), 2 * hidden, hidden)?,
            b: pb.constant(format!("{prefix}.b"), 1, hidden, 0.0)?,
        })
    }
}

pub fn fuse<S: Scalar>(
    g: &mut Graph<S>,
    gate: &FusionGate,
    a_c: TensorId,
    a_s: TensorId,
) -> Result<TensorId> {
    let cat = g.concat_cols(&[a_c, a_s])?;
    let pre = g.matmul(cat, gate.w)?;
    let pre = g.add_bias(pre, gate.b)?;
    let mu = g.relu(pre);
    g.gate_blend(mu, a_s, a_c)
}

// ── layer norm + residual blocks ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gain: TensorId,
    pub bias: TensorId,
}

impl NormParams {
    pub fn new<S: Scalar>(
        pb: &mut ParamBuilder<'_, S>,
        prefix: &str,
        hidden: usize,
    ) -> Result<NormParams> {
        Ok(NormParams {
            gain: pb.constant(format!("{prefix}.gain"), 1, hidden, 1.0)?,
            bias: pb.constant(format!("{prefix}.bias"), 1, hidden, 0.0)?,
        })
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, x: TensorId) -> Result<TensorId> {
        g.layer_norm(x, self.gain, self.bias, S::from_f64(LN_EPS))
    }
}

/// Residual cross-attention: LayerNorm(Q + Attention(Q over memory)).
/// An absent memory degrades to LayerNorm(Q) and bumps the diagnostics
/// counter.
#[derive(Debug, Clone)]
pub struct CrossAttBlock {
    pub attn: AttentionParams,
    pub norm: NormParams,
}

impl CrossAttBlock {
    pub fn new<S: Scalar>(
        pb: &mut ParamBuilder<'_, S>,
        prefix: &str,
        hidden: usize,
        heads: usize,
    ) -> Result<CrossAttBlock> {
        Ok(CrossAttBlock {
            attn: AttentionParams::new(pb, &format!("{prefix}.attn"), hidden, heads)?,
            norm: NormParams::new(pb, &format!("{prefix}.norm"), hidden)?,
        })
    }

    pub fn apply<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        queries: TensorId,
        memory: Option<TensorId>,
        memory_mask: Option<&[bool]>,
        diag: &Diagnostics,
    ) -> Result<TensorId> {
        match memory {
            Some(m) => {
                let a = attend(g, &self.attn, queries, m, memory_mask, false)?;
                let sum = g.add(queries, a)?;
                self.norm.apply(g, sum)
            }
            None => {
                diag.note_empty_memory();
                self.norm.apply(g, queries)
            }
        }
    }
}

/// Position-wise feed-forward with residual and layer norm:
/// LayerNorm(x + ReLU(x W1 + b1) W2 + b2).
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub norm: NormParams,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        pb: &mut ParamBuilder<'_, S>,
        prefix: &str,
        hidden: usize,
        inner: usize,
    ) -> Result<FeedForward> {
        Ok(FeedForward {
            w1: pb.normal(format!("{prefix}.w1"), hidden, inner)?,
            b1: pb.constant(format!("{prefix}.b1"), 1, inner, 0.0)?,
            w2: pb.normal(format!("{prefix}.w2"), inner, hidden)?,
            b2: pb.constant(format!("{prefix}.b2"), 1, hidden, 0.0)?,
            norm: NormParams::new(pb, &format!("{prefix}.norm"), hidden)?,
        })
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, x: TensorId) -> Result<TensorId> {
        let inner = g.matmul(x, self.w1)?;
        let inner = g.add_bias(inner, self.b1)?;
        let inner = g.relu(inner);
        let out = g.matmul(inner, self.w2)?;
        let out = g.add_bias(out, self.b2)?;
        let sum = g.add(x, out)?;
        self.norm.apply(g, sum)
    }
}

// ── encoder layer ───────────────────────────────────────────────────────

/// One encoder layer: self-attention and cause attention in parallel
/// (shared projections), fused by the gate, then residual + norm and the
/// feed-forward sublayer. Without a cause mask the cause branch is not
/// built at all and the layer is a plain transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub fusion: FusionGate,
    pub attn_norm: NormParams,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<S: Scalar>(
        pb: &mut ParamBuilder<'_, S>,
        prefix: &str,
        hidden: usize,
        heads: usize,
        ffn_inner: usize,
    ) -> Result<EncoderLayer> {
        Ok(EncoderLayer {
            attn: AttentionParams::new(pb, &format!("{prefix}.attn"), hidden, heads)?,
            fusion: FusionGate::new(pb, &format!("{prefix}.fusion"), hidden)?,
            attn_norm: NormParams::new(pb, &format!("{prefix}.attn_norm"), hidden)?,
            ffn: FeedForward::new(pb, &format!("{prefix}.ffn"), hidden, ffn_inner)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        h: TensorId,
        cause_mask: Option<&[bool]>,
        padding_mask: Option<&[bool]>,
        diag: &Diagnostics,
    ) -> Result<TensorId> {
        let a_s = self_attention(g, &self.attn, h, padding_mask)?;
        let fused = match cause_mask {
            None => a_s,
            Some(e) => {
                let a_c = cause_attention(g, &self.attn, h, e, padding_mask, diag)?;
                fuse(g, &self.fusion, a_c, a_s)?
            }
        };
        let sum = g.add(h, fused)?;
        let normed = self.attn_norm.apply(g, sum)?;
        self.ffn.apply(g, normed)
    }
}

// ── decoder layer ───────────────────────────────────────────────────────

/// One decoder layer, split so callers can insert a sublayer between the
/// causal self-attention and the cross-attention: `self_part` computes
/// LayerNorm(o + CausalSelfAttention(o)); `cross_part` applies the
/// residual cross-attention over the memory and the feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub self_norm: NormParams,
    pub cross: CrossAttBlock,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<S: Scalar>(
        pb: &mut ParamBuilder<'_, S>,
        prefix: &str,
        hidden: usize,
        heads: usize,
        ffn_inner: usize,
    ) -> Result<DecoderLayer> {
        Ok(DecoderLayer {
            self_attn: AttentionParams::new(pb, &format!("{prefix}.self_attn"), hidden, heads)?,
            self_norm: NormParams::new(pb, &format!("{prefix}.self_norm"), hidden)?,
            cross: CrossAttBlock::new(pb, &format!("{prefix}.cross"), hidden, heads)?,
            ffn: FeedForward::new(pb, &format!("{prefix}.ffn"), hidden, ffn_inner)?,
        })
    }

    pub fn self_part<S: Scalar>(&self, g: &mut Graph<S>, o: TensorId) -> Result<TensorId> {
        let a = attend(g, &self.self_attn, o, o, None, true)?;
        let sum = g.add(o, a)?;
        self.self_norm.apply(g, sum)
    }

    pub fn cross_part<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        o: TensorId,
        memory: Option<TensorId>,
        memory_mask: Option<&[bool]>,
        diag: &Diagnostics,
    ) -> Result<TensorId> {
        let x = self.cross.apply(g, o, memory, memory_mask, diag)?;
        self.ffn.apply(g, x)
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        o: TensorId,
        memory: Option<TensorId>,
        memory_mask: Option<&[bool]>,
        diag: &Diagnostics,
    ) -> Result<TensorId> {
        let s = self.self_part(g, o)?;
        self.cross_part(g, s, memory, memory_mask, diag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn bits(g: &Graph<f64>, id: TensorId) -> Vec<u64> {
        g.data(id).iter().map(|v| v.to_bits()).collect()
    }

    fn builder(g: &mut Graph<f64>) -> ParamBuilder<'_, f64> {
        ParamBuilder::new(g, 42, 0.2)
    }

    #[test]
    fn heads_must_divide_hidden() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        assert!(AttentionParams::new(&mut pb, "a", 6, 4).is_err());
        assert!(AttentionParams::new(&mut pb, "a", 8, 0).is_err());
        assert!(AttentionParams::new(&mut pb, "a", 8, 4).is_ok());
    }

    #[test]
    fn attending_to_duplicated_keys_changes_nothing() {
        // Two copies of the same key position split the weight 0.5/0.5,
        // which reconstructs the single-key output exactly.
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let p = AttentionParams::new(&mut pb, "a", 8, 2).unwrap();
        let q = {
            let data = randn_vec(3 * 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
            g.leaf(3, 8, data).unwrap()
        };
        let key = {
            let data = randn_vec(8, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
            g.leaf(1, 8, data).unwrap()
        };
        let doubled = g.concat_rows(&[key, key]).unwrap();
        let one = attend(&mut g, &p, q, key, None, false).unwrap();
        let two = attend(&mut g, &p, q, doubled, None, false).unwrap();
        assert_eq!(bits(&g, one), bits(&g, two));
    }

    #[test]
    fn empty_key_mask_yields_exact_zeros() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let p = AttentionParams::new(&mut pb, "a", 4, 2).unwrap();
        let h = g.leaf(2, 4, vec![0.5; 8]).unwrap();
        let out = self_attention(&mut g, &p, h, Some(&[false, false])).unwrap();
        assert!(g.data(out).iter().all(|v| *v == 0.0));
    }

    /// Plain-loop multi-head attention for comparison.
    #[allow(clippy::too_many_arguments)]
    fn oracle_attend(
        g: &Graph<f64>,
        p: &AttentionParams,
        q_in: &[Vec<f64>],
        k_in: &[Vec<f64>],
        mask: Option<&[bool]>,
    ) -> Vec<Vec<f64>> {
        let hidden = q_in[0].len();
        let dh = hidden / p.heads;
        let mat = |id: TensorId| -> Vec<Vec<f64>> {
            let (r, c) = g.shape(id);
            (0..r).map(|i| g.data(id)[i * c..(i + 1) * c].to_vec()).collect()
        };
        let project = |x: &[Vec<f64>], w: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    (0..hidden)
                        .map(|j| {
                            b[0][j] + row.iter().zip(w).map(|(xi, wrow)| xi * wrow[j]).sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        };
        let q = project(q_in, &mat(p.wq), &mat(p.bq));
        let k = project(k_in, &mat(p.wk), &mat(p.bk));
        let v = project(k_in, &mat(p.wv), &mat(p.bv));
        let mut concat = vec![vec![0.0; hidden]; q.len()];
        for head in 0..p.heads {
            let cols = head * dh..(head + 1) * dh;
            for (qi, qrow) in q.iter().enumerate() {
                let mut scores: Vec<f64> = k
                    .iter()
                    .map(|krow| {
                        cols.clone().map(|c| qrow[c] * krow[c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                if let Some(m) = mask {
                    for (s, keep) in scores.iter_mut().zip(m) {
                        if !keep {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (c_off, c) in cols.clone().enumerate() {
                    concat[qi][c] = exps
                        .iter()
                        .zip(&v)
                        .map(|(e, vrow)| e / z * vrow[head * dh + c_off])
                        .sum();
                }
            }
        }
        let wo = mat(p.wo);
        let bo = mat(p.bo);
        concat
            .iter()
            .map(|row| {
                (0..hidden)
                    .map(|j| bo[0][j] + row.iter().zip(&wo).map(|(x, w)| x * w[j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn attention_matches_a_plain_loop_oracle() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let p = AttentionParams::new(&mut pb, "a", 8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let qd: Vec<f64> = randn_vec(4 * 8, 1.0, &mut rng);
        let q = g.leaf(4, 8, qd.clone()).unwrap();
        let out = attend(&mut g, &p, q, q, None, false).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|i| qd[i * 8..(i + 1) * 8].to_vec()).collect();
        let expect = oracle_attend(&g, &p, &rows, &rows, None);
        for (row, erow) in (0..4).map(|i| &g.data(out)[i * 8..(i + 1) * 8]).zip(&expect) {
            for (a, b) in row.iter().zip(erow) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn all_ones_cause_mask_reproduces_self_attention_bitwise() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let p = AttentionParams::new(&mut pb, "a", 8, 2).unwrap();
        let h = {
            let data = randn_vec(5 * 8, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
            g.leaf(5, 8, data).unwrap()
        };
        let diag = Diagnostics::new();
        let a_s = self_attention(&mut g, &p, h, None).unwrap();
        let a_c = cause_attention(&mut g, &p, h, &[true; 5], None, &diag).unwrap();
        assert_eq!(bits(&g, a_s), bits(&g, a_c));
        assert_eq!(diag.cause_fallbacks(), 0);
    }

    #[test]
    fn one_hot_cause_mask_attends_only_there() {
        // With a single admissible key every query row gets that key's
        // value vector, so all output rows are identical and equal the
        // single-key attention output.
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let p = AttentionParams::new(&mut pb, "a", 8, 2).unwrap();
        let data = randn_vec(4 * 8, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let h = g.leaf(4, 8, data.clone()).unwrap();
        let diag = Diagnostics::new();
        let mask = [false, false, true, false];
        let out = cause_attention(&mut g, &p, h, &mask, None, &diag).unwrap();
        let first = g.data(out)[0..8].to_vec();
        for r in 1..4 {
            assert_eq!(
                first
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
                g.data(out)[r * 8..(r + 1) * 8]
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            );
        }
        let key = g.leaf(1, 8, data[16..24].to_vec()).unwrap();
        let q = g.leaf(4, 8, data).unwrap();
        let single = attend(&mut g, &p, q, key, None, false).unwrap();
        for (a, b) in g.data(out).iter().zip(g.data(single)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_cause_mask_matches_a_scalar_masked_softmax_oracle() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let p = AttentionParams::new(&mut pb, "a", 6, 2).unwrap();
        let data = randn_vec(3 * 6, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let h = g.leaf(3, 6, data.clone()).unwrap();
        let diag = Diagnostics::new();
        let mask = [true, true, false];
        let out = cause_attention(&mut g, &p, h, &mask, None, &diag).unwrap();
        let rows: Vec<Vec<f64>> = (0..3).map(|i| data[i * 6..(i + 1) * 6].to_vec()).collect();
        let expect = oracle_attend(&g, &p, &rows, &rows, Some(&mask));
        for (i, erow) in expect.iter().enumerate() {
            for (a, b) in g.data(out)[i * 6..(i + 1) * 6].iter().zip(erow) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn all_zero_cause_mask_falls_back_to_self_attention() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let p = AttentionParams::new(&mut pb, "a", 4, 2).unwrap();
        let h = {
            let data = randn_vec(3 * 4, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
            g.leaf(3, 4, data).unwrap()
        };
        let diag = Diagnostics::new();
        let a_s = self_attention(&mut g, &p, h, None).unwrap();
        let a_c = cause_attention(&mut g, &p, h, &[false; 3], None, &diag).unwrap();
        assert_eq!(bits(&g, a_s), bits(&g, a_c));
        assert_eq!(diag.cause_fallbacks(), 1);
    }

    #[test]
    fn fusion_extremes_select_each_branch_exactly() {
        let mut g = Graph::<f64>::new();
        let a_c = g.leaf(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a_s = g.leaf(2, 3, vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.0]).unwrap();

        // Zero weights and bias: mu = 0, so F = a_c.
        let w0 = g.param(6, 3, vec![0.0; 18]).unwrap();
        let b0 = g.param(1, 3, vec![0.0; 3]).unwrap();
        let f0 = fuse(&mut g, &FusionGate { w: w0, b: b0 }, a_c, a_s).unwrap();
        assert_eq!(bits(&g, f0), bits(&g, a_c));

        // Bias exactly 1 with zero weights: mu = 1, so F = a_s.
        let b1 = g.param(1, 3, vec![1.0; 3]).unwrap();
        let f1 = fuse(&mut g, &FusionGate { w: w0, b: b1 }, a_c, a_s).unwrap();
        assert_eq!(bits(&g, f1), bits(&g, a_s));

        // mu = 0.25, a_s = 4, a_c = 8 -> 7.
        let ac1 = g.leaf(1, 1, vec![8.0]).unwrap();
        let as1 = g.leaf(1, 1, vec![4.0]).unwrap();
        let w1 = g.param(2, 1, vec![0.0, 0.0]).unwrap();
        let bq = g.param(1, 1, vec![0.25]).unwrap();
        let f = fuse(&mut g, &FusionGate { w: w1, b: bq }, ac1, as1).unwrap();
        assert_eq!(g.data(f), &[7.0]);
    }

    #[test]
    fn identical_branches_fuse_to_themselves_for_any_gate() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let gate = FusionGate::new(&mut pb, "f", 4, ).unwrap();
        let data = randn_vec(3 * 4, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let a = g.leaf(3, 4, data.clone()).unwrap();
        let b = g.leaf(3, 4, data).unwrap();
        let f = fuse(&mut g, &gate, a, b).unwrap();
        assert_eq!(bits(&g, f), bits(&g, a));
    }

    #[test]
    fn cross_block_with_zeroed_values_is_layer_norm_of_queries() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let block = CrossAttBlock::new(&mut pb, "c", 6, 2).unwrap();
        // Zero the value path and the output bias so attention contributes
        // exactly nothing.
        for id in [block.attn.wv, block.attn.bv, block.attn.bo] {
            let (r, c) = g.shape(id);
            g.set_data(id, vec![0.0; r * c]).unwrap();
        }
        let q = {
            let data = randn_vec(3 * 6, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
            g.leaf(3, 6, data).unwrap()
        };
        let mem = {
            let data = randn_vec(2 * 6, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
            g.leaf(2, 6, data).unwrap()
        };
        let diag = Diagnostics::new();
        let out = block.apply(&mut g, q, Some(mem), None, &diag).unwrap();
        let plain = block.norm.apply(&mut g, q).unwrap();
        assert_eq!(bits(&g, out), bits(&g, plain));
        assert_eq!(diag.empty_memory_passthroughs(), 0);
    }

    #[test]
    fn cross_block_without_memory_passes_through_with_a_diagnostic() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let block = CrossAttBlock::new(&mut pb, "c", 4, 2).unwrap();
        let q = g.leaf(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let diag = Diagnostics::new();
        let out = block.apply(&mut g, q, None, None, &diag).unwrap();
        let plain = block.norm.apply(&mut g, q).unwrap();
        assert_eq!(bits(&g, out), bits(&g, plain));
        assert_eq!(diag.empty_memory_passthroughs(), 1);
    }

    #[test]
    fn cross_block_single_memory_position_gets_full_weight() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let block = CrossAttBlock::new(&mut pb, "c", 6, 3).unwrap();
        let q = {
            let data = randn_vec(2 * 6, 1.0, &mut ChaCha8Rng::seed_from_u64(10));
            g.leaf(2, 6, data).unwrap()
        };
        let mem = {
            let data = randn_vec(6, 1.0, &mut ChaCha8Rng::seed_from_u64(11));
            g.leaf(1, 6, data).unwrap()
        };
        let diag = Diagnostics::new();
        let out = block.apply(&mut g, q, Some(mem), None, &diag).unwrap();
        // Oracle: attention output is the value projection of the single
        // memory row for every query.
        let a = attend(&mut g, &block.attn, q, mem, None, false).unwrap();
        let sum = g.add(q, a).unwrap();
        let expect = block.norm.apply(&mut g, sum).unwrap();
        assert_eq!(bits(&g, out), bits(&g, expect));
        let row0 = g.data(a)[0..6].to_vec();
        let row1 = g.data(a)[6..12].to_vec();
        assert_eq!(row0, row1, "both queries see only the one memory row");
    }

    #[test]
    fn encoder_layer_without_cause_mask_equals_all_ones_mask_bitwise() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let layer = EncoderLayer::new(&mut pb, "e", 8, 2, 16).unwrap();
        let h = {
            let data = randn_vec(4 * 8, 1.0, &mut ChaCha8Rng::seed_from_u64(12));
            g.leaf(4, 8, data).unwrap()
        };
        let diag = Diagnostics::new();
        let vanilla = layer.forward(&mut g, h, None, None, &diag).unwrap();
        let all_ones = layer
            .forward(&mut g, h, Some(&[true; 4]), None, &diag)
            .unwrap();
        assert_eq!(bits(&g, vanilla), bits(&g, all_ones));
    }

    #[test]
    fn decoder_layer_forward_composes_its_two_parts() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let layer = DecoderLayer::new(&mut pb, "d", 8, 2, 16).unwrap();
        let o = {
            let data = randn_vec(3 * 8, 1.0, &mut ChaCha8Rng::seed_from_u64(13));
            g.leaf(3, 8, data).unwrap()
        };
        let mem = {
            let data = randn_vec(5 * 8, 1.0, &mut ChaCha8Rng::seed_from_u64(14));
            g.leaf(5, 8, data).unwrap()
        };
        let diag = Diagnostics::new();
        let whole = layer.forward(&mut g, o, Some(mem), None, &diag).unwrap();
        let s = layer.self_part(&mut g, o).unwrap();
        let parts = layer.cross_part(&mut g, s, Some(mem), None, &diag).unwrap();
        assert_eq!(bits(&g, whole), bits(&g, parts));
    }

    #[test]
    fn param_builder_records_names_in_creation_order() {
        let mut g = Graph::<f64>::new();
        let mut pb = builder(&mut g);
        let _ = AttentionParams::new(&mut pb, "x", 4, 2).unwrap();
        let names: Vec<String> = pb.into_names().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            vec!["x.wq", "x.bq", "x.wk", "x.bk", "x.wv", "x.bv", "x.wo", "x.bo"]
        );
    }
}
