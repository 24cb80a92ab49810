//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! The [`Graph`] is a tape: every operation validates shapes, computes its
//! forward value eagerly, and appends a node recording its inputs. Node
//! order is therefore already topological, and [`Graph::backward`] is a
//! single reverse sweep that visits each node exactly once. Per-pass
//! gradients live in a scratch table and are added into the persistent
//! `grad` buffers of parameter nodes at the end of the sweep, so calling
//! `backward` twice without zeroing doubles every parameter gradient
//! exactly.
//!
//! Everything is two-dimensional; scalars are `1x1`, vectors `1xN`. All
//! data is immutable once written (the optimizer mutates parameter buffers
//! between passes via [`Graph::set_data`] / [`Graph::apply_to_data`]).
//!
//! Reductions whose terms are indexed by interchangeable slots (softmax
//! denominators, weighted mixtures) sum their terms in sorted-by-value
//! order. IEEE addition is commutative, so two forward passes whose term
//! multisets are equal produce bit-identical sums regardless of slot
//! order — this is what makes relabeling symmetries exact rather than
//! approximate.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Handle to a node in a [`Graph`]. Only valid for the graph that minted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Loss reduction mode for [`Graph::cross_entropy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Scale(TensorId, S),
    AddBias(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Relu(TensorId),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceCols {
        x: TensorId,
        start: usize,
    },
    IndexScalar(TensorId, usize),
    /// Masked entries produce exact zero probabilities, so the backward
    /// formula needs only the stored output, never the mask itself.
    MaskedSoftmax { x: TensorId },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        ignore: Option<usize>,
        reduction: Reduction,
        probs: Vec<S>,
        counted: usize,
    },
    MeanRows {
        x: TensorId,
        keep: Option<Vec<bool>>,
        counted: usize,
    },
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
    },
    GateBlend {
        gate: TensorId,
        on: TensorId,
        off: TensorId,
    },
    MixWeighted {
        weights: Vec<TensorId>,
        terms: Vec<TensorId>,
    },
    Dropout {
        x: TensorId,
        kept: Vec<bool>,
        scale: S,
    },
    SumAll(TensorId),
}

#[derive(Debug, Clone)]
struct Node<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
    /// Persistent gradient buffer; populated by `backward` for `param` nodes.
    grad: Option<Vec<S>>,
    /// Explicitly marked as a trainable leaf.
    param: bool,
    /// Gradient flows through this node (param, or any input flows).
    flows: bool,
    op: Op<S>,
}

/// Autodiff tape. See the module docs for the execution model.
#[derive(Debug, Clone, Default)]
pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    persistent: usize,
}

/// Sample `n` values from a zero-mean normal with standard deviation `std`.
pub fn randn_vec<S: Scalar, R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<S> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::from_f64(z * std)
        })
        .collect()
}

/// Sum values in ascending order so the result depends only on the multiset
/// of terms, never on their arrival order.
fn ordered_sum<S: Scalar>(vals: &mut [S]) -> S {
    vals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut acc = S::zero();
    for v in vals.iter() {
        acc += *v;
    }
    acc
}

fn shape_str(rows: usize, cols: usize) -> String {
    format!("{rows}x{cols}")
}

fn ensure_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite input to {op}")));
    }
    Ok(())
}

// ── forward kernels ─────────────────────────────────────────────────────

/// C[m x n] = A[m x k] * B[k x n]
fn matmul_nn<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * *bv;
            }
        }
    }
    c
}

/// C[m x k] = A[m x n] * B^T where B is [k x n]
fn matmul_nt<S: Scalar>(a: &[S], m: usize, n: usize, b: &[S], k: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += *av * *bv;
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// C[k x n] = A^T * G where A is [m x k], G is [m x n]
fn matmul_tn<S: Scalar>(a: &[S], m: usize, k: usize, g: &[S], n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in c_row.iter_mut().zip(g_row) {
                *cv += aip * *gv;
            }
        }
    }
    c
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            persistent: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: TensorId) -> &Node<S> {
        &self.nodes[id.0]
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<S>, op: Op<S>, flows: bool) -> TensorId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            param: false,
            flows,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn flows(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.node(*id).flows)
    }

    // ── leaves and persistence ──────────────────────────────────────────

    /// Constant leaf. Gradients do not flow into it.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<S>) -> Result<TensorId> {
        if rows == 0 || cols == 0 {
            return Err(Error::Usage(format!(
                "tensors must be non-empty, got {}",
                shape_str(rows, cols)
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Usage(format!(
                "data length {} does not match shape {}",
                data.len(),
                shape_str(rows, cols)
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// Trainable leaf: `backward` populates its gradient buffer.
    pub fn param(&mut self, rows: usize, cols: usize, data: Vec<S>) -> Result<TensorId> {
        let id = self.leaf(rows, cols, data)?;
        self.nodes[id.0].param = true;
        self.nodes[id.0].flows = true;
        Ok(id)
    }

    pub fn scalar(&mut self, v: S) -> TensorId {
        self.push(1, 1, vec![v], Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Result<TensorId> {
        self.leaf(rows, cols, vec![S::zero(); rows * cols])
    }

    pub fn full(&mut self, rows: usize, cols: usize, v: S) -> Result<TensorId> {
        self.leaf(rows, cols, vec![v; rows * cols])
    }

    /// Everything appended after this call can be dropped by
    /// [`Graph::truncate_to`] with the returned mark.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Freeze the current prefix (typically: all parameters) so
    /// `truncate_to(persistent_mark())` clears activations only.
    pub fn mark_persistent(&mut self) {
        self.persistent = self.nodes.len();
    }

    pub fn persistent_mark(&self) -> usize {
        self.persistent
    }

    /// Drop all nodes at or after `mark`. Handles minted for dropped nodes
    /// become invalid; callers own that discipline.
    pub fn truncate_to(&mut self, mark: usize) {
        assert!(
            mark >= self.persistent,
            "cannot truncate into the persistent prefix"
        );
        self.nodes.truncate(mark);
    }

    // ── accessors ───────────────────────────────────────────────────────

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.node(id).data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.node(id).grad.as_deref()
    }

    /// Value of a `1x1` tensor.
    pub fn item(&self, id: TensorId) -> Result<S> {
        let n = self.node(id);
        if n.rows * n.cols != 1 {
            return Err(Error::Usage(format!(
                "item() needs a scalar, got {}",
                shape_str(n.rows, n.cols)
            )));
        }
        Ok(n.data[0])
    }

    /// Replace the raw buffer of a leaf (checkpoint loading, tests).
    pub fn set_data(&mut self, id: TensorId, data: Vec<S>) -> Result<()> {
        let n = &mut self.nodes[id.0];
        if data.len() != n.data.len() {
            return Err(Error::Usage(format!(
                "set_data length {} does not match {}",
                data.len(),
                shape_str(n.rows, n.cols)
            )));
        }
        n.data = data;
        Ok(())
    }

    /// In-place update of a leaf buffer (optimizer steps).
    pub fn apply_to_data(&mut self, id: TensorId, f: impl FnOnce(&mut [S], Option<&[S]>)) {
        let n = &mut self.nodes[id.0];
        f(&mut n.data, n.grad.as_deref());
    }

    pub fn zero_grad(&mut self, id: TensorId) {
        self.nodes[id.0].grad = None;
    }

    // ── elementwise and linear ops ──────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::Shape {
                op,
                lhs: shape_str(ar, ac),
                rhs: shape_str(br, bc),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let (r, c) = self.shape(a);
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let flows = self.flows(&[a, b]);
        Ok(self.push(r, c, data, Op::Add(a, b), flows))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let (r, c) = self.shape(a);
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x - *y)
            .collect();
        let flows = self.flows(&[a, b]);
        Ok(self.push(r, c, data, Op::Sub(a, b), flows))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let (r, c) = self.shape(a);
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let flows = self.flows(&[a, b]);
        Ok(self.push(r, c, data, Op::Mul(a, b), flows))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let data = self.data(a).iter().map(|x| -*x).collect();
        let flows = self.node(a).flows;
        self.push(r, c, data, Op::Neg(a), flows)
    }

    pub fn scale(&mut self, a: TensorId, k: S) -> TensorId {
        let (r, c) = self.shape(a);
        let data = self.data(a).iter().map(|x| *x * k).collect();
        let flows = self.node(a).flows;
        self.push(r, c, data, Op::Scale(a, k), flows)
    }

    /// `a [R x C] + bias [1 x C]`, broadcast over rows.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != c {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: shape_str(r, c),
                rhs: shape_str(br, bc),
            });
        }
        let b = self.data(bias);
        let mut data = Vec::with_capacity(r * c);
        for row in self.data(a).chunks(c) {
            for (x, y) in row.iter().zip(b) {
                data.push(*x + *y);
            }
        }
        let flows = self.flows(&[a, bias]);
        Ok(self.push(r, c, data, Op::AddBias(a, bias), flows))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: shape_str(m, k),
                rhs: shape_str(k2, n),
            });
        }
        let data = matmul_nn(self.data(a), m, k, self.data(b), n);
        let flows = self.flows(&[a, b]);
        Ok(self.push(m, n, data, Op::Matmul(a, b), flows))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let src = self.data(a);
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let flows = self.node(a).flows;
        self.push(c, r, data, Op::Transpose(a), flows)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let data = self
            .data(a)
            .iter()
            .map(|x| if *x > S::zero() { *x } else { S::zero() })
            .collect();
        let flows = self.node(a).flows;
        self.push(r, c, data, Op::Relu(a), flows)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero parts".into()));
        }
        let (_, c) = self.shape(parts[0]);
        let mut rows = 0;
        for p in parts {
            let (pr, pc) = self.shape(*p);
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: shape_str(rows.max(1), c),
                    rhs: shape_str(pr, pc),
                });
            }
            rows += pr;
        }
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            data.extend_from_slice(self.data(*p));
        }
        let flows = self.flows(parts);
        Ok(self.push(rows, c, data, Op::ConcatRows(parts.to_vec()), flows))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero parts".into()));
        }
        let (r, _) = self.shape(parts[0]);
        let mut cols = 0;
        for p in parts {
            let (pr, pc) = self.shape(*p);
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: shape_str(r, cols.max(1)),
                    rhs: shape_str(pr, pc),
                });
            }
            cols += pc;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for p in parts {
                let (_, pc) = self.shape(*p);
                data.extend_from_slice(&self.data(*p)[i * pc..(i + 1) * pc]);
            }
        }
        let flows = self.flows(parts);
        Ok(self.push(r, cols, data, Op::ConcatCols(parts.to_vec()), flows))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        if start >= end || end > c {
            return Err(Error::Index(format!(
                "slice_cols {start}..{end} out of range for {}",
                shape_str(r, c)
            )));
        }
        let w = end - start;
        let src = self.data(x);
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let flows = self.node(x).flows;
        Ok(self.push(r, w, data, Op::SliceCols { x, start }, flows))
    }

    /// One element of `x` (flat row-major index) as a `1x1` tensor.
    pub fn index_scalar(&mut self, x: TensorId, idx: usize) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        if idx >= r * c {
            return Err(Error::Index(format!(
                "index {idx} out of range for {}",
                shape_str(r, c)
            )));
        }
        let v = self.data(x)[idx];
        let flows = self.node(x).flows;
        Ok(self.push(1, 1, vec![v], Op::IndexScalar(x, idx), flows))
    }

    // ── structured kernels ──────────────────────────────────────────────

    /// Row-wise softmax with an optional key mask and optional causal
    /// restriction (column `j` is admissible for row `i` iff `j <= i`).
    ///
    /// Rows whose admissible set is empty produce exact zeros. Admissible
    /// exponentials are summed in sorted order (see module docs).
    pub fn masked_softmax(
        &mut self,
        x: TensorId,
        keep: Option<&[bool]>,
        causal: bool,
    ) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        if let Some(k) = keep {
            if k.len() != c {
                return Err(Error::Shape {
                    op: "masked_softmax",
                    lhs: shape_str(r, c),
                    rhs: format!("mask of length {}", k.len()),
                });
            }
        }
        if causal && r != c {
            return Err(Error::Shape {
                op: "masked_softmax(causal)",
                lhs: shape_str(r, c),
                rhs: "square".into(),
            });
        }
        ensure_finite("masked_softmax", self.data(x))?;
        let src = self.data(x);
        let mut data = vec![S::zero(); r * c];
        let admissible = |i: usize, j: usize| {
            keep.map_or(true, |k| k[j]) && (!causal || j <= i)
        };
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mut m = S::neg_infinity();
            for (j, v) in row.iter().enumerate() {
                if admissible(i, j) && *v > m {
                    m = *v;
                }
            }
            if m == S::neg_infinity() {
                continue; // empty support: exact zeros
            }
            let mut exps: Vec<S> = Vec::with_capacity(c);
            for (j, v) in row.iter().enumerate() {
                if admissible(i, j) {
                    exps.push((*v - m).exp());
                }
            }
            let denom = ordered_sum(&mut exps);
            let out = &mut data[i * c..(i + 1) * c];
            for (j, v) in row.iter().enumerate() {
                if admissible(i, j) {
                    out[j] = (*v - m).exp() / denom;
                }
            }
        }
        let flows = self.node(x).flows;
        Ok(self.push(r, c, data, Op::MaskedSoftmax { x }, flows))
    }

    /// Plain softmax over the last axis.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        self.masked_softmax(x, None, false)
    }

    /// Per-row layer normalization: `(x - mean) / sqrt(var + eps) * gain + bias`.
    /// `gain` and `bias` are `1 x C`. `eps` must be positive.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: S,
    ) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        for (name, t) in [("gain", gain), ("bias", bias)] {
            let (tr, tc) = self.shape(t);
            if tr != 1 || tc != c {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape_str(r, c),
                    rhs: format!("{name} {}", shape_str(tr, tc)),
                });
            }
        }
        if !(eps > S::zero()) {
            return Err(Error::Usage("layer_norm eps must be positive".into()));
        }
        ensure_finite("layer_norm", self.data(x))?;
        let src = self.data(x);
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let cn = S::from_usize(c);
        let mut data = vec![S::zero(); r * c];
        let mut means = Vec::with_capacity(r);
        let mut inv_stds = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mut mean = S::zero();
            for v in row {
                mean += *v;
            }
            mean = mean / cn;
            let mut var = S::zero();
            for v in row {
                let d = *v - mean;
                var += d * d;
            }
            var = var / cn;
            let inv = S::one() / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv);
            let out = &mut data[i * c..(i + 1) * c];
            for j in 0..c {
                out[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let flows = self.flows(&[x, gain, bias]);
        Ok(self.push(
            r,
            c,
            data,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                inv_std: inv_stds,
            },
            flows,
        ))
    }

    /// Token-level cross entropy between `logits [T x V]` and `targets`
    /// (length T). Rows whose target equals `ignore` contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        ignore: Option<usize>,
        reduction: Reduction,
    ) -> Result<TensorId> {
        let (t, v) = self.shape(logits);
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape_str(t, v),
                rhs: format!("{} targets", targets.len()),
            });
        }
        ensure_finite("cross_entropy", self.data(logits))?;
        let src = self.data(logits);
        let mut probs = vec![S::zero(); t * v];
        let mut total = S::zero();
        let mut counted = 0usize;
        for (i, &target) in targets.iter().enumerate() {
            if Some(target) == ignore {
                continue;
            }
            if target >= v {
                return Err(Error::Index(format!(
                    "cross_entropy target {target} out of range for vocabulary of {v} (row {i})"
                )));
            }
            let row = &src[i * v..(i + 1) * v];
            let mut m = S::neg_infinity();
            for x in row {
                if *x > m {
                    m = *x;
                }
            }
            let prow = &mut probs[i * v..(i + 1) * v];
            for (j, x) in row.iter().enumerate() {
                prow[j] = (*x - m).exp();
            }
            let mut buf = prow.to_vec();
            let denom = ordered_sum(&mut buf);
            for p in prow.iter_mut() {
                *p = *p / denom;
            }
            // -log p = log(sum exp(x - m)) - (x_t - m)
            total += denom.ln() - (row[target] - m);
            counted += 1;
        }
        if counted == 0 && reduction == Reduction::Mean {
            return Err(Error::Usage(
                "cross_entropy mean over zero counted targets".into(),
            ));
        }
        let value = match reduction {
            Reduction::Sum => total,
            Reduction::Mean => total / S::from_usize(counted),
        };
        let flows = self.node(logits).flows;
        Ok(self.push(
            1,
            1,
            vec![value],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                reduction,
                probs,
                counted,
            },
            flows,
        ))
    }

    /// Mean over rows (optionally restricted to `keep` rows): `[R x C] -> [1 x C]`.
    pub fn mean_rows(&mut self, x: TensorId, keep: Option<&[bool]>) -> Result<TensorId> {
        let (r, c) = self.shape(x);
        if let Some(k) = keep {
            if k.len() != r {
                return Err(Error::Shape {
                    op: "mean_rows",
                    lhs: shape_str(r, c),
                    rhs: format!("mask of length {}", k.len()),
                });
            }
        }
        let counted = keep.map_or(r, |k| k.iter().filter(|b| **b).count());
        if counted == 0 {
            return Err(Error::Usage("mean_rows over zero kept rows".into()));
        }
        let src = self.data(x);
        let mut data = vec![S::zero(); c];
        for i in 0..r {
            if keep.map_or(true, |k| k[i]) {
                for j in 0..c {
                    data[j] += src[i * c + j];
                }
            }
        }
        let cn = S::from_usize(counted);
        for v in data.iter_mut() {
            *v = *v / cn;
        }
        let flows = self.node(x).flows;
        Ok(self.push(
            1,
            c,
            data,
            Op::MeanRows {
                x,
                keep: keep.map(|k| k.to_vec()),
                counted,
            },
            flows,
        ))
    }

    /// Gather rows of `table [V x C]` by id: `[len(ids) x C]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, c) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Usage("embedding of zero ids".into()));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Index(format!(
                    "embedding id {id} out of range for table of {v} (position {pos})"
                )));
            }
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let flows = self.node(table).flows;
        Ok(self.push(
            ids.len(),
            c,
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            flows,
        ))
    }

    /// `gate*on + (1-gate)*off`, elementwise, with three exactness
    /// guarantees: gate 0 gives `off`, gate 1 gives `on`, and equal inputs
    /// pass through unchanged for any gate value.
    pub fn gate_blend(&mut self, gate: TensorId, on: TensorId, off: TensorId) -> Result<TensorId> {
        self.check_same_shape("gate_blend", gate, on)?;
        self.check_same_shape("gate_blend", on, off)?;
        let (r, c) = self.shape(gate);
        let gd = self.data(gate);
        let od = self.data(on);
        let fd = self.data(off);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r * c {
            // 0*x + 1*y == y exactly in IEEE for finite x, y, so the only
            // case needing a branch is on == off with an arbitrary gate.
            if od[i] == fd[i] {
                data.push(od[i]);
            } else {
                data.push(gd[i] * od[i] + (S::one() - gd[i]) * fd[i]);
            }
        }
        let flows = self.flows(&[gate, on, off]);
        Ok(self.push(r, c, data, Op::GateBlend { gate, on, off }, flows))
    }

    /// `sum_i weights[i] * terms[i]` where each weight is a `1x1` tensor and
    /// all terms share a shape. Per element, the weighted terms are summed
    /// in sorted order, so permuting the (weight, term) pairs changes
    /// nothing, bit for bit.
    pub fn mix_weighted(&mut self, weights: &[TensorId], terms: &[TensorId]) -> Result<TensorId> {
        if weights.len() != terms.len() || weights.is_empty() {
            return Err(Error::Usage(format!(
                "mix_weighted needs matching non-empty lists, got {} weights and {} terms",
                weights.len(),
                terms.len()
            )));
        }
        let (r, c) = self.shape(terms[0]);
        for t in terms {
            self.check_same_shape("mix_weighted", terms[0], *t)?;
        }
        let mut ws = Vec::with_capacity(weights.len());
        for w in weights {
            ws.push(self.item(*w)?);
        }
        let mut data = Vec::with_capacity(r * c);
        let mut buf = vec![S::zero(); terms.len()];
        for e in 0..r * c {
            for (slot, t) in terms.iter().enumerate() {
                buf[slot] = ws[slot] * self.node(*t).data[e];
            }
            data.push(ordered_sum(&mut buf));
        }
        let mut all: Vec<TensorId> = weights.to_vec();
        all.extend_from_slice(terms);
        let flows = self.flows(&all);
        Ok(self.push(
            r,
            c,
            data,
            Op::MixWeighted {
                weights: weights.to_vec(),
                terms: terms.to_vec(),
            },
            flows,
        ))
    }

    /// Inverted dropout: elements survive with probability `1 - rate` and
    /// are scaled by `1/(1-rate)`. `rate == 0` is the identity.
    pub fn dropout<R: Rng>(&mut self, x: TensorId, rate: f64, rng: &mut R) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Usage(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.shape(x);
        let kept: Vec<bool> = (0..r * c).map(|_| rng.random::<f64>() >= rate).collect();
        let scale = S::from_f64(1.0 / (1.0 - rate));
        let src = self.data(x);
        let data = src
            .iter()
            .zip(&kept)
            .map(|(v, k)| if *k { *v * scale } else { S::zero() })
            .collect();
        let flows = self.node(x).flows;
        Ok(self.push(r, c, data, Op::Dropout { x, kept, scale }, flows))
    }

    /// Sum of all elements, as a `1x1` tensor.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut acc = S::zero();
        for v in self.data(x) {
            acc += *v;
        }
        let flows = self.node(x).flows;
        self.push(1, 1, vec![acc], Op::SumAll(x), flows)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Populates/accumulates `grad` on
    /// every parameter the root depends on. Each node is processed exactly
    /// once per call; repeated calls accumulate
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        let r = root.0;
        if r >= self.nodes.len() {
            return Err(Error::Usage("backward root is not a live node".into()));
        }
        {
            let n = &self.nodes[r];
            if n.rows * n.cols != 1 {
                return Err(Error::Usage(format!(
                    "backward root must be a scalar, got {}",
                    shape_str(n.rows, n.cols)
                )));
            }
            if !n.flows {
                return Err(Error::Usage(
                    "backward root does not depend on any parameter".into(),
                ));
            }
        }
        let mut pass: Vec<Option<Vec<S>>> = vec![None; r + 1];
        pass[r] = Some(vec![S::one()]);
        for i in (0..=r).rev() {
            let Some(g) = pass[i].take() else { continue };
            for (pid, contrib) in backward_contributions(&self.nodes, i, &g) {
                debug_assert!(pid < i, "tape op must reference earlier nodes");
                if !self.nodes[pid].flows {
                    continue;
                }
                match &mut pass[pid] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&contrib) {
                            *a += *v;
                        }
                    }
                    None => pass[pid] = Some(contrib),
                }
            }
            if self.nodes[i].param {
                let n = &mut self.nodes[i];
                let grad = n.grad.get_or_insert_with(|| vec![S::zero(); n.data.len()]);
                for (a, v) in grad.iter_mut().zip(&g) {
                    *a += *v;
                }
            }
        }
        Ok(())
    }
}

/// Gradient contributions of node `i` to its inputs, given upstream `g`.
fn backward_contributions<S: Scalar>(
    nodes: &[Node<S>],
    i: usize,
    g: &[S],
) -> Vec<(usize, Vec<S>)> {
    let n = &nodes[i];
    let (rows, cols) = (n.rows, n.cols);
    match &n.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(a.0, g.to_vec()), (b.0, g.to_vec())],
        Op::Sub(a, b) => vec![(a.0, g.to_vec()), (b.0, g.iter().map(|v| -*v).collect())],
        Op::Mul(a, b) => {
            let da = g
                .iter()
                .zip(&nodes[b.0].data)
                .map(|(gv, bv)| *gv * *bv)
                .collect();
            let db = g
                .iter()
                .zip(&nodes[a.0].data)
                .map(|(gv, av)| *gv * *av)
                .collect();
            vec![(a.0, da), (b.0, db)]
        }
        Op::Neg(a) => vec![(a.0, g.iter().map(|v| -*v).collect())],
        Op::Scale(a, k) => vec![(a.0, g.iter().map(|v| *v * *k).collect())],
        Op::AddBias(a, bias) => {
            let bc = nodes[bias.0].cols;
            let mut db = vec![S::zero(); bc];
            for row in g.chunks(bc) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += *v;
                }
            }
            vec![(a.0, g.to_vec()), (bias.0, db)]
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let nn = nodes[b.0].cols;
            // dA = G * B^T, dB = A^T * G
            let da = matmul_nt(g, m, nn, &nodes[b.0].data, k);
            let db = matmul_tn(&nodes[a.0].data, m, k, g, nn);
            vec![(a.0, da), (b.0, db)]
        }
        Op::Transpose(a) => {
            let (ar, ac) = (nodes[a.0].rows, nodes[a.0].cols);
            let mut da = vec![S::zero(); ar * ac];
            for i2 in 0..rows {
                for j in 0..cols {
                    da[j * ac + i2] = g[i2 * cols + j];
                }
            }
            vec![(a.0, da)]
        }
        Op::Relu(a) => {
            let da = g
                .iter()
                .zip(&nodes[a.0].data)
                .map(|(gv, xv)| if *xv > S::zero() { *gv } else { S::zero() })
                .collect();
            vec![(a.0, da)]
        }
        Op::ConcatRows(parts) => {
            let mut out = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].data.len();
                out.push((p.0, g[offset..offset + len].to_vec()));
                offset += len;
            }
            out
        }
        Op::ConcatCols(parts) => {
            let mut out = Vec::with_capacity(parts.len());
            let mut col0 = 0;
            for p in parts {
                let pc = nodes[p.0].cols;
                let mut dp = Vec::with_capacity(rows * pc);
                for i2 in 0..rows {
                    dp.extend_from_slice(&g[i2 * cols + col0..i2 * cols + col0 + pc]);
                }
                out.push((p.0, dp));
                col0 += pc;
            }
            out
        }
        Op::SliceCols { x, start } => {
            let (xr, xc) = (nodes[x.0].rows, nodes[x.0].cols);
            let mut dx = vec![S::zero(); xr * xc];
            for i2 in 0..rows {
                for j in 0..cols {
                    dx[i2 * xc + start + j] = g[i2 * cols + j];
                }
            }
            vec![(x.0, dx)]
        }
        Op::IndexScalar(x, idx) => {
            let mut dx = vec![S::zero(); nodes[x.0].data.len()];
            dx[*idx] = g[0];
            vec![(x.0, dx)]
        }
        Op::MaskedSoftmax { x } => {
            // y = softmax(x) over each row's admissible set:
            // dx_j = y_j * (g_j - sum_k y_k g_k); zero rows stay zero.
            let y = &n.data;
            let mut dx = vec![S::zero(); rows * cols];
            for i2 in 0..rows {
                let yr = &y[i2 * cols..(i2 + 1) * cols];
                let gr = &g[i2 * cols..(i2 + 1) * cols];
                let mut dot = S::zero();
                for (yv, gv) in yr.iter().zip(gr) {
                    dot += *yv * *gv;
                }
                let dr = &mut dx[i2 * cols..(i2 + 1) * cols];
                for j in 0..cols {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(x.0, dx)]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            inv_std,
        } => {
            let xd = &nodes[x.0].data;
            let gd = &nodes[gain.0].data;
            let cn = S::from_usize(cols);
            let mut dx = vec![S::zero(); rows * cols];
            let mut dgain = vec![S::zero(); cols];
            let mut dbias = vec![S::zero(); cols];
            for i2 in 0..rows {
                let xr = &xd[i2 * cols..(i2 + 1) * cols];
                let gr = &g[i2 * cols..(i2 + 1) * cols];
                let inv = inv_std[i2];
                let mu = mean[i2];
                // xhat_j = (x_j - mu) * inv
                let mut sum_dxhat = S::zero();
                let mut sum_dxhat_xhat = S::zero();
                for j in 0..cols {
                    let xhat = (xr[j] - mu) * inv;
                    let dxhat = gr[j] * gd[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgain[j] += gr[j] * xhat;
                    dbias[j] += gr[j];
                }
                let m1 = sum_dxhat / cn;
                let m2 = sum_dxhat_xhat / cn;
                let dr = &mut dx[i2 * cols..(i2 + 1) * cols];
                for j in 0..cols {
                    let xhat = (xr[j] - mu) * inv;
                    let dxhat = gr[j] * gd[j];
                    dr[j] = inv * (dxhat - m1 - xhat * m2);
                }
            }
            vec![(x.0, dx), (gain.0, dgain), (bias.0, dbias)]
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore,
            reduction,
            probs,
            counted,
        } => {
            let (t, v) = (nodes[logits.0].rows, nodes[logits.0].cols);
            let gscale = match reduction {
                Reduction::Sum => g[0],
                Reduction::Mean => g[0] / S::from_usize(*counted),
            };
            let mut dl = vec![S::zero(); t * v];
            for (i2, &target) in targets.iter().enumerate() {
                if Some(target) == *ignore {
                    continue;
                }
                let pr = &probs[i2 * v..(i2 + 1) * v];
                let dr = &mut dl[i2 * v..(i2 + 1) * v];
                for j in 0..v {
                    let delta = if j == target { S::one() } else { S::zero() };
                    dr[j] = (pr[j] - delta) * gscale;
                }
            }
            vec![(logits.0, dl)]
        }
        Op::MeanRows { x, keep, counted } => {
            let (xr, xc) = (nodes[x.0].rows, nodes[x.0].cols);
            let scale = S::one() / S::from_usize(*counted);
            let mut dx = vec![S::zero(); xr * xc];
            for i2 in 0..xr {
                if keep.as_ref().map_or(true, |k| k[i2]) {
                    for j in 0..xc {
                        dx[i2 * xc + j] = g[j] * scale;
                    }
                }
            }
            vec![(x.0, dx)]
        }
        Op::Embedding { table, ids } => {
            let (v, c) = (nodes[table.0].rows, nodes[table.0].cols);
            let mut dt = vec![S::zero(); v * c];
            for (pos, &id) in ids.iter().enumerate() {
                let gr = &g[pos * c..(pos + 1) * c];
                let tr = &mut dt[id * c..(id + 1) * c];
                for (d, gv) in tr.iter_mut().zip(gr) {
                    *d += *gv;
                }
            }
            vec![(table.0, dt)]
        }
        Op::GateBlend { gate, on, off } => {
            let gd = &nodes[gate.0].data;
            let od = &nodes[on.0].data;
            let fd = &nodes[off.0].data;
            let mut dgate = vec![S::zero(); g.len()];
            let mut don = vec![S::zero(); g.len()];
            let mut doff = vec![S::zero(); g.len()];
            for e in 0..g.len() {
                dgate[e] = g[e] * (od[e] - fd[e]);
                don[e] = g[e] * gd[e];
                doff[e] = g[e] * (S::one() - gd[e]);
            }
            vec![(gate.0, dgate), (on.0, don), (off.0, doff)]
        }
        Op::MixWeighted { weights, terms } => {
            let mut out = Vec::with_capacity(2 * weights.len());
            for (w, t) in weights.iter().zip(terms) {
                let tv = &nodes[t.0].data;
                let mut dw = S::zero();
                for (gv, xv) in g.iter().zip(tv) {
                    dw += *gv * *xv;
                }
                out.push((w.0, vec![dw]));
                let wv = nodes[w.0].data[0];
                out.push((t.0, g.iter().map(|gv| *gv * wv).collect()));
            }
            out
        }
        Op::Dropout { x, kept, scale } => {
            let dx = g
                .iter()
                .zip(kept)
                .map(|(gv, k)| if *k { *gv * *scale } else { S::zero() })
                .collect();
            vec![(x.0, dx)]
        }
        Op::SumAll(x) => {
            let dx = vec![g[0]; nodes[x.0].data.len()];
            vec![(x.0, dx)]
        }
    }
}
