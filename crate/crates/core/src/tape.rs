//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! compute eagerly and, when gradients are enabled and some input requires
//! them, push a record that [`Tape::backward`] later replays in reverse.
//! Forward order is a plain `Vec`, all reductions are sequential loops, and
//! gemm runs single-threaded, so results are bit-identical across runs.
//!
//! Every operation validates shapes up front and scans its output for
//! NaN/Inf; a non-finite value is an error, never a silent poison.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, numel_of, Tensor};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

enum Op<S: Scalar> {
    /// out = a · b (trans_b: b is stored [.., n, k] and used transposed).
    Matmul { a: ValueId, b: ValueId, out: ValueId, trans_b: bool },
    Add { a: ValueId, b: ValueId, out: ValueId },
    /// x: [.., n, d] plus y: [.., d] broadcast over the row axis.
    AddRows { x: ValueId, y: ValueId, out: ValueId },
    Sub { a: ValueId, b: ValueId, out: ValueId },
    Mul { a: ValueId, b: ValueId, out: ValueId },
    Scale { x: ValueId, c: S, out: ValueId },
    Softmax { x: ValueId, out: ValueId },
    RmsNorm { x: ValueId, w: ValueId, out: ValueId, eps: S },
    Gelu { x: ValueId, out: ValueId },
    /// Pairwise rotation; cos/sin tables are [len × d/2] for the trailing
    /// [len, d] axes of x.
    Rope { x: ValueId, out: ValueId, cos: Arc<Vec<S>>, sin: Arc<Vec<S>> },
    /// x: [b, n, d], idx: r×s token indices → out: [(b·r), s, d].
    GatherTokens { x: ValueId, out: ValueId, idx: Arc<Vec<usize>>, rows: usize, span: usize },
    /// x: [n, d] → out: [reps, n, d].
    RepeatRows { x: ValueId, out: ValueId, reps: usize },
    /// Concatenate along the middle axis of [rows, len, d].
    ConcatMid { a: ValueId, b: ValueId, out: ValueId },
    Reshape { x: ValueId, out: ValueId },
    /// [rows, len, h·dh] → [rows, h, len, dh].
    SplitHeads { x: ValueId, out: ValueId, heads: usize },
    /// [rows, h, len, dh] → [rows, len, h·dh].
    MergeHeads { x: ValueId, out: ValueId, heads: usize },
    /// table: [v, d], ids per output row → out: [len(ids), d].
    Embed { table: ValueId, out: ValueId, ids: Arc<Vec<usize>> },
    MeanAll { x: ValueId, out: ValueId },
    SumAll { x: ValueId, out: ValueId },
}

/// Ordered record of one forward pass, replayable backward.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    ops: Vec<Op<S>>,
    grads: Vec<Option<Vec<S>>>,
    grad_enabled: bool,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), grads: Vec::new(), grad_enabled: true }
    }

    /// A tape that records nothing; forwards still run and check finiteness.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), grads: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> ValueId {
        debug_assert_eq!(numel_of(&shape), data.len());
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { shape, data, requires_grad: requires_grad && self.grad_enabled });
        self.grads.push(None);
        id
    }

    fn check_finite(&self, id: ValueId, op: &'static str) -> Result<ValueId> {
        if self.nodes[id.0].data.iter().all(|v| v.is_finite()) {
            Ok(id)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Register a tensor as a leaf. Gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Result<ValueId> {
        let id = self.push_node(t.shape().to_vec(), t.data().to_vec(), t.requires_grad);
        self.check_finite(id, "leaf")
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor<S>) -> Result<ValueId> {
        let id = self.push_node(t.shape().to_vec(), t.data().to_vec(), false);
        self.check_finite(id, "constant")
    }

    pub fn constant_parts(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<ValueId> {
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {} does not hold {} values", fmt_shape(&shape), data.len()),
            ));
        }
        let id = self.push_node(shape, data, false);
        self.check_finite(id, "constant")
    }

    /// Copy a value into a fresh leaf that does not propagate gradients.
    pub fn detach(&mut self, x: ValueId) -> ValueId {
        let (shape, data) = {
            let n = &self.nodes[x.0];
            (n.shape.clone(), n.data.clone())
        };
        self.push_node(shape, data, false)
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: ValueId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn to_tensor(&self, id: ValueId) -> Tensor<S> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape is consistent")
    }

    /// Gradient of the last `backward` call w.r.t. a leaf, if any flowed.
    pub fn grad(&self, id: ValueId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    fn requires(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn record(&mut self, op: Op<S>) {
        if self.grad_enabled {
            self.ops.push(op);
        }
    }

    // ── forward operations ───────────────────────────────────────────

    /// Batched matrix product with right-aligned batch broadcasting.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` where both share identical batch dims and b is [.., n, k].
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: ValueId, b: ValueId, trans_b: bool) -> Result<ValueId> {
        let plan = MatmulPlan::prepare(
            &self.nodes[a.0].shape,
            &self.nodes[b.0].shape,
            trans_b,
        )?;
        let mut out = vec![S::zero(); numel_of(&plan.out_shape)];
        plan.forward(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out);
        let rg = self.requires(a) || self.requires(b);
        let id = self.push_node(plan.out_shape.clone(), out, rg);
        if rg {
            self.record(Op::Matmul { a, b, out: id, trans_b });
        }
        self.check_finite(id, "matmul")
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.zip_same_shape(a, b, "add", |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.zip_same_shape(a, b, "sub", |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.zip_same_shape(a, b, "mul", |x, y| x * y, |a, b, out| Op::Mul { a, b, out })
    }

    fn zip_same_shape(
        &mut self,
        a: ValueId,
        b: ValueId,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        make: impl Fn(ValueId, ValueId, ValueId) -> Op<S>,
    ) -> Result<ValueId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                name,
                format!(
                    "{} vs {}",
                    fmt_shape(&self.nodes[a.0].shape),
                    fmt_shape(&self.nodes[b.0].shape)
                ),
            ));
        }
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires(a) || self.requires(b);
        let id = self.push_node(self.nodes[a.0].shape.clone(), data, rg);
        if rg {
            self.record(make(a, b, id));
        }
        self.check_finite(id, name)
    }

    /// `x + y` where `y` lacks the second-to-last axis of `x` and is
    /// broadcast across it (per-row bias / timestep conditioning).
    pub fn add_rows(&mut self, x: ValueId, y: ValueId) -> Result<ValueId> {
        let xs = self.nodes[x.0].shape.clone();
        let ys = self.nodes[y.0].shape.clone();
        let ok = xs.len() >= 2
            && ys.len() == xs.len() - 1
            && ys.last() == xs.last()
            && ys[..ys.len() - 1] == xs[..xs.len() - 2];
        if !ok {
            return Err(Error::shape(
                "add_rows",
                format!("{} vs {}", fmt_shape(&xs), fmt_shape(&ys)),
            ));
        }
        let d = *xs.last().unwrap();
        let n = xs[xs.len() - 2];
        let outer = numel_of(&xs) / (n * d);
        let mut data = self.nodes[x.0].data.clone();
        let yd = &self.nodes[y.0].data;
        for o in 0..outer {
            for r in 0..n {
                let base = (o * n + r) * d;
                for j in 0..d {
                    data[base + j] = data[base + j] + yd[o * d + j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(y);
        let id = self.push_node(xs, data, rg);
        if rg {
            self.record(Op::AddRows { x, y, out: id });
        }
        self.check_finite(id, "add_rows")
    }

    pub fn scale(&mut self, x: ValueId, c: S) -> Result<ValueId> {
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let rg = self.requires(x);
        let id = self.push_node(self.nodes[x.0].shape.clone(), data, rg);
        if rg {
            self.record(Op::Scale { x, c, out: id });
        }
        self.check_finite(id, "scale")
    }

    /// Row-stabilized softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: ValueId) -> Result<ValueId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        if d == 0 {
            return Err(Error::shape("softmax", format!("empty last dim in {}", fmt_shape(&shape))));
        }
        let xd = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); xd.len()];
        for row in 0..xd.len() / d {
            let base = row * d;
            let src = &xd[base..base + d];
            let mx = src.iter().fold(S::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut sum = S::zero();
            for j in 0..d {
                let e = (src[j] - mx).exp();
                data[base + j] = e;
                sum = sum + e;
            }
            for j in 0..d {
                data[base + j] = data[base + j] / sum;
            }
        }
        let rg = self.requires(x);
        let id = self.push_node(shape, data, rg);
        if rg {
            self.record(Op::Softmax { x, out: id });
        }
        self.check_finite(id, "softmax")
    }

    /// RMS normalization over the last axis with a learned scale.
    pub fn rms_norm(&mut self, x: ValueId, w: ValueId, eps: S) -> Result<ValueId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::shape("rms_norm", "rank-0 input"))?;
        if self.nodes[w.0].shape != [d] {
            return Err(Error::shape(
                "rms_norm",
                format!(
                    "weight {} for input {}",
                    fmt_shape(&self.nodes[w.0].shape),
                    fmt_shape(&shape)
                ),
            ));
        }
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let inv_d = S::one() / S::from_f64(d as f64);
        let mut data = vec![S::zero(); xd.len()];
        for row in 0..xd.len() / d {
            let base = row * d;
            let mut ss = S::zero();
            for j in 0..d {
                ss = ss + xd[base + j] * xd[base + j];
            }
            let inv = S::one() / (ss * inv_d + eps).sqrt();
            for j in 0..d {
                data[base + j] = xd[base + j] * inv * wd[j];
            }
        }
        let rg = self.requires(x) || self.requires(w);
        let id = self.push_node(shape, data, rg);
        if rg {
            self.record(Op::RmsNorm { x, w, out: id, eps });
        }
        self.check_finite(id, "rms_norm")
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|&v| gelu_tanh(v)).collect();
        let rg = self.requires(x);
        let id = self.push_node(self.nodes[x.0].shape.clone(), data, rg);
        if rg {
            self.record(Op::Gelu { x, out: id });
        }
        self.check_finite(id, "gelu")
    }

    /// Rotate consecutive channel pairs of the trailing [len, d] axes by the
    /// per-position angles in `table` (see [`crate::tarp::RopeTable`]).
    pub fn rope(&mut self, x: ValueId, cos: Arc<Vec<S>>, sin: Arc<Vec<S>>) -> Result<ValueId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() < 2 {
            return Err(Error::shape("rope", format!("need rank >= 2, got {}", fmt_shape(&shape))));
        }
        let d = shape[shape.len() - 1];
        let len = shape[shape.len() - 2];
        if d % 2 != 0 {
            return Err(Error::contract(format!("rope requires an even channel count, got {d}")));
        }
        let half = d / 2;
        if cos.len() != len * half || sin.len() != len * half {
            return Err(Error::shape(
                "rope",
                format!("table {}x{} for input {}", cos.len() / half.max(1), half, fmt_shape(&shape)),
            ));
        }
        let xd = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); xd.len()];
        let block = len * d;
        for blk in 0..xd.len() / block {
            for l in 0..len {
                let base = blk * block + l * d;
                for p in 0..half {
                    let c = cos[l * half + p];
                    let s = sin[l * half + p];
                    let x0 = xd[base + 2 * p];
                    let x1 = xd[base + 2 * p + 1];
                    data[base + 2 * p] = x0 * c - x1 * s;
                    data[base + 2 * p + 1] = x0 * s + x1 * c;
                }
            }
        }
        let rg = self.requires(x);
        let id = self.push_node(shape, data, rg);
        if rg {
            self.record(Op::Rope { x, out: id, cos, sin });
        }
        self.check_finite(id, "rope")
    }

    /// Gather token windows: x [b, n, d] with an r×s index matrix becomes
    /// [(b·r), s, d]; row (b_idx·r + i) holds x[b_idx, idx[i, :], :].
    pub fn gather_tokens(
        &mut self,
        x: ValueId,
        idx: Arc<Vec<usize>>,
        rows: usize,
        span: usize,
    ) -> Result<ValueId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 3 {
            return Err(Error::shape(
                "gather_tokens",
                format!("need [b, n, d], got {}", fmt_shape(&shape)),
            ));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        if idx.len() != rows * span {
            return Err(Error::shape(
                "gather_tokens",
                format!("index table holds {} entries, expected {rows}x{span}", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {n} tokens"
            )));
        }
        let xd = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); b * rows * span * d];
        for bi in 0..b {
            for r in 0..rows {
                for s in 0..span {
                    let src = (bi * n + idx[r * span + s]) * d;
                    let dst = ((bi * rows + r) * span + s) * d;
                    data[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                }
            }
        }
        let rg = self.requires(x);
        let id = self.push_node(vec![b * rows, span, d], data, rg);
        if rg {
            self.record(Op::GatherTokens { x, out: id, idx, rows, span });
        }
        self.check_finite(id, "gather_tokens")
    }

    /// Tile a [n, d] matrix into [reps, n, d].
    pub fn repeat_rows(&mut self, x: ValueId, reps: usize) -> Result<ValueId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::shape(
                "repeat_rows",
                format!("need [n, d], got {}", fmt_shape(&shape)),
            ));
        }
        let (n, d) = (shape[0], shape[1]);
        let xd = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(reps * n * d);
        for _ in 0..reps {
            data.extend_from_slice(xd);
        }
        let rg = self.requires(x);
        let id = self.push_node(vec![reps, n, d], data, rg);
        if rg {
            self.record(Op::RepeatRows { x, out: id, reps });
        }
        self.check_finite(id, "repeat_rows")
    }

    /// Concatenate [rows, p, d] and [rows, q, d] along the middle axis.
    pub fn concat_mid(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2];
        if !ok {
            return Err(Error::shape(
                "concat_mid",
                format!("{} vs {}", fmt_shape(&sa), fmt_shape(&sb)),
            ));
        }
        let (rows, p, q, d) = (sa[0], sa[1], sb[1], sa[2]);
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut data = Vec::with_capacity(rows * (p + q) * d);
        for r in 0..rows {
            data.extend_from_slice(&ad[r * p * d..(r + 1) * p * d]);
            data.extend_from_slice(&bd[r * q * d..(r + 1) * q * d]);
        }
        let rg = self.requires(a) || self.requires(b);
        let id = self.push_node(vec![rows, p + q, d], data, rg);
        if rg {
            self.record(Op::ConcatMid { a, b, out: id });
        }
        self.check_finite(id, "concat_mid")
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        if numel_of(&shape) != self.nodes[x.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot view {} as {}",
                    fmt_shape(&self.nodes[x.0].shape),
                    fmt_shape(&shape)
                ),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.requires(x);
        let id = self.push_node(shape, data, rg);
        if rg {
            self.record(Op::Reshape { x, out: id });
        }
        Ok(id)
    }

    /// [rows, len, h·dh] → [rows, h, len, dh].
    pub fn split_heads(&mut self, x: ValueId, heads: usize) -> Result<ValueId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 3 {
            return Err(Error::shape(
                "split_heads",
                format!("need [rows, len, dim], got {}", fmt_shape(&shape)),
            ));
        }
        let (rows, len, dim) = (shape[0], shape[1], shape[2]);
        if heads == 0 || dim % heads != 0 {
            return Err(Error::contract(format!("dim {dim} not divisible by {heads} heads")));
        }
        let dh = dim / heads;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); xd.len()];
        for r in 0..rows {
            for l in 0..len {
                for h in 0..heads {
                    let src = (r * len + l) * dim + h * dh;
                    let dst = ((r * heads + h) * len + l) * dh;
                    data[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let rg = self.requires(x);
        let id = self.push_node(vec![rows, heads, len, dh], data, rg);
        if rg {
            self.record(Op::SplitHeads { x, out: id, heads });
        }
        Ok(id)
    }

    /// [rows, h, len, dh] → [rows, len, h·dh].
    pub fn merge_heads(&mut self, x: ValueId) -> Result<ValueId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 4 {
            return Err(Error::shape(
                "merge_heads",
                format!("need [rows, heads, len, dh], got {}", fmt_shape(&shape)),
            ));
        }
        let (rows, heads, len, dh) = (shape[0], shape[1], shape[2], shape[3]);
        let xd = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); xd.len()];
        for r in 0..rows {
            for h in 0..heads {
                for l in 0..len {
                    let src = ((r * heads + h) * len + l) * dh;
                    let dst = (r * len + l) * heads * dh + h * dh;
                    data[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let rg = self.requires(x);
        let id = self.push_node(vec![rows, len, heads * dh], data, rg);
        if rg {
            self.record(Op::MergeHeads { x, out: id, heads });
        }
        Ok(id)
    }

    /// Row lookup: out[i, :] = table[ids[i], :].
    pub fn embed(&mut self, table: ValueId, ids: Arc<Vec<usize>>) -> Result<ValueId> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::shape(
                "embed",
                format!("need [vocab, d], got {}", fmt_shape(&shape)),
            ));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("embedding id {bad} out of range for {v} rows")));
        }
        let td = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids.iter() {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.requires(table);
        let id = self.push_node(vec![ids.len(), d], data, rg);
        if rg {
            self.record(Op::Embed { table, out: id, ids });
        }
        self.check_finite(id, "embed")
    }

    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        let n = self.nodes[x.0].data.len();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let sum = self.nodes[x.0].data.iter().fold(S::zero(), |a, &v| a + v);
        let mean = sum / S::from_f64(n as f64);
        let rg = self.requires(x);
        let id = self.push_node(vec![], vec![mean], rg);
        if rg {
            self.record(Op::MeanAll { x, out: id });
        }
        self.check_finite(id, "mean_all")
    }

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let sum = self.nodes[x.0].data.iter().fold(S::zero(), |a, &v| a + v);
        let rg = self.requires(x);
        let id = self.push_node(vec![], vec![sum], rg);
        if rg {
            self.record(Op::SumAll { x, out: id });
        }
        self.check_finite(id, "sum_all")
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Replay the tape in reverse from a scalar loss, accumulating gradients
    /// into every `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {}",
                fmt_shape(&self.nodes[loss.0].shape)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..self.ops.len()).rev() {
            // Ops whose output received no gradient contribute nothing.
            let op = &self.ops[i];
            self.backward_op(op as *const Op<S>);
        }
        Ok(())
    }

    /// The raw pointer sidesteps the borrow of `self.ops` while mutating
    /// `self.grads`; ops are never mutated during backward.
    fn backward_op(&mut self, op: *const Op<S>) {
        let op = unsafe { &*op };
        match op {
            Op::Matmul { a, b, out, trans_b } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                let plan = MatmulPlan::prepare(
                    &self.nodes[a.0].shape,
                    &self.nodes[b.0].shape,
                    *trans_b,
                )
                .expect("forward already validated");
                if self.requires(*a) {
                    let mut da = vec![S::zero(); self.nodes[a.0].data.len()];
                    plan.backward_a(&dout, &self.nodes[b.0].data, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.requires(*b) {
                    let mut db = vec![S::zero(); self.nodes[b.0].data.len()];
                    plan.backward_b(&dout, &self.nodes[a.0].data, &mut db);
                    self.accumulate(*b, &db);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::Add { a, b, out } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*a) {
                    self.accumulate(*a, &dout);
                }
                if self.requires(*b) {
                    self.accumulate(*b, &dout);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::AddRows { x, y, out } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    self.accumulate(*x, &dout);
                }
                if self.requires(*y) {
                    let xs = &self.nodes[x.0].shape;
                    let d = *xs.last().unwrap();
                    let n = xs[xs.len() - 2];
                    let outer = dout.len() / (n * d);
                    let mut dy = vec![S::zero(); outer * d];
                    for o in 0..outer {
                        for r in 0..n {
                            let base = (o * n + r) * d;
                            for j in 0..d {
                                dy[o * d + j] = dy[o * d + j] + dout[base + j];
                            }
                        }
                    }
                    self.accumulate(*y, &dy);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::Sub { a, b, out } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*a) {
                    self.accumulate(*a, &dout);
                }
                if self.requires(*b) {
                    let neg: Vec<S> = dout.iter().map(|&v| -v).collect();
                    self.accumulate(*b, &neg);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::Mul { a, b, out } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*a) {
                    let da: Vec<S> = dout
                        .iter()
                        .zip(self.nodes[b.0].data.iter())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.requires(*b) {
                    let db: Vec<S> = dout
                        .iter()
                        .zip(self.nodes[a.0].data.iter())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(*b, &db);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::Scale { x, c, out } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    let dx: Vec<S> = dout.iter().map(|&v| v * *c).collect();
                    self.accumulate(*x, &dx);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::Softmax { x, out } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    let y = &self.nodes[out.0].data;
                    let d = *self.nodes[out.0].shape.last().unwrap();
                    let mut dx = vec![S::zero(); y.len()];
                    for row in 0..y.len() / d {
                        let base = row * d;
                        let mut dot = S::zero();
                        for j in 0..d {
                            dot = dot + dout[base + j] * y[base + j];
                        }
                        for j in 0..d {
                            dx[base + j] = y[base + j] * (dout[base + j] - dot);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::RmsNorm { x, w, out, eps } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                let d = *self.nodes[x.0].shape.last().unwrap();
                let inv_d = S::one() / S::from_f64(d as f64);
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[w.0].data;
                let need_x = self.requires(*x);
                let need_w = self.requires(*w);
                let mut dx = if need_x { vec![S::zero(); xd.len()] } else { Vec::new() };
                let mut dw = if need_w { vec![S::zero(); d] } else { Vec::new() };
                for row in 0..xd.len() / d {
                    let base = row * d;
                    let mut ss = S::zero();
                    for j in 0..d {
                        ss = ss + xd[base + j] * xd[base + j];
                    }
                    let inv = S::one() / (ss * inv_d + *eps).sqrt();
                    if need_w {
                        for j in 0..d {
                            dw[j] = dw[j] + dout[base + j] * xd[base + j] * inv;
                        }
                    }
                    if need_x {
                        let mut dot = S::zero();
                        for j in 0..d {
                            dot = dot + dout[base + j] * wd[j] * xd[base + j];
                        }
                        let coef = dot * inv * inv * inv * inv_d;
                        for j in 0..d {
                            dx[base + j] = dout[base + j] * wd[j] * inv - xd[base + j] * coef;
                        }
                    }
                }
                if need_x {
                    self.accumulate(*x, &dx);
                }
                if need_w {
                    self.accumulate(*w, &dw);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::Gelu { x, out } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    let dx: Vec<S> = dout
                        .iter()
                        .zip(self.nodes[x.0].data.iter())
                        .map(|(&d, &v)| d * gelu_tanh_grad(v))
                        .collect();
                    self.accumulate(*x, &dx);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::Rope { x, out, cos, sin } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    let shape = &self.nodes[x.0].shape;
                    let d = shape[shape.len() - 1];
                    let len = shape[shape.len() - 2];
                    let half = d / 2;
                    let block = len * d;
                    let mut dx = vec![S::zero(); dout.len()];
                    for blk in 0..dout.len() / block {
                        for l in 0..len {
                            let base = blk * block + l * d;
                            for p in 0..half {
                                let c = cos[l * half + p];
                                let s = sin[l * half + p];
                                let d0 = dout[base + 2 * p];
                                let d1 = dout[base + 2 * p + 1];
                                // rotate by the negative angle
                                dx[base + 2 * p] = d0 * c + d1 * s;
                                dx[base + 2 * p + 1] = -d0 * s + d1 * c;
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::GatherTokens { x, out, idx, rows, span } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    let shape = &self.nodes[x.0].shape;
                    let (b, n, d) = (shape[0], shape[1], shape[2]);
                    let mut dx = vec![S::zero(); b * n * d];
                    for bi in 0..b {
                        for r in 0..*rows {
                            for s in 0..*span {
                                let dst = (bi * n + idx[r * span + s]) * d;
                                let src = ((bi * rows + r) * span + s) * d;
                                for j in 0..d {
                                    dx[dst + j] = dx[dst + j] + dout[src + j];
                                }
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::RepeatRows { x, out, reps } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    let nd = self.nodes[x.0].data.len();
                    let mut dx = vec![S::zero(); nd];
                    for rep in 0..*reps {
                        let base = rep * nd;
                        for j in 0..nd {
                            dx[j] = dx[j] + dout[base + j];
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::ConcatMid { a, b, out } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (rows, p, q, d) = (sa[0], sa[1], sb[1], sa[2]);
                if self.requires(*a) {
                    let mut da = vec![S::zero(); rows * p * d];
                    for r in 0..rows {
                        let src = r * (p + q) * d;
                        da[r * p * d..(r + 1) * p * d]
                            .copy_from_slice(&dout[src..src + p * d]);
                    }
                    self.accumulate(*a, &da);
                }
                if self.requires(*b) {
                    let mut db = vec![S::zero(); rows * q * d];
                    for r in 0..rows {
                        let src = r * (p + q) * d + p * d;
                        db[r * q * d..(r + 1) * q * d]
                            .copy_from_slice(&dout[src..src + q * d]);
                    }
                    self.accumulate(*b, &db);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::Reshape { x, out } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    self.accumulate(*x, &dout);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::SplitHeads { x, out, heads } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    let shape = &self.nodes[x.0].shape;
                    let (rows, len, dim) = (shape[0], shape[1], shape[2]);
                    let dh = dim / heads;
                    let mut dx = vec![S::zero(); dout.len()];
                    for r in 0..rows {
                        for l in 0..len {
                            for h in 0..*heads {
                                let dst = (r * len + l) * dim + h * dh;
                                let src = ((r * heads + h) * len + l) * dh;
                                dx[dst..dst + dh].copy_from_slice(&dout[src..src + dh]);
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::MergeHeads { x, out, heads } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    let shape = &self.nodes[out.0].shape;
                    let (rows, len, dim) = (shape[0], shape[1], shape[2]);
                    let dh = dim / heads;
                    let mut dx = vec![S::zero(); dout.len()];
                    for r in 0..rows {
                        for h in 0..*heads {
                            for l in 0..len {
                                let dst = ((r * heads + h) * len + l) * dh;
                                let src = (r * len + l) * dim + h * dh;
                                dx[dst..dst + dh].copy_from_slice(&dout[src..src + dh]);
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::Embed { table, out, ids } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*table) {
                    let d = self.nodes[table.0].shape[1];
                    let mut dt = vec![S::zero(); self.nodes[table.0].data.len()];
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] = dt[i * d + j] + dout[row * d + j];
                        }
                    }
                    self.accumulate(*table, &dt);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::MeanAll { x, out } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    let n = self.nodes[x.0].data.len();
                    let g = dout[0] / S::from_f64(n as f64);
                    let dx = vec![g; n];
                    self.accumulate(*x, &dx);
                }
                self.grads[out.0] = Some(dout);
            }
            Op::SumAll { x, out } => {
                let Some(dout) = self.grads[out.0].take() else { return };
                if self.requires(*x) {
                    let dx = vec![dout[0]; self.nodes[x.0].data.len()];
                    self.accumulate(*x, &dx);
                }
                self.grads[out.0] = Some(dout);
            }
        }
    }

    fn accumulate(&mut self, id: ValueId, grad: &[S]) {
        debug_assert_eq!(grad.len(), self.nodes[id.0].data.len());
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(grad.iter()) {
                    *gi = *gi + d;
                }
            }
            None => self.grads[id.0] = Some(grad.to_vec()),
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}

fn gelu_tanh<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_tanh_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + three * k * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

// ── batched matmul with broadcasting ─────────────────────────────────

/// Shape bookkeeping for one batched (possibly broadcast) matrix product.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    batch: Vec<usize>,
    stride_a: Vec<usize>, // per batch axis, in units of whole matrices
    stride_b: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn prepare(a_shape: &[usize], b_shape: &[usize], trans_b: bool) -> Result<Self> {
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("{} x {}", fmt_shape(a_shape), fmt_shape(b_shape)),
            ));
        }
        let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (kb, n) = if trans_b {
            (b_shape[b_shape.len() - 1], b_shape[b_shape.len() - 2])
        } else {
            (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1])
        };
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {} x {}", fmt_shape(a_shape), fmt_shape(b_shape)),
            ));
        }
        let ab = &a_shape[..a_shape.len() - 2];
        let bb = &b_shape[..b_shape.len() - 2];
        let rank = ab.len().max(bb.len());
        let mut batch = vec![0usize; rank];
        for i in 0..rank {
            let da = if i < rank - ab.len() { 1 } else { ab[i - (rank - ab.len())] };
            let db = if i < rank - bb.len() { 1 } else { bb[i - (rank - bb.len())] };
            if da != db && da != 1 && db != 1 {
                return Err(Error::shape(
                    "matmul",
                    format!("batch dims not broadcastable: {} x {}", fmt_shape(a_shape), fmt_shape(b_shape)),
                ));
            }
            batch[i] = da.max(db);
        }
        let stride_a = broadcast_strides(&batch, ab);
        let stride_b = broadcast_strides(&batch, bb);
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulPlan { m, k: ka, n, trans_b, batch, stride_a, stride_b, out_shape })
    }

    fn for_each_batch(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total: usize = self.batch.iter().product::<usize>().max(1);
        let mut idx = vec![0usize; self.batch.len()];
        for flat in 0..total {
            let mut oa = 0;
            let mut ob = 0;
            for (i, &ix) in idx.iter().enumerate() {
                oa += ix * self.stride_a[i];
                ob += ix * self.stride_b[i];
            }
            f(flat, oa, ob);
            for i in (0..idx.len()).rev() {
                idx[i] += 1;
                if idx[i] < self.batch[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
    }

    fn forward<S: Scalar>(&self, a: &[S], b: &[S], out: &mut [S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        self.for_each_batch(|flat, oa, ob| {
            let a_s = &a[oa * m * k..(oa * m * k + m * k)];
            let b_s = &b[ob * k * n..(ob * k * n + k * n)];
            let c_s = &mut out[flat * m * n..(flat + 1) * m * n];
            if self.trans_b {
                // b stored [n, k], used as [k, n]
                S::gemm(m, k, n, S::one(), a_s, k as isize, 1, b_s, 1, k as isize, S::zero(), c_s);
            } else {
                S::gemm(m, k, n, S::one(), a_s, k as isize, 1, b_s, n as isize, 1, S::zero(), c_s);
            }
        });
    }

    /// da += dout · op(b)ᵀ, accumulating over broadcast batch elements.
    fn backward_a<S: Scalar>(&self, dout: &[S], b: &[S], da: &mut [S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        self.for_each_batch(|flat, oa, ob| {
            let d_s = &dout[flat * m * n..(flat + 1) * m * n];
            let b_s = &b[ob * k * n..(ob * k * n + k * n)];
            let a_s = &mut da[oa * m * k..(oa * m * k + m * k)];
            if self.trans_b {
                // da = dout[m,n] · b[n,k]
                S::gemm(m, n, k, S::one(), d_s, n as isize, 1, b_s, k as isize, 1, S::one(), a_s);
            } else {
                // da = dout[m,n] · bᵀ where b is [k,n]
                S::gemm(m, n, k, S::one(), d_s, n as isize, 1, b_s, 1, n as isize, S::one(), a_s);
            }
        });
    }

    /// db += op(a, dout), accumulating over broadcast batch elements.
    fn backward_b<S: Scalar>(&self, dout: &[S], a: &[S], db: &mut [S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        self.for_each_batch(|flat, oa, ob| {
            let d_s = &dout[flat * m * n..(flat + 1) * m * n];
            let a_s = &a[oa * m * k..(oa * m * k + m * k)];
            let b_s = &mut db[ob * k * n..(ob * k * n + k * n)];
            if self.trans_b {
                // db[n,k] = doutᵀ[n,m] · a[m,k]
                S::gemm(n, m, k, S::one(), d_s, 1, n as isize, a_s, k as isize, 1, S::one(), b_s);
            } else {
                // db[k,n] = aᵀ[k,m] · dout[m,n]
                S::gemm(k, m, n, S::one(), a_s, 1, k as isize, d_s, n as isize, 1, S::one(), b_s);
            }
        });
    }
}

fn broadcast_strides(batch: &[usize], operand: &[usize]) -> Vec<usize> {
    // physical strides of the operand's batch dims, in whole matrices
    let mut phys = vec![0usize; operand.len()];
    let mut acc = 1usize;
    for i in (0..operand.len()).rev() {
        phys[i] = acc;
        acc *= operand[i];
    }
    let rank = batch.len();
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        if i >= rank - operand.len() {
            let j = i - (rank - operand.len());
            out[i] = if operand[j] == 1 { 0 } else { phys[j] };
        }
    }
    out
}
