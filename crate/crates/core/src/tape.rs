//! Eager reverse-mode differentiation tape.
//!
//! Every op computes its forward value immediately, records enough state to
//! replay the chain rule, and rejects non-finite outputs. `backward` walks the
//! recorded ops in exact reverse execution order with additive accumulation,
//! so two backward passes over the same tape produce bit-identical gradients.
//!
//! A tape and its nodes are confined to one thread; frozen parameter sets are
//! plain data and can be shared across threads for concurrent inference.

use crate::error::NumericsError;
use crate::tensor::{self, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Affine { x: NodeId, scale: f64 },
    ScaleBy { x: NodeId, s: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { x: NodeId, range: (usize, usize) },
    SliceCols { x: NodeId, range: (usize, usize) },
    Transpose { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Relu { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Embedding { table: NodeId, ids: Vec<u32> },
    MaskedSoftmax { x: NodeId, mask: Vec<bool> },
    LogSoftmax { x: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<u32> },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    MeanRows { x: NodeId },
    SumN { xs: Vec<NodeId> },
    /// Scalar-valued op with a caller-supplied input gradient (used by the
    /// CTC loss, whose exact grid gradient comes from its own forward-backward
    /// recursion rather than from tape-level decomposition).
    CustomScalar { x: NodeId, grad_x: Vec<f64> },
}

pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new(), requires: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.vals[id]
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert!(self.vals[id].is_scalar());
        self.vals[id].data[0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.vals[id].shape
    }

    /// Gradient of the last `backward` root w.r.t. node `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Adds this node's gradient into `target.grad` (used to accumulate
    /// parameter gradients across a batch of per-utterance tapes).
    pub fn accumulate_grad_into(&self, id: NodeId, target: &mut Tensor) -> Result<(), NumericsError> {
        let src = match self.grad(id) {
            Some(g) => g,
            None => return Ok(()),
        };
        if target.data.len() != src.len() {
            return Err(NumericsError::BadShape {
                op: "accumulate_grad_into",
                detail: format!("grad has {} values, parameter has {}", src.len(), target.data.len()),
            });
        }
        let dst = target.grad.get_or_insert_with(|| vec![0.0; src.len()]);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor, requires: bool) -> Result<NodeId, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op_name(&op) });
        }
        let id = self.vals.len();
        self.vals.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Ok(id)
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.requires[i])
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Registers a constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Result<NodeId, NumericsError> {
        self.push(Op::Leaf, t, false)
    }

    /// Registers a trainable leaf; the tensor data is snapshotted.
    pub fn param(&mut self, t: &Tensor) -> Result<NodeId, NumericsError> {
        let snap = Tensor { shape: t.shape.clone(), data: t.data.clone(), requires_grad: false, grad: None };
        self.push(Op::Leaf, snap, true)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<NodeId, NumericsError> {
        self.input(Tensor::scalar(v))
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (&self.vals[a], &self.vals[b]);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(NumericsError::BadShape {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape, tb.shape),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = tensor::matmul(&ta.data, &tb.data, m, k, n);
        let req = self.req(&[a, b]);
        self.push(Op::Matmul { a, b }, Tensor { shape: vec![m, n], data: out, requires_grad: false, grad: None }, req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.zip_ew("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.zip_ew("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.zip_ew("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_ew(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (&self.vals[a], &self.vals[b]);
        if ta.shape != tb.shape {
            return Err(NumericsError::BadShape {
                op: name,
                detail: format!("{:?} vs {:?}", ta.shape, tb.shape),
            });
        }
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        let req = self.req(&[a, b]);
        self.push(op, Tensor { shape, data, requires_grad: false, grad: None }, req)
    }

    /// `[r, c] + [c]` broadcast over the leading dimension.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (tx, tb) = (&self.vals[x], &self.vals[bias]);
        if tx.shape.len() != 2 || tb.numel() != tx.shape[1] {
            return Err(NumericsError::BadShape {
                op: "add_bias",
                detail: format!("{:?} + {:?}", tx.shape, tb.shape),
            });
        }
        let (r, c) = (tx.shape[0], tx.shape[1]);
        let mut data = tx.data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += tb.data[j];
            }
        }
        let req = self.req(&[x, bias]);
        self.push(Op::AddBias { x, bias }, Tensor { shape: vec![r, c], data, requires_grad: false, grad: None }, req)
    }

    /// `scale * x + shift` with compile-time constants.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId, NumericsError> {
        let tx = &self.vals[x];
        let data: Vec<f64> = tx.data.iter().map(|&v| scale * v + shift).collect();
        let shape = tx.shape.clone();
        let req = self.requires[x];
        self.push(Op::Affine { x, scale }, Tensor { shape, data, requires_grad: false, grad: None }, req)
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, NumericsError> {
        if !self.vals[s].is_scalar() {
            return Err(NumericsError::BadShape {
                op: "scale_by",
                detail: format!("scale node has shape {:?}", self.vals[s].shape),
            });
        }
        let sv = self.vals[s].data[0];
        let tx = &self.vals[x];
        let data: Vec<f64> = tx.data.iter().map(|&v| sv * v).collect();
        let shape = tx.shape.clone();
        let req = self.req(&[x, s]);
        self.push(Op::ScaleBy { x, s }, Tensor { shape, data, requires_grad: false, grad: None }, req)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::BadShape { op: "concat_cols", detail: "no parts".into() });
        }
        let r = self.vals[parts[0]].shape[0];
        let mut total_c = 0;
        for &p in parts {
            let t = &self.vals[p];
            if t.shape.len() != 2 || t.shape[0] != r {
                return Err(NumericsError::BadShape {
                    op: "concat_cols",
                    detail: format!("part shape {:?}, expected {} rows", t.shape, r),
                });
            }
            total_c += t.shape[1];
        }
        let mut data = vec![0.0; r * total_c];
        let mut off = 0;
        for &p in parts {
            let t = &self.vals[p];
            let c = t.shape[1];
            for i in 0..r {
                data[i * total_c + off..i * total_c + off + c]
                    .copy_from_slice(&t.data[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let req = self.req(parts);
        self.push(
            Op::ConcatCols { parts: parts.to_vec() },
            Tensor { shape: vec![r, total_c], data, requires_grad: false, grad: None },
            req,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::BadShape { op: "concat_rows", detail: "no parts".into() });
        }
        let c = self.vals[parts[0]].shape[1];
        let mut total_r = 0;
        for &p in parts {
            let t = &self.vals[p];
            if t.shape.len() != 2 || t.shape[1] != c {
                return Err(NumericsError::BadShape {
                    op: "concat_rows",
                    detail: format!("part shape {:?}, expected {} cols", t.shape, c),
                });
            }
            total_r += t.shape[0];
        }
        let mut data = Vec::with_capacity(total_r * c);
        for &p in parts {
            data.extend_from_slice(&self.vals[p].data);
        }
        let req = self.req(parts);
        self.push(
            Op::ConcatRows { parts: parts.to_vec() },
            Tensor { shape: vec![total_r, c], data, requires_grad: false, grad: None },
            req,
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> Result<NodeId, NumericsError> {
        let tx = &self.vals[x];
        if tx.shape.len() != 2 || r0 >= r1 || r1 > tx.shape[0] {
            return Err(NumericsError::BadShape {
                op: "slice_rows",
                detail: format!("rows {r0}..{r1} of {:?}", tx.shape),
            });
        }
        let c = tx.shape[1];
        let data = tx.data[r0 * c..r1 * c].to_vec();
        let req = self.requires[x];
        self.push(
            Op::SliceRows { x, range: (r0, r1) },
            Tensor { shape: vec![r1 - r0, c], data, requires_grad: false, grad: None },
            req,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> Result<NodeId, NumericsError> {
        let tx = &self.vals[x];
        if tx.shape.len() != 2 || c0 >= c1 || c1 > tx.shape[1] {
            return Err(NumericsError::BadShape {
                op: "slice_cols",
                detail: format!("cols {c0}..{c1} of {:?}", tx.shape),
            });
        }
        let (r, c) = (tx.shape[0], tx.shape[1]);
        let w = c1 - c0;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&tx.data[i * c + c0..i * c + c1]);
        }
        let req = self.requires[x];
        self.push(
            Op::SliceCols { x, range: (c0, c1) },
            Tensor { shape: vec![r, w], data, requires_grad: false, grad: None },
            req,
        )
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let tx = &self.vals[x];
        if tx.shape.len() != 2 {
            return Err(NumericsError::BadShape {
                op: "transpose",
                detail: format!("{:?}", tx.shape),
            });
        }
        let (r, c) = (tx.shape[0], tx.shape[1]);
        let data = tensor::transpose(&tx.data, r, c);
        let req = self.requires[x];
        self.push(Op::Transpose { x }, Tensor { shape: vec![c, r], data, requires_grad: false, grad: None }, req)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId, NumericsError> {
        let tx = &self.vals[x];
        let data: Vec<f64> = tx.data.iter().map(|&v| f(v)).collect();
        let shape = tx.shape.clone();
        let req = self.requires[x];
        self.push(op, Tensor { shape, data, requires_grad: false, grad: None }, req)
    }

    /// Per-row layer norm with learned gain/shift; `gamma`/`beta` are `[c]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, NumericsError> {
        let (tx, tg, tb) = (&self.vals[x], &self.vals[gamma], &self.vals[beta]);
        if tx.shape.len() != 2 || tg.numel() != tx.shape[1] || tb.numel() != tx.shape[1] {
            return Err(NumericsError::BadShape {
                op: "layer_norm",
                detail: format!("x {:?}, gamma {:?}, beta {:?}", tx.shape, tg.shape, tb.shape),
            });
        }
        let (r, c) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * tg.data[j] + tb.data[j];
            }
        }
        let req = self.req(&[x, gamma, beta]);
        self.push(
            Op::LayerNorm { x, gamma, beta },
            Tensor { shape: vec![r, c], data, requires_grad: false, grad: None },
            req,
        )
    }

    /// Gathers rows of `table` (`[V, d]`) by token id, producing `[len, d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, NumericsError> {
        let tt = &self.vals[table];
        if tt.shape.len() != 2 {
            return Err(NumericsError::BadShape {
                op: "embedding",
                detail: format!("table shape {:?}", tt.shape),
            });
        }
        let (v, d) = (tt.shape[0], tt.shape[1]);
        if ids.is_empty() {
            return Err(NumericsError::BadShape { op: "embedding", detail: "empty id list".into() });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(NumericsError::BadShape {
                    op: "embedding",
                    detail: format!("id {id} out of range for table with {v} rows"),
                });
            }
            data.extend_from_slice(&tt.data[id * d..(id + 1) * d]);
        }
        let req = self.requires[table];
        self.push(
            Op::Embedding { table, ids: ids.to_vec() },
            Tensor { shape: vec![ids.len(), d], data, requires_grad: false, grad: None },
            req,
        )
    }

    /// Per-row softmax with a boolean mask of the same shape. Masked entries
    /// are exactly 0 in the output; unmasked entries sum to 1 per row.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId, NumericsError> {
        let tx = &self.vals[x];
        if tx.shape.len() != 2 || mask.len() != tx.numel() {
            return Err(NumericsError::BadShape {
                op: "masked_softmax",
                detail: format!("logits {:?}, mask len {}", tx.shape, mask.len()),
            });
        }
        let (r, c) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data[i * c..(i + 1) * c];
            let mrow = &mask[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if mrow[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::BadInput {
                    op: "masked_softmax",
                    detail: format!("row {i} has no unmasked entries"),
                });
            }
            let mut sum = 0.0;
            for j in 0..c {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    data[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                if mrow[j] {
                    data[i * c + j] /= sum;
                }
            }
        }
        let req = self.requires[x];
        self.push(
            Op::MaskedSoftmax { x, mask: mask.to_vec() },
            Tensor { shape: vec![r, c], data, requires_grad: false, grad: None },
            req,
        )
    }

    /// Per-row log-softmax.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let tx = &self.vals[x];
        if tx.shape.len() != 2 {
            return Err(NumericsError::BadShape {
                op: "log_softmax",
                detail: format!("{:?}", tx.shape),
            });
        }
        let (r, c) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data[i * c..(i + 1) * c];
            let lse = tensor::log_sum_exp(row);
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        let req = self.requires[x];
        self.push(Op::LogSoftmax { x }, Tensor { shape: vec![r, c], data, requires_grad: false, grad: None }, req)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId, NumericsError> {
        let tl = &self.vals[logits];
        if tl.shape.len() != 2 || targets.len() != tl.shape[0] {
            return Err(NumericsError::BadShape {
                op: "cross_entropy",
                detail: format!("logits {:?}, {} targets", tl.shape, targets.len()),
            });
        }
        let (r, c) = (tl.shape[0], tl.shape[1]);
        let mut nll = 0.0;
        for i in 0..r {
            let t = targets[i] as usize;
            if t >= c {
                return Err(NumericsError::BadShape {
                    op: "cross_entropy",
                    detail: format!("target {t} out of range for {c} classes"),
                });
            }
            let row = &tl.data[i * c..(i + 1) * c];
            nll -= row[t] - tensor::log_sum_exp(row);
        }
        nll /= r as f64;
        let req = self.requires[logits];
        self.push(Op::CrossEntropy { logits, targets: targets.to_vec() }, Tensor::scalar(nll), req)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let s = self.vals[x].data.iter().sum();
        let req = self.requires[x];
        self.push(Op::SumAll { x }, Tensor::scalar(s), req)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let n = self.vals[x].numel() as f64;
        let s = self.vals[x].data.iter().sum::<f64>() / n;
        let req = self.requires[x];
        self.push(Op::MeanAll { x }, Tensor::scalar(s), req)
    }

    /// Column-wise mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let tx = &self.vals[x];
        if tx.shape.len() != 2 {
            return Err(NumericsError::BadShape {
                op: "mean_rows",
                detail: format!("{:?}", tx.shape),
            });
        }
        let (r, c) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += tx.data[i * c + j];
            }
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        let req = self.requires[x];
        self.push(Op::MeanRows { x }, Tensor { shape: vec![1, c], data, requires_grad: false, grad: None }, req)
    }

    /// Element-wise sum of same-shape nodes.
    pub fn sum_n(&mut self, xs: &[NodeId]) -> Result<NodeId, NumericsError> {
        if xs.is_empty() {
            return Err(NumericsError::BadShape { op: "sum_n", detail: "no inputs".into() });
        }
        let shape = self.vals[xs[0]].shape.clone();
        for &x in xs {
            if self.vals[x].shape != shape {
                return Err(NumericsError::BadShape {
                    op: "sum_n",
                    detail: format!("{:?} vs {:?}", self.vals[x].shape, shape),
                });
            }
        }
        let mut data = vec![0.0; self.vals[xs[0]].numel()];
        for &x in xs {
            for (d, v) in data.iter_mut().zip(&self.vals[x].data) {
                *d += v;
            }
        }
        let req = self.req(xs);
        self.push(Op::SumN { xs: xs.to_vec() }, Tensor { shape, data, requires_grad: false, grad: None }, req)
    }

    /// Scalar-valued custom op: `value` is the forward result and `grad_x`
    /// the exact gradient w.r.t. `x`, scaled by the incoming gradient during
    /// backward.
    pub fn custom_scalar(&mut self, x: NodeId, value: f64, grad_x: Vec<f64>) -> Result<NodeId, NumericsError> {
        if grad_x.len() != self.vals[x].numel() {
            return Err(NumericsError::BadShape {
                op: "custom_scalar",
                detail: format!("grad has {} values, input has {}", grad_x.len(), self.vals[x].numel()),
            });
        }
        let req = self.requires[x];
        self.push(Op::CustomScalar { x, grad_x }, Tensor::scalar(value), req)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Runs reverse-mode accumulation from a scalar root. Gradients from any
    /// previous backward call on this tape are cleared first.
    pub fn backward(&mut self, root: NodeId) -> Result<(), NumericsError> {
        if !self.vals[root].is_scalar() {
            return Err(NumericsError::NonScalarRoot { shape: self.vals[root].shape.clone() });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root] = Some(vec![1.0]);
        for id in (0..self.ops.len()).rev() {
            if self.grads[id].is_none() || !self.requires[id] {
                continue;
            }
            self.backward_op(id);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, grad: &[f64]) {
        if !self.requires[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => self.grads[id] = Some(grad.to_vec()),
        }
    }

    fn backward_op(&mut self, id: NodeId) {
        let d_out = self.grads[id].clone().expect("checked by caller");
        // Ops are moved out and restored to appease the borrow checker.
        let op = std::mem::replace(&mut self.ops[id], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.vals[*a].shape[0], self.vals[*a].shape[1]);
                let n = self.vals[*b].shape[1];
                let bt = tensor::transpose(&self.vals[*b].data, k, n);
                let da = tensor::matmul(&d_out, &bt, m, n, k);
                self.acc(*a, &da);
                let at = tensor::transpose(&self.vals[*a].data, m, k);
                let db = tensor::matmul(&at, &d_out, k, m, n);
                self.acc(*b, &db);
            }
            Op::Add { a, b } => {
                self.acc(*a, &d_out);
                self.acc(*b, &d_out);
            }
            Op::Sub { a, b } => {
                self.acc(*a, &d_out);
                let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                self.acc(*b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = d_out.iter().zip(&self.vals[*b].data).map(|(d, v)| d * v).collect();
                self.acc(*a, &da);
                let db: Vec<f64> = d_out.iter().zip(&self.vals[*a].data).map(|(d, v)| d * v).collect();
                self.acc(*b, &db);
            }
            Op::AddBias { x, bias } => {
                self.acc(*x, &d_out);
                let c = self.vals[*bias].numel();
                let r = d_out.len() / c;
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += d_out[i * c + j];
                    }
                }
                self.acc(*bias, &db);
            }
            Op::Affine { x, scale } => {
                let dx: Vec<f64> = d_out.iter().map(|d| scale * d).collect();
                self.acc(*x, &dx);
            }
            Op::ScaleBy { x, s } => {
                let sv = self.vals[*s].data[0];
                let dx: Vec<f64> = d_out.iter().map(|d| sv * d).collect();
                self.acc(*x, &dx);
                let ds: f64 = d_out.iter().zip(&self.vals[*x].data).map(|(d, v)| d * v).sum();
                self.acc(*s, &[ds]);
            }
            Op::ConcatCols { parts } => {
                let total_c = self.vals[id].shape[1];
                let r = self.vals[id].shape[0];
                let mut off = 0;
                for &p in parts {
                    let c = self.vals[p].shape[1];
                    let mut dp = vec![0.0; r * c];
                    for i in 0..r {
                        dp[i * c..(i + 1) * c]
                            .copy_from_slice(&d_out[i * total_c + off..i * total_c + off + c]);
                    }
                    self.acc(p, &dp);
                    off += c;
                }
            }
            Op::ConcatRows { parts } => {
                let c = self.vals[id].shape[1];
                let mut off = 0;
                for &p in parts {
                    let r = self.vals[p].shape[0];
                    self.acc(p, &d_out[off * c..(off + r) * c]);
                    off += r;
                }
            }
            Op::SliceRows { x, range: (r0, r1) } => {
                let c = self.vals[*x].shape[1];
                let mut dx = vec![0.0; self.vals[*x].numel()];
                dx[r0 * c..r1 * c].copy_from_slice(&d_out);
                self.acc(*x, &dx);
            }
            Op::SliceCols { x, range: (c0, c1) } => {
                let (r, c) = (self.vals[*x].shape[0], self.vals[*x].shape[1]);
                let w = c1 - c0;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + c0..i * c + c1].copy_from_slice(&d_out[i * w..(i + 1) * w]);
                }
                self.acc(*x, &dx);
            }
            Op::Transpose { x } => {
                let (c, r) = (self.vals[id].shape[0], self.vals[id].shape[1]);
                let dx = tensor::transpose(&d_out, c, r);
                self.acc(*x, &dx);
            }
            Op::Tanh { x } => {
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(&self.vals[id].data)
                    .map(|(d, y)| d * (1.0 - y * y))
                    .collect();
                self.acc(*x, &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(&self.vals[id].data)
                    .map(|(d, y)| d * y * (1.0 - y))
                    .collect();
                self.acc(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(&self.vals[*x].data)
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.acc(*x, &dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (r, c) = (self.vals[*x].shape[0], self.vals[*x].shape[1]);
                let cf = c as f64;
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let row = &self.vals[*x].data[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let dy = &d_out[i * c..(i + 1) * c];
                    let mut dxhat_mean = 0.0;
                    let mut dxhat_xhat_mean = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = dy[j] * self.vals[*gamma].data[j];
                        dgamma[j] += dy[j] * xhat;
                        dbeta[j] += dy[j];
                        dxhat_mean += dxhat;
                        dxhat_xhat_mean += dxhat * xhat;
                    }
                    dxhat_mean /= cf;
                    dxhat_xhat_mean /= cf;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = dy[j] * self.vals[*gamma].data[j];
                        dx[i * c + j] = inv * (dxhat - dxhat_mean - xhat * dxhat_xhat_mean);
                    }
                }
                self.acc(*x, &dx);
                self.acc(*gamma, &dgamma);
                self.acc(*beta, &dbeta);
            }
            Op::Embedding { table, ids } => {
                let d = self.vals[id].shape[1];
                let mut dt = vec![0.0; self.vals[*table].numel()];
                for (pos, &tok) in ids.iter().enumerate() {
                    let tok = tok as usize;
                    for j in 0..d {
                        dt[tok * d + j] += d_out[pos * d + j];
                    }
                }
                self.acc(*table, &dt);
            }
            Op::MaskedSoftmax { x, mask } => {
                let (r, c) = (self.vals[id].shape[0], self.vals[id].shape[1]);
                let y = &self.vals[id].data;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += d_out[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        if mask[i * c + j] {
                            dx[i * c + j] = y[i * c + j] * (d_out[i * c + j] - dot);
                        }
                    }
                }
                self.acc(*x, &dx);
            }
            Op::LogSoftmax { x } => {
                let (r, c) = (self.vals[id].shape[0], self.vals[id].shape[1]);
                let y = &self.vals[id].data;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let dsum: f64 = d_out[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        dx[i * c + j] = d_out[i * c + j] - y[i * c + j].exp() * dsum;
                    }
                }
                self.acc(*x, &dx);
            }
            Op::CrossEntropy { logits, targets } => {
                let (r, c) = (self.vals[*logits].shape[0], self.vals[*logits].shape[1]);
                let scale = d_out[0] / r as f64;
                let mut dl = vec![0.0; r * c];
                for i in 0..r {
                    let row = &self.vals[*logits].data[i * c..(i + 1) * c];
                    let lse = tensor::log_sum_exp(row);
                    for j in 0..c {
                        dl[i * c + j] = (row[j] - lse).exp() * scale;
                    }
                    dl[i * c + targets[i] as usize] -= scale;
                }
                self.acc(*logits, &dl);
            }
            Op::SumAll { x } => {
                let dx = vec![d_out[0]; self.vals[*x].numel()];
                self.acc(*x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.vals[*x].numel();
                let dx = vec![d_out[0] / n as f64; n];
                self.acc(*x, &dx);
            }
            Op::MeanRows { x } => {
                let (r, c) = (self.vals[*x].shape[0], self.vals[*x].shape[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = d_out[j] / r as f64;
                    }
                }
                self.acc(*x, &dx);
            }
            Op::SumN { xs } => {
                for &x in xs {
                    self.acc(x, &d_out);
                }
            }
            Op::CustomScalar { x, grad_x } => {
                let dx: Vec<f64> = grad_x.iter().map(|g| g * d_out[0]).collect();
                self.acc(*x, &dx);
            }
        }
        self.ops[id] = op;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddBias { .. } => "add_bias",
        Op::Affine { .. } => "affine",
        Op::ScaleBy { .. } => "scale_by",
        Op::ConcatCols { .. } => "concat_cols",
        Op::ConcatRows { .. } => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Transpose { .. } => "transpose",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Relu { .. } => "relu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::MaskedSoftmax { .. } => "masked_softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::MeanRows { .. } => "mean_rows",
        Op::SumN { .. } => "sum_n",
        Op::CustomScalar { .. } => "custom_scalar",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max relative disagreement between analytic gradients and central
/// differences for a deterministic scalar function of `params`.
///
/// The returned value is `max_i |analytic_i - cd_i| / max(1, |cd_i|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(NumericsError::BadStep { h });
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| tape.param(p))
        .collect::<Result<_, _>>()?;
    let root = f(&mut tape, &ids)?;
    if !tape.value(root).is_scalar() {
        return Err(NumericsError::NonScalarRoot { shape: tape.shape(root).to_vec() });
    }
    if !tape.scalar_value(root).is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check" });
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, NumericsError> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|p| t.param(p)).collect::<Result<_, _>>()?;
        let root = f(&mut t, &ids)?;
        let v = t.scalar_value(root);
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            let orig = p.data[ci];
            work[pi].data[ci] = orig + h;
            let f_plus = eval(&work)?;
            work[pi].data[ci] = orig - h;
            let f_minus = eval(&work)?;
            work[pi].data[ci] = orig;
            let cd = (f_plus - f_minus) / (2.0 * h);
            let err = (analytic[pi][ci] - cd).abs() / cd.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.scalar_value(y), 0.5);
    }

    #[test]
    fn masked_softmax_single_unmasked_entry() {
        let mut tape = Tape::new();
        let x = tape.input(t2(1, 2, &[1.0, 1.0])).unwrap();
        let y = tape.masked_softmax(x, &[true, false]).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_rejects_fully_masked_row() {
        let mut tape = Tape::new();
        let x = tape.input(t2(1, 2, &[1.0, 1.0])).unwrap();
        assert!(matches!(
            tape.masked_softmax(x, &[false, false]),
            Err(NumericsError::BadInput { .. })
        ));
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.input(t2(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.input(t2(2, 1, &[1.0, 1.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.input(t2(2, 2, &[1.0; 4])).unwrap();
        let b = tape.input(t2(3, 1, &[1.0; 3])).unwrap();
        match tape.matmul(a, b) {
            Err(NumericsError::BadShape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 2]") && detail.contains("[3, 1]"));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        // L = sum(x ∘ x), x = [1,2,3] -> dL/dx = [2,4,6]
        let x = t2(1, 3, &[1.0, 2.0, 3.0]).with_grad();
        let mut tape = Tape::new();
        let xid = tape.param(&x).unwrap();
        let sq = tape.mul(xid, xid).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_sigmoid_prime_at_zero() {
        let w = Tensor::scalar(0.0).with_grad();
        let mut tape = Tape::new();
        let wid = tape.param(&w).unwrap();
        let y = tape.sigmoid(wid).unwrap();
        tape.backward(y).unwrap();
        assert!((tape.grad(wid).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.input(t2(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(NumericsError::NonScalarRoot { .. })));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut rng).with_grad();
        let b = Tensor::uniform(&[4, 2], 1.0, &mut rng).with_grad();
        let run = || {
            let mut tape = Tape::new();
            let aid = tape.param(&a).unwrap();
            let bid = tape.param(&b).unwrap();
            let c = tape.matmul(aid, bid).unwrap();
            let t = tape.tanh(c).unwrap();
            let l = tape.mean_all(t).unwrap();
            tape.backward(l).unwrap();
            (tape.grad(aid).unwrap().to_vec(), tape.grad(bid).unwrap().to_vec())
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn grad_check_tanh_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[2, 3], 1.5, &mut rng).with_grad();
        let err = grad_check(
            |tape, ids| {
                let t = tape.tanh(ids[0])?;
                tape.sum_all(t)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "tanh grad error {err}");
    }

    #[test]
    fn grad_check_constant_is_zero() {
        let x = Tensor::scalar(3.0).with_grad();
        let err = grad_check(
            |tape, _ids| tape.constant_scalar(1.25),
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let x = Tensor::scalar(0.0).with_grad();
        assert!(matches!(
            grad_check(|tape, ids| tape.sum_all(ids[0]), &[x], 1e-2),
            Err(NumericsError::BadStep { .. })
        ));
    }

    #[test]
    fn grad_check_all_primitives() {
        // One composite touching every differentiable primitive; checked at a
        // fixed random point.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 4], 0.8, &mut rng).with_grad();
        let w = Tensor::uniform(&[4, 4], 0.8, &mut rng).with_grad();
        let bias = Tensor::uniform(&[4], 0.5, &mut rng).with_grad();
        let gamma = Tensor::uniform(&[4], 0.5, &mut rng).with_grad();
        let beta = Tensor::uniform(&[4], 0.5, &mut rng).with_grad();
        let table = Tensor::uniform(&[5, 4], 0.8, &mut rng).with_grad();
        let mask = vec![
            true, true, false, true, //
            true, true, true, false, //
            false, true, true, true,
        ];
        let err = grad_check(
            |tape, ids| {
                let (x, w, bias, gamma, beta, table) =
                    (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]);
                let emb = tape.embedding(table, &[0, 2, 4])?;
                let mm = tape.matmul(x, w)?;
                let mm = tape.add_bias(mm, bias)?;
                let summed = tape.add(mm, emb)?;
                let ln = tape.layer_norm(summed, gamma, beta)?;
                let t = tape.tanh(ln)?;
                let s = tape.sigmoid(t)?;
                let r = tape.relu(s)?;
                let sm = tape.masked_softmax(r, &mask)?;
                let lsm = tape.log_softmax(sm)?;
                let tr = tape.transpose(lsm)?;
                let tr = tape.transpose(tr)?;
                let left = tape.slice_cols(tr, 0, 2)?;
                let right = tape.slice_cols(tr, 2, 4)?;
                let cat = tape.concat_cols(&[left, right])?;
                let top = tape.slice_rows(cat, 0, 2)?;
                let bot = tape.slice_rows(cat, 2, 3)?;
                let cat = tape.concat_rows(&[top, bot])?;
                let diff = tape.sub(cat, x)?;
                let prod = tape.mul(diff, diff)?;
                let scaled = tape.affine(prod, 0.7, 0.1)?;
                let pooled = tape.mean_rows(scaled)?;
                let ce_in = tape.matmul(x, w)?;
                let ce = tape.cross_entropy(ce_in, &[1, 0, 3])?;
                let m = tape.mean_all(pooled)?;
                let s1 = tape.sum_all(scaled)?;
                let s1 = tape.affine(s1, 0.01, 0.0)?;
                let gate = tape.sigmoid(m)?;
                let gated = tape.scale_by(s1, gate)?;
                let total = tape.sum_n(&[ce, gated, m])?;
                tape.sum_all(total)
            },
            &[x, w, bias, gamma, beta, table],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "composite primitive grad error {err}");
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_over_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = Tensor::uniform(&[4, 6], 3.0, &mut rng);
        let mask: Vec<bool> = (0..24).map(|i| i % 3 != 1).collect();
        let mut tape = Tape::new();
        let xid = tape.input(x).unwrap();
        let y = tape.masked_softmax(xid, &mask).unwrap();
        let yv = tape.value(y);
        for i in 0..4 {
            let mut sum = 0.0;
            for j in 0..6 {
                let v = yv.data[i * 6 + j];
                if mask[i * 6 + j] {
                    sum += v;
                } else {
                    assert_eq!(v, 0.0);
                }
            }
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
