//! The Wengert tape: operation recording and the reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::Tensor;
use crate::{CoreError, Result};

/// Handle to a tensor living on a [`Tape`]. Only valid for the tape that
/// issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub(crate) fn new(idx: usize) -> Self {
        TensorId(idx)
    }
}

/// How parameter structs obtain tape ids: either by snapshotting tensors
/// onto a tape, or by consuming ids that are already registered (used by
/// gradient checking, where the checker owns registration).
pub trait Registrar {
    fn reg_param(&mut self, tensor: &Tensor) -> TensorId;
}

impl Registrar for Tape {
    fn reg_param(&mut self, tensor: &Tensor) -> TensorId {
        self.param(tensor)
    }
}

/// Feeds out pre-registered ids in order.
pub struct IdFeeder<'a> {
    ids: std::slice::Iter<'a, TensorId>,
}

impl<'a> IdFeeder<'a> {
    pub fn new(ids: &'a [TensorId]) -> Self {
        IdFeeder { ids: ids.iter() }
    }

    pub fn exhausted(&self) -> bool {
        self.ids.len() == 0
    }
}

impl Registrar for IdFeeder<'_> {
    fn reg_param(&mut self, _tensor: &Tensor) -> TensorId {
        *self.ids.next().expect("IdFeeder ran out of ids")
    }
}

/// Train mode records dropout; eval mode turns dropout into the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Elementwise operation selector for [`Tape::ewise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwiseKind {
    Add,
    Sub,
    Hadamard,
    Sigmoid,
    Tanh,
    Relu,
}

const LN_EPS: f64 = 1e-5;

/// Recorded operation: inputs by id plus whatever the backward rule needs.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Detach,
    Matmul { a: TensorId, b: TensorId },
    MatmulNt { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBiasRow { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Hadamard { a: TensorId, b: TensorId },
    Sigmoid { a: TensorId },
    Tanh { a: TensorId },
    Relu { a: TensorId },
    SoftmaxRows { a: TensorId },
    // masked outputs are exactly zero, so backward needs no mask copy
    MaskedSoftmaxRows { a: TensorId },
    ConcatLast { a: TensorId, b: TensorId },
    StackRows { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize },
    LayerNormRows { a: TensorId, gain: TensorId, bias: TensorId },
    Conv1d { a: TensorId, w: TensorId, b: TensorId, pad_l: usize, pad_r: usize },
    HalvingPool { a: TensorId, argmax: Vec<usize> },
    GlobalMaxPoolRows { a: TensorId, argmax: Vec<usize> },
    EmbedRows { table: TensorId, ids: Vec<usize> },
    Dropout { a: TensorId, keep: f64, mask: Vec<bool> },
    Scale { a: TensorId, c: f64 },
    SumAll { a: TensorId },
    CrossEntropy { logits: TensorId, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detach => "detach",
            Op::Matmul { .. } => "matmul",
            Op::MatmulNt { .. } => "matmul_nt",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::AddBiasRow { .. } => "add_bias_row",
            Op::Sub { .. } => "sub",
            Op::Hadamard { .. } => "hadamard",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::MaskedSoftmaxRows { .. } => "masked_softmax_rows",
            Op::ConcatLast { .. } => "concat_last",
            Op::StackRows { .. } => "stack_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::Conv1d { .. } => "conv1d",
            Op::HalvingPool { .. } => "halving_pool",
            Op::GlobalMaxPoolRows { .. } => "global_max_pool_rows",
            Op::EmbedRows { .. } => "embed_rows",
            Op::Dropout { .. } => "dropout",
            Op::Scale { .. } => "scale",
            Op::SumAll { .. } => "sum_all",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    tensor: Tensor,
    op: Op,
    /// True when this node's subtree contains a requires-grad leaf.
    needs_grad: bool,
}

/// Ordered record of operations. Inputs are always recorded before the
/// operations that consume them, so a single reverse sweep is a valid
/// topological replay.
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Tape::with_seed(mode, 0)
    }

    /// `seed` drives the dropout stream only.
    pub fn with_seed(mode: Mode, seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Registration ────────────────────────────────────────────────

    /// Move a tensor onto the tape, keeping its requires-grad flag.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad();
        self.push_unchecked(tensor, Op::Leaf, needs)
    }

    /// Register a non-trainable constant.
    pub fn constant(&mut self, tensor: Tensor) -> TensorId {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.push_unchecked(t, Op::Leaf, false)
    }

    /// Snapshot a parameter onto the tape (cloned, requires grad). The
    /// original stays untouched; read the gradient back via [`Tape::grad`].
    pub fn param(&mut self, tensor: &Tensor) -> TensorId {
        let mut t = tensor.clone();
        t.set_requires_grad(true);
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// New leaf carrying a copy of `a`'s values, cut off from the graph.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let t = Tensor::new(self.shape(a), self.values(a).to_vec()).expect("detach shape");
        self.push_unchecked(t, Op::Detach, false)
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.values()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// Gradient accumulated by [`Tape::backward`]; `None` before it runs
    /// (or for nodes that do not require grad).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    // ── Forward operations ──────────────────────────────────────────

    /// Matrix product `a(m×k) · b(k×n)`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let values = kernels::mm(self.values(a), self.values(b), m, k, n);
        self.push(&[m, n], values, Op::Matmul { a, b })
    }

    /// `a(m×k) · b(n×k)ᵀ`: the second operand is stored row-per-output-column.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let values = kernels::mm_nt(self.values(a), self.values(b), m, k, n);
        self.push(&[m, n], values, Op::MatmulNt { a, b })
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2("transpose", a)?;
        let values = kernels::transpose(self.values(a), m, n);
        self.push(&[n, m], values, Op::Transpose { a })
    }

    /// Elementwise op per the selector. Binary kinds need `b`; unary kinds
    /// reject it. `Add` also accepts a rank-1 bias row broadcast over a
    /// rank-2 matrix; no other broadcasting exists.
    pub fn ewise(&mut self, kind: EwiseKind, a: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        match (kind, b) {
            (EwiseKind::Add, Some(b)) => self.add(a, b),
            (EwiseKind::Sub, Some(b)) => self.sub(a, b),
            (EwiseKind::Hadamard, Some(b)) => self.hadamard(a, b),
            (EwiseKind::Sigmoid, None) => self.sigmoid(a),
            (EwiseKind::Tanh, None) => self.tanh(a),
            (EwiseKind::Relu, None) => self.relu(a),
            (k, Some(_)) => Err(CoreError::contract(format!(
                "ewise: unary kind {k:?} takes no second operand"
            ))),
            (k, None) => Err(CoreError::contract(format!(
                "ewise: binary kind {k:?} needs a second operand"
            ))),
        }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) == self.shape(b) {
            let values: Vec<f64> = self
                .values(a)
                .iter()
                .zip(self.values(b))
                .map(|(x, y)| x + y)
                .collect();
            let shape = self.shape(a).to_vec();
            return self.push(&shape, values, Op::Add { a, b });
        }
        // bias-row broadcast: (m×n) + (n)
        let a_shape = self.shape(a);
        let b_shape = self.shape(b);
        if a_shape.len() == 2 && b_shape.len() == 1 && a_shape[1] == b_shape[0] {
            let (m, n) = (a_shape[0], a_shape[1]);
            let mut values = self.values(a).to_vec();
            let bias = self.values(b);
            for r in 0..m {
                for (v, &bv) in values[r * n..(r + 1) * n].iter_mut().zip(bias) {
                    *v += bv;
                }
            }
            return self.push(&[m, n], values, Op::AddBiasRow { a, b });
        }
        Err(self.shape_err("add", a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("sub", a, b));
        }
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, values, Op::Sub { a, b })
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("hadamard", a, b));
        }
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, values, Op::Hadamard { a, b })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, values, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self.values(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, values, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self.values(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, values, Op::Relu { a })
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2("softmax_rows", a)?;
        if n == 0 {
            return Err(CoreError::BadShape {
                op: "softmax_rows",
                shape: self.shape(a).to_vec(),
                msg: "needs at least one column".into(),
            });
        }
        let values = kernels::softmax_rows(self.values(a), m, n);
        self.push(&[m, n], values, Op::SoftmaxRows { a })
    }

    /// Softmax over the columns where `mask` is true; masked columns get
    /// exactly zero weight (equivalent to a −∞ score).
    pub fn masked_softmax_rows(&mut self, a: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (m, n) = self.dims2("masked_softmax_rows", a)?;
        if mask.len() != n {
            return Err(CoreError::contract(format!(
                "masked_softmax_rows: mask length {} != columns {n}",
                mask.len()
            )));
        }
        let values = kernels::masked_softmax_rows(self.values(a), m, n, mask)
            .ok_or_else(|| CoreError::contract("masked_softmax_rows: every position is masked".to_string()))?;
        self.push(&[m, n], values, Op::MaskedSoftmaxRows { a })
    }

    /// Concatenate along the last dimension; all other dims must agree.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        let ok = a_shape.len() == b_shape.len()
            && !a_shape.is_empty()
            && a_shape[..a_shape.len() - 1] == b_shape[..b_shape.len() - 1];
        if !ok {
            return Err(self.shape_err("concat_last", a, b));
        }
        let an = *a_shape.last().unwrap();
        let bn = *b_shape.last().unwrap();
        let outer: usize = a_shape[..a_shape.len() - 1].iter().product();
        let mut values = Vec::with_capacity(outer * (an + bn));
        let av = self.values(a);
        let bv = self.values(b);
        for r in 0..outer {
            values.extend_from_slice(&av[r * an..(r + 1) * an]);
            values.extend_from_slice(&bv[r * bn..(r + 1) * bn]);
        }
        let mut shape = a_shape;
        *shape.last_mut().unwrap() = an + bn;
        self.push(&shape, values, Op::ConcatLast { a, b })
    }

    /// Vertically stack rank-2 tensors sharing a column count.
    pub fn stack_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CoreError::contract("stack_rows: no parts".to_string()));
        }
        let (_, n) = self.dims2("stack_rows", parts[0])?;
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let (m, n2) = self.dims2("stack_rows", p)?;
            if n2 != n {
                return Err(self.shape_err("stack_rows", parts[0], p));
            }
            rows += m;
            values.extend_from_slice(self.values(p));
        }
        self.push(&[rows, n], values, Op::StackRows { parts: parts.to_vec() })
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2("slice_rows", a)?;
        if start + len > m {
            return Err(CoreError::BadShape {
                op: "slice_rows",
                shape: self.shape(a).to_vec(),
                msg: format!("rows {start}..{} out of range", start + len),
            });
        }
        let values = self.values(a)[start * n..(start + len) * n].to_vec();
        self.push(&[len, n], values, Op::SliceRows { a, start })
    }

    /// Per-row layer normalization with learned gain and bias (rank-1, length
    /// = columns of `a`).
    pub fn layer_norm_rows(&mut self, a: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2("layer_norm_rows", a)?;
        for &p in &[gain, bias] {
            if self.shape(p) != [n] {
                return Err(self.shape_err("layer_norm_rows", a, p));
            }
        }
        let x = self.values(a);
        let g = self.values(gain);
        let b = self.values(bias);
        let mut values = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                values[r * n + j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        self.push(&[m, n], values, Op::LayerNormRows { a, gain, bias })
    }

    /// 1-D convolution over rows: input L×c_in, weight [c_out, width, c_in],
    /// bias [c_out], zero padding `pad_l`/`pad_r` rows.
    pub fn conv1d(
        &mut self,
        a: TensorId,
        w: TensorId,
        b: TensorId,
        pad_l: usize,
        pad_r: usize,
    ) -> Result<TensorId> {
        let (l, c_in) = self.dims2("conv1d", a)?;
        let w_shape = self.shape(w).to_vec();
        if w_shape.len() != 3 || w_shape[2] != c_in {
            return Err(self.shape_err("conv1d", a, w));
        }
        let (c_out, width) = (w_shape[0], w_shape[1]);
        if self.shape(b) != [c_out] {
            return Err(self.shape_err("conv1d", w, b));
        }
        let out_len = kernels::conv1d_out_len(l, width, pad_l, pad_r);
        if out_len == 0 {
            return Err(CoreError::BadShape {
                op: "conv1d",
                shape: self.shape(a).to_vec(),
                msg: format!("sequence too short for width {width} with padding {pad_l}+{pad_r}"),
            });
        }
        let values = kernels::conv1d_padded(
            self.values(a),
            l,
            c_in,
            self.values(w),
            self.values(b),
            c_out,
            width,
            pad_l,
            pad_r,
        );
        self.push(&[out_len, c_out], values, Op::Conv1d { a, w, b, pad_l, pad_r })
    }

    /// Max-pool window 3 / stride 2 over rows; output has ⌈L/2⌉ rows.
    pub fn halving_pool(&mut self, a: TensorId) -> Result<TensorId> {
        let (l, c) = self.dims2("halving_pool", a)?;
        if l == 0 {
            return Err(CoreError::BadShape {
                op: "halving_pool",
                shape: self.shape(a).to_vec(),
                msg: "needs at least one row".into(),
            });
        }
        let (values, argmax) = kernels::halving_pool(self.values(a), l, c);
        self.push(&[l.div_ceil(2), c], values, Op::HalvingPool { a, argmax })
    }

    /// Column-wise max over all rows → 1×C.
    pub fn global_max_pool_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (l, c) = self.dims2("global_max_pool_rows", a)?;
        if l == 0 {
            return Err(CoreError::BadShape {
                op: "global_max_pool_rows",
                shape: self.shape(a).to_vec(),
                msg: "needs at least one row".into(),
            });
        }
        let (values, argmax) = kernels::global_max_rows(self.values(a), l, c);
        self.push(&[1, c], values, Op::GlobalMaxPoolRows { a, argmax })
    }

    /// Gather rows of an embedding table: output is len(ids)×d.
    pub fn embed_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.dims2("embed_rows", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(CoreError::contract(format!(
                "embed_rows: id {bad} out of range for table with {v} rows"
            )));
        }
        let tv = self.values(table);
        let mut values = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            values.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(&[ids.len(), d], values, Op::EmbedRows { table, ids: ids.to_vec() })
    }

    /// Inverted dropout: kept entries are scaled by 1/keep. Identity in eval
    /// mode or at rate 0; the mask comes from the tape's own RNG stream.
    pub fn dropout(&mut self, a: TensorId, rate: f64) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CoreError::contract(format!("dropout: rate {rate} outside [0,1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<bool> = (0..self.values(a).len())
            .map(|_| self.rng.gen::<f64>() < keep)
            .collect();
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v / keep } else { 0.0 })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, values, Op::Dropout { a, keep, mask })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let values: Vec<f64> = self.values(a).iter().map(|&v| v * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, values, Op::Scale { a, c })
    }

    /// Sum of all entries → scalar (shape [1]).
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.values(a).iter().sum();
        self.push(&[1], vec![s], Op::SumAll { a })
    }

    /// Mean over the batch of −log softmax(logits)[label], in the
    /// log-sum-exp form. `logits` is B×K.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (b, k) = self.dims2("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(CoreError::contract(format!(
                "cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(CoreError::contract(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let lv = self.values(logits);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            total += kernels::log_sum_exp_row(row) - row[label];
        }
        let loss = total / b as f64;
        self.push(&[1], vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec() })
    }

    // ── Backward pass ───────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss.
    ///
    /// Afterwards every requires-grad tensor on the tape has a populated
    /// gradient; tensors the loss does not reach keep zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(CoreError::contract("backward: loss is not on this tape".to_string()));
        }
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(CoreError::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].tensor.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g_out) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &g_out, &mut grads)?;
            grads[i] = Some(g_out);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.tensor.requires_grad() {
                match grads[i].take() {
                    Some(g) => *node.tensor.grad_mut_or_zeros() = g,
                    None => {
                        node.tensor.grad_mut_or_zeros();
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_op(
        &self,
        out: usize,
        op: &Op,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let name = op.name();
        match op {
            Op::Leaf | Op::Detach => {}

            Op::Matmul { a, b } => {
                let (m, k) = self.raw_dims2(*a);
                let n = self.shape_of(out)[1];
                if self.wants(*a) {
                    let da = kernels::mm_nt(g, self.values(*b), m, n, k);
                    self.accumulate(name, *a, da, grads)?;
                }
                if self.wants(*b) {
                    let db = kernels::mm_tn(self.values(*a), g, m, k, n);
                    self.accumulate(name, *b, db, grads)?;
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = self.raw_dims2(*a);
                let n = self.shape_of(out)[1];
                if self.wants(*a) {
                    let da = kernels::mm(g, self.values(*b), m, n, k);
                    self.accumulate(name, *a, da, grads)?;
                }
                if self.wants(*b) {
                    let db = kernels::mm_tn(g, self.values(*a), m, n, k);
                    self.accumulate(name, *b, db, grads)?;
                }
            }
            Op::Transpose { a } => {
                if self.wants(*a) {
                    let s = self.shape_of(out);
                    let da = kernels::transpose(g, s[0], s[1]);
                    self.accumulate(name, *a, da, grads)?;
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    self.accumulate(name, *a, g.to_vec(), grads)?;
                }
                if self.wants(*b) {
                    self.accumulate(name, *b, g.to_vec(), grads)?;
                }
            }
            Op::AddBiasRow { a, b } => {
                if self.wants(*a) {
                    self.accumulate(name, *a, g.to_vec(), grads)?;
                }
                if self.wants(*b) {
                    let (m, n) = self.raw_dims2(*a);
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (d, &gv) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d += gv;
                        }
                    }
                    self.accumulate(name, *b, db, grads)?;
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    self.accumulate(name, *a, g.to_vec(), grads)?;
                }
                if self.wants(*b) {
                    self.accumulate(name, *b, g.iter().map(|v| -v).collect(), grads)?;
                }
            }
            Op::Hadamard { a, b } => {
                if self.wants(*a) {
                    let da = g.iter().zip(self.values(*b)).map(|(gv, bv)| gv * bv).collect();
                    self.accumulate(name, *a, da, grads)?;
                }
                if self.wants(*b) {
                    let db = g.iter().zip(self.values(*a)).map(|(gv, av)| gv * av).collect();
                    self.accumulate(name, *b, db, grads)?;
                }
            }
            Op::Sigmoid { a } => {
                if self.wants(*a) {
                    let y = self.values_of(out);
                    let da = g.iter().zip(y).map(|(gv, &yv)| gv * yv * (1.0 - yv)).collect();
                    self.accumulate(name, *a, da, grads)?;
                }
            }
            Op::Tanh { a } => {
                if self.wants(*a) {
                    let y = self.values_of(out);
                    let da = g.iter().zip(y).map(|(gv, &yv)| gv * (1.0 - yv * yv)).collect();
                    self.accumulate(name, *a, da, grads)?;
                }
            }
            Op::Relu { a } => {
                if self.wants(*a) {
                    let x = self.values(*a);
                    let da = g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(name, *a, da, grads)?;
                }
            }
            Op::SoftmaxRows { a } | Op::MaskedSoftmaxRows { a } => {
                // masked entries have y = 0, so the same rule covers both
                if self.wants(*a) {
                    let s = self.shape_of(out);
                    let (m, n) = (s[0], s[1]);
                    let y = self.values_of(out);
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..n {
                            da[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(name, *a, da, grads)?;
                }
            }
            Op::ConcatLast { a, b } => {
                let an = *self.nodes[a.0].tensor.shape().last().unwrap();
                let bn = *self.nodes[b.0].tensor.shape().last().unwrap();
                let outer: usize = self.shape_of(out)[..self.shape_of(out).len() - 1]
                    .iter()
                    .product();
                if self.wants(*a) {
                    let mut da = vec![0.0; outer * an];
                    for r in 0..outer {
                        da[r * an..(r + 1) * an]
                            .copy_from_slice(&g[r * (an + bn)..r * (an + bn) + an]);
                    }
                    self.accumulate(name, *a, da, grads)?;
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; outer * bn];
                    for r in 0..outer {
                        db[r * bn..(r + 1) * bn]
                            .copy_from_slice(&g[r * (an + bn) + an..(r + 1) * (an + bn)]);
                    }
                    self.accumulate(name, *b, db, grads)?;
                }
            }
            Op::StackRows { parts } => {
                let n = self.shape_of(out)[1];
                let mut row = 0;
                for &p in parts {
                    let m = self.nodes[p.0].tensor.shape()[0];
                    if self.wants(p) {
                        let dp = g[row * n..(row + m) * n].to_vec();
                        self.accumulate(name, p, dp, grads)?;
                    }
                    row += m;
                }
            }
            Op::SliceRows { a, start } => {
                if self.wants(*a) {
                    let (m, n) = self.raw_dims2(*a);
                    let len = self.shape_of(out)[0];
                    let mut da = vec![0.0; m * n];
                    da[start * n..(start + len) * n].copy_from_slice(g);
                    self.accumulate(name, *a, da, grads)?;
                }
            }
            Op::LayerNormRows { a, gain, bias } => {
                let (m, n) = self.raw_dims2(*a);
                let x = self.values(*a);
                let gv = self.values(*gain);
                let mut da = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..m {
                    let row = &x[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(g, gn)| g * gn).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                    for j in 0..n {
                        da[r * n + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                if self.wants(*a) {
                    self.accumulate(name, *a, da, grads)?;
                }
                if self.wants(*gain) {
                    self.accumulate(name, *gain, dgain, grads)?;
                }
                if self.wants(*bias) {
                    self.accumulate(name, *bias, dbias, grads)?;
                }
            }
            Op::Conv1d { a, w, b, pad_l, pad_r } => {
                let (l, c_in) = self.raw_dims2(*a);
                let w_shape = self.nodes[w.0].tensor.shape();
                let (c_out, width) = (w_shape[0], w_shape[1]);
                let (da, dw, db) = kernels::conv1d_backward(
                    g,
                    self.values(*a),
                    l,
                    c_in,
                    self.values(*w),
                    c_out,
                    width,
                    *pad_l,
                    *pad_r,
                );
                if self.wants(*a) {
                    self.accumulate(name, *a, da, grads)?;
                }
                if self.wants(*w) {
                    self.accumulate(name, *w, dw, grads)?;
                }
                if self.wants(*b) {
                    self.accumulate(name, *b, db, grads)?;
                }
            }
            Op::HalvingPool { a, argmax } | Op::GlobalMaxPoolRows { a, argmax } => {
                if self.wants(*a) {
                    let (_, c) = self.raw_dims2(*a);
                    let mut da = vec![0.0; self.values(*a).len()];
                    for (cell, &src_row) in argmax.iter().enumerate() {
                        let ch = cell % c;
                        da[src_row * c + ch] += g[cell];
                    }
                    self.accumulate(name, *a, da, grads)?;
                }
            }
            Op::EmbedRows { table, ids } => {
                if self.wants(*table) {
                    let (_, d) = self.raw_dims2(*table);
                    let mut dt = vec![0.0; self.values(*table).len()];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[t * d + j];
                        }
                    }
                    self.accumulate(name, *table, dt, grads)?;
                }
            }
            Op::Dropout { a, keep, mask } => {
                if self.wants(*a) {
                    let da = g
                        .iter()
                        .zip(mask)
                        .map(|(gv, &m)| if m { gv / keep } else { 0.0 })
                        .collect();
                    self.accumulate(name, *a, da, grads)?;
                }
            }
            Op::Scale { a, c } => {
                if self.wants(*a) {
                    self.accumulate(name, *a, g.iter().map(|v| v * c).collect(), grads)?;
                }
            }
            Op::SumAll { a } => {
                if self.wants(*a) {
                    let da = vec![g[0]; self.values(*a).len()];
                    self.accumulate(name, *a, da, grads)?;
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.wants(*logits) {
                    let (b, k) = self.raw_dims2(*logits);
                    let lv = self.values(*logits);
                    let probs = kernels::softmax_rows(lv, b, k);
                    let scale = g[0] / b as f64;
                    let mut dl = probs;
                    for (i, &label) in labels.iter().enumerate() {
                        dl[i * k + label] -= 1.0;
                    }
                    for v in dl.iter_mut() {
                        *v *= scale;
                    }
                    self.accumulate(name, *logits, dl, grads)?;
                }
            }
        }
        Ok(())
    }

    // ── Internals ───────────────────────────────────────────────────

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn values_of(&self, idx: usize) -> &[f64] {
        self.nodes[idx].tensor.values()
    }

    fn shape_of(&self, idx: usize) -> &[usize] {
        self.nodes[idx].tensor.shape()
    }

    fn raw_dims2(&self, id: TensorId) -> (usize, usize) {
        let s = self.nodes[id.0].tensor.shape();
        (s[0], s[1])
    }

    fn accumulate(
        &self,
        op: &'static str,
        target: TensorId,
        contribution: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        if contribution.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { op, phase: "backward" });
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&contribution) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        let s = self.nodes[id.0].tensor.shape();
        if s.len() != 2 {
            return Err(CoreError::BadShape {
                op,
                shape: s.to_vec(),
                msg: "expected a rank-2 tensor".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn shape_err(&self, op: &'static str, a: TensorId, b: TensorId) -> CoreError {
        CoreError::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].tensor.shape().to_vec(),
            rhs: self.nodes[b.0].tensor.shape().to_vec(),
        }
    }

    fn push(&mut self, shape: &[usize], values: Vec<f64>, op: Op) -> Result<TensorId> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { op: op.name(), phase: "forward" });
        }
        let needs = self.op_inputs(&op).iter().any(|id| self.nodes[id.0].needs_grad);
        let mut tensor = Tensor::new(shape, values)?;
        tensor.set_requires_grad(needs);
        Ok(self.push_unchecked(tensor, op, needs))
    }

    fn push_unchecked(&mut self, mut tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = self.nodes.len();
        tensor.set_node_id(id);
        self.nodes.push(Node { tensor, op, needs_grad });
        TensorId(id)
    }

    fn op_inputs(&self, op: &Op) -> Vec<TensorId> {
        match op {
            Op::Leaf | Op::Detach => vec![],
            Op::Matmul { a, b }
            | Op::MatmulNt { a, b }
            | Op::Add { a, b }
            | Op::AddBiasRow { a, b }
            | Op::Sub { a, b }
            | Op::Hadamard { a, b }
            | Op::ConcatLast { a, b } => vec![*a, *b],
            Op::Transpose { a }
            | Op::Sigmoid { a }
            | Op::Tanh { a }
            | Op::Relu { a }
            | Op::SoftmaxRows { a }
            | Op::MaskedSoftmaxRows { a }
            | Op::SliceRows { a, .. }
            | Op::HalvingPool { a, .. }
            | Op::GlobalMaxPoolRows { a, .. }
            | Op::Dropout { a, .. }
            | Op::Scale { a, .. }
            | Op::SumAll { a } => vec![*a],
            Op::StackRows { parts } => parts.clone(),
            Op::LayerNormRows { a, gain, bias } => vec![*a, *gain, *bias],
            Op::Conv1d { a, w, b, .. } => vec![*a, *w, *b],
            Op::EmbedRows { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn t(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::new(shape, values).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut tape = Tape::new(Mode::Eval);
        let eye = tape.constant(t(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = tape.constant(t(&[3, 2], vec![1., 2., 3., 4., 5., 6.]));
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.values(c), tape.values(a));
    }

    #[test]
    fn matmul_shape_contract() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let av: Vec<f64> = (0..9).map(|i| ((i * 7 + 3) % 11) as f64 * 0.31 - 1.2).collect();
        let bv: Vec<f64> = (0..9).map(|i| ((i * 5 + 1) % 13) as f64 * 0.17 - 0.9).collect();
        let mut oracle = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                for p in 0..3 {
                    oracle[i * 3 + j] += av[i * 3 + p] * bv[p * 3 + j];
                }
            }
        }
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(t(&[3, 3], av));
        let b = tape.constant(t(&[3, 3], bv));
        let c = tape.matmul(a, b).unwrap();
        for (got, want) in tape.values(c).iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(Tensor::zeros(&[4]));
        let s = tape.ewise(EwiseKind::Sigmoid, a, None).unwrap();
        assert!(tape.values(s).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(t(&[3], vec![-1.0, 0.0, 2.0]));
        let r = tape.ewise(EwiseKind::Relu, a, None).unwrap();
        assert_eq!(tape.values(r), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn hadamard_matches_per_index_oracle() {
        let av = vec![0.3, -1.7, 2.2, 0.0];
        let bv = vec![-2.0, 0.5, 1.1, 9.0];
        let oracle: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(t(&[4], av));
        let b = tape.constant(t(&[4], bv));
        let h = tape.ewise(EwiseKind::Hadamard, a, Some(b)).unwrap();
        assert_eq!(tape.values(h), &oracle[..]);
    }

    #[test]
    fn ewise_rejects_broadcast_beyond_bias_row() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, b).is_err());
        // bias row is the one allowed broadcast
        let row = tape.constant(t(&[3], vec![1.0, 2.0, 3.0]));
        let c = tape.add(a, row).unwrap();
        assert_eq!(tape.values(c), &[1., 2., 3., 1., 2., 3.]);
        // and only for add
        assert!(tape.sub(a, row).is_err());
        assert!(tape.hadamard(a, row).is_err());
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(t(&[1, 4], vec![3.7; 4]));
        let s = tape.softmax_rows(a).unwrap();
        for &v in tape.values(s) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let xs = vec![0.1, -2.0, 1.3, 0.7];
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(t(&[1, 4], xs.clone()));
        let b = tape.constant(t(&[1, 4], xs.iter().map(|v| v + 1000.0).collect()));
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        for (x, y) in tape.values(sa).iter().zip(tape.values(sb)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_closed_form_row() {
        // softmax([0, ln 2]) = [1/3, 2/3]
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(t(&[1, 2], vec![0.0, 2.0f64.ln()]));
        let s = tape.softmax_rows(a).unwrap();
        assert!((tape.values(s)[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((tape.values(s)[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn concat_widths_add() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(Tensor::zeros(&[1, 256]));
        let b = tape.constant(Tensor::zeros(&[1, 256]));
        let c = tape.concat_last(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 512]);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(t(&[2, 2], vec![1., 2., 3., 4.]));
        let e = tape.constant(Tensor::zeros(&[2, 0]));
        let c = tape.concat_last(a, e).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.values(c), tape.values(a));
    }

    #[test]
    fn concat_non_last_mismatch_is_error() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(tape.concat_last(a, b).is_err());
    }

    #[test]
    fn concat_gradient_splits_at_seam() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.leaf(Tensor::param(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::param(&[1, 3], vec![3.0, 4.0, 5.0]).unwrap());
        let c = tape.concat_last(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_sum() {
        // loss = sum(x ⊙ x) ⇒ dx = 2x
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.hadamard(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::param(&[2], vec![1.0, 2.0]).unwrap());
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn backward_matmul_matches_central_differences() {
        let a = Tensor::param(&[2, 3], vec![0.3, -0.7, 1.1, 0.2, 0.9, -0.4]).unwrap();
        let b = Tensor::param(&[3, 2], vec![1.4, -0.2, 0.5, 0.8, -1.1, 0.6]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let c = tape.matmul(ids[0], ids[1])?;
                tape.sum_all(c)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn fanout_sums_gradient_paths() {
        // y = x + x: the shared leaf receives both paths
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::param(&[2], vec![1.0, -3.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn unreached_params_get_zero_grads() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::param(&[2], vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::param(&[2], vec![5.0, 6.0]).unwrap());
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_check_affine_is_tight() {
        let w = Tensor::param(&[2, 3], vec![0.4, -0.1, 0.7, 0.3, 0.2, -0.6]).unwrap();
        let b = Tensor::param(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let x = tape.constant(t(&[1, 2], vec![0.8, -1.3]));
                let wx = tape.matmul(x, ids[0])?;
                let y = tape.add(wx, ids[1])?;
                tape.sum_all(y)
            },
            &[w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        assert!(grad_check(|tape, ids| tape.sum_all(ids[0]), &[p.clone()], 0.0).is_err());
        assert!(grad_check(|tape, ids| tape.sum_all(ids[0]), &[p], 1e-2).is_err());
    }

    #[test]
    fn non_finite_forward_aborts_naming_op() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(t(&[1, 1], vec![1e308]));
        let b = tape.constant(t(&[1, 1], vec![1e308]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            CoreError::NonFinite { op, phase } => {
                assert_eq!(op, "matmul");
                assert_eq!(phase, "forward");
            }
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(t(&[2, 3], vec![5.0, 1.0, 3.0, -2.0, 0.5, 0.0]));
        let s = tape.masked_softmax_rows(a, &[true, false, true]).unwrap();
        let v = tape.values(s);
        for r in 0..2 {
            assert_eq!(v[r * 3 + 1], 0.0);
            let live = v[r * 3] + v[r * 3 + 2];
            assert!((live - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_rejects_all_masked() {
        let mut tape = Tape::new(Mode::Eval);
        let a = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(tape.masked_softmax_rows(a, &[false, false]).is_err());
    }

    #[test]
    fn dropout_identity_in_eval_and_scales_in_train() {
        let mut eval_tape = Tape::new(Mode::Eval);
        let a = eval_tape.constant(t(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let d = eval_tape.dropout(a, 0.5).unwrap();
        assert_eq!(d, a);

        let mut train_tape = Tape::with_seed(Mode::Train, 7);
        let b = train_tape.constant(t(&[1000], (0..1000).map(|_| 1.0).collect()));
        let d = train_tape.dropout(b, 0.5).unwrap();
        let kept: Vec<f64> = train_tape.values(d).iter().copied().filter(|&v| v != 0.0).collect();
        assert!(kept.iter().all(|&v| v == 2.0));
        // roughly half survive
        assert!(kept.len() > 400 && kept.len() < 600, "{}", kept.len());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new(Mode::Eval);
        let logits = tape.constant(Tensor::zeros(&[2, 10]));
        let loss = tape.cross_entropy(logits, &[3, 7]).unwrap();
        assert!((tape.values(loss)[0] - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new(Mode::Eval);
        let logits = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.cross_entropy(logits, &[3]).is_err());
    }

    #[test]
    fn embed_rows_gathers_and_scatters() {
        let mut tape = Tape::new(Mode::Eval);
        let table = tape.leaf(Tensor::param(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let e = tape.embed_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.values(e), &[5., 6., 1., 2., 5., 6.]);
        let loss = tape.sum_all(e).unwrap();
        tape.backward(loss).unwrap();
        // row 2 used twice, row 1 never
        assert_eq!(tape.grad(table).unwrap(), &[1., 1., 0., 0., 2., 2.]);
        assert!(tape.embed_rows(table, &[3]).is_err());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.leaf(Tensor::param(&[2], vec![1.0, 2.0]).unwrap());
        let d = tape.detach(x);
        let y = tape.hadamard(d, d).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }
}
