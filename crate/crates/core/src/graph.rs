//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Only the operations the encoder-decoder needs are provided. Every op is
//! recorded in insertion order, so a node's inputs always precede it and the
//! backward sweep is a single reverse pass over the tape.
//!
//! Leaves created with `requires_grad = false` are constants: no gradient is
//! computed for them, and no upstream work is done for subgraphs that only
//! depend on constants.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batched multi-head attention call. Queries are laid out as
/// `batch * q_len` rows and keys/values as `batch * k_len` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
}

enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    AddConst {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        keep: Tensor,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    MaskedFeedForward(Box<FeedForwardTape>),
    Gate {
        e: NodeId,
        inv_tau: f64,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
    SymmetricKl {
        a: NodeId,
        b: NodeId,
        weights: Vec<f64>,
        log_pa: Tensor,
        log_pb: Tensor,
    },
}

struct FeedForwardTape {
    x: NodeId,
    keys: NodeId,
    key_bias: NodeId,
    mask: NodeId,
    values: NodeId,
    value_bias: NodeId,
    pre: Tensor,
    act: Tensor,
    gated: Tensor,
    drop: Option<Tensor>,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Parameter handles of one masked feed-forward layer inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct FeedForwardNodes {
    pub keys: NodeId,
    pub key_bias: NodeId,
    pub values: NodeId,
    pub value_bias: NodeId,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn softmax_rows(logits: &Tensor) -> (Tensor, Tensor) {
    let mut probs = logits.clone();
    let mut logp = logits.clone();
    for (mut prow, mut lrow) in probs.rows_mut().into_iter().zip(logp.rows_mut()) {
        let max = prow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for p in prow.iter_mut() {
            *p = (*p - max).exp();
            z += *p;
        }
        let lz = z.ln();
        for (p, l) in prow.iter_mut().zip(lrow.iter_mut()) {
            *p /= z;
            *l = *l - max - lz;
        }
    }
    (probs, logp)
}

/// Row-wise softmax, also returning log-probabilities.
pub fn log_softmax(logits: &Tensor) -> (Tensor, Tensor) {
    softmax_rows(logits)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, rg, Op::MatMul { a, b, trans_b: false })
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(value, rg, Op::MatMul { a, b, trans_b: true })
    }

    /// Adds a `1 × n` row vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let value = self.value(x) + self.value(bias);
        let rg = self.rg(&[x, bias]);
        self.push(value, rg, Op::AddRow { x, bias })
    }

    /// `x · w + b` with `w` of shape `in × out` and `b` of shape `1 × out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, rg, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x) * factor;
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Scale { x, factor })
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, x: NodeId, c: &Tensor) -> NodeId {
        let value = self.value(x) + c;
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::AddConst { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Relu { x })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Sum { x })
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut value = Array2::zeros((ids.len(), t.ncols()));
        for (mut row, &id) in value.rows_mut().into_iter().zip(ids) {
            row.assign(&t.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(
            value,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Elementwise multiply by a constant keep-mask already scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: NodeId, keep: Tensor) -> NodeId {
        let value = self.value(x) * &keep;
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Dropout { x, keep })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Scaled dot-product multi-head attention. `key_pad[b * k_len + j]`
    /// excludes key `j` of batch item `b`; `shape.causal` excludes keys after
    /// the query position.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        shape: AttentionShape,
        key_pad: Option<&[bool]>,
    ) -> NodeId {
        let (value, probs) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            shape,
            key_pad,
        );
        let rg = self.rg(&[q, k, v]);
        self.push(
            value,
            rg,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
        )
    }

    /// Feed-forward layer as a sum of gated key-value memory cells:
    /// `y = Σ_i m_i · values[:, i] · relu(keys[i] · x + key_bias_i) + value_bias`.
    ///
    /// `mask` is a `1 × N` node; `drop` is an optional `rows × N` keep-mask
    /// applied to the hidden activations.
    pub fn masked_feed_forward(
        &mut self,
        x: NodeId,
        ff: FeedForwardNodes,
        mask: NodeId,
        drop: Option<Tensor>,
    ) -> NodeId {
        let xv = self.value(x);
        let keys = self.value(ff.keys);
        let values = self.value(ff.values);
        let m = self.value(mask);
        let pre = xv.dot(&keys.t()) + self.value(ff.key_bias);
        let mut act = pre.mapv(|v| v.max(0.0));
        if let Some(d) = &drop {
            act *= d;
        }
        let gated = &act * m;
        let value = gated.dot(&values.t()) + self.value(ff.value_bias);
        let rg = self.rg(&[x, ff.keys, ff.key_bias, mask, ff.values, ff.value_bias]);
        self.push(
            value,
            rg,
            Op::MaskedFeedForward(Box::new(FeedForwardTape {
                x,
                keys: ff.keys,
                key_bias: ff.key_bias,
                mask,
                values: ff.values,
                value_bias: ff.value_bias,
                pre,
                act,
                gated,
                drop,
            })),
        )
    }

    /// `sigmoid(e / tau)` elementwise.
    pub fn gate(&mut self, e: NodeId, tau: f64) -> NodeId {
        let inv_tau = 1.0 / tau;
        let value = self.value(e).mapv(|v| sigmoid(v * inv_tau));
        let rg = self.rg(&[e]);
        self.push(value, rg, Op::Gate { e, inv_tau })
    }

    /// Weighted mean token cross-entropy. Rows with weight 0 are ignored.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> NodeId {
        let (probs, logp) = softmax_rows(self.value(logits));
        let total: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w != 0.0 {
                loss -= w * logp[[r, t]];
            }
        }
        let value = Array2::from_elem((1, 1), if total > 0.0 { loss / total } else { 0.0 });
        let rg = self.rg(&[logits]);
        self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Weighted mean over rows of `½[KL(P_a‖P_b) + KL(P_b‖P_a)]` where
    /// `P_a`, `P_b` are the row softmaxes of the two logit tensors.
    pub fn symmetric_kl(&mut self, a: NodeId, b: NodeId, weights: &[f64]) -> NodeId {
        let (pa, log_pa) = softmax_rows(self.value(a));
        let (pb, log_pb) = softmax_rows(self.value(b));
        let total: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut js = 0.0;
            for c in 0..pa.ncols() {
                js += (pa[[r, c]] - pb[[r, c]]) * (log_pa[[r, c]] - log_pb[[r, c]]);
            }
            loss += w * 0.5 * js;
        }
        let value = Array2::from_elem((1, 1), if total > 0.0 { loss / total } else { 0.0 });
        let rg = self.rg(&[a, b]);
        self.push(
            value,
            rg,
            Op::SymmetricKl {
                a,
                b,
                weights: weights.to_vec(),
                log_pa,
                log_pb,
            },
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage("backward on a node that was never recorded".into()))?;
        if node.value.dim() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.dim()
            )));
        }
        if !node.value[[0, 0]].is_finite() {
            return Err(Error::Usage("backward on a non-finite loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        // interior gradients were consumed; only leaves remain
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if rg(*a) {
                    let ga = if *trans_b { g.dot(bv) } else { g.dot(&bv.t()) };
                    self.accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let gb = if *trans_b {
                        g.t().dot(av)
                    } else {
                        av.t().dot(g)
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow { x, bias } => {
                if rg(*bias) {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *bias, gb);
                }
                if rg(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if rg(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale { x, factor } => self.accumulate(grads, *x, g * *factor),
            Op::AddConst { x } => self.accumulate(grads, *x, g.clone()),
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                gx.zip_mut_with(xv, |gv, &v| {
                    if v <= 0.0 {
                        *gv = 0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Sum { x } => {
                let s = g[[0, 0]];
                let gx = Array2::from_elem(self.value(*x).dim(), s);
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { table, ids } => {
                let mut gt = Array2::zeros(self.value(*table).dim());
                for (row, &id) in g.rows().into_iter().zip(ids) {
                    let mut dst = gt.row_mut(id);
                    dst += &row;
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Dropout { x, keep } => self.accumulate(grads, *x, g * keep),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if rg(*bias) {
                    self.accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*gain) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gain, gg);
                }
                if rg(*x) {
                    let gain_v = self.value(*gain);
                    let d = g.ncols() as f64;
                    let mut gx = g * gain_v;
                    for ((mut row, xh), &is) in
                        gx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let mean_g = row.sum() / d;
                        let mean_gx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
                        for (gv, &xv) in row.iter_mut().zip(xh) {
                            *gv = is * (*gv - mean_g - xv * mean_gx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *shape,
                    probs,
                    g,
                );
                if rg(*q) {
                    self.accumulate(grads, *q, gq);
                }
                if rg(*k) {
                    self.accumulate(grads, *k, gk);
                }
                if rg(*v) {
                    self.accumulate(grads, *v, gv);
                }
            }
            Op::MaskedFeedForward(tape) => self.feed_forward_backward(tape, g, grads),
            Op::Gate { e, inv_tau } => {
                let m = &node.value;
                let mut ge = g.clone();
                ge.zip_mut_with(m, |gv, &mv| *gv *= mv * (1.0 - mv) * inv_tau);
                self.accumulate(grads, *e, ge);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let total: f64 = weights.iter().sum();
                let up = g[[0, 0]];
                let mut gl = probs.clone();
                for (r, mut row) in gl.rows_mut().into_iter().enumerate() {
                    let w = weights[r];
                    if w == 0.0 || total == 0.0 {
                        row.fill(0.0);
                        continue;
                    }
                    row[targets[r]] -= 1.0;
                    row *= up * w / total;
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::SymmetricKl {
                a,
                b,
                weights,
                log_pa,
                log_pb,
            } => {
                let total: f64 = weights.iter().sum();
                let up = g[[0, 0]];
                let (rows, cols) = log_pa.dim();
                let mut ga = Array2::zeros((rows, cols));
                let mut gb = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let w = weights[r];
                    if w == 0.0 || total == 0.0 {
                        continue;
                    }
                    let coef = 0.5 * up * w / total;
                    let mut mean_a = 0.0;
                    let mut mean_b = 0.0;
                    for c in 0..cols {
                        let d = log_pa[[r, c]] - log_pb[[r, c]];
                        mean_a += log_pa[[r, c]].exp() * d;
                        mean_b += log_pb[[r, c]].exp() * d;
                    }
                    for c in 0..cols {
                        let pa = log_pa[[r, c]].exp();
                        let pb = log_pb[[r, c]].exp();
                        let d = log_pa[[r, c]] - log_pb[[r, c]];
                        ga[[r, c]] = coef * (pa * (d - mean_a) + pa - pb);
                        gb[[r, c]] = coef * (pb * (mean_b - d) + pb - pa);
                    }
                }
                if rg(*a) {
                    self.accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    self.accumulate(grads, *b, gb);
                }
            }
        }
    }

    fn feed_forward_backward(&self, t: &FeedForwardTape, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        if rg(t.value_bias) {
            self.accumulate(grads, t.value_bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        if rg(t.values) {
            self.accumulate(grads, t.values, g.t().dot(&t.gated));
        }
        let needs_hidden = rg(t.mask) || rg(t.x) || rg(t.keys) || rg(t.key_bias);
        if !needs_hidden {
            return;
        }
        let g_gated = g.dot(self.value(t.values));
        if rg(t.mask) {
            let gm = (&g_gated * &t.act).sum_axis(Axis(0)).insert_axis(Axis(0));
            self.accumulate(grads, t.mask, gm);
        }
        if !(rg(t.x) || rg(t.keys) || rg(t.key_bias)) {
            return;
        }
        let mut g_pre = g_gated * self.value(t.mask);
        if let Some(d) = &t.drop {
            g_pre *= d;
        }
        g_pre.zip_mut_with(&t.pre, |gv, &p| {
            if p <= 0.0 {
                *gv = 0.0
            }
        });
        if rg(t.key_bias) {
            self.accumulate(grads, t.key_bias, g_pre.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        if rg(t.keys) {
            self.accumulate(grads, t.keys, g_pre.t().dot(self.value(t.x)));
        }
        if rg(t.x) {
            self.accumulate(grads, t.x, g_pre.dot(self.value(t.keys)));
        }
    }
}

pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    shape: AttentionShape,
    key_pad: Option<&[bool]>,
) -> (Tensor, Vec<f64>) {
    let AttentionShape {
        batch,
        q_len,
        k_len,
        heads,
        causal,
    } = shape;
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qs = q.as_slice().expect("standard layout");
    let ks = k.as_slice().expect("standard layout");
    let vs = v.as_slice().expect("standard layout");
    let mut out = Array2::zeros((batch * q_len, d));
    let os = out.as_slice_mut().expect("standard layout");
    let mut probs = vec![0.0; batch * heads * q_len * k_len];
    let mut scores = vec![0.0; k_len];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..q_len {
                let qrow = &qs[(b * q_len + i) * d + off..][..dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let masked = (causal && j > i)
                        || key_pad.map(|p| p[b * k_len + j]).unwrap_or(false);
                    if masked {
                        *s = f64::NEG_INFINITY;
                        continue;
                    }
                    let krow = &ks[(b * k_len + j) * d + off..][..dh];
                    let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                    *s = dot * scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let mut z = 0.0;
                for (pj, &s) in p.iter_mut().zip(&scores) {
                    *pj = if s == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (s - max).exp()
                    };
                    z += *pj;
                }
                let orow = &mut os[(b * q_len + i) * d + off..][..dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj /= z;
                    if *pj == 0.0 {
                        continue;
                    }
                    let vrow = &vs[(b * k_len + j) * d + off..][..dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += *pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    shape: AttentionShape,
    probs: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let AttentionShape {
        batch,
        q_len,
        k_len,
        heads,
        ..
    } = shape;
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qs = q.as_slice().expect("standard layout");
    let ks = k.as_slice().expect("standard layout");
    let vs = v.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let mut gq = Array2::zeros(q.dim());
    let mut gk = Array2::zeros(k.dim());
    let mut gv = Array2::zeros(v.dim());
    {
        let gqs = gq.as_slice_mut().unwrap();
        let gks = gk.as_slice_mut().unwrap();
        let gvs = gv.as_slice_mut().unwrap();
        let mut dp = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let grow = &gs[(b * q_len + i) * d + off..][..dh];
                    let mut dot_pdp = 0.0;
                    for j in 0..k_len {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = &vs[(b * k_len + j) * d + off..][..dh];
                        dp[j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        dot_pdp += p[j] * dp[j];
                        let gvrow = &mut gvs[(b * k_len + j) * d + off..][..dh];
                        for (gvv, &gg) in gvrow.iter_mut().zip(grow) {
                            *gvv += p[j] * gg;
                        }
                    }
                    let qrow = &qs[(b * q_len + i) * d + off..][..dh];
                    for j in 0..k_len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot_pdp) * scale;
                        let krow = &ks[(b * k_len + j) * d + off..][..dh];
                        let gqrow = &mut gqs[(b * q_len + i) * d + off..][..dh];
                        for (gqv, &kv) in gqrow.iter_mut().zip(krow) {
                            *gqv += ds * kv;
                        }
                        let gkrow = &mut gks[(b * k_len + j) * d + off..][..dh];
                        for (gkv, &qv) in gkrow.iter_mut().zip(qrow) {
                            *gkv += ds * qv;
                        }
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite difference of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let eps = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let rel = (x - y).abs() / (x.abs().max(y.abs()) + 1e-8);
            assert!(rel <= tol || (x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(array![[3.0]], true);
        let y = g.mul(w, w);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_unknown_nodes() {
        let mut g = Graph::new();
        let w = g.leaf(array![[1.0, 2.0]], true);
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
        let empty = Graph::new();
        assert!(matches!(empty.backward(NodeId(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(array![[2.0]]);
        let b = g.leaf(array![[5.0]], true);
        let y = g.mul(a, b);
        let grads = g.backward(y).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 5);
        let gain = random(&mut rng, 1, 5);
        let bias = random(&mut rng, 1, 5);
        let w = random(&mut rng, 3, 5);
        let run = |xv: &Tensor, gv: &Tensor| {
            let mut g = Graph::new();
            let xn = g.leaf(xv.clone(), true);
            let gn = g.leaf(gv.clone(), true);
            let bn = g.leaf(bias.clone(), true);
            let wn = g.constant(w.clone());
            let y = g.layer_norm(xn, gn, bn);
            let z = g.mul(y, wn);
            let s = g.sum(z);
            (g, s, xn, gn)
        };
        let (g, s, xn, gn) = run(&x, &gain);
        let grads = g.backward(s).unwrap();
        let fx = numeric_grad(&x, &|xv| {
            let (g, s, ..) = run(xv, &gain);
            g.scalar(s)
        });
        let fg = numeric_grad(&gain, &|gv| {
            let (g, s, ..) = run(&x, gv);
            g.scalar(s)
        });
        assert_close(grads.get(xn).unwrap(), &fx, 1e-6);
        assert_close(grads.get(gn).unwrap(), &fg, 1e-6);
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = AttentionShape {
            batch: 2,
            q_len: 3,
            k_len: 4,
            heads: 2,
            causal: false,
        };
        let q = random(&mut rng, 6, 4);
        let k = random(&mut rng, 8, 4);
        let v = random(&mut rng, 8, 4);
        let w = random(&mut rng, 6, 4);
        let pad = vec![false, false, false, true, false, false, false, false];
        let run = |qv: &Tensor, kv: &Tensor, vv: &Tensor| {
            let mut g = Graph::new();
            let qn = g.leaf(qv.clone(), true);
            let kn = g.leaf(kv.clone(), true);
            let vn = g.leaf(vv.clone(), true);
            let wn = g.constant(w.clone());
            let o = g.attention(qn, kn, vn, shape, Some(&pad));
            let z = g.mul(o, wn);
            let s = g.sum(z);
            (g, s, qn, kn, vn)
        };
        let (g, s, qn, kn, vn) = run(&q, &k, &v);
        let grads = g.backward(s).unwrap();
        let fq = numeric_grad(&q, &|x| {
            let (g, s, ..) = run(x, &k, &v);
            g.scalar(s)
        });
        let fk = numeric_grad(&k, &|x| {
            let (g, s, ..) = run(&q, x, &v);
            g.scalar(s)
        });
        let fv = numeric_grad(&v, &|x| {
            let (g, s, ..) = run(&q, &k, x);
            g.scalar(s)
        });
        assert_close(grads.get(qn).unwrap(), &fq, 1e-6);
        assert_close(grads.get(kn).unwrap(), &fk, 1e-6);
        assert_close(grads.get(vn).unwrap(), &fv, 1e-6);
        // padded key receives nothing
        for c in 0..4 {
            assert_eq!(grads.get(kn).unwrap()[[3, c]], 0.0);
            assert_eq!(grads.get(vn).unwrap()[[3, c]], 0.0);
        }
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = AttentionShape {
            batch: 1,
            q_len: 3,
            k_len: 3,
            heads: 1,
            causal: true,
        };
        let q = random(&mut rng, 3, 2);
        let k = random(&mut rng, 3, 2);
        let mut v = random(&mut rng, 3, 2);
        let (o1, _) = attention_forward(&q, &k, &v, shape, None);
        v[[2, 0]] += 10.0;
        let (o2, _) = attention_forward(&q, &k, &v, shape, None);
        assert_eq!(o1.row(0), o2.row(0));
        assert_eq!(o1.row(1), o2.row(1));
        assert_ne!(o1.row(2), o2.row(2));
    }

    #[test]
    fn symmetric_kl_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 3, 5);
        let b = random(&mut rng, 3, 5);
        let weights = [1.0, 0.0, 1.0];
        let run = |av: &Tensor, bv: &Tensor| {
            let mut g = Graph::new();
            let an = g.leaf(av.clone(), true);
            let bn = g.leaf(bv.clone(), true);
            let js = g.symmetric_kl(an, bn, &weights);
            let ce = g.cross_entropy(an, &[1, 2, 4], &weights);
            let both = g.add(js, ce);
            (g, both, an, bn)
        };
        let (g, s, an, bn) = run(&a, &b);
        let grads = g.backward(s).unwrap();
        let fa = numeric_grad(&a, &|x| {
            let (g, s, ..) = run(x, &b);
            g.scalar(s)
        });
        let fb = numeric_grad(&b, &|x| {
            let (g, s, ..) = run(&a, x);
            g.scalar(s)
        });
        assert_close(grads.get(an).unwrap(), &fa, 1e-6);
        assert_close(grads.get(bn).unwrap(), &fb, 1e-6);
    }

    #[test]
    fn masked_feed_forward_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 4, 3);
        let keys = random(&mut rng, 6, 3);
        let kb = random(&mut rng, 1, 6);
        let values = random(&mut rng, 3, 6);
        let vb = random(&mut rng, 1, 3);
        let mask = Array2::from_shape_fn((1, 6), |(_, j)| 0.2 + 0.1 * j as f64);
        let drop = Array2::from_shape_fn((4, 6), |(i, j)| if (i + j) % 3 == 0 { 0.0 } else { 1.25 });
        let w = random(&mut rng, 4, 3);
        let run = |xv: &Tensor, kv: &Tensor, vv: &Tensor, mv: &Tensor| {
            let mut g = Graph::new();
            let xn = g.leaf(xv.clone(), true);
            let ff = FeedForwardNodes {
                keys: g.leaf(kv.clone(), true),
                key_bias: g.leaf(kb.clone(), true),
                values: g.leaf(vv.clone(), true),
                value_bias: g.leaf(vb.clone(), true),
            };
            let mn = g.leaf(mv.clone(), true);
            let y = g.masked_feed_forward(xn, ff, mn, Some(drop.clone()));
            let wn = g.constant(w.clone());
            let z = g.mul(y, wn);
            let s = g.sum(z);
            (g, s, xn, ff, mn)
        };
        let (g, s, xn, ff, mn) = run(&x, &keys, &values, &mask);
        let grads = g.backward(s).unwrap();
        let f = |xv: &Tensor, kv: &Tensor, vv: &Tensor, mv: &Tensor| {
            let (g, s, ..) = run(xv, kv, vv, mv);
            g.scalar(s)
        };
        assert_close(
            grads.get(xn).unwrap(),
            &numeric_grad(&x, &|v| f(v, &keys, &values, &mask)),
            1e-6,
        );
        assert_close(
            grads.get(ff.keys).unwrap(),
            &numeric_grad(&keys, &|v| f(&x, v, &values, &mask)),
            1e-6,
        );
        assert_close(
            grads.get(ff.values).unwrap(),
            &numeric_grad(&values, &|v| f(&x, &keys, v, &mask)),
            1e-6,
        );
        assert_close(
            grads.get(mn).unwrap(),
            &numeric_grad(&mask, &|v| f(&x, &keys, &values, v)),
            1e-6,
        );
    }

    #[test]
    fn gate_gradient() {
        let mut g = Graph::new();
        let e = g.leaf(array![[0.3, -1.2]], true);
        let m = g.gate(e, 0.5);
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        for (j, &ev) in [0.3f64, -1.2].iter().enumerate() {
            let m = sigmoid(ev / 0.5);
            let expected = m * (1.0 - m) / 0.5;
            assert!((grads.get(e).unwrap()[[0, j]] - expected).abs() < 1e-15);
        }
    }
}
