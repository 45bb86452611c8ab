//! Reverse-mode autodiff over a record-and-replay tape.
//!
//! Forward calls validate shapes, compute outputs, and append an op record;
//! [`Tape::backward`] replays the records in exact reverse order, pulling the
//! output gradient of each op (`take`, since every node has one producer and
//! all consumers run first in reverse order) and accumulating into the input
//! gradients. Gradient buffers are allocated lazily as zeros.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::linalg::{matmul_nn, matmul_nt, matmul_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

/// Which query/key pairs may attend to each other, as a dense n×n boolean.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionLayout {
    pub fn new_with(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[i * n + j] = f(i, j);
            }
        }
        AttentionLayout { n, allowed }
    }

    pub fn full(n: usize) -> Self {
        AttentionLayout {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.n..(i + 1) * self.n]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&b| b).count()
    }
}

/// Exact GELU: `x · Φ(x)` with Φ the standard normal CDF via `erf`.
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let inv_sqrt2 = S::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (S::one() + (x * inv_sqrt2).erf())
}

/// Derivative of exact GELU: `Φ(x) + x·φ(x)`.
fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let xf = x.to_f64_lossy();
    let phi_cdf = 0.5 * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2));
    let phi_pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    S::from_f64_lossy(phi_cdf + xf * phi_pdf)
}

struct Node<S> {
    data: Vec<S>,
    shape: Vec<usize>,
    grad: Option<Vec<S>>,
}

enum Op<S> {
    MatmulNN { a: NodeId, b: NodeId, out: NodeId },
    MatmulNT { a: NodeId, b: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Scale { x: NodeId, c: S, out: NodeId },
    Gelu { x: NodeId, out: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, out: NodeId, xhat: Vec<S>, inv_std: Vec<S> },
    Rope { x: NodeId, out: NodeId, positions: Arc<Vec<usize>>, freqs: Arc<Vec<f64>>, heads: usize },
    Sdpa { q: NodeId, k: NodeId, v: NodeId, out: NodeId, heads: usize, layout: Arc<AttentionLayout>, attn: Vec<S> },
    Embed { table: NodeId, out: NodeId, ids: Vec<u32> },
    GatherRows { x: NodeId, out: NodeId, rows: Vec<usize> },
    SoftmaxXent { logits: NodeId, out: NodeId, targets: Vec<u32>, probs: Vec<S> },
    MeanRows { x: NodeId, out: NodeId, rows: Vec<usize> },
    L2Normalize { x: NodeId, out: NodeId, inv_norm: S },
    Dot { a: NodeId, b: NodeId, out: NodeId },
    StackScalars { xs: Vec<NodeId>, out: NodeId },
    Cosent { cos: NodeId, out: NodeId, targets: Vec<f64>, lambda: f64 },
    Dropout { x: NodeId, out: NodeId, keep: Vec<S> },
    SumAll { x: NodeId, out: NodeId },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::MatmulNN { .. } => "matmul",
            Op::MatmulNT { .. } => "matmul_transposed",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm_nobias",
            Op::Rope { .. } => "rope_apply",
            Op::Sdpa { .. } => "sdpa",
            Op::Embed { .. } => "embed",
            Op::GatherRows { .. } => "gather_rows",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::MeanRows { .. } => "mean_rows",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Dot { .. } => "dot",
            Op::StackScalars { .. } => "stack_scalars",
            Op::Cosent { .. } => "cosent_loss",
            Op::Dropout { .. } => "dropout",
            Op::SumAll { .. } => "sum_all",
        }
    }
}

/// Wengert-style tape: an arena of value nodes plus the ordered op records
/// that produced them.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new() }
    }

    // ── node management ──

    pub fn leaf(&mut self, shape: &[usize], data: Vec<S>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::config(format!(
                "leaf shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(self.push_node(shape.to_vec(), data))
    }

    /// Registers a tensor's current values as a leaf (data is copied; the
    /// parameter itself stays owned by the caller).
    pub fn tensor(&mut self, t: &Tensor<S>) -> NodeId {
        self.push_node(t.shape().to_vec(), t.data().to_vec())
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<S>) -> NodeId {
        self.nodes.push(Node { data, shape, grad: None });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id].data
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Gradient of the last `backward` loss w.r.t. node `id`, if it received one.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<S> {
        Tensor::from_vec(&self.nodes[id].shape, self.nodes[id].data.clone())
            .expect("node shape/data consistent")
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        match self.nodes[id].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::config(format!("{what}: expected rank-2 tensor, got {s:?}"))),
        }
    }

    fn finish_op(&mut self, op: Op<S>, out: NodeId) -> Result<NodeId> {
        if !self.nodes[out].data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite output produced by op `{}`",
                op.name()
            )));
        }
        self.ops.push(op);
        Ok(out)
    }

    // ── forward ops ──

    /// `a[m,k] · b[k,n]`; also the biasless linear layer `x · W`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::config(format!(
                "matmul inner dims differ: lhs {:?} vs rhs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nn(&self.nodes[a].data, &self.nodes[b].data, m, ka, n, &mut out, false);
        let out = self.push_node(vec![m, n], out);
        self.finish_op(Op::MatmulNN { a, b, out }, out)
    }

    /// Alias for [`Tape::matmul`] under the name the model uses.
    pub fn linear_nobias(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.matmul(x, w)
    }

    /// `a[m,k] · b[n,k]ᵀ`; used for the weight-tied vocabulary projection.
    pub fn matmul_transposed(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul_transposed lhs")?;
        let (n, kb) = self.dims2(b, "matmul_transposed rhs")?;
        if ka != kb {
            return Err(Error::config(format!(
                "matmul_transposed inner dims differ: lhs {:?} vs rhs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt(&self.nodes[a].data, &self.nodes[b].data, m, ka, n, &mut out, false);
        let out = self.push_node(vec![m, n], out);
        self.finish_op(Op::MatmulNT { a, b, out }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data: Vec<S> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let out = self.push_node(self.nodes[a].shape.clone(), data);
        self.finish_op(Op::Add { a, b, out }, out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<S> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let out = self.push_node(self.nodes[a].shape.clone(), data);
        self.finish_op(Op::Mul { a, b, out }, out)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::config(format!(
                "{what}: shapes differ: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        Ok(())
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let data: Vec<S> = self.nodes[x].data.iter().map(|&v| v * c).collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.finish_op(Op::Scale { x, c, out }, out)
    }

    /// Elementwise exact GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<S> = self.nodes[x].data.iter().map(|&v| gelu_scalar(v)).collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.finish_op(Op::Gelu { x, out }, out)
    }

    /// Per-row normalization without bias: `(x − mean) / √(var + eps) ⊙ gamma`.
    /// Variance is the population variance of the row.
    pub fn layer_norm_nobias(&mut self, x: NodeId, gamma: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, d) = self.dims2(x, "layer_norm_nobias input")?;
        if self.nodes[gamma].shape != vec![d] {
            return Err(Error::config(format!(
                "layer_norm_nobias: gamma shape {:?} does not match row width {d}",
                self.nodes[gamma].shape
            )));
        }
        let eps = S::from_f64_lossy(eps);
        let inv_d = S::one() / S::from_f64_lossy(d as f64);
        let mut data = vec![S::zero(); rows * d];
        let mut xhat = vec![S::zero(); rows * d];
        let mut inv_std = vec![S::zero(); rows];
        {
            let xd = &self.nodes[x].data;
            let g = &self.nodes[gamma].data;
            for r in 0..rows {
                let xr = &xd[r * d..(r + 1) * d];
                let mean = xr.iter().copied().sum::<S>() * inv_d;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
                let inv = S::one() / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..d {
                    let xh = (xr[j] - mean) * inv;
                    xhat[r * d + j] = xh;
                    data[r * d + j] = xh * g[j];
                }
            }
        }
        let out = self.push_node(vec![rows, d], data);
        self.finish_op(Op::LayerNorm { x, gamma, out, xhat, inv_std }, out)
    }

    /// Rotary position encoding over `[n, heads·head_dim]` activations.
    /// Pair `i` of every head is rotated by `position · freqs[i]`; angles and
    /// trigonometry are evaluated in f64.
    pub fn rope_apply(
        &mut self,
        x: NodeId,
        positions: Arc<Vec<usize>>,
        freqs: Arc<Vec<f64>>,
        heads: usize,
    ) -> Result<NodeId> {
        let (n, width) = self.dims2(x, "rope_apply input")?;
        let head_dim = 2 * freqs.len();
        if heads == 0 || width != heads * head_dim {
            return Err(Error::config(format!(
                "rope_apply: width {width} does not match {heads} heads × head_dim {head_dim}"
            )));
        }
        if positions.len() != n {
            return Err(Error::config(format!(
                "rope_apply: {} positions for {n} rows",
                positions.len()
            )));
        }
        let mut data = self.nodes[x].data.clone();
        rope_rotate(&mut data, &positions, &freqs, heads, 1.0);
        let out = self.push_node(vec![n, width], data);
        self.finish_op(Op::Rope { x, out, positions, freqs, heads }, out)
    }

    /// Scaled dot-product attention with a boolean layout mask. Disallowed
    /// pairs get exactly zero weight; a fully-masked row yields a zero output
    /// row. Softmax is the max-subtraction form.
    pub fn sdpa(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Arc<AttentionLayout>,
        heads: usize,
    ) -> Result<NodeId> {
        let (n, width) = self.dims2(q, "sdpa q")?;
        for (id, nm) in [(k, "k"), (v, "v")] {
            if self.nodes[id].shape != vec![n, width] {
                return Err(Error::config(format!(
                    "sdpa: {nm} shape {:?} differs from q {:?}",
                    self.nodes[id].shape, self.nodes[q].shape
                )));
            }
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!(
                "sdpa: width {width} not divisible by {heads} heads"
            )));
        }
        if layout.n() != n {
            return Err(Error::config(format!(
                "sdpa: layout is {}×{} but batch has {n} tokens",
                layout.n(),
                layout.n()
            )));
        }
        let dh = width / heads;
        let scale = S::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut out = vec![S::zero(); n * width];
        let mut attn = vec![S::zero(); heads * n * n];
        {
            let qd = &self.nodes[q].data;
            let kd = &self.nodes[k].data;
            let vd = &self.nodes[v].data;
            let mut qh = vec![S::zero(); n * dh];
            let mut kh = vec![S::zero(); n * dh];
            let mut vh = vec![S::zero(); n * dh];
            let mut scores = vec![S::zero(); n * n];
            let mut oh = vec![S::zero(); n * dh];
            for h in 0..heads {
                gather_head(qd, &mut qh, n, width, h, dh);
                gather_head(kd, &mut kh, n, width, h, dh);
                gather_head(vd, &mut vh, n, width, h, dh);
                matmul_nt(&qh, &kh, n, dh, n, &mut scores, false);
                let ah = &mut attn[h * n * n..(h + 1) * n * n];
                for i in 0..n {
                    let srow = &scores[i * n..(i + 1) * n];
                    let arow = &mut ah[i * n..(i + 1) * n];
                    let lrow = layout.row(i);
                    let mut maxv = S::neg_infinity();
                    for j in 0..n {
                        if lrow[j] {
                            let s = srow[j] * scale;
                            if s > maxv {
                                maxv = s;
                            }
                        }
                    }
                    if maxv == S::neg_infinity() {
                        // Fully masked row: zero attention, zero output.
                        continue;
                    }
                    let mut sum = S::zero();
                    for j in 0..n {
                        if lrow[j] {
                            let e = (srow[j] * scale - maxv).exp();
                            arow[j] = e;
                            sum += e;
                        }
                    }
                    let inv = S::one() / sum;
                    for j in 0..n {
                        if lrow[j] {
                            arow[j] *= inv;
                        }
                    }
                }
                matmul_nn(ah, &vh, n, n, dh, &mut oh, false);
                scatter_head(&oh, &mut out, n, width, h, dh);
            }
        }
        let out = self.push_node(vec![n, width], out);
        self.finish_op(Op::Sdpa { q, k, v, out, heads, layout, attn }, out)
    }

    /// Embedding lookup: copies `table` rows; gradient scatter-adds back.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (vocab, d) = self.dims2(table, "embed table")?;
        let mut data = vec![S::zero(); ids.len() * d];
        for (p, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::data(format!(
                    "embed: token id {id} at position {p} exceeds vocab size {vocab}"
                )));
            }
            let row = &self.nodes[table].data[id as usize * d..(id as usize + 1) * d];
            data[p * d..(p + 1) * d].copy_from_slice(row);
        }
        let out = self.push_node(vec![ids.len(), d], data);
        self.finish_op(Op::Embed { table, out, ids: ids.to_vec() }, out)
    }

    /// Selects rows of a rank-2 tensor (e.g. hidden states at masked positions).
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, d) = self.dims2(x, "gather_rows input")?;
        let mut data = vec![S::zero(); rows.len() * d];
        for (p, &ri) in rows.iter().enumerate() {
            if ri >= r {
                return Err(Error::config(format!(
                    "gather_rows: row {ri} out of range for {r} rows"
                )));
            }
            data[p * d..(p + 1) * d]
                .copy_from_slice(&self.nodes[x].data[ri * d..(ri + 1) * d]);
        }
        let out = self.push_node(vec![rows.len(), d], data);
        self.finish_op(Op::GatherRows { x, out, rows: rows.to_vec() }, out)
    }

    /// Mean of −log softmax(logits)[target] over rows, max-subtraction form.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let (rows, vocab) = self.dims2(logits, "softmax_cross_entropy logits")?;
        if rows == 0 {
            return Err(Error::config("softmax_cross_entropy: no rows".to_string()));
        }
        if targets.len() != rows {
            return Err(Error::config(format!(
                "softmax_cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let mut probs = vec![S::zero(); rows * vocab];
        let mut loss = S::zero();
        {
            let ld = &self.nodes[logits].data;
            for r in 0..rows {
                let t = targets[r] as usize;
                if t >= vocab {
                    return Err(Error::data(format!(
                        "softmax_cross_entropy: target {t} at row {r} exceeds vocab {vocab}"
                    )));
                }
                let lrow = &ld[r * vocab..(r + 1) * vocab];
                let maxv = lrow.iter().copied().fold(S::neg_infinity(), S::max);
                let prow = &mut probs[r * vocab..(r + 1) * vocab];
                let mut sum = S::zero();
                for j in 0..vocab {
                    let e = (lrow[j] - maxv).exp();
                    prow[j] = e;
                    sum += e;
                }
                let inv = S::one() / sum;
                prow.iter_mut().for_each(|p| *p *= inv);
                loss += sum.ln() - (lrow[t] - maxv);
            }
        }
        loss /= S::from_f64_lossy(rows as f64);
        let out = self.push_node(vec![1], vec![loss]);
        self.finish_op(Op::SoftmaxXent { logits, out, targets: targets.to_vec(), probs }, out)
    }

    /// Mean of the selected rows, as a `[1, d]` vector.
    pub fn mean_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, d) = self.dims2(x, "mean_rows input")?;
        if rows.is_empty() {
            return Err(Error::config("mean_rows: empty row set".to_string()));
        }
        let mut data = vec![S::zero(); d];
        for &ri in rows {
            if ri >= r {
                return Err(Error::config(format!(
                    "mean_rows: row {ri} out of range for {r} rows"
                )));
            }
            for j in 0..d {
                data[j] += self.nodes[x].data[ri * d + j];
            }
        }
        let inv = S::one() / S::from_f64_lossy(rows.len() as f64);
        data.iter_mut().for_each(|v| *v *= inv);
        let out = self.push_node(vec![1, d], data);
        self.finish_op(Op::MeanRows { x, out, rows: rows.to_vec() }, out)
    }

    /// Scales a `[1, d]` vector to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, _d) = self.dims2(x, "l2_normalize input")?;
        if r != 1 {
            return Err(Error::config("l2_normalize expects a [1, d] vector".to_string()));
        }
        let norm = self.nodes[x].data.iter().map(|&v| v * v).sum::<S>().sqrt();
        if norm == S::zero() {
            return Err(Error::numeric("l2_normalize: zero-norm vector".to_string()));
        }
        let inv_norm = S::one() / norm;
        let data: Vec<S> = self.nodes[x].data.iter().map(|&v| v * inv_norm).collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.finish_op(Op::L2Normalize { x, out, inv_norm }, out)
    }

    /// Dot product of two `[1, d]` vectors, as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "dot")?;
        let v = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x * y)
            .sum::<S>();
        let out = self.push_node(vec![1], vec![v]);
        self.finish_op(Op::Dot { a, b, out }, out)
    }

    /// Concatenates scalar nodes into one `[k]` vector.
    pub fn stack_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            if self.nodes[x].data.len() != 1 {
                return Err(Error::config(format!(
                    "stack_scalars: node has shape {:?}, expected scalar",
                    self.nodes[x].shape
                )));
            }
            data.push(self.nodes[x].data[0]);
        }
        let out = self.push_node(vec![xs.len()], data);
        self.finish_op(Op::StackScalars { xs: xs.to_vec(), out }, out)
    }

    /// Pairwise ranking loss over cosines:
    /// `log(1 + Σ_{target_i > target_j} exp(λ·(cos_j − cos_i)))`.
    /// Accumulated in f64; no ordered pairs means exactly zero loss.
    pub fn cosent_loss(&mut self, cos: NodeId, targets: &[f64], lambda: f64) -> Result<NodeId> {
        let k = self.nodes[cos].data.len();
        if targets.len() != k {
            return Err(Error::config(format!(
                "cosent_loss: {} targets for {k} cosines",
                targets.len()
            )));
        }
        let c: Vec<f64> = self.nodes[cos].data.iter().map(|v| v.to_f64_lossy()).collect();
        let mut sum = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                if targets[i] > targets[j] {
                    sum += (lambda * (c[j] - c[i])).exp();
                }
            }
        }
        let loss = S::from_f64_lossy(sum.ln_1p());
        let out = self.push_node(vec![1], vec![loss]);
        self.finish_op(Op::Cosent { cos, out, targets: targets.to_vec(), lambda }, out)
    }

    /// Inverted dropout: keeps each element with probability `1 − p`, scaling
    /// survivors by `1/(1 − p)`. `p = 0` is the identity.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout: probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let inv_keep = S::from_f64_lossy(1.0 / (1.0 - p));
        let keep: Vec<S> = (0..self.nodes[x].data.len())
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { inv_keep })
            .collect();
        let data: Vec<S> = self.nodes[x]
            .data
            .iter()
            .zip(&keep)
            .map(|(&v, &kf)| v * kf)
            .collect();
        let out = self.push_node(self.nodes[x].shape.clone(), data);
        self.finish_op(Op::Dropout { x, out, keep }, out)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].data.iter().copied().sum::<S>();
        let out = self.push_node(vec![1], vec![v]);
        self.finish_op(Op::SumAll { x, out }, out)
    }

    /// GeGLU feed-forward gate: `GELU(x·W) ⊙ (x·V)`.
    pub fn geglu(&mut self, x: NodeId, w: NodeId, v: NodeId) -> Result<NodeId> {
        let gated = self.matmul(x, w)?;
        let gated = self.gelu(gated)?;
        let linear = self.matmul(x, v)?;
        self.mul(gated, linear)
    }

    // ── backward ──

    fn grad_take(&mut self, id: NodeId) -> Option<Vec<S>> {
        self.nodes[id].grad.take()
    }

    fn grad_buf_take(&mut self, id: NodeId) -> Vec<S> {
        match self.nodes[id].grad.take() {
            Some(g) => g,
            None => vec![S::zero(); self.nodes[id].data.len()],
        }
    }

    fn grad_put(&mut self, id: NodeId, g: Vec<S>) {
        debug_assert_eq!(g.len(), self.nodes[id].data.len());
        self.nodes[id].grad = Some(g);
    }

    /// Seeds the scalar loss gradient with 1 and replays all recorded ops in
    /// reverse, accumulating input gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::config(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        self.nodes[loss].grad = Some(vec![S::one()]);
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        self.ops = ops;
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<S>) {
        match op {
            Op::MatmulNN { a, b, out } => {
                let Some(go) = self.grad_take(*out) else { return };
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let mut ga = self.grad_buf_take(*a);
                matmul_nt(&go, &self.nodes[*b].data, m, n, k, &mut ga, true);
                self.grad_put(*a, ga);
                let mut gb = self.grad_buf_take(*b);
                matmul_tn(&self.nodes[*a].data, &go, m, k, n, &mut gb, true);
                self.grad_put(*b, gb);
            }
            Op::MatmulNT { a, b, out } => {
                let Some(go) = self.grad_take(*out) else { return };
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[0];
                let mut ga = self.grad_buf_take(*a);
                matmul_nn(&go, &self.nodes[*b].data, m, n, k, &mut ga, true);
                self.grad_put(*a, ga);
                let mut gb = self.grad_buf_take(*b);
                matmul_tn(&go, &self.nodes[*a].data, m, n, k, &mut gb, true);
                self.grad_put(*b, gb);
            }
            Op::Add { a, b, out } => {
                let Some(go) = self.grad_take(*out) else { return };
                for id in [a, b] {
                    let mut g = self.grad_buf_take(*id);
                    for (gi, &goi) in g.iter_mut().zip(&go) {
                        *gi += goi;
                    }
                    self.grad_put(*id, g);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(go) = self.grad_take(*out) else { return };
                let mut ga = self.grad_buf_take(*a);
                for ((gi, &goi), &bv) in ga.iter_mut().zip(&go).zip(&self.nodes[*b].data) {
                    *gi += goi * bv;
                }
                self.grad_put(*a, ga);
                let mut gb = self.grad_buf_take(*b);
                for ((gi, &goi), &av) in gb.iter_mut().zip(&go).zip(&self.nodes[*a].data) {
                    *gi += goi * av;
                }
                self.grad_put(*b, gb);
            }
            Op::Scale { x, c, out } => {
                let Some(go) = self.grad_take(*out) else { return };
                let mut gx = self.grad_buf_take(*x);
                for (gi, &goi) in gx.iter_mut().zip(&go) {
                    *gi += goi * *c;
                }
                self.grad_put(*x, gx);
            }
            Op::Gelu { x, out } => {
                let Some(go) = self.grad_take(*out) else { return };
                let mut gx = self.grad_buf_take(*x);
                for ((gi, &goi), &xv) in gx.iter_mut().zip(&go).zip(&self.nodes[*x].data) {
                    *gi += goi * gelu_grad_scalar(xv);
                }
                self.grad_put(*x, gx);
            }
            Op::LayerNorm { x, gamma, out, xhat, inv_std } => {
                let Some(go) = self.grad_take(*out) else { return };
                let d = self.nodes[*gamma].data.len();
                let rows = inv_std.len();
                let inv_d = S::one() / S::from_f64_lossy(d as f64);
                let mut ggamma = self.grad_buf_take(*gamma);
                for r in 0..rows {
                    for j in 0..d {
                        ggamma[j] += go[r * d + j] * xhat[r * d + j];
                    }
                }
                self.grad_put(*gamma, ggamma);
                let mut gx = self.grad_buf_take(*x);
                let g = &self.nodes[*gamma].data;
                for r in 0..rows {
                    let gor = &go[r * d..(r + 1) * d];
                    let xhr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..d {
                        let h = gor[j] * g[j];
                        m1 += h;
                        m2 += h * xhr[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let h = gor[j] * g[j];
                        gx[r * d + j] += inv_std[r] * (h - m1 - xhr[j] * m2);
                    }
                }
                self.grad_put(*x, gx);
            }
            Op::Rope { x, out, positions, freqs, heads } => {
                let Some(go) = self.grad_take(*out) else { return };
                // The rotation is orthogonal: the adjoint rotates by −θ.
                let mut gx_delta = go;
                rope_rotate(&mut gx_delta, positions, freqs, *heads, -1.0);
                let mut gx = self.grad_buf_take(*x);
                for (gi, &dv) in gx.iter_mut().zip(&gx_delta) {
                    *gi += dv;
                }
                self.grad_put(*x, gx);
            }
            Op::Sdpa { q, k, v, out, heads, layout, attn } => {
                let Some(go) = self.grad_take(*out) else { return };
                let n = layout.n();
                let width = self.nodes[*q].shape[1];
                let dh = width / heads;
                let scale = S::from_f64_lossy(1.0 / (dh as f64).sqrt());
                let mut gq = self.grad_buf_take(*q);
                let mut gk = self.grad_buf_take(*k);
                let mut gv = self.grad_buf_take(*v);
                let qd = &self.nodes[*q].data;
                let kd = &self.nodes[*k].data;
                let vd = &self.nodes[*v].data;
                let mut qh = vec![S::zero(); n * dh];
                let mut kh = vec![S::zero(); n * dh];
                let mut vh = vec![S::zero(); n * dh];
                let mut goh = vec![S::zero(); n * dh];
                let mut gvh = vec![S::zero(); n * dh];
                let mut gqh = vec![S::zero(); n * dh];
                let mut gkh = vec![S::zero(); n * dh];
                let mut dattn = vec![S::zero(); n * n];
                for h in 0..*heads {
                    gather_head(qd, &mut qh, n, width, h, dh);
                    gather_head(kd, &mut kh, n, width, h, dh);
                    gather_head(vd, &mut vh, n, width, h, dh);
                    gather_head(&go, &mut goh, n, width, h, dh);
                    let ah = &attn[h * n * n..(h + 1) * n * n];
                    // dV = Aᵀ·dOut
                    matmul_tn(ah, &goh, n, n, dh, &mut gvh, false);
                    // dA = dOut·Vᵀ, then dScores = A ⊙ (dA − rowsum(dA ⊙ A))
                    matmul_nt(&goh, &vh, n, dh, n, &mut dattn, false);
                    for i in 0..n {
                        let arow = &ah[i * n..(i + 1) * n];
                        let drow = &mut dattn[i * n..(i + 1) * n];
                        let mut dot = S::zero();
                        for j in 0..n {
                            dot += drow[j] * arow[j];
                        }
                        for j in 0..n {
                            drow[j] = arow[j] * (drow[j] - dot) * scale;
                        }
                    }
                    // dQ = dS·K, dK = dSᵀ·Q (scale folded into dS above)
                    matmul_nn(&dattn, &kh, n, n, dh, &mut gqh, false);
                    matmul_tn(&dattn, &qh, n, n, dh, &mut gkh, false);
                    accumulate_head(&gqh, &mut gq, n, width, h, dh);
                    accumulate_head(&gkh, &mut gk, n, width, h, dh);
                    accumulate_head(&gvh, &mut gv, n, width, h, dh);
                }
                self.grad_put(*q, gq);
                self.grad_put(*k, gk);
                self.grad_put(*v, gv);
            }
            Op::Embed { table, out, ids } => {
                let Some(go) = self.grad_take(*out) else { return };
                let d = self.nodes[*table].shape[1];
                let mut gt = self.grad_buf_take(*table);
                for (p, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                    let src = &go[p * d..(p + 1) * d];
                    for (g, &s) in dst.iter_mut().zip(src) {
                        *g += s;
                    }
                }
                self.grad_put(*table, gt);
            }
            Op::GatherRows { x, out, rows } => {
                let Some(go) = self.grad_take(*out) else { return };
                let d = self.nodes[*x].shape[1];
                let mut gx = self.grad_buf_take(*x);
                for (p, &ri) in rows.iter().enumerate() {
                    let dst = &mut gx[ri * d..(ri + 1) * d];
                    let src = &go[p * d..(p + 1) * d];
                    for (g, &s) in dst.iter_mut().zip(src) {
                        *g += s;
                    }
                }
                self.grad_put(*x, gx);
            }
            Op::SoftmaxXent { logits, out, targets, probs } => {
                let Some(go) = self.grad_take(*out) else { return };
                let g = go[0];
                let rows = targets.len();
                let vocab = self.nodes[*logits].shape[1];
                let inv_rows = S::one() / S::from_f64_lossy(rows as f64);
                let mut gl = self.grad_buf_take(*logits);
                for r in 0..rows {
                    let t = targets[r] as usize;
                    for j in 0..vocab {
                        let onehot = if j == t { S::one() } else { S::zero() };
                        gl[r * vocab + j] += g * (probs[r * vocab + j] - onehot) * inv_rows;
                    }
                }
                self.grad_put(*logits, gl);
            }
            Op::MeanRows { x, out, rows } => {
                let Some(go) = self.grad_take(*out) else { return };
                let d = self.nodes[*x].shape[1];
                let inv = S::one() / S::from_f64_lossy(rows.len() as f64);
                let mut gx = self.grad_buf_take(*x);
                for &ri in rows {
                    for j in 0..d {
                        gx[ri * d + j] += go[j] * inv;
                    }
                }
                self.grad_put(*x, gx);
            }
            Op::L2Normalize { x, out, inv_norm } => {
                let Some(go) = self.grad_take(*out) else { return };
                let delta: Vec<S> = {
                    let y = &self.nodes[*out].data;
                    let mut proj = S::zero();
                    for (goi, yi) in go.iter().zip(y) {
                        proj += *goi * *yi;
                    }
                    go.iter()
                        .zip(y)
                        .map(|(&goi, &yi)| *inv_norm * (goi - yi * proj))
                        .collect()
                };
                let mut gx = self.grad_buf_take(*x);
                for (gi, &dv) in gx.iter_mut().zip(&delta) {
                    *gi += dv;
                }
                self.grad_put(*x, gx);
            }
            Op::Dot { a, b, out } => {
                let Some(go) = self.grad_take(*out) else { return };
                let g = go[0];
                let mut ga = self.grad_buf_take(*a);
                for (gi, &bv) in ga.iter_mut().zip(&self.nodes[*b].data) {
                    *gi += g * bv;
                }
                self.grad_put(*a, ga);
                let mut gb = self.grad_buf_take(*b);
                for (gi, &av) in gb.iter_mut().zip(&self.nodes[*a].data) {
                    *gi += g * av;
                }
                self.grad_put(*b, gb);
            }
            Op::StackScalars { xs, out } => {
                let Some(go) = self.grad_take(*out) else { return };
                for (i, &x) in xs.iter().enumerate() {
                    let mut gx = self.grad_buf_take(x);
                    gx[0] += go[i];
                    self.grad_put(x, gx);
                }
            }
            Op::Cosent { cos, out, targets, lambda } => {
                let Some(go) = self.grad_take(*out) else { return };
                let g = go[0].to_f64_lossy();
                let kn = targets.len();
                let c: Vec<f64> = self.nodes[*cos].data.iter().map(|v| v.to_f64_lossy()).collect();
                let mut sum = 0.0f64;
                for i in 0..kn {
                    for j in 0..kn {
                        if targets[i] > targets[j] {
                            sum += (lambda * (c[j] - c[i])).exp();
                        }
                    }
                }
                let factor = g * lambda / (1.0 + sum);
                let mut gc = self.grad_buf_take(*cos);
                for a in 0..kn {
                    let mut acc = 0.0f64;
                    for i in 0..kn {
                        // `a` as the lower-target side of pair (i, a): +exp term.
                        if targets[i] > targets[a] {
                            acc += (lambda * (c[a] - c[i])).exp();
                        }
                        // `a` as the higher-target side of pair (a, i): −exp term.
                        if targets[a] > targets[i] {
                            acc -= (lambda * (c[i] - c[a])).exp();
                        }
                    }
                    gc[a] += S::from_f64_lossy(factor * acc);
                }
                self.grad_put(*cos, gc);
            }
            Op::Dropout { x, out, keep } => {
                let Some(go) = self.grad_take(*out) else { return };
                let mut gx = self.grad_buf_take(*x);
                for ((gi, &goi), &kf) in gx.iter_mut().zip(&go).zip(keep) {
                    *gi += goi * kf;
                }
                self.grad_put(*x, gx);
            }
            Op::SumAll { x, out } => {
                let Some(go) = self.grad_take(*out) else { return };
                let g = go[0];
                let mut gx = self.grad_buf_take(*x);
                for gi in gx.iter_mut() {
                    *gi += g;
                }
                self.grad_put(*x, gx);
            }
        }
    }
}

/// Extracts head `h` columns into a contiguous `[n, dh]` buffer.
fn gather_head<S: Scalar>(src: &[S], dst: &mut [S], n: usize, width: usize, h: usize, dh: usize) {
    for i in 0..n {
        dst[i * dh..(i + 1) * dh]
            .copy_from_slice(&src[i * width + h * dh..i * width + (h + 1) * dh]);
    }
}

/// Writes a contiguous `[n, dh]` head buffer back into its column block.
fn scatter_head<S: Scalar>(src: &[S], dst: &mut [S], n: usize, width: usize, h: usize, dh: usize) {
    for i in 0..n {
        dst[i * width + h * dh..i * width + (h + 1) * dh]
            .copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

/// Adds a contiguous `[n, dh]` head buffer into its column block.
fn accumulate_head<S: Scalar>(src: &[S], dst: &mut [S], n: usize, width: usize, h: usize, dh: usize) {
    for i in 0..n {
        let d = &mut dst[i * width + h * dh..i * width + (h + 1) * dh];
        let s = &src[i * dh..(i + 1) * dh];
        for (dv, &sv) in d.iter_mut().zip(s) {
            *dv += sv;
        }
    }
}

/// Rotates each head's (2i, 2i+1) pairs by `direction · position · freqs[i]`.
/// Angles and trigonometry run in f64 regardless of `S`.
fn rope_rotate<S: Scalar>(
    data: &mut [S],
    positions: &[usize],
    freqs: &[f64],
    heads: usize,
    direction: f64,
) {
    let half = freqs.len();
    let dh = 2 * half;
    let width = heads * dh;
    for (r, &pos) in positions.iter().enumerate() {
        for (i, &f) in freqs.iter().enumerate() {
            let theta = direction * pos as f64 * f;
            let (sin_t, cos_t) = (S::from_f64_lossy(theta.sin()), S::from_f64_lossy(theta.cos()));
            for h in 0..heads {
                let base = r * width + h * dh + 2 * i;
                let a = data[base];
                let b = data[base + 1];
                data[base] = a * cos_t - b * sin_t;
                data[base + 1] = a * sin_t + b * cos_t;
            }
        }
    }
}
