//! Tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! Every forward op appends a node to the tape and records its
//! multiply-accumulate count, so a finished graph doubles as an exact FLOPs
//! ledger. Counts are a function of shapes alone: matmul-family nodes record
//! `m*k*n`, fused attention records `2*lq*lk*d` (scores plus weighted sum),
//! weighted row merging records `n*d`, and everything else (lookups,
//! normalization, softmax, pointwise ops) records zero.
//!
//! A graph runs in one of three modes:
//! * `Graph::new()` — full mode; values and attention weights are retained so
//!   `backward` works.
//! * `Graph::inference()` — values only; attention weights are streamed and
//!   discarded, which keeps long-sequence forwards in O(L·d) memory.
//! * `Graph::dry_run()` — shapes and MAC counts only, no arithmetic at all.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    /// `a * b^T` without materializing the transpose.
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// Broadcast a `[1, d]` bias over every row of `[n, d]`.
    AddBiasRow { x: NodeId, b: NodeId },
    Gelu { x: NodeId },
    Sigmoid { x: NodeId },
    SoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    GatherRows { x: NodeId, idx: Rc<Vec<usize>> },
    ConcatRows { xs: Vec<NodeId> },
    ConcatCols { xs: Vec<NodeId> },
    MeanRows { x: NodeId },
    /// Per-row dot product of two `[n, d]` tensors -> `[n, 1]`.
    RowDot { a: NodeId, b: NodeId },
    Reshape { x: NodeId },
    RepeatRows { x: NodeId, k: usize },
    PoolRowsMean { x: NodeId, r: usize },
    /// Weighted sum of each group of `k` consecutive rows -> `[n/k, d]`.
    MergeRows { x: NodeId, w: NodeId, k: usize },
    Mha(Box<MhaOp>),
    CeRows { logits: NodeId, targets: Rc<Vec<usize>> },
    BceLogits { z: NodeId, targets: Rc<Vec<f64>> },
    SumAll { x: NodeId },
}

struct MhaOp {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    scale: f64,
}

pub struct Node {
    op: Op,
    pub value: Tensor,
    pub mac_count: u64,
    pub scope: u32,
    /// Op-specific saved state: attention weights, softmax outputs, CE probs.
    aux: Option<Vec<f64>>,
    needs_grad: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Full,
    Inference,
    DryRun,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    scopes: Vec<String>,
    cur_scope: u32,
    mode: Mode,
}

impl Graph {
    pub fn new() -> Self {
        Self::with_mode(Mode::Full)
    }

    /// Values are computed but attention weights are not retained; `backward`
    /// on such a graph is a contract error.
    pub fn inference() -> Self {
        Self::with_mode(Mode::Inference)
    }

    /// Shapes and MAC counts only; node data stays empty.
    pub fn dry_run() -> Self {
        Self::with_mode(Mode::DryRun)
    }

    fn with_mode(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            scopes: vec!["root".to_string()],
            cur_scope: 0,
            mode,
        }
    }

    pub fn is_dry_run(&self) -> bool {
        self.mode == Mode::DryRun
    }

    /// Labels all nodes pushed from now on; used for per-layer MAC reports
    /// and attention bookkeeping.
    pub fn set_scope(&mut self, name: &str) {
        if let Some(pos) = self.scopes.iter().position(|s| s == name) {
            self.cur_scope = pos as u32;
        } else {
            self.scopes.push(name.to_string());
            self.cur_scope = (self.scopes.len() - 1) as u32;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].value.shape
    }

    /// Gradient of the last `backward` call(s), if this node received one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Attention weights of a fused attention node, flattened as
    /// `[heads, lq, lk]` row-major. `None` unless the graph runs in full mode.
    pub fn attn_weights(&self, id: NodeId) -> Option<&[f64]> {
        match self.nodes[id].op {
            Op::Mha(_) => self.nodes[id].aux.as_deref(),
            _ => None,
        }
    }

    pub fn mac_total(&self) -> u64 {
        self.nodes.iter().map(|n| n.mac_count).sum()
    }

    /// Per-scope MAC totals in first-encounter order.
    pub fn macs_by_scope(&self) -> Vec<(String, u64)> {
        let mut totals = vec![0u64; self.scopes.len()];
        for n in &self.nodes {
            totals[n.scope as usize] += n.mac_count;
        }
        self.scopes
            .iter()
            .cloned()
            .zip(totals)
            .filter(|(_, t)| *t > 0)
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor, mac_count: u64, aux: Option<Vec<f64>>) -> NodeId {
        let needs_grad = if self.mode == Mode::DryRun {
            false
        } else {
            match &op {
                Op::Leaf => value.requires_grad,
                other => self.inputs_of(other).iter().any(|&i| self.nodes[i].needs_grad),
            }
        };
        self.nodes.push(Node {
            op,
            value,
            mac_count,
            scope: self.cur_scope,
            aux,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn inputs_of(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::MatMulNT { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::RowDot { a, b } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Sigmoid { x }
            | Op::SoftmaxRows { x }
            | Op::GatherRows { x, .. }
            | Op::MeanRows { x }
            | Op::Reshape { x }
            | Op::RepeatRows { x, .. }
            | Op::PoolRowsMean { x, .. }
            | Op::SumAll { x } => vec![*x],
            Op::AddBiasRow { x, b } => vec![*x, *b],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::ConcatRows { xs } | Op::ConcatCols { xs } => xs.clone(),
            Op::MergeRows { x, w, .. } => vec![*x, *w],
            Op::Mha(m) => vec![m.q, m.k, m.v],
            Op::CeRows { logits, .. } => vec![*logits],
            Op::BceLogits { z, .. } => vec![*z],
        }
    }

    fn dry(&self) -> bool {
        self.mode == Mode::DryRun
    }

    fn rc2(&self, id: NodeId) -> (usize, usize) {
        let t = &self.nodes[id].value;
        (t.rows(), t.cols())
    }

    // ---- leaves ------------------------------------------------------------

    /// Inserts a tensor as a graph leaf. In dry-run mode only the shape is kept.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let value = if self.dry() {
            let mut s = Tensor::shape_only(&t.shape);
            s.requires_grad = t.requires_grad;
            s
        } else {
            t
        };
        self.push(Op::Leaf, value, 0, None)
    }

    /// Leaf that participates in backward.
    pub fn param(&mut self, data: &Tensor) -> NodeId {
        let mut t = if self.dry() {
            Tensor::shape_only(&data.shape)
        } else {
            Tensor::from_vec(&data.shape, data.data.clone())
        };
        t.requires_grad = true;
        self.push(Op::Leaf, t, 0, None)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, data: Tensor) -> NodeId {
        let t = if self.dry() {
            Tensor::shape_only(&data.shape)
        } else {
            data
        };
        self.push(Op::Leaf, t, 0, None)
    }

    // ---- arithmetic --------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rc2(a);
        let (k2, n) = self.rc2(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner dims differ: [{m},{k}] x [{k2},{n}]"),
            });
        }
        let macs = (m * k * n) as u64;
        let value = if self.dry() {
            Tensor::shape_only(&[m, n])
        } else {
            let mut out = vec![0.0; m * n];
            mm(&self.nodes[a].value.data, &self.nodes[b].value.data, m, k, n, &mut out);
            Tensor::from_vec(&[m, n], out)
        };
        Ok(self.push(Op::MatMul { a, b }, value, macs, None))
    }

    /// `a[m,k] * b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rc2(a);
        let (n, k2) = self.rc2(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                detail: format!("inner dims differ: [{m},{k}] x [{n},{k2}]^T"),
            });
        }
        let macs = (m * k * n) as u64;
        let value = if self.dry() {
            Tensor::shape_only(&[m, n])
        } else {
            let mut out = vec![0.0; m * n];
            mm_nt(&self.nodes[a].value.data, &self.nodes[b].value.data, m, k, n, &mut out);
            Tensor::from_vec(&[m, n], out)
        };
        Ok(self.push(Op::MatMulNT { a, b }, value, macs, None))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.nodes[a].value.shape != self.nodes[b].value.shape {
            return Err(Error::Shape {
                op: name,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape, self.nodes[b].value.shape
                ),
            });
        }
        let value = if self.dry() {
            Tensor::shape_only(&self.nodes[a].value.shape)
        } else {
            let data = self.nodes[a]
                .value
                .data
                .iter()
                .zip(&self.nodes[b].value.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(&self.nodes[a].value.shape.clone(), data)
        };
        Ok(self.push(op, value, 0, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = if self.dry() {
            Tensor::shape_only(&self.nodes[x].value.shape)
        } else {
            let data = self.nodes[x].value.data.iter().map(|&v| v * c).collect();
            Tensor::from_vec(&self.nodes[x].value.shape.clone(), data)
        };
        self.push(Op::Scale { x, c }, value, 0, None)
    }

    pub fn add_bias_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = self.rc2(x);
        let (br, bc) = self.rc2(b);
        if br != 1 || bc != d {
            return Err(Error::Shape {
                op: "add_bias_row",
                detail: format!("bias [{br},{bc}] does not broadcast over [{n},{d}]"),
            });
        }
        let value = if self.dry() {
            Tensor::shape_only(&self.nodes[x].value.shape)
        } else {
            let bias = &self.nodes[b].value.data;
            let mut data = self.nodes[x].value.data.clone();
            for row in data.chunks_mut(d) {
                for (v, &bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
            Tensor::from_vec(&self.nodes[x].value.shape.clone(), data)
        };
        Ok(self.push(Op::AddBiasRow { x, b }, value, 0, None))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = if self.dry() {
            Tensor::shape_only(&self.nodes[x].value.shape)
        } else {
            let data = self.nodes[x].value.data.iter().map(|&v| gelu(v)).collect();
            Tensor::from_vec(&self.nodes[x].value.shape.clone(), data)
        };
        self.push(Op::Gelu { x }, value, 0, None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = if self.dry() {
            Tensor::shape_only(&self.nodes[x].value.shape)
        } else {
            let data = self.nodes[x].value.data.iter().map(|&v| sigmoid(v)).collect();
            Tensor::from_vec(&self.nodes[x].value.shape.clone(), data)
        };
        self.push(Op::Sigmoid { x }, value, 0, None)
    }

    /// Row-wise softmax; `mask[j] == false` pins column `j` of every row to 0.
    /// Errors if the mask disables every column.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<Rc<Vec<bool>>>) -> Result<NodeId> {
        let (n, m) = self.rc2(x);
        if let Some(mk) = &mask {
            if mk.len() != m {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    detail: format!("mask len {} vs {m} columns", mk.len()),
                });
            }
            if !mk.iter().any(|&b| b) {
                return Err(Error::Contract(
                    "softmax over a fully masked axis".to_string(),
                ));
            }
        }
        let value = if self.dry() {
            Tensor::shape_only(&[n, m])
        } else {
            let mut data = self.nodes[x].value.data.clone();
            for row in data.chunks_mut(m) {
                softmax_row_masked(row, mask.as_deref().map(|v| v.as_slice()));
            }
            Tensor::from_vec(&[n, m], data)
        };
        Ok(self.push(Op::SoftmaxRows { x }, value, 0, None))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, d) = self.rc2(x);
        for (p, label) in [(gamma, "gamma"), (beta, "beta")] {
            let (pr, pc) = self.rc2(p);
            if pr != 1 || pc != d {
                return Err(Error::Shape {
                    op: "layer_norm",
                    detail: format!("{label} [{pr},{pc}] does not match feature dim {d}"),
                });
            }
        }
        let (value, aux) = if self.dry() {
            (Tensor::shape_only(&[n, d]), None)
        } else {
            let g = &self.nodes[gamma].value.data;
            let b = &self.nodes[beta].value.data;
            let mut out = vec![0.0; n * d];
            // aux layout: xhat (n*d) then inv_std (n)
            let mut aux = vec![0.0; n * d + n];
            for i in 0..n {
                let row = &self.nodes[x].value.data[i * d..(i + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                aux[n * d + i] = inv;
                for j in 0..d {
                    let xh = (row[j] - mu) * inv;
                    aux[i * d + j] = xh;
                    out[i * d + j] = g[j] * xh + b[j];
                }
            }
            (Tensor::from_vec(&[n, d], out), Some(aux))
        };
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, value, 0, aux))
    }

    /// Row lookup; the workhorse for embedding tables (0 MACs) and row selection.
    pub fn gather_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>) -> Result<NodeId> {
        let (n, d) = self.rc2(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("row index {bad} out of range for {n} rows"),
            });
        }
        let m = idx.len();
        let value = if self.dry() {
            Tensor::shape_only(&[m, d])
        } else {
            let src = &self.nodes[x].value.data;
            let mut out = Vec::with_capacity(m * d);
            for &i in idx.iter() {
                out.extend_from_slice(&src[i * d..(i + 1) * d]);
            }
            Tensor::from_vec(&[m, d], out)
        };
        Ok(self.push(Op::GatherRows { x, idx }, value, 0, None))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape { op: "concat_rows", detail: "empty input list".into() });
        }
        let d = self.rc2(xs[0]).1;
        let mut n = 0;
        for &id in xs {
            let (r, c) = self.rc2(id);
            if c != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column mismatch: {c} vs {d}"),
                });
            }
            n += r;
        }
        let value = if self.dry() {
            Tensor::shape_only(&[n, d])
        } else {
            let mut out = Vec::with_capacity(n * d);
            for &id in xs {
                out.extend_from_slice(&self.nodes[id].value.data);
            }
            Tensor::from_vec(&[n, d], out)
        };
        Ok(self.push(Op::ConcatRows { xs: xs.to_vec() }, value, 0, None))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape { op: "concat_cols", detail: "empty input list".into() });
        }
        let n = self.rc2(xs[0]).0;
        let mut d = 0;
        for &id in xs {
            let (r, c) = self.rc2(id);
            if r != n {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row mismatch: {r} vs {n}"),
                });
            }
            d += c;
        }
        let value = if self.dry() {
            Tensor::shape_only(&[n, d])
        } else {
            let mut out = vec![0.0; n * d];
            let mut col = 0;
            for &id in xs {
                let (_, c) = self.rc2(id);
                let src = &self.nodes[id].value.data;
                for i in 0..n {
                    out[i * d + col..i * d + col + c].copy_from_slice(&src[i * c..(i + 1) * c]);
                }
                col += c;
            }
            Tensor::from_vec(&[n, d], out)
        };
        Ok(self.push(Op::ConcatCols { xs: xs.to_vec() }, value, 0, None))
    }

    /// Mean over rows: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = self.rc2(x);
        if n == 0 {
            return Err(Error::Contract("mean over zero rows".to_string()));
        }
        let value = if self.dry() {
            Tensor::shape_only(&[1, d])
        } else {
            let src = &self.nodes[x].value.data;
            let mut out = vec![0.0; d];
            for row in src.chunks(d) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= n as f64);
            Tensor::from_vec(&[1, d], out)
        };
        Ok(self.push(Op::MeanRows { x }, value, 0, None))
    }

    /// Per-row dot product: `[n, d] . [n, d] -> [n, 1]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = self.rc2(a);
        if self.nodes[a].value.shape != self.nodes[b].value.shape {
            return Err(Error::Shape {
                op: "row_dot",
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape, self.nodes[b].value.shape
                ),
            });
        }
        let macs = (n * d) as u64;
        let value = if self.dry() {
            Tensor::shape_only(&[n, 1])
        } else {
            let (xa, xb) = (&self.nodes[a].value.data, &self.nodes[b].value.data);
            let out = (0..n)
                .map(|i| dot(&xa[i * d..(i + 1) * d], &xb[i * d..(i + 1) * d]))
                .collect();
            Tensor::from_vec(&[n, 1], out)
        };
        Ok(self.push(Op::RowDot { a, b }, value, macs, None))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].value.numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.nodes[x].value.shape, shape),
            });
        }
        let value = if self.dry() {
            Tensor::shape_only(shape)
        } else {
            Tensor::from_vec(shape, self.nodes[x].value.data.clone())
        };
        Ok(self.push(Op::Reshape { x }, value, 0, None))
    }

    /// Duplicates each row `k` times: `[n, d] -> [n*k, d]`.
    pub fn repeat_rows(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        if k == 0 {
            return Err(Error::Contract("repeat_rows with k = 0".to_string()));
        }
        let (n, d) = self.rc2(x);
        let value = if self.dry() {
            Tensor::shape_only(&[n * k, d])
        } else {
            let src = &self.nodes[x].value.data;
            let mut out = Vec::with_capacity(n * k * d);
            for row in src.chunks(d) {
                for _ in 0..k {
                    out.extend_from_slice(row);
                }
            }
            Tensor::from_vec(&[n * k, d], out)
        };
        Ok(self.push(Op::RepeatRows { x, k }, value, 0, None))
    }

    /// Mean of each group of `r` consecutive rows: `[n, d] -> [n/r, d]`.
    pub fn pool_rows_mean(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let (n, d) = self.rc2(x);
        if r == 0 || n % r != 0 {
            return Err(Error::Shape {
                op: "pool_rows_mean",
                detail: format!("group size {r} does not divide {n} rows"),
            });
        }
        let m = n / r;
        let value = if self.dry() {
            Tensor::shape_only(&[m, d])
        } else {
            let src = &self.nodes[x].value.data;
            let mut out = vec![0.0; m * d];
            for g in 0..m {
                for i in 0..r {
                    let row = &src[(g * r + i) * d..(g * r + i + 1) * d];
                    for (o, &v) in out[g * d..(g + 1) * d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= r as f64);
            Tensor::from_vec(&[m, d], out)
        };
        Ok(self.push(Op::PoolRowsMean { x, r }, value, 0, None))
    }

    /// Weighted sum of each group of `k` consecutive rows with scalar weights
    /// `w: [n, 1]`: `out[g] = sum_{j in group g} w[j] * x[j]`.
    pub fn merge_rows(&mut self, x: NodeId, w: NodeId, k: usize) -> Result<NodeId> {
        let (n, d) = self.rc2(x);
        let (wn, wc) = self.rc2(w);
        if k == 0 || n % k != 0 {
            return Err(Error::Shape {
                op: "merge_rows",
                detail: format!("group size {k} does not divide {n} rows"),
            });
        }
        if wn != n || wc != 1 {
            return Err(Error::Shape {
                op: "merge_rows",
                detail: format!("weights [{wn},{wc}] do not match {n} rows"),
            });
        }
        let m = n / k;
        let macs = (n * d) as u64;
        let value = if self.dry() {
            Tensor::shape_only(&[m, d])
        } else {
            let src = &self.nodes[x].value.data;
            let wv = &self.nodes[w].value.data;
            let mut out = vec![0.0; m * d];
            for g in 0..m {
                for j in 0..k {
                    let row = g * k + j;
                    let weight = wv[row];
                    let xr = &src[row * d..(row + 1) * d];
                    for (o, &v) in out[g * d..(g + 1) * d].iter_mut().zip(xr) {
                        *o += weight * v;
                    }
                }
            }
            Tensor::from_vec(&[m, d], out)
        };
        Ok(self.push(Op::MergeRows { x, w, k }, value, macs, None))
    }

    /// Fused multi-head scaled-dot-product attention over already-projected
    /// `q: [lq, d]`, `k: [lk, d]`, `v: [lk, d]`.
    ///
    /// `key_mask[j] == false` removes key/value `j` for every query and head.
    /// Errors if an active query would attend over an empty key set.
    /// Records `2 * lq * lk * d` MACs (scores + weighted sum, all heads).
    pub fn mha(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        key_mask: Rc<Vec<bool>>,
        query_mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let (lq, d) = self.rc2(q);
        let (lk, dk) = self.rc2(k);
        let (lv, dv) = self.rc2(v);
        if d != dk || d != dv || lk != lv {
            return Err(Error::Shape {
                op: "mha",
                detail: format!("q [{lq},{d}], k [{lk},{dk}], v [{lv},{dv}]"),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "mha",
                detail: format!("{heads} heads do not divide width {d}"),
            });
        }
        if key_mask.len() != lk {
            return Err(Error::Shape {
                op: "mha",
                detail: format!("key mask len {} vs {lk} keys", key_mask.len()),
            });
        }
        let any_active_query = query_mask.map_or(lq > 0, |qm| qm.iter().any(|&b| b));
        if any_active_query && !key_mask.iter().any(|&b| b) {
            return Err(Error::Contract(
                "attention over a fully masked key axis".to_string(),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let macs = 2 * (lq * lk * d) as u64;
        let op = Op::Mha(Box::new(MhaOp { q, k, v, heads, scale }));
        let (value, aux) = if self.dry() {
            (Tensor::shape_only(&[lq, d]), None)
        } else {
            let qd = &self.nodes[q].value.data;
            let kd = &self.nodes[k].value.data;
            let vd = &self.nodes[v].value.data;
            let keep = self.mode == Mode::Full;
            let mut out = vec![0.0; lq * d];
            let mut weights = if keep { vec![0.0; heads * lq * lk] } else { Vec::new() };
            let mut row = vec![0.0; lk];
            // per-head copies keep the inner loops on contiguous memory;
            // reading head slices strided through the full width fetches
            // `heads` times the bytes it uses
            let mut kh = vec![0.0; lk * dh];
            let mut vh = vec![0.0; lk * dh];
            for h in 0..heads {
                let hoff = h * dh;
                for j in 0..lk {
                    kh[j * dh..(j + 1) * dh]
                        .copy_from_slice(&kd[j * d + hoff..j * d + hoff + dh]);
                    vh[j * dh..(j + 1) * dh]
                        .copy_from_slice(&vd[j * d + hoff..j * d + hoff + dh]);
                }
                for i in 0..lq {
                    let qrow = &qd[i * d + hoff..i * d + hoff + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if key_mask[j] {
                            let s = scale * dot(qrow, &kh[j * dh..(j + 1) * dh]);
                            row[j] = s;
                            if s > mx {
                                mx = s;
                            }
                        }
                    }
                    let mut denom = 0.0;
                    for j in 0..lk {
                        if key_mask[j] {
                            row[j] = (row[j] - mx).exp();
                            denom += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    let inv = 1.0 / denom;
                    let orow = &mut out[i * d + hoff..i * d + hoff + dh];
                    for j in 0..lk {
                        if key_mask[j] {
                            let wgt = row[j] * inv;
                            row[j] = wgt;
                            let vrow = &vh[j * dh..(j + 1) * dh];
                            for (o, &vv) in orow.iter_mut().zip(vrow) {
                                *o += wgt * vv;
                            }
                        }
                    }
                    if keep {
                        weights[h * lq * lk + i * lk..h * lq * lk + (i + 1) * lk]
                            .copy_from_slice(&row);
                    }
                }
            }
            (Tensor::from_vec(&[lq, d], out), keep.then_some(weights))
        };
        Ok(self.push(op, value, macs, aux))
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn ce_rows(&mut self, logits: NodeId, targets: Rc<Vec<usize>>) -> Result<NodeId> {
        let (n, c) = self.rc2(logits);
        if targets.len() != n {
            return Err(Error::Shape {
                op: "ce_rows",
                detail: format!("{} targets for {n} rows", targets.len()),
            });
        }
        if n == 0 {
            return Err(Error::Contract("cross-entropy over zero rows".to_string()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape {
                op: "ce_rows",
                detail: format!("target {bad} out of range for {c} classes"),
            });
        }
        let (value, aux) = if self.dry() {
            (Tensor::shape_only(&[1, 1]), None)
        } else {
            let src = &self.nodes[logits].value.data;
            let mut probs = src.clone();
            let mut loss = 0.0;
            for (i, prow) in probs.chunks_mut(c).enumerate() {
                softmax_row_masked(prow, None);
                let p = prow[targets[i]];
                // clamp guards exp underflow only; max() on a NaN would
                // silently return the clamp and hide a poisoned graph
                loss -= if p.is_nan() { f64::NAN } else { p.max(1e-300).ln() };
            }
            loss /= n as f64;
            (Tensor::scalar(loss), Some(probs))
        };
        Ok(self.push(Op::CeRows { logits, targets }, value, 0, aux))
    }

    /// Mean binary cross-entropy on logits `z: [n, 1]` with labels in {0, 1},
    /// computed in the numerically stable max-form.
    pub fn bce_logits(&mut self, z: NodeId, targets: Rc<Vec<f64>>) -> Result<NodeId> {
        let (n, c) = self.rc2(z);
        if c != 1 || targets.len() != n {
            return Err(Error::Shape {
                op: "bce_logits",
                detail: format!("logits [{n},{c}], {} targets", targets.len()),
            });
        }
        if n == 0 {
            return Err(Error::Contract("BCE over zero rows".to_string()));
        }
        let value = if self.dry() {
            Tensor::shape_only(&[1, 1])
        } else {
            let src = &self.nodes[z].value.data;
            let mut loss = 0.0;
            for (i, &zv) in src.iter().enumerate() {
                loss += zv.max(0.0) - zv * targets[i] + (-zv.abs()).exp().ln_1p();
            }
            Tensor::scalar(loss / n as f64)
        };
        Ok(self.push(Op::BceLogits { z, targets }, value, 0, None))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = if self.dry() {
            Tensor::shape_only(&[1, 1])
        } else {
            Tensor::scalar(self.nodes[x].value.data.iter().sum())
        };
        self.push(Op::SumAll { x }, value, 0, None)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss node. Gradients accumulate
    /// additively across repeated calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        match self.mode {
            Mode::DryRun => {
                return Err(Error::Contract("backward on a dry-run graph".to_string()))
            }
            Mode::Inference => {
                return Err(Error::Contract(
                    "backward on an inference graph (attention weights were not retained)"
                        .to_string(),
                ))
            }
            Mode::Full => {}
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape
            )));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        // Per-call scratch, folded into the persistent accumulators at the
        // end, so repeated calls each contribute exactly one pass.
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        local[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = local[id].take() else { continue };
            self.propagate(id, &g, &mut local);
            local[id] = Some(g);
        }
        for (slot, l) in self.grads.iter_mut().zip(local) {
            if let Some(l) = l {
                acc_into(slot, l.len(), &l);
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn propagate(&self, id: NodeId, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        macro_rules! acc {
            ($target:expr, $n:expr, $contrib:expr) => {
                acc_into(&mut local[$target], $n, $contrib)
            };
        }
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.rc2(a);
                let n = self.rc2(b).1;
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    mm_nt(g, &self.nodes[b].value.data, m, n, k, &mut da);
                    acc!(a, m * k, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    mm_tn(&self.nodes[a].value.data, g, m, k, n, &mut db);
                    acc!(b, k * n, &db);
                }
            }
            Op::MatMulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.rc2(a);
                let n = self.rc2(b).0;
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    mm(g, &self.nodes[b].value.data, m, n, k, &mut da);
                    acc!(a, m * k, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; n * k];
                    mm_tn(g, &self.nodes[a].value.data, m, n, k, &mut db);
                    acc!(b, n * k, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    acc!(a, g.len(), g);
                }
                if self.needs(b) {
                    acc!(b, g.len(), g);
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    acc!(a, g.len(), g);
                }
                if self.needs(b) {
                    let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                    acc!(b, g.len(), &neg);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b].value.data)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    acc!(a, g.len(), &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a].value.data)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    acc!(b, g.len(), &db);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.needs(x) {
                    let dx: Vec<f64> = g.iter().map(|&v| v * c).collect();
                    acc!(x, g.len(), &dx);
                }
            }
            Op::AddBiasRow { x, b } => {
                let (x, b) = (*x, *b);
                let d = self.rc2(x).1;
                if self.needs(x) {
                    acc!(x, g.len(), g);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc!(b, d, &db);
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.needs(x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x].value.data)
                        .map(|(&gv, &xv)| gv * gelu_deriv(xv))
                        .collect();
                    acc!(x, g.len(), &dx);
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if self.needs(x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[id].value.data)
                        .map(|(&gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    acc!(x, g.len(), &dx);
                }
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                if self.needs(x) {
                    let (n, m) = self.rc2(id);
                    let s = &self.nodes[id].value.data;
                    let mut dx = vec![0.0; n * m];
                    for i in 0..n {
                        let srow = &s[i * m..(i + 1) * m];
                        let grow = &g[i * m..(i + 1) * m];
                        let dotgs: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        for j in 0..m {
                            dx[i * m + j] = srow[j] * (grow[j] - dotgs);
                        }
                    }
                    acc!(x, n * m, &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, d) = self.rc2(x);
                let aux = self.nodes[id].aux.as_ref().expect("layer_norm aux");
                let (xhat, inv_std) = aux.split_at(n * d);
                let gdat = &self.nodes[gamma].value.data;
                if self.needs(x) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let xh = &xhat[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = grow[j] * gdat[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh[j];
                        }
                        let inv = inv_std[i];
                        let dinv = d as f64;
                        for j in 0..d {
                            let dxh = grow[j] * gdat[j];
                            dx[i * d + j] =
                                inv * (dxh - sum_dxhat / dinv - xh[j] * sum_dxhat_xhat / dinv);
                        }
                    }
                    acc!(x, n * d, &dx);
                }
                if self.needs(gamma) {
                    let mut dg = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                    acc!(gamma, d, &dg);
                }
                if self.needs(beta) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc!(beta, d, &db);
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                if self.needs(x) {
                    let (n, d) = self.rc2(x);
                    let mut dx = vec![0.0; n * d];
                    for (pos, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            dx[i * d + j] += g[pos * d + j];
                        }
                    }
                    acc!(x, n * d, &dx);
                }
            }
            Op::ConcatRows { xs } => {
                let xs = xs.clone();
                let mut off = 0;
                for xid in xs {
                    let (r, c) = self.rc2(xid);
                    if self.needs(xid) {
                        acc!(xid, r * c, &g[off..off + r * c]);
                    }
                    off += r * c;
                }
            }
            Op::ConcatCols { xs } => {
                let xs = xs.clone();
                let n = self.rc2(id).0;
                let total = self.rc2(id).1;
                let mut col = 0;
                for xid in xs {
                    let c = self.rc2(xid).1;
                    if self.needs(xid) {
                        let mut dx = vec![0.0; n * c];
                        for i in 0..n {
                            dx[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * total + col..i * total + col + c]);
                        }
                        acc!(xid, n * c, &dx);
                    }
                    col += c;
                }
            }
            Op::MeanRows { x } => {
                let x = *x;
                if self.needs(x) {
                    let (n, d) = self.rc2(x);
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * d + j] = g[j] / n as f64;
                        }
                    }
                    acc!(x, n * d, &dx);
                }
            }
            Op::RowDot { a, b } => {
                let (a, b) = (*a, *b);
                let (n, d) = self.rc2(a);
                if self.needs(a) {
                    let bd = &self.nodes[b].value.data;
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            da[i * d + j] = g[i] * bd[i * d + j];
                        }
                    }
                    acc!(a, n * d, &da);
                }
                if self.needs(b) {
                    let ad = &self.nodes[a].value.data;
                    let mut db = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            db[i * d + j] = g[i] * ad[i * d + j];
                        }
                    }
                    acc!(b, n * d, &db);
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.needs(x) {
                    acc!(x, g.len(), g);
                }
            }
            Op::RepeatRows { x, k } => {
                let (x, k) = (*x, *k);
                if self.needs(x) {
                    let (n, d) = self.rc2(x);
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for t in 0..k {
                            let grow = &g[(i * k + t) * d..(i * k + t + 1) * d];
                            for (o, &v) in dx[i * d..(i + 1) * d].iter_mut().zip(grow) {
                                *o += v;
                            }
                        }
                    }
                    acc!(x, n * d, &dx);
                }
            }
            Op::PoolRowsMean { x, r } => {
                let (x, r) = (*x, *r);
                if self.needs(x) {
                    let (n, d) = self.rc2(x);
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let grow = &g[(i / r) * d..(i / r + 1) * d];
                        for (o, &v) in dx[i * d..(i + 1) * d].iter_mut().zip(grow) {
                            *o = v / r as f64;
                        }
                    }
                    acc!(x, n * d, &dx);
                }
            }
            Op::MergeRows { x, w, k } => {
                let (x, w, k) = (*x, *w, *k);
                let (n, d) = self.rc2(x);
                if self.needs(x) {
                    let wv = &self.nodes[w].value.data;
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let grow = &g[(i / k) * d..(i / k + 1) * d];
                        for (o, &v) in dx[i * d..(i + 1) * d].iter_mut().zip(grow) {
                            *o = wv[i] * v;
                        }
                    }
                    acc!(x, n * d, &dx);
                }
                if self.needs(w) {
                    let xv = &self.nodes[x].value.data;
                    let mut dw = vec![0.0; n];
                    for i in 0..n {
                        dw[i] = dot(&xv[i * d..(i + 1) * d], &g[(i / k) * d..(i / k + 1) * d]);
                    }
                    acc!(w, n, &dw);
                }
            }
            Op::Mha(m) => {
                let (q, k, v) = (m.q, m.k, m.v);
                let (heads, scale) = (m.heads, m.scale);
                let (lq, d) = self.rc2(q);
                let lk = self.rc2(k).0;
                let dh = d / heads;
                let weights = self
                    .nodes[id]
                    .aux
                    .as_ref()
                    .expect("attention weights retained in full mode");
                let qd = &self.nodes[q].value.data;
                let kd = &self.nodes[k].value.data;
                let vd = &self.nodes[v].value.data;
                let mut dq = vec![0.0; lq * d];
                let mut dk = vec![0.0; lk * d];
                let mut dv = vec![0.0; lk * d];
                let mut ds = vec![0.0; lk];
                for h in 0..heads {
                    let hoff = h * dh;
                    let wh = &weights[h * lq * lk..(h + 1) * lq * lk];
                    for i in 0..lq {
                        let grow = &g[i * d + hoff..i * d + hoff + dh];
                        let wrow = &wh[i * lk..(i + 1) * lk];
                        // dW[j] = g . v_j ; dS = softmax backward on the row
                        let mut dot_wg = 0.0;
                        for j in 0..lk {
                            if wrow[j] != 0.0 {
                                let dwj = dot(grow, &vd[j * d + hoff..j * d + hoff + dh]);
                                ds[j] = dwj;
                                dot_wg += wrow[j] * dwj;
                            } else {
                                ds[j] = 0.0;
                            }
                        }
                        for j in 0..lk {
                            if wrow[j] != 0.0 {
                                let dsj = wrow[j] * (ds[j] - dot_wg);
                                // dV_j += w * g
                                for t in 0..dh {
                                    dv[j * d + hoff + t] += wrow[j] * grow[t];
                                }
                                // dQ_i += dsj * scale * k_j ; dK_j += dsj * scale * q_i
                                let qrow = &qd[i * d + hoff..i * d + hoff + dh];
                                let krow = &kd[j * d + hoff..j * d + hoff + dh];
                                for t in 0..dh {
                                    dq[i * d + hoff + t] += dsj * scale * krow[t];
                                    dk[j * d + hoff + t] += dsj * scale * qrow[t];
                                }
                            }
                        }
                    }
                }
                if self.needs(q) {
                    acc!(q, lq * d, &dq);
                }
                if self.needs(k) {
                    acc!(k, lk * d, &dk);
                }
                if self.needs(v) {
                    acc!(v, lk * d, &dv);
                }
            }
            Op::CeRows { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                if self.needs(logits) {
                    let (n, c) = self.rc2(logits);
                    let probs = self.nodes[id].aux.as_ref().expect("ce probs");
                    let gs = g[0] / n as f64;
                    let mut dx = vec![0.0; n * c];
                    for i in 0..n {
                        for j in 0..c {
                            let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                            dx[i * c + j] = gs * (probs[i * c + j] - onehot);
                        }
                    }
                    acc!(logits, n * c, &dx);
                }
            }
            Op::BceLogits { z, targets } => {
                let z = *z;
                let targets = targets.clone();
                if self.needs(z) {
                    let n = self.rc2(z).0;
                    let zd = &self.nodes[z].value.data;
                    let gs = g[0] / n as f64;
                    let dx: Vec<f64> = zd
                        .iter()
                        .zip(targets.iter())
                        .map(|(&zv, &y)| gs * (sigmoid(zv) - y))
                        .collect();
                    acc!(z, n, &dx);
                }
            }
            Op::SumAll { x } => {
                let x = *x;
                if self.needs(x) {
                    let n = self.nodes[x].value.numel();
                    let dx = vec![g[0]; n];
                    acc!(x, n, &dx);
                }
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn acc_into(slot: &mut Option<Vec<f64>>, n: usize, contrib: &[f64]) {
    let buf = slot.get_or_insert_with(|| vec![0.0; n]);
    debug_assert_eq!(buf.len(), contrib.len());
    for (o, &v) in buf.iter_mut().zip(contrib) {
        *o += v;
    }
}

// ---- kernels ---------------------------------------------------------------

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `out[m,n] += a[m,k] * b[k,n]`, row-major ikj order.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`.
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn softmax_row_masked(row: &mut [f64], mask: Option<&[bool]>) {
    let mut mx = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if mask.map_or(true, |m| m[j]) && v > mx {
            mx = v;
        }
    }
    let mut denom = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if mask.map_or(true, |m| m[j]) {
            *v = (*v - mx).exp();
            denom += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / denom;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
