//! The tape: forward ops, the reverse sweep, and the generic primitive
//! dispatch. Tensors are 1-D or 2-D, row major. Elementwise and row ops
//! (softmax, layer norm, cross entropy) treat a 1-D tensor as a single row;
//! matmul, transpose, concat, slice, and embedding lookup require 2-D.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::rng::SeededRng;
use crate::tensor::{Result, TensorError, TensorId};

static TAPE_GEN: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const MASKED: f64 = -1.0e9;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize, broadcast_b: bool },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Gelu { a: usize },
    Tanh { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Embedding { table: usize, ids: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize, end: usize },
    Dropout { a: usize, mask: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<i64>, ignore: i64, n_eff: usize },
    SumAll { a: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients keyed by tensor, produced by one reverse sweep.
pub struct GradMap {
    gen: u64,
    grads: BTreeMap<usize, Vec<f64>>,
}

impl GradMap {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        if id.gen != self.gen {
            return None;
        }
        self.grads.get(&id.index).map(|g| g.as_slice())
    }
}

pub struct Tape {
    gen: u64,
    nodes: Vec<Node>,
    rng: SeededRng,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (rows, cols) with the last axis as columns; a 1-D tensor is one row.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("tensors are rank 1 or 2"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// The seed drives only tape-owned randomness (dropout masks).
    pub fn with_seed(seed: u64) -> Self {
        Tape {
            gen: TAPE_GEN.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            rng: SeededRng::new(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        TensorId {
            gen: self.gen,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, id: TensorId) -> Result<usize> {
        if id.gen != self.gen || id.index >= self.nodes.len() {
            return Err(TensorError::DetachedGraph);
        }
        Ok(id.index)
    }

    pub fn shape(&self, id: TensorId) -> Result<&[usize]> {
        let i = self.check(id)?;
        Ok(&self.nodes[i].shape)
    }

    pub fn value(&self, id: TensorId) -> Result<&[f64]> {
        let i = self.check(id)?;
        Ok(&self.nodes[i].data)
    }

    pub fn scalar(&self, id: TensorId) -> Result<f64> {
        let v = self.value(id)?;
        if v.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(id)?.to_vec()));
        }
        Ok(v[0])
    }

    // ── Construction ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(TensorError::InvalidArg {
                op: "leaf",
                detail: format!("rank must be 1 or 2, got shape {shape:?}"),
            });
        }
        if numel(shape) != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} holds {} values, data has {}", shape, numel(shape), data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<TensorId> {
        self.constant(&[1], vec![v])
    }

    /// Additive attention mask: row t may attend to the first `memory` slots
    /// and to text positions 0..=t; everything later is pushed to -1e9,
    /// which underflows to exactly zero weight after softmax.
    pub fn causal_mask(&mut self, text_len: usize, memory: usize) -> Result<TensorId> {
        let cols = memory + text_len;
        let mut data = vec![0.0; text_len * cols];
        for t in 0..text_len {
            for j in (memory + t + 1)..cols {
                data[t * cols + j] = MASKED;
            }
        }
        self.constant(&[text_len, cols], data)
    }

    // ── Forward ops ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("both inputs must be rank 2, got {sa:?} and {sb:?}"),
            });
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims disagree: lhs {sa:?} axis 1 is {k}, rhs {sb:?} axis 0 is {k2}"),
            });
        }
        let mut out = vec![0.0; m * n];
        mm(&self.nodes[ia].data, &self.nodes[ib].data, &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, false, Op::Matmul { a: ia, b: ib }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let ia = self.check(a)?;
        let s = &self.nodes[ia].shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("input must be rank 2, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let x = &self.nodes[ia].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, false, Op::Transpose { a: ia }))
    }

    /// Elementwise add. The right side may also be a row vector ([n] or
    /// [1, n]) broadcast over the left side's rows, which covers bias terms.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].shape.clone(), self.nodes[ib].shape.clone());
        let same = sa == sb || numel(&sa) == numel(&sb) && rows_cols(&sa) == rows_cols(&sb);
        let (ra, ca) = rows_cols(&sa);
        let (rb, cb) = rows_cols(&sb);
        let broadcast = !same && rb == 1 && cb == ca;
        if !same && !broadcast {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("cannot add {sb:?} to {sa:?}: shapes must match or rhs must be a [{ca}] row vector"),
            });
        }
        let xb = &self.nodes[ib].data;
        let mut out = self.nodes[ia].data.clone();
        if broadcast {
            for i in 0..ra {
                for j in 0..ca {
                    out[i * ca + j] += xb[j];
                }
            }
        } else {
            for (o, v) in out.iter_mut().zip(xb.iter()) {
                *o += v;
            }
        }
        Ok(self.push(sa, out, false, Op::Add { a: ia, b: ib, broadcast_b: broadcast }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].shape.clone(), self.nodes[ib].shape.clone());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("elementwise mul needs equal shapes, got {sa:?} and {sb:?}"),
            });
        }
        let out: Vec<f64> = self.nodes[ia]
            .data
            .iter()
            .zip(self.nodes[ib].data.iter())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(sa, out, false, Op::Mul { a: ia, b: ib }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let ia = self.check(a)?;
        let out: Vec<f64> = self.nodes[ia].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, false, Op::Scale { a: ia, c }))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let ia = self.check(a)?;
        let out: Vec<f64> = self.nodes[ia].data.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, false, Op::Gelu { a: ia }))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let ia = self.check(a)?;
        let out: Vec<f64> = self.nodes[ia].data.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, false, Op::Tanh { a: ia }))
    }

    /// Row-wise softmax over the last axis, max-shifted for stability.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        let (r, c) = rows_cols(&shape);
        if c == 0 {
            return Err(TensorError::InvalidArg {
                op: "softmax",
                detail: "zero-length rows".into(),
            });
        }
        let x = &self.nodes[ia].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            let inv = 1.0 / s;
            for j in 0..c {
                out[i * c + j] *= inv;
            }
        }
        Ok(self.push(shape, out, false, Op::Softmax { a: ia }))
    }

    /// Row-wise layer normalization over the last axis with affine output.
    /// `gamma` and `beta` are row vectors of the column width.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let shape = self.nodes[ix].shape.clone();
        let (r, c) = rows_cols(&shape);
        for (name, idx) in [("gamma", ig), ("beta", ib)] {
            let (gr, gc) = rows_cols(&self.nodes[idx].shape);
            if gr != 1 || gc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("{name} must be a [{c}] row vector, got {:?}", self.nodes[idx].shape),
                });
            }
        }
        let xv = &self.nodes[ix].data;
        let gv = &self.nodes[ig].data;
        let bv = &self.nodes[ib].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        Ok(self.push(shape, out, false, Op::LayerNorm { x: ix, gamma: ig, beta: ib, eps }))
    }

    /// Gathers `table` rows by id; output is [ids.len(), d].
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let it = self.check(table)?;
        let s = &self.nodes[it].shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_lookup",
                detail: format!("table must be rank 2, got {s:?}"),
            });
        }
        let (v, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "embedding_lookup",
                detail: "empty id list".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::InvalidArg {
                op: "embedding_lookup",
                detail: format!("id {bad} out of range for table with {v} rows"),
            });
        }
        let tv = &self.nodes[it].data;
        let mut out = vec![0.0; ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            out[t * d..(t + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, false, Op::Embedding { table: it, ids: ids.to_vec() }))
    }

    /// Concatenation of rank-2 tensors along axis 0 (stack rows) or
    /// axis 1 (widen rows).
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        if axis > 1 {
            return Err(TensorError::InvalidArg {
                op: "concat",
                detail: format!("axis must be 0 or 1, got {axis}"),
            });
        }
        let idxs: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        for &i in &idxs {
            if self.nodes[i].shape.len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("all inputs must be rank 2, got {:?}", self.nodes[i].shape),
                });
            }
        }
        let fixed_axis = 1 - axis;
        let fixed = self.nodes[idxs[0]].shape[fixed_axis];
        for &i in &idxs[1..] {
            if self.nodes[i].shape[fixed_axis] != fixed {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!(
                        "axis {fixed_axis} must agree across inputs: expected {fixed}, got {} in {:?}",
                        self.nodes[i].shape[fixed_axis], self.nodes[i].shape
                    ),
                });
            }
        }
        let total: usize = idxs.iter().map(|&i| self.nodes[i].shape[axis]).sum();
        let (r, c) = if axis == 0 { (total, fixed) } else { (fixed, total) };
        let mut out = vec![0.0; r * c];
        if axis == 0 {
            let mut row0 = 0;
            for &i in &idxs {
                let pr = self.nodes[i].shape[0];
                out[row0 * c..(row0 + pr) * c].copy_from_slice(&self.nodes[i].data);
                row0 += pr;
            }
        } else {
            let mut col0 = 0;
            for &i in &idxs {
                let pc = self.nodes[i].shape[1];
                for row in 0..r {
                    out[row * c + col0..row * c + col0 + pc]
                        .copy_from_slice(&self.nodes[i].data[row * pc..(row + 1) * pc]);
                }
                col0 += pc;
            }
        }
        Ok(self.push(vec![r, c], out, false, Op::Concat { parts: idxs, axis }))
    }

    /// Contiguous range [start, end) along one axis of a rank-2 tensor.
    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, end: usize) -> Result<TensorId> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].shape.clone();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                detail: format!("input must be rank 2, got {s:?}"),
            });
        }
        if axis > 1 {
            return Err(TensorError::InvalidArg {
                op: "slice",
                detail: format!("axis must be 0 or 1, got {axis}"),
            });
        }
        if start >= end || end > s[axis] {
            return Err(TensorError::InvalidArg {
                op: "slice",
                detail: format!("range {start}..{end} invalid for axis {axis} of length {}", s[axis]),
            });
        }
        let (r, c) = (s[0], s[1]);
        let x = &self.nodes[ia].data;
        let (shape, out) = if axis == 0 {
            (vec![end - start, c], x[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut o = vec![0.0; r * w];
            for i in 0..r {
                o[i * w..(i + 1) * w].copy_from_slice(&x[i * c + start..i * c + end]);
            }
            (vec![r, w], o)
        };
        Ok(self.push(shape, out, false, Op::Slice { a: ia, axis, start, end }))
    }

    /// Inverted dropout: each kept value is scaled by 1/(1-rate) so the
    /// expectation is unchanged. Rate 0 is the identity and records nothing.
    /// The mask comes from the tape's own seeded generator.
    pub fn dropout(&mut self, a: TensorId, rate: f64) -> Result<TensorId> {
        self.check(a)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArg {
                op: "dropout",
                detail: format!("rate must lie in [0, 1), got {rate}"),
            });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let ia = self.check(a)?;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[ia].data.len())
            .map(|_| if self.rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.nodes[ia].data.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, false, Op::Dropout { a: ia, mask }))
    }

    /// Mean token-level cross entropy of row logits against integer targets.
    /// Rows whose target equals `ignore` contribute neither loss nor
    /// gradient; if every row is ignored the batch is empty and that is an
    /// error rather than a NaN.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[i64], ignore: i64) -> Result<TensorId> {
        let il = self.check(logits)?;
        let shape = self.nodes[il].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits must be rank 2, got {shape:?}"),
            });
        }
        let (r, v) = (shape[0], shape[1]);
        if targets.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{r} logit rows but {} targets", targets.len()),
            });
        }
        for &t in targets {
            if t != ignore && (t < 0 || t as usize >= v) {
                return Err(TensorError::InvalidArg {
                    op: "cross_entropy",
                    detail: format!("target {t} out of range for {v} classes"),
                });
            }
        }
        let n_eff = targets.iter().filter(|&&t| t != ignore).count();
        if n_eff == 0 {
            return Err(TensorError::EmptyBatch);
        }
        let x = &self.nodes[il].data;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            let row = &x[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
        }
        let loss = total / n_eff as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            false,
            Op::CrossEntropy { logits: il, targets: targets.to_vec(), ignore, n_eff },
        ))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let ia = self.check(a)?;
        let s: f64 = self.nodes[ia].data.iter().sum();
        Ok(self.push(vec![1], vec![s], false, Op::SumAll { a: ia }))
    }

    // ── Backward ──────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every tensor
    /// created with `requires_grad`; intermediate gradients are propagated
    /// but not retained.
    pub fn backward(&self, loss: TensorId) -> Result<GradMap> {
        let il = self.check(loss)?;
        if self.nodes[il].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[il].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads);
            if self.nodes[i].requires_grad {
                grads[i] = Some(g);
            }
        }

        let mut out = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let (true, Some(g)) = (self.nodes[i].requires_grad, g) {
                out.insert(i, g);
            }
        }
        Ok(GradMap { gen: self.gen, grads: out })
    }

    fn accumulate_inputs(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_to = |grads: &mut [Option<Vec<f64>>], idx: usize, contrib: &[f64]| {
            let slot = grads[idx].get_or_insert_with(|| vec![0.0; self.nodes[idx].data.len()]);
            for (s, c) in slot.iter_mut().zip(contrib.iter()) {
                *s += c;
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let av = &self.nodes[*a].data;
                let bv = &self.nodes[*b].data;
                // dA[i][k] = sum_j g[i][j] * B[k][j]
                let mut da = vec![0.0; m * k];
                for r in 0..m {
                    for kk in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[r * n + j] * bv[kk * n + j];
                        }
                        da[r * k + kk] = s;
                    }
                }
                add_to(grads, *a, &da);
                // dB[k][j] += A[i][k] * g[i][j]
                let mut db = vec![0.0; k * n];
                for r in 0..m {
                    for kk in 0..k {
                        let aik = av[r * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        let grow = &g[r * n..(r + 1) * n];
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            drow[j] += aik * grow[j];
                        }
                    }
                }
                add_to(grads, *b, &db);
            }
            Op::Transpose { a } => {
                let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let mut da = vec![0.0; r * c];
                for x in 0..r {
                    for y in 0..c {
                        da[x * c + y] = g[y * r + x];
                    }
                }
                add_to(grads, *a, &da);
            }
            Op::Add { a, b, broadcast_b } => {
                add_to(grads, *a, g);
                if *broadcast_b {
                    let c = rows_cols(&self.nodes[*b].shape).1;
                    let rows = g.len() / c;
                    let mut db = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                    add_to(grads, *b, &db);
                } else {
                    add_to(grads, *b, g);
                }
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g.iter().zip(self.nodes[*b].data.iter()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(self.nodes[*a].data.iter()).map(|(x, y)| x * y).collect();
                add_to(grads, *a, &da);
                add_to(grads, *b, &db);
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_to(grads, *a, &da);
            }
            Op::Gelu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[*a].data.iter())
                    .map(|(gi, &x)| gi * gelu_bwd(x))
                    .collect();
                add_to(grads, *a, &da);
            }
            Op::Tanh { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].data.iter())
                    .map(|(gi, &t)| gi * (1.0 - t * t))
                    .collect();
                add_to(grads, *a, &da);
            }
            Op::Softmax { a } => {
                let (r, c) = rows_cols(&self.nodes[i].shape);
                let s = &self.nodes[i].data;
                let mut da = vec![0.0; r * c];
                for row in 0..r {
                    let sr = &s[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dot: f64 = sr.iter().zip(gr.iter()).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        da[row * c + j] = sr[j] * (gr[j] - dot);
                    }
                }
                add_to(grads, *a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = rows_cols(&self.nodes[*x].shape);
                let xv = &self.nodes[*x].data;
                let gv = &self.nodes[*gamma].data;
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for row in 0..r {
                    let xr = &xv[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let dy = gr[j] * gv[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                    }
                    let cn = c as f64;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let dy = gr[j] * gv[j];
                        dx[row * c + j] = inv * (dy - sum_dy / cn - xhat * sum_dy_xhat / cn);
                    }
                }
                add_to(grads, *x, &dx);
                add_to(grads, *gamma, &dgamma);
                add_to(grads, *beta, &dbeta);
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[*table].shape[1];
                let mut dt = vec![0.0; self.nodes[*table].data.len()];
                for (t, &id) in ids.iter().enumerate() {
                    let grow = &g[t * d..(t + 1) * d];
                    let trow = &mut dt[id * d..(id + 1) * d];
                    for j in 0..d {
                        trow[j] += grow[j];
                    }
                }
                add_to(grads, *table, &dt);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let c = self.nodes[i].shape[1];
                    let mut row0 = 0;
                    for &p in parts {
                        let pr = self.nodes[p].shape[0];
                        add_to(grads, p, &g[row0 * c..(row0 + pr) * c]);
                        row0 += pr;
                    }
                } else {
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut col0 = 0;
                    for &p in parts {
                        let pc = self.nodes[p].shape[1];
                        let mut dp = vec![0.0; r * pc];
                        for row in 0..r {
                            dp[row * pc..(row + 1) * pc]
                                .copy_from_slice(&g[row * c + col0..row * c + col0 + pc]);
                        }
                        add_to(grads, p, &dp);
                        col0 += pc;
                    }
                }
            }
            Op::Slice { a, axis, start, end } => {
                let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let mut da = vec![0.0; r * c];
                if *axis == 0 {
                    da[start * c..end * c].copy_from_slice(g);
                } else {
                    let w = end - start;
                    for row in 0..r {
                        da[row * c + start..row * c + end]
                            .copy_from_slice(&g[row * w..(row + 1) * w]);
                    }
                }
                add_to(grads, *a, &da);
            }
            Op::Dropout { a, mask } => {
                let da: Vec<f64> = g.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
                add_to(grads, *a, &da);
            }
            Op::CrossEntropy { logits, targets, ignore, n_eff } => {
                let (r, v) = (self.nodes[*logits].shape[0], self.nodes[*logits].shape[1]);
                let x = &self.nodes[*logits].data;
                let scale = g[0] / *n_eff as f64;
                let mut dl = vec![0.0; r * v];
                for (row, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    let xr = &x[row * v..(row + 1) * v];
                    let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    let dr = &mut dl[row * v..(row + 1) * v];
                    for j in 0..v {
                        let e = (xr[j] - m).exp();
                        dr[j] = e;
                        s += e;
                    }
                    let inv = 1.0 / s;
                    for j in 0..v {
                        dr[j] *= inv * scale;
                    }
                    dr[t as usize] -= scale;
                }
                add_to(grads, *logits, &dl);
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.nodes[*a].data.len()];
                add_to(grads, *a, &da);
            }
        }
    }

    // ── Generic dispatch ──────────────────────────────────────────────────

    /// Applies one of the named primitives. Arities and attributes are
    /// validated per kind; this is the uniform entry point used where ops
    /// are chosen by name rather than by call site.
    pub fn apply_primitive(
        &mut self,
        kind: PrimitiveKind,
        inputs: &[TensorId],
        attrs: &PrimitiveAttrs,
    ) -> Result<TensorId> {
        let arity = |want: usize| -> Result<()> {
            if inputs.len() != want {
                return Err(TensorError::InvalidArg {
                    op: "apply_primitive",
                    detail: format!("{kind:?} takes {want} inputs, got {}", inputs.len()),
                });
            }
            Ok(())
        };
        let need = |v: Option<usize>, what: &str| {
            v.ok_or_else(|| TensorError::InvalidArg {
                op: "apply_primitive",
                detail: format!("{kind:?} requires attr `{what}`"),
            })
        };
        match kind {
            PrimitiveKind::Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            PrimitiveKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            PrimitiveKind::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            PrimitiveKind::LayerNorm => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2], attrs.eps.unwrap_or(1e-5))
            }
            PrimitiveKind::Gelu => {
                arity(1)?;
                self.gelu(inputs[0])
            }
            PrimitiveKind::EmbeddingLookup => {
                arity(1)?;
                let ids = attrs.ids.as_ref().ok_or_else(|| TensorError::InvalidArg {
                    op: "apply_primitive",
                    detail: "EmbeddingLookup requires attr `ids`".into(),
                })?;
                self.embedding_lookup(inputs[0], ids)
            }
            PrimitiveKind::Concat => {
                if inputs.is_empty() {
                    return Err(TensorError::InvalidArg {
                        op: "apply_primitive",
                        detail: "Concat requires at least one input".into(),
                    });
                }
                self.concat(inputs, need(attrs.axis, "axis")?)
            }
            PrimitiveKind::Slice => {
                arity(1)?;
                self.slice(
                    inputs[0],
                    need(attrs.axis, "axis")?,
                    need(attrs.start, "start")?,
                    need(attrs.end, "end")?,
                )
            }
            PrimitiveKind::Dropout => {
                arity(1)?;
                let rate = attrs.rate.ok_or_else(|| TensorError::InvalidArg {
                    op: "apply_primitive",
                    detail: "Dropout requires attr `rate`".into(),
                })?;
                self.dropout(inputs[0], rate)
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PrimitiveKind {
    Matmul,
    Add,
    Mul,
    Softmax,
    LayerNorm,
    Gelu,
    EmbeddingLookup,
    Concat,
    Slice,
    Dropout,
}

impl FromStr for PrimitiveKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => PrimitiveKind::Matmul,
            "add" => PrimitiveKind::Add,
            "mul" => PrimitiveKind::Mul,
            "softmax" => PrimitiveKind::Softmax,
            "layer_norm" => PrimitiveKind::LayerNorm,
            "gelu" => PrimitiveKind::Gelu,
            "embedding_lookup" => PrimitiveKind::EmbeddingLookup,
            "concat" => PrimitiveKind::Concat,
            "slice" => PrimitiveKind::Slice,
            "dropout" => PrimitiveKind::Dropout,
            other => return Err(TensorError::UnsupportedOp(other.to_string())),
        })
    }
}

#[derive(Clone, Default, Debug)]
pub struct PrimitiveAttrs {
    pub axis: Option<usize>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub ids: Option<Vec<usize>>,
    pub rate: Option<f64>,
    pub eps: Option<f64>,
}

/// Row-major matmul, ikj order so the inner loop walks both rows
/// contiguously.
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Central-difference gradient of a scalar function of a flat vector.
    fn numerical_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + eps;
            let hi = f(&xp);
            xp[i] = x[i] - eps;
            let lo = f(&xp);
            xp[i] = x[i];
            g[i] = (hi - lo) / (2.0 * eps);
        }
        g
    }

    /// Relative error with a floor so near-zero gradients are judged on an
    /// absolute scale of 1e-6 at tolerance 1e-4.
    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
    }

    fn assert_grads_close(analytic: &[f64], numeric: &[f64], what: &str) {
        assert_eq!(analytic.len(), numeric.len(), "{what}: length");
        let worst = analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "{what}: max relative error {worst:.3e}");
    }

    fn rand_vec(rng: &mut crate::rng::SeededRng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.normal() * scale).collect()
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::rng::SeededRng::new(1);
        let (m, k, n) = (5, 4, 3);
        let a = rand_vec(&mut rng, m * k, 1.0);
        let b = rand_vec(&mut rng, k * n, 1.0);
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                want[i * n + j] = s;
            }
        }
        let mut tape = Tape::new();
        let ta = tape.leaf(&[m, k], a, false).unwrap();
        let tb = tape.leaf(&[k, n], b, false).unwrap();
        let tc = tape.matmul(ta, tb).unwrap();
        for (got, want) in tape.value(tc).unwrap().iter().zip(want.iter()) {
            assert!(approx(*got, *want, 1e-12));
        }
    }

    #[test]
    fn matmul_shape_error_names_axes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
        let b = tape.leaf(&[4, 5], vec![0.0; 20], false).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis 1") && msg.contains("axis 0"), "got: {msg}");
        assert!(msg.contains('3') && msg.contains('4'), "got: {msg}");
    }

    #[test]
    fn add_broadcasts_bias_row() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 3], vec![1., 2., 3., 4., 5., 6.], true).unwrap();
        let b = tape.leaf(&[3], vec![10., 20., 30.], true).unwrap();
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap(), &[11., 22., 33., 14., 25., 36.]);
        let s = tape.sum_all(c).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_square_grad_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[4], vec![1.0, -2.0, 0.5, 3.0], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_huge_logits() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&[2, 3], vec![1e8, 2e8, 3e8, -1e8, 0.0, 1e-12], false)
            .unwrap();
        let s = tape.softmax(x).unwrap();
        let v = tape.value(s).unwrap();
        for row in 0..2 {
            let sum: f64 = v[row * 3..(row + 1) * 3].iter().sum();
            assert!(approx(sum, 1.0, 1e-12), "row {row} sums to {sum}");
            assert!(v[row * 3..(row + 1) * 3].iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 4], vec![1., 2., 3., 4., -5., 0., 5., 10.], false).unwrap();
        let g = tape.leaf(&[4], vec![1.0; 4], false).unwrap();
        let b = tape.leaf(&[4], vec![0.0; 4], false).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).unwrap();
        for row in 0..2 {
            let r = &v[row * 4..(row + 1) * 4];
            let mean: f64 = r.iter().sum::<f64>() / 4.0;
            let var: f64 = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(approx(mean, 0.0, 1e-9));
            assert!(approx(var, 1.0, 1e-3));
        }
    }

    #[test]
    fn layer_norm_constant_row_stays_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 4], vec![7.0; 4], false).unwrap();
        let g = tape.leaf(&[4], vec![1.0; 4], false).unwrap();
        let b = tape.leaf(&[4], vec![0.0; 4], false).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embedding_picks_rows_and_rejects_bad_ids() {
        let mut tape = Tape::new();
        let table = tape.leaf(&[3, 2], vec![0., 1., 10., 11., 20., 21.], true).unwrap();
        let e = tape.embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).unwrap(), &[20., 21., 0., 1., 20., 21.]);
        assert!(matches!(
            tape.embedding_lookup(table, &[3]),
            Err(TensorError::InvalidArg { .. })
        ));
        // Repeated ids accumulate gradient into the same row.
        let s = tape.sum_all(e).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(table).unwrap(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn concat_slice_round_trip_both_axes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 2], vec![1., 2., 3., 4.], false).unwrap();
        let b = tape.leaf(&[2, 3], vec![5., 6., 7., 8., 9., 10.], false).unwrap();
        let w = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(w).unwrap(), &[2, 5]);
        assert_eq!(tape.value(w).unwrap(), &[1., 2., 5., 6., 7., 3., 4., 8., 9., 10.]);
        let back = tape.slice(w, 1, 2, 5).unwrap();
        assert_eq!(tape.value(back).unwrap(), tape.value(b).unwrap());

        let c = tape.leaf(&[1, 2], vec![100., 200.], false).unwrap();
        let tall = tape.concat(&[a, c], 0).unwrap();
        assert_eq!(tape.shape(tall).unwrap(), &[3, 2]);
        let back0 = tape.slice(tall, 0, 0, 2).unwrap();
        assert_eq!(tape.value(back0).unwrap(), tape.value(a).unwrap());
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[3], vec![1., 2., 3.], true).unwrap();
        let y = tape.dropout(x, 0.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_masks_are_seed_deterministic() {
        let run = |seed: u64| -> Vec<f64> {
            let mut tape = Tape::with_seed(seed);
            let x = tape.leaf(&[1000], vec![1.0; 1000], false).unwrap();
            let y = tape.dropout(x, 0.25).unwrap();
            tape.value(y).unwrap().to_vec()
        };
        let a = run(42);
        let b = run(42);
        let c = run(43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let zeros = a.iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&zeros), "dropped {zeros}/1000 at rate 0.25");
        for &v in a.iter().filter(|&&v| v != 0.0) {
            assert!(approx(v, 1.0 / 0.75, 1e-12));
        }
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![1., 2.], false).unwrap();
        assert!(tape.dropout(x, 1.0).is_err());
        assert!(tape.dropout(x, -0.1).is_err());
    }

    #[test]
    fn cross_entropy_matches_scalar_recomputation() {
        let logits = vec![0.2, -1.3, 0.9, 2.0, 0.0, -0.5];
        let targets = [2i64, 0];
        let mut tape = Tape::new();
        let l = tape.leaf(&[2, 3], logits.clone(), false).unwrap();
        let loss = tape.cross_entropy(l, &targets, -1).unwrap();
        // Direct -log softmax per row, averaged.
        let mut want = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            let r = &logits[row * 3..(row + 1) * 3];
            let z: f64 = r.iter().map(|x| x.exp()).sum();
            want += -(r[t as usize].exp() / z).ln();
        }
        want /= 2.0;
        assert!(approx(tape.scalar(loss).unwrap(), want, 1e-12));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut tape = Tape::new();
        let v = 7;
        let l = tape.leaf(&[3, v], vec![0.4; 3 * v], false).unwrap();
        let loss = tape.cross_entropy(l, &[0, 3, 6], -1).unwrap();
        assert!(approx(tape.scalar(loss).unwrap(), (v as f64).ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_ignore_index_drops_rows() {
        let mut tape = Tape::new();
        let l = tape.leaf(&[2, 3], vec![5., 0., 0., 0., 5., 0.], false).unwrap();
        let full = tape.cross_entropy(l, &[0, -1], -1).unwrap();
        let only_first = tape.scalar(full).unwrap();
        let l2 = tape.slice(l, 0, 0, 1).unwrap();
        let alone = tape.cross_entropy(l2, &[0], -1).unwrap();
        assert!(approx(only_first, tape.scalar(alone).unwrap(), 1e-12));
    }

    #[test]
    fn cross_entropy_all_ignored_is_an_error_not_a_nan() {
        let mut tape = Tape::new();
        let l = tape.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
        assert!(matches!(
            tape.cross_entropy(l, &[-1, -1], -1),
            Err(TensorError::EmptyBatch)
        ));
    }

    #[test]
    fn backward_of_detached_id_fails() {
        let mut a = Tape::new();
        let x = a.leaf(&[1], vec![1.0], true).unwrap();
        let b = Tape::new();
        assert!(matches!(b.backward(x), Err(TensorError::DetachedGraph)));
    }

    #[test]
    fn backward_of_non_scalar_fails() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    // ── Finite-difference checks per op ──────────────────────────────────

    #[test]
    fn grad_check_matmul_softmax_cross_entropy_chain() {
        let mut rng = crate::rng::SeededRng::new(7);
        let (m, k, n) = (4, 5, 6);
        let a0 = rand_vec(&mut rng, m * k, 0.5);
        let b0 = rand_vec(&mut rng, k * n, 0.5);
        let targets = [1i64, 5, 0, 3];

        let loss_of = |av: &[f64], bv: &[f64]| -> f64 {
            let mut t = Tape::new();
            let a = t.leaf(&[m, k], av.to_vec(), false).unwrap();
            let b = t.leaf(&[k, n], bv.to_vec(), false).unwrap();
            let c = t.matmul(a, b).unwrap();
            let loss = t.cross_entropy(c, &targets, -1).unwrap();
            t.scalar(loss).unwrap()
        };

        let mut tape = Tape::new();
        let a = tape.leaf(&[m, k], a0.clone(), true).unwrap();
        let b = tape.leaf(&[k, n], b0.clone(), true).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.cross_entropy(c, &targets, -1).unwrap();
        let grads = tape.backward(loss).unwrap();

        let na = numerical_grad(&mut |x| loss_of(x, &b0), &a0, 1e-5);
        let nb = numerical_grad(&mut |x| loss_of(&a0, x), &b0, 1e-5);
        assert_grads_close(grads.get(a).unwrap(), &na, "matmul lhs");
        assert_grads_close(grads.get(b).unwrap(), &nb, "matmul rhs");
    }

    #[test]
    fn grad_check_layer_norm_all_inputs() {
        let mut rng = crate::rng::SeededRng::new(11);
        let (r, c) = (3, 6);
        let x0 = rand_vec(&mut rng, r * c, 1.0);
        let g0 = rand_vec(&mut rng, c, 0.5).iter().map(|v| v + 1.0).collect::<Vec<_>>();
        let b0 = rand_vec(&mut rng, c, 0.5);
        let w0 = rand_vec(&mut rng, r * c, 1.0);

        let loss_of = |xv: &[f64], gv: &[f64], bv: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(&[r, c], xv.to_vec(), false).unwrap();
            let g = t.leaf(&[c], gv.to_vec(), false).unwrap();
            let b = t.leaf(&[c], bv.to_vec(), false).unwrap();
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            let w = t.leaf(&[r, c], w0.clone(), false).unwrap();
            let p = t.mul(y, w).unwrap();
            let s = t.sum_all(p).unwrap();
            t.scalar(s).unwrap()
        };

        let mut tape = Tape::new();
        let x = tape.leaf(&[r, c], x0.clone(), true).unwrap();
        let g = tape.leaf(&[c], g0.clone(), true).unwrap();
        let b = tape.leaf(&[c], b0.clone(), true).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let w = tape.leaf(&[r, c], w0.clone(), false).unwrap();
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum_all(p).unwrap();
        let grads = tape.backward(s).unwrap();

        assert_grads_close(
            grads.get(x).unwrap(),
            &numerical_grad(&mut |v| loss_of(v, &g0, &b0), &x0, 1e-5),
            "layer_norm x",
        );
        assert_grads_close(
            grads.get(g).unwrap(),
            &numerical_grad(&mut |v| loss_of(&x0, v, &b0), &g0, 1e-5),
            "layer_norm gamma",
        );
        assert_grads_close(
            grads.get(b).unwrap(),
            &numerical_grad(&mut |v| loss_of(&x0, &g0, v), &b0, 1e-5),
            "layer_norm beta",
        );
    }

    #[test]
    fn grad_check_gelu_tanh_scale() {
        let mut rng = crate::rng::SeededRng::new(13);
        let x0 = rand_vec(&mut rng, 12, 1.5);
        let w0 = rand_vec(&mut rng, 12, 1.0);

        let loss_of = |xv: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(&[12], xv.to_vec(), false).unwrap();
            let g = t.gelu(x).unwrap();
            let h = t.tanh(g).unwrap();
            let sc = t.scale(h, 1.7).unwrap();
            let w = t.leaf(&[12], w0.clone(), false).unwrap();
            let p = t.mul(sc, w).unwrap();
            let s = t.sum_all(p).unwrap();
            t.scalar(s).unwrap()
        };

        let mut tape = Tape::new();
        let x = tape.leaf(&[12], x0.clone(), true).unwrap();
        let g = tape.gelu(x).unwrap();
        let h = tape.tanh(g).unwrap();
        let sc = tape.scale(h, 1.7).unwrap();
        let w = tape.leaf(&[12], w0.clone(), false).unwrap();
        let p = tape.mul(sc, w).unwrap();
        let s = tape.sum_all(p).unwrap();
        let grads = tape.backward(s).unwrap();

        assert_grads_close(
            grads.get(x).unwrap(),
            &numerical_grad(&mut |v| loss_of(v), &x0, 1e-5),
            "gelu/tanh/scale",
        );
    }

    #[test]
    fn grad_check_concat_slice_transpose_embedding() {
        let mut rng = crate::rng::SeededRng::new(17);
        let table0 = rand_vec(&mut rng, 5 * 4, 0.8);
        let ids = vec![0usize, 3, 3, 1];
        let w0 = rand_vec(&mut rng, 4 * 4, 1.0);

        let loss_of = |tv: &[f64]| -> f64 {
            let mut t = Tape::new();
            let table = t.leaf(&[5, 4], tv.to_vec(), false).unwrap();
            let e = t.embedding_lookup(table, &ids).unwrap(); // [4,4]
            let left = t.slice(e, 1, 0, 2).unwrap();
            let right = t.slice(e, 1, 2, 4).unwrap();
            let swapped = t.concat(&[right, left], 1).unwrap(); // [4,4]
            let tr = t.transpose(swapped).unwrap();
            let w = t.leaf(&[4, 4], w0.clone(), false).unwrap();
            let p = t.matmul(tr, w).unwrap();
            let sm = t.softmax(p).unwrap();
            let loss = t.cross_entropy(sm, &[0, 1, 2, 3], -1).unwrap();
            t.scalar(loss).unwrap()
        };

        let mut tape = Tape::new();
        let table = tape.leaf(&[5, 4], table0.clone(), true).unwrap();
        let e = tape.embedding_lookup(table, &ids).unwrap();
        let left = tape.slice(e, 1, 0, 2).unwrap();
        let right = tape.slice(e, 1, 2, 4).unwrap();
        let swapped = tape.concat(&[right, left], 1).unwrap();
        let tr = tape.transpose(swapped).unwrap();
        let w = tape.leaf(&[4, 4], w0.clone(), false).unwrap();
        let p = tape.matmul(tr, w).unwrap();
        let sm = tape.softmax(p).unwrap();
        let loss = tape.cross_entropy(sm, &[0, 1, 2, 3], -1).unwrap();
        let grads = tape.backward(loss).unwrap();

        assert_grads_close(
            grads.get(table).unwrap(),
            &numerical_grad(&mut |v| loss_of(v), &table0, 1e-5),
            "embedding/slice/concat/transpose",
        );
    }

    #[test]
    fn apply_primitive_dispatch_matches_direct_calls() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 2], vec![1., 2., 3., 4.], false).unwrap();
        let b = tape.leaf(&[2, 2], vec![5., 6., 7., 8.], false).unwrap();
        let via_enum = tape
            .apply_primitive(PrimitiveKind::Matmul, &[a, b], &PrimitiveAttrs::default())
            .unwrap();
        let direct = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(via_enum).unwrap(), tape.value(direct).unwrap());

        let attrs = PrimitiveAttrs { axis: Some(1), start: Some(0), end: Some(1), ..Default::default() };
        let sl = tape.apply_primitive(PrimitiveKind::Slice, &[a], &attrs).unwrap();
        assert_eq!(tape.value(sl).unwrap(), &[1., 3.]);
    }

    #[test]
    fn unknown_primitive_kind_is_an_unsupported_op_error() {
        let err = "batched_matmul".parse::<PrimitiveKind>().unwrap_err();
        assert!(matches!(err, TensorError::UnsupportedOp(ref k) if k == "batched_matmul"));
    }

    #[test]
    fn apply_primitive_arity_is_validated() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2], vec![1., 2.], false).unwrap();
        assert!(tape
            .apply_primitive(PrimitiveKind::Matmul, &[a], &PrimitiveAttrs::default())
            .is_err());
    }

    #[test]
    fn causal_mask_blocks_future_and_admits_memory() {
        let mut tape = Tape::new();
        let m = tape.causal_mask(3, 2).unwrap();
        let v = tape.value(m).unwrap();
        let cols = 5;
        for t in 0..3 {
            for j in 0..cols {
                let open = j < 2 + t + 1;
                let got = v[t * cols + j];
                assert_eq!(got == 0.0, open, "row {t} col {j}");
            }
        }
    }
}
