//! Reverse-mode autodiff on a linear tape.
//!
//! A `Graph` owns one forward/backward pass: operations append nodes in
//! topological order, `backward` replays the tape in reverse. Parameters are
//! staged in from a [`ParamStore`] by name and their gradients are read back
//! with [`Graph::param_grads`]. Every op output is checked for NaN/Inf.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul,
    Transpose,
    Add,
    AddBias,
    Mul,
    Scale(f64),
    Gelu,
    SoftmaxLast,
    LayerNorm { eps: f64 },
    ConcatRows { splits: Vec<usize> },
    ConcatCols { splits: Vec<usize> },
    NarrowRows { start: usize },
    NarrowCols { start: usize, full: usize },
    Gather { indices: Vec<usize> },
    Embed { ids: Vec<usize> },
    SumAll,
    CrossEntropyMasked { targets: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    param_name: Option<String>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Detaches a node's value into a plain tensor.
    pub fn detach(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    fn check_finite(op: &str, data: &[f64]) -> Result<()> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{op} output")));
        }
        Ok(())
    }

    fn needs(&self, parents: &[NodeId]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].needs_grad)
    }

    fn emit(&mut self, op: Op, parents: Vec<NodeId>, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        Self::check_finite(op_name(&op), &data)?;
        let needs_grad = self.needs(&parents);
        Ok(self.push(Node { op, parents, shape, data, grad: None, needs_grad, param_name: None }))
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    /// Non-differentiable input value.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            parents: vec![],
            shape: t.shape.clone(),
            data: t.data.clone(),
            grad: None,
            needs_grad: false,
            param_name: None,
        })
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Stages a named parameter. Frozen parameters are staged without
    /// gradient tracking.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let t = store.get(name)?;
        let needs_grad = t.requires_grad && !store.is_frozen(name);
        Ok(self.push(Node {
            op: Op::Leaf,
            parents: vec![],
            shape: t.shape.clone(),
            data: t.data.clone(),
            grad: None,
            needs_grad,
            param_name: Some(name.to_string()),
        }))
    }

    fn dims2(&self, id: NodeId) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dim(format!("expected rank-2 operand, got shape {s:?}"))),
        }
    }

    // ── Arithmetic ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a)?;
        let (kb, n) = self.dims2(b)?;
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let out = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        self.emit(Op::Matmul, vec![a, b], vec![m, n], out)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a)?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.emit(Op::Transpose, vec![a], vec![c, r], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dim(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.emit(Op::Add, vec![a, b], shape, out)
    }

    /// Adds a length-`c` row vector to every row of `a[r x c]`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a)?;
        let bshape = &self.nodes[bias.0].shape;
        if bshape.iter().product::<usize>() != c {
            return Err(Error::Dim(format!("bias shape {bshape:?} does not span {c} columns")));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = self.nodes[a.0].data[i * c + j] + self.nodes[bias.0].data[j];
            }
        }
        self.emit(Op::AddBias, vec![a, bias], vec![r, c], out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dim(format!(
                "mul shapes disagree: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.emit(Op::Mul, vec![a, b], shape, out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.emit(Op::Scale(c), vec![a], shape, out)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.emit(Op::Gelu, vec![a], shape, out)
    }

    // ── Normalization ────────────────────────────────────────────────────

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let n = *shape
            .last()
            .ok_or_else(|| Error::Dim("softmax over rank-0 tensor".into()))?;
        if n == 0 {
            return Err(Error::Dim("softmax over empty last dimension".into()));
        }
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for (row_out, row_in) in out.chunks_mut(n).zip(src.chunks(n)) {
            softmax_row(row_in, row_out);
        }
        self.emit(Op::SoftmaxLast, vec![a], shape, out)
    }

    /// Per-slice standardization over the last dimension followed by the
    /// affine `gain * xhat + bias`. Population variance, `eps` inside the
    /// square root.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Dim("layer_norm over rank-0 tensor".into()))?;
        if self.nodes[gain.0].data.len() != d || self.nodes[bias.0].data.len() != d {
            return Err(Error::Dim(format!(
                "layer_norm gain/bias must have length {d}, got {} and {}",
                self.nodes[gain.0].data.len(),
                self.nodes[bias.0].data.len()
            )));
        }
        let src = &self.nodes[a.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; src.len()];
        for (row_out, row_in) in out.chunks_mut(d).zip(src.chunks(d)) {
            let (mean, inv_std) = moments(row_in, eps);
            for j in 0..d {
                row_out[j] = (row_in[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        self.emit(Op::LayerNorm { eps }, vec![a, gain, bias], shape, out)
    }

    // ── Shape movement ───────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, c0) = self.dims2(parts[0])?;
        let mut splits = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != c0 {
                return Err(Error::Dim(format!("concat_rows column mismatch: {c} vs {c0}")));
            }
            splits.push(r);
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        self.emit(Op::ConcatRows { splits }, parts.to_vec(), vec![rows, c0], out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (r0, _) = self.dims2(parts[0])?;
        let mut splits = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != r0 {
                return Err(Error::Dim(format!("concat_cols row mismatch: {r} vs {r0}")));
            }
            splits.push(c);
            cols += c;
        }
        let mut out = vec![0.0; r0 * cols];
        let mut offset = 0;
        for (&p, &c) in parts.iter().zip(&splits) {
            let src = &self.nodes[p.0].data;
            for i in 0..r0 {
                out[i * cols + offset..i * cols + offset + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.emit(Op::ConcatCols { splits }, parts.to_vec(), vec![r0, cols], out)
    }

    pub fn narrow_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(a)?;
        if start + len > r {
            return Err(Error::Dim(format!("narrow_rows {start}..{} out of {r} rows", start + len)));
        }
        let out = self.nodes[a.0].data[start * c..(start + len) * c].to_vec();
        self.emit(Op::NarrowRows { start }, vec![a], vec![len, c], out)
    }

    pub fn narrow_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(a)?;
        if start + len > c {
            return Err(Error::Dim(format!("narrow_cols {start}..{} out of {c} columns", start + len)));
        }
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.emit(Op::NarrowCols { start, full: c }, vec![a], vec![r, len], out)
    }

    /// Element gather: `out[i] = a.flat[indices[i]]`, reshaped to `out_shape`.
    /// Used for patch extraction and other index rearrangements.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>, out_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(Error::Dim(format!(
                "gather output shape {out_shape:?} does not hold {} indices",
                indices.len()
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(indices.len());
        for &ix in &indices {
            let v = *src
                .get(ix)
                .ok_or_else(|| Error::Dim(format!("gather index {ix} out of {}", src.len())))?;
            out.push(v);
        }
        self.emit(Op::Gather { indices }, vec![a], out_shape, out)
    }

    /// Row lookup into an embedding table `[vocab x d]`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims2(table)?;
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Dim(format!("token id {id} out of vocabulary size {v}")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.emit(Op::Embed { ids: ids.to_vec() }, vec![table], vec![ids.len(), d], out)
    }

    // ── Reductions ───────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.emit(Op::SumAll, vec![a], vec![1], vec![s])
    }

    /// Mean cross-entropy of `logits[t]` against `targets[t]` over the
    /// positions where `mask[t]` holds.
    pub fn cross_entropy_masked(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (t, v) = self.dims2(logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dim(format!(
                "targets/mask length must be {t}, got {}/{}",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::Contract("cross entropy with empty response mask".into()));
        }
        let src = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for row in 0..t {
            if !mask[row] {
                continue;
            }
            let tgt = targets[row];
            if tgt >= v {
                return Err(Error::Dim(format!("target id {tgt} out of vocabulary size {v}")));
            }
            let slice = &src[row * v..(row + 1) * v];
            total -= log_softmax_at(slice, tgt);
        }
        let loss = total / count as f64;
        self.emit(
            Op::CrossEntropyMasked { targets: targets.to_vec(), mask: mask.to_vec() },
            vec![logits],
            vec![1],
            vec![loss],
        )
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate across
    /// multiple uses of a node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.step_backward(i)?;
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, contribution: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (dst, src) in grad.iter_mut().zip(contribution) {
            *dst += src;
        }
    }

    fn step_backward(&mut self, i: usize) -> Result<()> {
        let g = self.nodes[i].grad.clone().expect("grad checked by caller");
        let parents = self.nodes[i].parents.clone();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul => {
                let (m, k) = self.dims2(parents[0])?;
                let (_, n) = self.dims2(parents[1])?;
                if self.nodes[parents[0].0].needs_grad {
                    // dA = dC . B^T
                    let b = &self.nodes[parents[1].0].data;
                    let mut da = vec![0.0; m * k];
                    for i2 in 0..m {
                        for j in 0..n {
                            let gij = g[i2 * n + j];
                            if gij != 0.0 {
                                for p in 0..k {
                                    da[i2 * k + p] += gij * b[p * n + j];
                                }
                            }
                        }
                    }
                    self.add_grad(parents[0], &da);
                }
                if self.nodes[parents[1].0].needs_grad {
                    // dB = A^T . dC
                    let a = &self.nodes[parents[0].0].data;
                    let mut db = vec![0.0; k * n];
                    for i2 in 0..m {
                        for p in 0..k {
                            let aip = a[i2 * k + p];
                            if aip != 0.0 {
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i2 * n + j];
                                }
                            }
                        }
                    }
                    self.add_grad(parents[1], &db);
                }
            }
            Op::Transpose => {
                let (c, r) = { let s = &self.nodes[i].shape; (s[0], s[1]) };
                let mut dp = vec![0.0; r * c];
                for j in 0..c {
                    for i2 in 0..r {
                        dp[i2 * c + j] = g[j * r + i2];
                    }
                }
                self.add_grad(parents[0], &dp);
            }
            Op::Add => {
                self.add_grad(parents[0], &g);
                self.add_grad(parents[1], &g);
            }
            Op::AddBias => {
                let (r, c) = { let s = &self.nodes[i].shape; (s[0], s[1]) };
                self.add_grad(parents[0], &g);
                if self.nodes[parents[1].0].needs_grad {
                    let mut db = vec![0.0; c];
                    for i2 in 0..r {
                        for j in 0..c {
                            db[j] += g[i2 * c + j];
                        }
                    }
                    self.add_grad(parents[1], &db);
                }
            }
            Op::Mul => {
                if self.nodes[parents[0].0].needs_grad {
                    let other = &self.nodes[parents[1].0].data;
                    let da: Vec<f64> = g.iter().zip(other).map(|(gi, o)| gi * o).collect();
                    self.add_grad(parents[0], &da);
                }
                if self.nodes[parents[1].0].needs_grad {
                    let other = &self.nodes[parents[0].0].data;
                    let db: Vec<f64> = g.iter().zip(other).map(|(gi, o)| gi * o).collect();
                    self.add_grad(parents[1], &db);
                }
            }
            Op::Scale(c) => {
                let c = *c;
                let dp: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.add_grad(parents[0], &dp);
            }
            Op::Gelu => {
                let x = &self.nodes[parents[0].0].data;
                let dp: Vec<f64> = g.iter().zip(x).map(|(gi, &xi)| gi * gelu_grad(xi)).collect();
                self.add_grad(parents[0], &dp);
            }
            Op::SoftmaxLast => {
                let n = *self.nodes[i].shape.last().expect("rank checked at emit");
                let y = &self.nodes[i].data;
                let mut dp = vec![0.0; y.len()];
                for (row, (y_row, g_row)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = y_row.iter().zip(g_row).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        dp[row * n + j] = y_row[j] * (g_row[j] - dot);
                    }
                }
                self.add_grad(parents[0], &dp);
            }
            Op::LayerNorm { eps } => {
                let eps = *eps;
                let d = *self.nodes[i].shape.last().expect("rank checked at emit");
                let x = self.nodes[parents[0].0].data.clone();
                let gain = self.nodes[parents[1].0].data.clone();
                let mut dx = vec![0.0; x.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (row, (x_row, g_row)) in x.chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mean, inv_std) = moments(x_row, eps);
                    let xhat: Vec<f64> = x_row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let gg: Vec<f64> = g_row.iter().zip(&gain).map(|(gi, ga)| gi * ga).collect();
                    let mean_gg: f64 = gg.iter().sum::<f64>() / d as f64;
                    let mean_gg_xhat: f64 =
                        gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[row * d + j] = (gg[j] - mean_gg - xhat[j] * mean_gg_xhat) * inv_std;
                        dgain[j] += g_row[j] * xhat[j];
                        dbias[j] += g_row[j];
                    }
                }
                self.add_grad(parents[0], &dx);
                self.add_grad(parents[1], &dgain);
                self.add_grad(parents[2], &dbias);
            }
            Op::ConcatRows { splits } => {
                let c = self.nodes[i].shape[1];
                let splits = splits.clone();
                let mut offset = 0;
                for (&p, &r) in parents.iter().zip(&splits) {
                    self.add_grad(p, &g[offset * c..(offset + r) * c]);
                    offset += r;
                }
            }
            Op::ConcatCols { splits } => {
                let (rows, cols) = { let s = &self.nodes[i].shape; (s[0], s[1]) };
                let splits = splits.clone();
                let mut offset = 0;
                for (&p, &c) in parents.iter().zip(&splits) {
                    if self.nodes[p.0].needs_grad {
                        let mut dp = vec![0.0; rows * c];
                        for i2 in 0..rows {
                            dp[i2 * c..(i2 + 1) * c]
                                .copy_from_slice(&g[i2 * cols + offset..i2 * cols + offset + c]);
                        }
                        self.add_grad(p, &dp);
                    }
                    offset += c;
                }
            }
            Op::NarrowRows { start } => {
                let start = *start;
                let (len, c) = { let s = &self.nodes[i].shape; (s[0], s[1]) };
                let full_len = self.nodes[parents[0].0].data.len();
                let mut dp = vec![0.0; full_len];
                dp[start * c..(start + len) * c].copy_from_slice(&g);
                self.add_grad(parents[0], &dp);
            }
            Op::NarrowCols { start, full } => {
                let (start, full) = (*start, *full);
                let (r, len) = { let s = &self.nodes[i].shape; (s[0], s[1]) };
                let mut dp = vec![0.0; r * full];
                for i2 in 0..r {
                    dp[i2 * full + start..i2 * full + start + len]
                        .copy_from_slice(&g[i2 * len..(i2 + 1) * len]);
                }
                self.add_grad(parents[0], &dp);
            }
            Op::Gather { indices } => {
                let indices = indices.clone();
                let mut dp = vec![0.0; self.nodes[parents[0].0].data.len()];
                for (pos, &ix) in indices.iter().enumerate() {
                    dp[ix] += g[pos];
                }
                self.add_grad(parents[0], &dp);
            }
            Op::Embed { ids } => {
                let ids = ids.clone();
                let d = self.nodes[i].shape[1];
                let mut dp = vec![0.0; self.nodes[parents[0].0].data.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dp[id * d + j] += g[row * d + j];
                    }
                }
                self.add_grad(parents[0], &dp);
            }
            Op::SumAll => {
                let dp = vec![g[0]; self.nodes[parents[0].0].data.len()];
                self.add_grad(parents[0], &dp);
            }
            Op::CrossEntropyMasked { targets, mask } => {
                let targets = targets.clone();
                let mask = mask.clone();
                let (t, v) = self.dims2(parents[0])?;
                let count = mask.iter().filter(|m| **m).count() as f64;
                let src = self.nodes[parents[0].0].data.clone();
                let mut dp = vec![0.0; t * v];
                for row in 0..t {
                    if !mask[row] {
                        continue;
                    }
                    let slice = &src[row * v..(row + 1) * v];
                    let mut probs = vec![0.0; v];
                    softmax_row(slice, &mut probs);
                    for j in 0..v {
                        let indicator = if j == targets[row] { 1.0 } else { 0.0 };
                        dp[row * v + j] = g[0] * (probs[j] - indicator) / count;
                    }
                }
                self.add_grad(parents[0], &dp);
            }
        }
        Ok(())
    }

    /// Gradients of every tracked staged parameter, summed across stagings.
    /// Tracked parameters that the loss never touched report exact zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for node in &self.nodes {
            let Some(name) = &node.param_name else { continue };
            if !node.needs_grad {
                continue;
            }
            let entry = grads
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; node.data.len()]);
            if let Some(g) = &node.grad {
                for (dst, src) in entry.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        grads
    }

    /// Writes accumulated gradients back into the store's tensors.
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in self.param_grads() {
            store.get_mut(&name)?.accumulate_grad(&g)?;
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul => "matmul",
        Op::Transpose => "transpose",
        Op::Add => "add",
        Op::AddBias => "add_bias",
        Op::Mul => "mul",
        Op::Scale(_) => "scale",
        Op::Gelu => "gelu",
        Op::SoftmaxLast => "softmax_last",
        Op::LayerNorm { .. } => "layer_norm",
        Op::ConcatRows { .. } => "concat_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::NarrowRows { .. } => "narrow_rows",
        Op::NarrowCols { .. } => "narrow_cols",
        Op::Gather { .. } => "gather",
        Op::Embed { .. } => "embed",
        Op::SumAll => "sum_all",
        Op::CrossEntropyMasked { .. } => "cross_entropy",
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn graph_with(shape: Vec<usize>, data: Vec<f64>) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let id = g.input(shape, data).unwrap();
        (g, id)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.leaf(&Tensor::eye(2));
        let a = g.input(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.input(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.input(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.input(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.input(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn matmul_associative_on_random_chains() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (m, k, n, q) = (3, 4, 5, 2);
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..n * q).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let (na, nb, nc) = (
                g.input(vec![m, k], a).unwrap(),
                g.input(vec![k, n], b).unwrap(),
                g.input(vec![n, q], c).unwrap(),
            );
            let ab = g.matmul(na, nb).unwrap();
            let left = g.matmul(ab, nc).unwrap();
            let bc = g.matmul(nb, nc).unwrap();
            let right = g.matmul(na, bc).unwrap();
            for (l, r) in g.data(left).iter().zip(g.data(right)) {
                let rel = (l - r).abs() / r.abs().max(1e-8);
                assert!(rel < 1e-10, "associativity violated: {l} vs {r}");
            }
        }
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let (mut g, x) = graph_with(vec![3], vec![0.0, 0.0, 0.0]);
        let y = g.softmax_last(x).unwrap();
        for v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let (mut g, x) = graph_with(vec![2], vec![1000.0, 0.0]);
        let y = g.softmax_last(x).unwrap();
        assert!(g.data(y).iter().all(|v| v.is_finite()));
        assert!((g.data(y)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // Independent evaluation of e^{x_i} / sum e^{x_j} without the
        // max-subtraction trick.
        let x = [1.0f64, 2.0, 3.0];
        let denom: f64 = x.iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = x.iter().map(|v| v.exp() / denom).collect();
        let frozen = [0.09003057, 0.24472847, 0.66524096];

        let (mut g, n) = graph_with(vec![3], x.to_vec());
        let y = g.softmax_last(n).unwrap();
        for ((got, oracle), fr) in g.data(y).iter().zip(&expect).zip(&frozen) {
            assert!((got - oracle).abs() < 1e-15);
            assert!((got - fr).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_translation_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(1..8usize);
            let xs: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c: f64 = rng.gen_range(-100.0..100.0);
            let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
            let (mut g, a) = graph_with(vec![4, n], xs);
            let ya = g.softmax_last(a).unwrap();
            let b = g.input(vec![4, n], shifted).unwrap();
            let yb = g.softmax_last(b).unwrap();
            for row in g.data(ya).chunks(n) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
            for (u, v) in g.data(ya).iter().zip(g.data(yb)) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        // Constant slice: eps dominates the zero variance, output is zero.
        let mut g = Graph::new();
        let x = g.input(vec![1, 4], vec![3.0; 4]).unwrap();
        let gain = g.input(vec![4], vec![1.0; 4]).unwrap();
        let bias = g.input(vec![4], vec![0.0; 4]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.data(y).iter().all(|v| v.abs() < 1e-9));

        // [1,3] standardizes to [-1,1] as eps tends to zero.
        let mut g = Graph::new();
        let x = g.input(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let gain = g.input(vec![2], vec![1.0; 2]).unwrap();
        let bias = g.input(vec![2], vec![0.0; 2]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
        assert!((g.data(y)[0] + 1.0).abs() < 1e-7);
        assert!((g.data(y)[1] - 1.0).abs() < 1e-7);

        // Zero gain: output equals broadcast bias.
        let mut g = Graph::new();
        let x = g.input(vec![2, 2], vec![1.0, 5.0, -2.0, 0.5]).unwrap();
        let gain = g.input(vec![2], vec![0.0; 2]).unwrap();
        let bias = g.input(vec![2], vec![7.0, -3.0]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.data(y), &[7.0, -3.0, 7.0, -3.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut store = ParamStore::new();
        store
            .insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_grad_is_exact_zero() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        store.insert("unused", Tensor::new(vec![3], vec![1.0; 3]).unwrap()).unwrap();
        let mut g = Graph::new();
        let u = g.param(&store, "used").unwrap();
        let _dangling = g.param(&store, "unused").unwrap();
        let sq = g.mul(u, u).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads["unused"], vec![0.0; 3]);
        assert_eq!(grads["used"], vec![4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (mut g, x) = graph_with(vec![2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        // y = x + x so dy/dx = 2 elementwise.
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn nan_output_is_error() {
        let (mut g, x) = graph_with(vec![1], vec![1e308]);
        let doubled = g.add(x, x);
        assert!(matches!(doubled, Err(Error::NonFinite(_))));
    }

    #[test]
    fn frozen_params_are_not_tracked() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        store.insert("t", Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        store.freeze_except(&["t".into()]).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let t = g.param(&store, "t").unwrap();
        let prod = g.mul(w, t).unwrap();
        let loss = g.sum_all(prod).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        assert!(!grads.contains_key("w"));
        assert_eq!(grads["t"], vec![3.0]);
    }
}
