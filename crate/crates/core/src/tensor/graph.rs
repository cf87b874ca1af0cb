use std::collections::HashMap;

use super::gemm::{gemm, MatMut, MatRef};
use super::{check_shape, rows_cols, Tensor};
use crate::error::{DiveError, Result};
use crate::rng::DetRng;
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Swish(Var),
    SwiGlu {
        gate: Var,
        up: Var,
    },
    RmsNorm {
        x: Var,
        g: Var,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        n_heads: usize,
        seq_len: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        n_heads: usize,
        probs: Vec<T>,
    },
    Softmax {
        z: Var,
        t: T,
    },
    TopKSoftmax {
        z: Var,
        k: usize,
        selected: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherColumn {
        w: Var,
        col: usize,
        rows: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. }
            | Op::Swish(x)
            | Op::Rope { x, .. }
            | Op::Dropout { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::GatherRows { x, .. } => vec![*x],
            Op::SwiGlu { gate, up } => vec![*gate, *up],
            Op::RmsNorm { x, g, .. } => vec![*x, *g],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Softmax { z, .. } | Op::TopKSoftmax { z, .. } => vec![*z],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::GatherColumn { w, .. } => vec![*w],
            Op::ScaleRows { x, s } => vec![*x, *s],
            Op::ScatterRows { parts } => parts.iter().map(|(v, _)| *v).collect(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Swish(_) => "swish",
            Op::SwiGlu { .. } => "swiglu",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Embedding { .. } => "embedding",
            Op::Rope { .. } => "rope",
            Op::Attention { .. } => "attention",
            Op::Softmax { .. } => "softmax",
            Op::TopKSoftmax { .. } => "topk_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherColumn { .. } => "gather_column",
            Op::ScaleRows { .. } => "scale_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Dropout { .. } => "dropout",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of tensor operations recorded in execution order.
///
/// Nodes are appended as ops run, so the node list is already a topological
/// order; [`Graph::backward`] walks it once in reverse. Parameters enter as
/// named leaves; only nodes downstream of a leaf that requires a gradient
/// take part in the backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("graph node shape is valid")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Adds a named parameter leaf. It participates in backward iff the
    /// tensor requires a gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let v = self.leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad());
        self.params.push((name.to_string(), v));
        v
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Adds an unnamed leaf from raw parts.
    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(DiveError::Dimension(format!(
                "input of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.leaf(shape.to_vec(), data, requires_grad))
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            return Err(DiveError::Numeric(format!(
                "{} produced a non-finite value at element {bad}",
                op.name()
            )));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(DiveError::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    /// `a [m x k] . b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `x . w^T` for a weight stored `[out x in]`; the linear-layer form.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_ex(x, w, false, true)
    }

    /// Product of optionally transposed rank-2 operands.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        if self.nodes[b.0].shape.len() != 2 && !(self.nodes[b.0].shape.len() == 1 && !tb) {
            return Err(DiveError::Dimension(format!(
                "matmul right operand must be a matrix, got {:?}",
                self.nodes[b.0].shape
            )));
        }
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(DiveError::Dimension(format!(
                "matmul inner dimensions disagree: {:?}{} . {:?}{}",
                self.nodes[a.0].shape,
                if ta { "^T" } else { "" },
                self.nodes[b.0].shape,
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = view(&self.nodes[a.0].value, ar, ac, ta);
            let bv = view(&self.nodes[b.0].value, br, bc, tb);
            gemm(T::one(), av, bv, T::zero(), MatMut::dense(&mut out, m, n));
        }
        let mut shape = self.nodes[a.0].shape.clone();
        if ta || shape.len() < 2 {
            shape = vec![m, n];
        } else {
            *shape.last_mut().expect("nonempty shape") = n;
        }
        self.push(shape, out, Op::MatMul { a, b, ta, tb, m, k, n })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Mul(a, b))
    }

    /// Adds a trailing-dimension bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if self.nodes[bias.0].value.len() != cols {
            return Err(DiveError::Dimension(format!(
                "bias of length {} for rows of width {cols}",
                self.nodes[bias.0].value.len()
            )));
        }
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            out.extend(xv[r * cols..(r + 1) * cols].iter().zip(bv).map(|(&a, &b)| a + b));
        }
        self.push(self.nodes[x.0].shape.clone(), out, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::Scale { x, c })
    }

    /// Elementwise `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.iter().map(|&v| v * sigmoid(v)).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::Swish(x))
    }

    /// Fused `swish(gate) * up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.same_shape(gate, up, "swiglu")?;
        let out = zip_map(&self.nodes[gate.0].value, &self.nodes[up.0].value, |g, u| {
            g * sigmoid(g) * u
        });
        self.push(self.nodes[gate.0].shape.clone(), out, Op::SwiGlu { gate, up })
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * g`.
    pub fn rms_norm(&mut self, x: Var, g: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(DiveError::Parameter(format!("rms_norm eps must be >= 0, got {eps}")));
        }
        let (rows, d) = self.dims2(x);
        if self.nodes[g.0].value.len() != d {
            return Err(DiveError::Dimension(format!(
                "rms_norm gain of length {} for width {d}",
                self.nodes[g.0].value.len()
            )));
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[g.0].value;
        let mut out = Vec::with_capacity(rows * d);
        let mut inv_rms = Vec::with_capacity(rows);
        let eps_t = T::of(eps);
        let d_t = T::of(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / d_t;
            let inv = T::one() / (ms + eps_t).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(gv).map(|(&v, &gain)| v * inv * gain));
        }
        self.push(self.nodes[x.0].shape.clone(), out, Op::RmsNorm { x, g, inv_rms })
    }

    /// Gathers rows of `table [V x d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table);
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(DiveError::Index(format!("token id {id} outside vocabulary {vocab}")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Rotary position embedding on `[batch*seq x d]` rows, position taken
    /// as `row % seq_len`, pairing dims `i` and `i + head_dim/2` per head.
    pub fn rope(&mut self, x: Var, n_heads: usize, seq_len: usize, base: f64) -> Result<Var> {
        let (rows, d) = self.dims2(x);
        if n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(DiveError::Dimension(format!(
                "rope needs an even head dim: width {d}, {n_heads} heads"
            )));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(DiveError::Dimension(format!(
                "rope: {rows} rows is not a multiple of seq_len {seq_len}"
            )));
        }
        let hd = d / n_heads;
        let half = hd / 2;
        let mut cos = Vec::with_capacity(seq_len * half);
        let mut sin = Vec::with_capacity(seq_len * half);
        for p in 0..seq_len {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / hd as f64);
                let angle = p as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let p = r % seq_len;
            let (c, s) = (&cos[p * half..(p + 1) * half], &sin[p * half..(p + 1) * half]);
            for h in 0..n_heads {
                let base_i = r * d + h * hd;
                for i in 0..half {
                    let a = xv[base_i + i];
                    let b = xv[base_i + i + half];
                    out[base_i + i] = a * c[i] - b * s[i];
                    out[base_i + i + half] = a * s[i] + b * c[i];
                }
            }
        }
        self.push(
            self.nodes[x.0].shape.clone(),
            out,
            Op::Rope {
                x,
                n_heads,
                seq_len,
                cos,
                sin,
            },
        )
    }

    /// Causal multi-head scaled dot-product attention over `[batch*seq x d]`
    /// projections. Each (batch, head) block is a pair of strided 2-D
    /// matmuls; position `i` attends to positions `<= i` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, n_heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let (rows, d) = self.dims2(q);
        if rows != batch * seq || n_heads == 0 || d % n_heads != 0 {
            return Err(DiveError::Dimension(format!(
                "attention over {rows}x{d} with batch {batch}, seq {seq}, {n_heads} heads"
            )));
        }
        let hd = d / n_heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * n_heads * seq * seq];
        for b in 0..batch {
            for h in 0..n_heads {
                let off = b * seq * d + h * hd;
                let pblock = &mut probs[(b * n_heads + h) * seq * seq..(b * n_heads + h + 1) * seq * seq];
                gemm(
                    scale,
                    strided(qv, off, seq, hd, d),
                    strided(kv, off, seq, hd, d).t(),
                    T::zero(),
                    MatMut::dense(pblock, seq, seq),
                );
                for i in 0..seq {
                    let row = &mut pblock[i * seq..(i + 1) * seq];
                    let m = row[..=i].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut total = T::zero();
                    for val in row[..=i].iter_mut() {
                        *val = (*val - m).exp();
                        total += *val;
                    }
                    for val in row[..=i].iter_mut() {
                        *val /= total;
                    }
                    for val in row[i + 1..].iter_mut() {
                        *val = T::zero();
                    }
                }
                gemm(
                    T::one(),
                    MatRef::dense(pblock, seq, seq),
                    strided(vv, off, seq, hd, d),
                    T::zero(),
                    MatMut {
                        data: &mut out,
                        offset: off,
                        rows: seq,
                        cols: hd,
                        rs: d,
                        cs: 1,
                    },
                );
            }
        }
        self.push(
            self.nodes[q.0].shape.clone(),
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                n_heads,
                probs,
            },
        )
    }

    /// Row softmax of `z / t`, max-subtracted.
    pub fn softmax(&mut self, z: Var, t: f64) -> Result<Var> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(DiveError::Parameter(format!("temperature must be > 0, got {t}")));
        }
        let (rows, n) = self.dims2(z);
        let tt = T::of(t);
        let zv = &self.nodes[z.0].value;
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            softmax_row(&zv[r * n..(r + 1) * n], tt, &mut out);
        }
        self.push(self.nodes[z.0].shape.clone(), out, Op::Softmax { z, t: tt })
    }

    /// Per row: softmax over the `k` largest entries, zero elsewhere.
    pub fn topk_softmax(&mut self, z: Var, k: usize) -> Result<Var> {
        let (rows, n) = self.dims2(z);
        if k == 0 || k > n {
            return Err(DiveError::Parameter(format!("top-k needs 1 <= k <= {n}, got {k}")));
        }
        let zv = &self.nodes[z.0].value;
        let mut out = vec![T::zero(); rows * n];
        let mut selected = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = &zv[r * n..(r + 1) * n];
            let sel = topk_desc(row, k);
            let m = row[sel[0]];
            let total = sel.iter().fold(T::zero(), |acc, &i| acc + (row[i] - m).exp());
            for &i in &sel {
                out[r * n + i] = (row[i] - m).exp() / total;
            }
            selected.extend_from_slice(&sel);
        }
        self.push(self.nodes[z.0].shape.clone(), out, Op::TopKSoftmax { z, k, selected })
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, v) = self.dims2(logits);
        if targets.len() != rows {
            return Err(DiveError::Dimension(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if rows == 0 {
            return Err(DiveError::Parameter("cross entropy over zero positions".into()));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = Vec::with_capacity(rows * v);
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(DiveError::Index(format!("target {t} outside vocabulary {v}")));
            }
            let row = &lv[r * v..(r + 1) * v];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let sum = row.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp());
            let lse = m + sum.ln();
            total += (lse - row[t]).as_f64();
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let loss = T::of(total / rows as f64);
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.iter().fold(T::zero(), |a, &b| a + b);
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(DiveError::Index(format!("row {r} outside {n} rows")));
            }
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        self.push(
            vec![rows.len(), d],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// `w[rows[i], col]` as a vector.
    pub fn gather_column(&mut self, w: Var, col: usize, rows: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(w);
        if col >= c {
            return Err(DiveError::Index(format!("column {col} outside width {c}")));
        }
        let wv = &self.nodes[w.0].value;
        let mut out = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= n {
                return Err(DiveError::Index(format!("row {r} outside {n} rows")));
            }
            out.push(wv[r * c + col]);
        }
        self.push(
            vec![rows.len()],
            out,
            Op::GatherColumn {
                w,
                col,
                rows: rows.to_vec(),
            },
        )
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = self.dims2(x);
        if self.nodes[s.0].value.len() != n {
            return Err(DiveError::Dimension(format!(
                "{} row scales for {n} rows",
                self.nodes[s.0].value.len()
            )));
        }
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            out.extend(xv[r * d..(r + 1) * d].iter().map(|&v| v * sv[r]));
        }
        self.push(self.nodes[x.0].shape.clone(), out, Op::ScaleRows { x, s })
    }

    /// Sums row-scattered parts into a zero `[n_rows x d]` matrix. Parts
    /// are added in the order given.
    pub fn scatter_rows(&mut self, n_rows: usize, d: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let mut out = vec![T::zero(); n_rows * d];
        for (v, rows) in &parts {
            let (pr, pd) = self.dims2(*v);
            if pd != d || pr != rows.len() {
                return Err(DiveError::Dimension(format!(
                    "scatter part {pr}x{pd} with {} target rows of width {d}",
                    rows.len()
                )));
            }
            let pv = &self.nodes[v.0].value;
            for (i, &r) in rows.iter().enumerate() {
                if r >= n_rows {
                    return Err(DiveError::Index(format!("row {r} outside {n_rows} rows")));
                }
                out[r * d..(r + 1) * d]
                    .iter_mut()
                    .zip(&pv[i * d..(i + 1) * d])
                    .for_each(|(o, &p)| *o += p);
            }
        }
        self.push(vec![n_rows, d], out, Op::ScatterRows { parts })
    }

    /// Inverted dropout with keep-probability `1 - p`; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut DetRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(DiveError::Parameter(format!("dropout rate must be in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit (already scaled) mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.nodes[x.0].value.len() {
            return Err(DiveError::Dimension("dropout mask length".into()));
        }
        let out = zip_map(&self.nodes[x.0].value, &mask, |a, b| a * b);
        self.push(self.nodes[x.0].shape.clone(), out, Op::Dropout { x, mask })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.nodes[x.0].value.len() {
            return Err(DiveError::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.nodes[x.0].shape
            )));
        }
        let out = self.nodes[x.0].value.clone();
        self.push(shape.to_vec(), out, Op::Reshape(x))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(DiveError::State(
                "backward already ran on this graph; run a fresh forward first".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(DiveError::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            backprop_node(&self.nodes, i, &g, &mut self.grads);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of named parameter leaves, in binding order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.as_str(), g)))
    }

    pub fn param_vars(&self) -> HashMap<&str, Var> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v)).collect()
    }
}

// ------------------------------------------------------------------ helpers

fn view<T>(data: &[T], rows: usize, cols: usize, transpose: bool) -> MatRef<'_, T> {
    let m = MatRef::dense(data, rows, cols);
    if transpose {
        m.t()
    } else {
        m
    }
}

fn strided<T>(data: &[T], offset: usize, rows: usize, cols: usize, rs: usize) -> MatRef<'_, T> {
    MatRef {
        data,
        offset,
        rows,
        cols,
        rs,
        cs: 1,
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Scalar>(row: &[T], t: T, out: &mut Vec<T>) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let start = out.len();
    let mut total = T::zero();
    for &z in row {
        let e = ((z - m) / t).exp();
        total += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= total;
    }
}

/// Indices of the `k` largest entries, sorted by descending value, ties to
/// the lower index.
pub(crate) fn topk_desc<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn grad_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let needs = |v: &Var| nodes[v.0].needs_grad;
    let val = |v: &Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (ar, ac) = rows_cols(&nodes[a.0].shape);
            let (br, bc) = rows_cols(&nodes[b.0].shape);
            let dc = MatRef::dense(g, m, n);
            if needs(a) {
                let bprime = view(val(b), br, bc, *tb);
                let buf = grad_buf(grads, *a, ar * ac);
                if !*ta {
                    gemm(T::one(), dc, bprime.t(), T::one(), MatMut::dense(buf, m, k));
                } else {
                    gemm(T::one(), bprime, dc.t(), T::one(), MatMut::dense(buf, k, m));
                }
            }
            if needs(b) {
                let aprime = view(val(a), ar, ac, *ta);
                let buf = grad_buf(grads, *b, br * bc);
                if !*tb {
                    gemm(T::one(), aprime.t(), dc, T::one(), MatMut::dense(buf, k, n));
                } else {
                    gemm(T::one(), dc.t(), aprime, T::one(), MatMut::dense(buf, n, k));
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if needs(v) {
                    accumulate(grads, *v, g.to_vec());
                }
            }
        }
        Op::Mul(a, b) => {
            if needs(a) {
                accumulate(grads, *a, zip_map(g, val(b), |x, y| x * y));
            }
            if needs(b) {
                accumulate(grads, *b, zip_map(g, val(a), |x, y| x * y));
            }
        }
        Op::AddBias { x, bias } => {
            if needs(x) {
                accumulate(grads, *x, g.to_vec());
            }
            if needs(bias) {
                let d = val(bias).len();
                let buf = grad_buf(grads, *bias, d);
                for row in g.chunks(d) {
                    buf.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Scale { x, c } => {
            if needs(x) {
                accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
        }
        Op::Swish(x) => {
            if needs(x) {
                accumulate(grads, *x, zip_map(g, val(x), |gy, xv| gy * swish_grad(xv)));
            }
        }
        Op::SwiGlu { gate, up } => {
            let (gv, uv) = (val(gate), val(up));
            if needs(gate) {
                let c = gv
                    .iter()
                    .zip(uv)
                    .zip(g)
                    .map(|((&gx, &u), &gy)| gy * u * swish_grad(gx))
                    .collect();
                accumulate(grads, *gate, c);
            }
            if needs(up) {
                accumulate(grads, *up, zip_map(g, gv, |gy, gx| gy * gx * sigmoid(gx)));
            }
        }
        Op::RmsNorm { x, g: gain, inv_rms } => {
            let xv = val(x);
            let gv = val(gain);
            let d = gv.len();
            let d_t = T::of(d as f64);
            if needs(x) {
                let mut dx = Vec::with_capacity(xv.len());
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let s = xr
                        .iter()
                        .zip(gr)
                        .zip(gv)
                        .fold(T::zero(), |acc, ((&xi, &gy), &w)| acc + gy * w * xi);
                    let coef = inv * inv * inv * s / d_t;
                    dx.extend(xr.iter().zip(gr).zip(gv).map(|((&xi, &gy), &w)| inv * gy * w - coef * xi));
                }
                accumulate(grads, *x, dx);
            }
            if needs(gain) {
                let buf = grad_buf(grads, *gain, d);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        buf[j] += gr[j] * xr[j] * inv;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if needs(table) {
                let (vocab, d) = rows_cols(&nodes[table.0].shape);
                let buf = grad_buf(grads, *table, vocab * d);
                for (r, &id) in ids.iter().enumerate() {
                    buf[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Rope {
            x,
            n_heads,
            seq_len,
            cos,
            sin,
        } => {
            if needs(x) {
                let (rows, d) = rows_cols(&nodes[x.0].shape);
                let hd = d / n_heads;
                let half = hd / 2;
                let mut dx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let p = r % seq_len;
                    for h in 0..*n_heads {
                        let base = r * d + h * hd;
                        for i in 0..half {
                            let (c, s) = (cos[p * half + i], sin[p * half + i]);
                            let ga = g[base + i];
                            let gb = g[base + i + half];
                            dx[base + i] = ga * c + gb * s;
                            dx[base + i + half] = gb * c - ga * s;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            n_heads,
            probs,
        } => {
            let (rows, d) = rows_cols(&nodes[q.0].shape);
            let (seq, n_heads) = (*seq, *n_heads);
            let hd = d / n_heads;
            let scale = T::of(1.0 / (hd as f64).sqrt());
            let (qv, kv, vv) = (val(q), val(k), val(v));
            let mut dq = vec![T::zero(); rows * d];
            let mut dk = vec![T::zero(); rows * d];
            let mut dv = vec![T::zero(); rows * d];
            let mut dp = vec![T::zero(); seq * seq];
            for b in 0..*batch {
                for h in 0..n_heads {
                    let off = b * seq * d + h * hd;
                    let p = &probs[(b * n_heads + h) * seq * seq..(b * n_heads + h + 1) * seq * seq];
                    let dout = strided(g, off, seq, hd, d);
                    let pm = MatRef::dense(p, seq, seq);
                    gemm(T::one(), pm.t(), dout, T::one(), mat_mut(&mut dv, off, seq, hd, d));
                    gemm(
                        T::one(),
                        dout,
                        strided(vv, off, seq, hd, d).t(),
                        T::zero(),
                        MatMut::dense(&mut dp, seq, seq),
                    );
                    for i in 0..seq {
                        let pr = &p[i * seq..(i + 1) * seq];
                        let dr = &mut dp[i * seq..(i + 1) * seq];
                        let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        for (dv_, &pv) in dr.iter_mut().zip(pr) {
                            *dv_ = pv * (*dv_ - dot);
                        }
                    }
                    let ds = MatRef::dense(&dp, seq, seq);
                    gemm(scale, ds, strided(kv, off, seq, hd, d), T::one(), mat_mut(&mut dq, off, seq, hd, d));
                    gemm(scale, ds.t(), strided(qv, off, seq, hd, d), T::one(), mat_mut(&mut dk, off, seq, hd, d));
                }
            }
            for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                if needs(var) {
                    accumulate(grads, *var, buf);
                }
            }
        }
        Op::Softmax { z, t } => {
            if needs(z) {
                let y = &node.value;
                let (rows, n) = rows_cols(&node.shape);
                let mut dz = Vec::with_capacity(rows * n);
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    dz.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot) / *t));
                }
                accumulate(grads, *z, dz);
            }
        }
        Op::TopKSoftmax { z, k, selected } => {
            if needs(z) {
                let w = &node.value;
                let (rows, n) = rows_cols(&node.shape);
                let mut dz = vec![T::zero(); rows * n];
                for r in 0..rows {
                    let sel = &selected[r * k..(r + 1) * k];
                    let dot = sel
                        .iter()
                        .fold(T::zero(), |acc, &i| acc + w[r * n + i] * g[r * n + i]);
                    for &i in sel {
                        dz[r * n + i] = w[r * n + i] * (g[r * n + i] - dot);
                    }
                }
                accumulate(grads, *z, dz);
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if needs(logits) {
                let (rows, v) = rows_cols(&nodes[logits.0].shape);
                let coef = g[0] / T::of(rows as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * coef).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * v + t] -= coef;
                }
                accumulate(grads, *logits, dl);
            }
        }
        Op::Sum(x) => {
            if needs(x) {
                accumulate(grads, *x, vec![g[0]; val(x).len()]);
            }
        }
        Op::GatherRows { x, rows } => {
            if needs(x) {
                let (n, d) = rows_cols(&nodes[x.0].shape);
                let buf = grad_buf(grads, *x, n * d);
                for (i, &r) in rows.iter().enumerate() {
                    buf[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::GatherColumn { w, col, rows } => {
            if needs(w) {
                let (n, c) = rows_cols(&nodes[w.0].shape);
                let buf = grad_buf(grads, *w, n * c);
                for (i, &r) in rows.iter().enumerate() {
                    buf[r * c + col] += g[i];
                }
            }
        }
        Op::ScaleRows { x, s } => {
            let (n, d) = rows_cols(&nodes[x.0].shape);
            let (xv, sv) = (val(x), val(s));
            if needs(x) {
                let mut dx = Vec::with_capacity(n * d);
                for r in 0..n {
                    dx.extend(g[r * d..(r + 1) * d].iter().map(|&gy| gy * sv[r]));
                }
                accumulate(grads, *x, dx);
            }
            if needs(s) {
                let ds = (0..n)
                    .map(|r| {
                        g[r * d..(r + 1) * d]
                            .iter()
                            .zip(&xv[r * d..(r + 1) * d])
                            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                    })
                    .collect();
                accumulate(grads, *s, ds);
            }
        }
        Op::ScatterRows { parts } => {
            let (_, d) = rows_cols(&node.shape);
            for (v, rows) in parts {
                if needs(v) {
                    let mut dp = Vec::with_capacity(rows.len() * d);
                    for &r in rows {
                        dp.extend_from_slice(&g[r * d..(r + 1) * d]);
                    }
                    accumulate(grads, *v, dp);
                }
            }
        }
        Op::Dropout { x, mask } => {
            if needs(x) {
                accumulate(grads, *x, zip_map(g, mask, |a, b| a * b));
            }
        }
        Op::Reshape(x) => {
            if needs(x) {
                accumulate(grads, *x, g.to_vec());
            }
        }
    }
}

fn mat_mut<T>(data: &mut [T], offset: usize, rows: usize, cols: usize, rs: usize) -> MatMut<'_, T> {
    MatMut {
        data,
        offset,
        rows,
        cols,
        rs,
        cs: 1,
    }
}

#[inline]
fn swish_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}
