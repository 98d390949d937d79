//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value and enough context to
//! run its vector-Jacobian product later. Nodes are appended in execution
//! order, so the tape is already topologically sorted and `backward` is a
//! single reverse sweep.

use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::gemm;
use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::numel;
use super::{EngineError, Tensor};

/// Additive bias applied to masked attention scores before the softmax.
pub const MASK_SENTINEL: f64 = -1e9;

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        width: usize,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
        width: usize,
    },
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<f64>,
    },
    Sum {
        x: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        chunk: usize,
    },
    Narrow {
        x: usize,
        outer: usize,
        src_chunk: usize,
        offset: usize,
        chunk: usize,
    },
    Reshape {
        x: usize,
    },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Parameters are borrowed from a [`ParamStore`] for the
/// lifetime `'a`; everything else is owned by the tape.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    bound: HashMap<ParamId, Var>,
    track_params: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            track_params: true,
        }
    }

    /// A tape whose parameters are bound untracked; used for inference.
    pub fn inference() -> Self {
        Tape {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, true)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, false)
    }

    /// Borrowed leaf, tracked according to `requires_grad`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Binds a stored parameter, reusing the node if it is already bound.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            self.track_params,
        );
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(EngineError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            false,
        );
        let needs = self.tracks(a) || self.tracks(b);
        Ok(self.push(
            out.into(),
            vec![m, n],
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(), EngineError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(EngineError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum; `b` may be repeated along the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.check_broadcast("add", a, b)?;
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks(bv.len().max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let needs = self.tracks(a) || self.tracks(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out.into(), shape, Op::Add { a: a.0, b: b.0 }, needs))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.check_broadcast("mul", a, b)?;
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks(bv.len().max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x * y))
            .collect();
        let needs = self.tracks(a) || self.tracks(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out.into(), shape, Op::Mul { a: a.0, b: b.0 }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.tracks(x);
        self.push(out.into(), shape, Op::Scale { x: x.0, factor }, needs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, EngineError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(EngineError::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xv[r * cols + c];
            }
        }
        let needs = self.tracks(x);
        Ok(self.push(
            out.into(),
            vec![cols, rows],
            Op::Transpose { x: x.0, rows, cols },
            needs,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(EngineError::Contract(format!(
                "softmax axis {axis} out of range for shape {s:?}"
            )));
        }
        let outer = numel(&s[..axis]);
        let len = s[axis];
        let inner = numel(&s[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let idx = |i: usize| base + i * inner;
                let max = (0..len)
                    .map(|i| xv[idx(i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (xv[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] /= total;
                }
            }
        }
        let needs = self.tracks(x);
        Ok(self.push(
            out.into(),
            s,
            Op::Softmax {
                x: x.0,
                outer,
                len,
                inner,
            },
            needs,
        ))
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, EngineError> {
        let s = self.shape(x).to_vec();
        let width = *s.last().unwrap_or(&0);
        if width < 2 || self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(EngineError::Shape {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / width;
        let mut normed = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for c in 0..width {
                let nv = (row[c] - mean) * inv;
                normed[r * width + c] = nv;
                out[r * width + c] = g[c] * nv + b[c];
            }
        }
        let needs = self.tracks(x) || self.tracks(gamma) || self.tracks(beta);
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            width,
            normed,
            rstd,
        };
        Ok(self.push(out.into(), s, op, needs))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.tracks(x);
        self.push(out.into(), shape, Op::Gelu { x: x.0 }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.tracks(x);
        self.push(out.into(), shape, Op::Tanh { x: x.0 }, needs)
    }

    /// Gathers rows of a `[V x H]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, EngineError> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(EngineError::Shape {
                op: "embedding",
                lhs: s.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, width) = (s[0], s[1]);
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= rows) {
            return Err(EngineError::Index {
                op: "embedding",
                position,
                id,
                bound: rows,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            out.extend_from_slice(&tv[id * width..(id + 1) * width]);
        }
        let needs = self.tracks(table);
        let op = Op::Embedding {
            table: table.0,
            ids: ids.to_vec(),
            width,
        };
        Ok(self.push(out.into(), vec![ids.len(), width], op, needs))
    }

    /// `-log softmax(logits)[label]` for a 1-D logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, EngineError> {
        let s = self.shape(logits);
        if s.len() != 1 {
            return Err(EngineError::Shape {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let classes = s[0];
        if label >= classes {
            return Err(EngineError::Index {
                op: "cross_entropy",
                position: 0,
                id: label,
                bound: classes,
            });
        }
        let z = self.value(logits);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_total = total.ln() + max;
        let probs: Vec<f64> = z.iter().map(|v| (v - log_total).exp()).collect();
        let loss = log_total - z[label];
        let needs = self.tracks(logits);
        let op = Op::CrossEntropy {
            logits: logits.0,
            label,
            probs,
        };
        Ok(self.push(vec![loss].into(), Vec::new(), op, needs))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum::<f64>();
        let needs = self.tracks(x);
        self.push(vec![total].into(), Vec::new(), Op::Sum { x: x.0 }, needs)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, EngineError> {
        let first = parts
            .first()
            .ok_or_else(|| EngineError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(EngineError::Contract(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(EngineError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let chunk = axis_total * inner;
        let mut out = vec![0.0; outer * chunk];
        let mut offset = 0;
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let pc = self.shape(p)[axis] * inner;
            let pv = self.value(p);
            for o in 0..outer {
                out[o * chunk + offset..o * chunk + offset + pc]
                    .copy_from_slice(&pv[o * pc..(o + 1) * pc]);
            }
            meta.push((p.0, pc));
            offset += pc;
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let needs = parts.iter().any(|&p| self.tracks(p));
        Ok(self.push(
            out.into(),
            shape,
            Op::Concat {
                parts: meta,
                outer,
                chunk,
            },
            needs,
        ))
    }

    /// The sub-tensor `start..start+len` along `axis`.
    pub fn narrow(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, EngineError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(EngineError::Contract(format!(
                "narrow {start}..{} on axis {axis} of shape {s:?}",
                start + len
            )));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src_chunk = s[axis] * inner;
        let offset = start * inner;
        let chunk = len * inner;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            out.extend_from_slice(&xv[o * src_chunk + offset..o * src_chunk + offset + chunk]);
        }
        let mut shape = s;
        shape[axis] = len;
        let needs = self.tracks(x);
        let op = Op::Narrow {
            x: x.0,
            outer,
            src_chunk,
            offset,
            chunk,
        };
        Ok(self.push(out.into(), shape, op, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, EngineError> {
        if numel(shape) != self.value(x).len() {
            return Err(EngineError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let needs = self.tracks(x);
        Ok(self.push(out.into(), shape.to_vec(), Op::Reshape { x: x.0 }, needs))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, EngineError> {
        if !self.shape(loss).is_empty() {
            return Err(EngineError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        let tracked = nodes.iter().map(|n| n.needs_grad).collect();
        Ok(Gradients {
            grads,
            shapes,
            tracked,
            params: self.bound,
        })
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node<'_>],
    target: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[target].needs_grad {
        return;
    }
    let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
    f(slot);
}

fn backprop_node(nodes: &[Node<'_>], node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            // dA = dC B^T, dB = A^T dC
            accumulate(grads, nodes, *a, |ga| {
                gemm(m, n, k, g, false, bv, true, ga, true)
            });
            accumulate(grads, nodes, *b, |gb| {
                gemm(k, m, n, av, true, g, false, gb, true)
            });
        }
        Op::Add { a, b } => {
            accumulate(grads, nodes, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
            });
            accumulate(grads, nodes, *b, |gb| {
                let w = gb.len().max(1);
                for row in g.chunks(w) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            });
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let w = bv.len().max(1);
            accumulate(grads, nodes, *a, |ga| {
                for (gr, gg) in ga.chunks_mut(w).zip(g.chunks(w)) {
                    for ((x, y), z) in gr.iter_mut().zip(gg).zip(bv.iter()) {
                        *x += y * z;
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for (ar, gg) in av.chunks(w).zip(g.chunks(w)) {
                    for ((x, y), z) in gb.iter_mut().zip(gg).zip(ar) {
                        *x += y * z;
                    }
                }
            });
        }
        Op::Scale { x, factor } => {
            accumulate(grads, nodes, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor)
            });
        }
        Op::Transpose { x, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            });
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            let y = &node.value;
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let dot: f64 = (0..len)
                            .map(|i| g[base + i * inner] * y[base + i * inner])
                            .sum();
                        for i in 0..len {
                            let idx = base + i * inner;
                            gx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            width,
            normed,
            rstd,
        } => {
            let w = *width;
            let gv = &nodes[*gamma].value;
            accumulate(grads, nodes, *gamma, |gg| {
                for (gr, nr) in g.chunks(w).zip(normed.chunks(w)) {
                    for c in 0..w {
                        gg[c] += gr[c] * nr[c];
                    }
                }
            });
            accumulate(grads, nodes, *beta, |gb| {
                for gr in g.chunks(w) {
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            });
            accumulate(grads, nodes, *x, |gx| {
                let mut dn = vec![0.0; w];
                for (r, ((gxr, gr), nr)) in gx
                    .chunks_mut(w)
                    .zip(g.chunks(w))
                    .zip(normed.chunks(w))
                    .enumerate()
                {
                    for c in 0..w {
                        dn[c] = gr[c] * gv[c];
                    }
                    let sum_dn: f64 = dn.iter().sum();
                    let sum_dn_n: f64 = dn.iter().zip(nr).map(|(a, b)| a * b).sum();
                    let scale = rstd[r] / w as f64;
                    for c in 0..w {
                        gxr[c] += scale * (w as f64 * dn[c] - sum_dn - nr[c] * sum_dn_n);
                    }
                }
            });
        }
        Op::Gelu { x } => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, |gx| {
                for ((a, &v), gg) in gx.iter_mut().zip(xv.iter()).zip(g) {
                    let t = (SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v)).tanh();
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * v * v);
                    *a += gg * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            });
        }
        Op::Tanh { x } => {
            let y = &node.value;
            accumulate(grads, nodes, *x, |gx| {
                for ((a, yy), gg) in gx.iter_mut().zip(y.iter()).zip(g) {
                    *a += gg * (1.0 - yy * yy);
                }
            });
        }
        Op::Embedding { table, ids, width } => {
            let w = *width;
            accumulate(grads, nodes, *table, |gt| {
                for (pos, &id) in ids.iter().enumerate() {
                    for c in 0..w {
                        gt[id * w + c] += g[pos * w + c];
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            label,
            probs,
        } => {
            accumulate(grads, nodes, *logits, |gl| {
                for (i, (a, p)) in gl.iter_mut().zip(probs).enumerate() {
                    let target = if i == *label { 1.0 } else { 0.0 };
                    *a += g[0] * (p - target);
                }
            });
        }
        Op::Sum { x } => {
            accumulate(grads, nodes, *x, |gx| {
                gx.iter_mut().for_each(|a| *a += g[0])
            });
        }
        Op::Concat {
            parts,
            outer,
            chunk,
        } => {
            let mut offset = 0;
            for &(p, pc) in parts {
                accumulate(grads, nodes, p, |gp| {
                    for o in 0..*outer {
                        let src = &g[o * chunk + offset..o * chunk + offset + pc];
                        gp[o * pc..(o + 1) * pc]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                });
                offset += pc;
            }
        }
        Op::Narrow {
            x,
            outer,
            src_chunk,
            offset,
            chunk,
        } => {
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..*outer {
                    let dst = &mut gx[o * src_chunk + offset..o * src_chunk + offset + chunk];
                    dst.iter_mut()
                        .zip(&g[o * chunk..(o + 1) * chunk])
                        .for_each(|(a, b)| *a += b);
                }
            });
        }
        Op::Reshape { x } => {
            accumulate(grads, nodes, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)
            });
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    tracked: Vec<bool>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` is tracked but
    /// disconnected from the loss, `None` when `v` is not tracked.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        if !self.tracked[v.0] {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; numel(&shape)]);
        Some(Tensor::new(shape, data).expect("gradient shape matches node"))
    }

    /// Gradients of every bound, tracked parameter, ordered by parameter id.
    pub fn into_param_grads(mut self) -> ParamGrads {
        let mut bound: Vec<(ParamId, Var)> = self.params.iter().map(|(p, v)| (*p, *v)).collect();
        bound.sort_by_key(|(p, _)| *p);
        let entries = bound
            .into_iter()
            .filter(|(_, v)| self.tracked[v.0])
            .map(|(p, v)| {
                let g = self.grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; numel(&self.shapes[v.0])]);
                (p, g)
            })
            .collect();
        ParamGrads { entries }
    }
}
