//! Reverse-mode differentiation over dense 64-bit real arrays.
//!
//! A [`Tape`] records every operation of a forward pass in topological
//! order; [`backward`] replays the records in reverse and accumulates
//! gradients for every leaf that requires them. The operation set is
//! deliberately small: exactly what a graph kernel network and the
//! pointwise baselines need. No broadcasting beyond per-row bias
//! addition, no views, no dynamic shape tricks.
//!
//! Summation order inside every kernel is fixed, so forward results and
//! gradients are bit-identical across repeated runs on the same inputs.

use std::sync::Arc;

use crate::error::{Error, Result};

pub(crate) mod kernels;

/// Immutable dense array plus tape bookkeeping.
///
/// `values` is shared, never mutated; cloning a tensor is cheap.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<[f64]>,
    requires_grad: bool,
    node_id: Option<usize>,
}

impl Tensor {
    /// Off-tape constant. Fails if the shape does not match the value count.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} wants {} values, got {}", shape, expect, values.len()),
            });
        }
        Ok(Tensor {
            shape,
            values: values.into(),
            requires_grad: false,
            node_id: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v].into(),
            requires_grad: false,
            node_id: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n].into(),
            requires_grad: false,
            node_id: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node_id
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// View with a different shape over the same flat data and tape node.
    /// Gradients are flat per node, so no tape record is needed.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.values.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Tensor {
            shape,
            values: Arc::clone(&self.values),
            requires_grad: self.requires_grad,
            node_id: self.node_id,
        })
    }

    fn input(&self) -> InputRef {
        InputRef {
            id: self.node_id,
            requires_grad: self.requires_grad,
            values: Arc::clone(&self.values),
        }
    }
}

/// Saved reference to an operation input: tape position (if any) plus the
/// forward values needed by the backward rule.
#[derive(Debug, Clone)]
struct InputRef {
    id: Option<usize>,
    requires_grad: bool,
    values: Arc<[f64]>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// c[p,r] = a[p,q] . b[q,r]
    Matmul { a: InputRef, b: InputRef, p: usize, q: usize, r: usize },
    /// y[rows,out] = x[rows,in] . w[out,in]^T (+ bias[out])
    Linear {
        x: InputRef,
        w: InputRef,
        bias: Option<InputRef>,
        rows: usize,
        in_dim: usize,
        out_dim: usize,
    },
    Relu { x: InputRef },
    Add { a: InputRef, b: InputRef },
    /// out[e,n] = mats[e,n,n] . vecs[e,n], one small matvec per row
    Bmv { mats: InputRef, vecs: InputRef, rows: usize, n: usize },
    Slice { x: InputRef, start: usize },
    GatherRows { x: InputRef, indices: Arc<[usize]>, cols: usize },
    ScatterMean {
        messages: InputRef,
        targets: Arc<[usize]>,
        counts: Arc<[u32]>,
        cols: usize,
    },
    MseLoss { pred: InputRef, target: InputRef },
    Sum { x: InputRef },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Records one forward computation. Single-writer: ops take `&mut Tape`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` lives on the tape
    /// and requires a gradient.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        t.node_id
            .and_then(|id| self.grads.get(id))
            .and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, requires_grad: bool, values: Vec<f64>) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            requires_grad,
        });
        Tensor {
            shape,
            values: values.into(),
            requires_grad,
            node_id: Some(id),
        }
    }

    /// Register a leaf. `requires_grad` marks it as a parameter that
    /// [`backward`] must produce a gradient for.
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let t = Tensor::new(shape, values)?;
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape.clone(),
            requires_grad,
        });
        Ok(Tensor {
            node_id: Some(id),
            requires_grad,
            ..t
        })
    }

    /// Leaf that participates in the forward pass but receives no gradient.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, values, false)
    }

    /// Re-register an existing tensor's data as a parameter leaf on this tape.
    pub fn param(&mut self, t: &Tensor) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape.clone(),
            requires_grad: true,
        });
        Tensor {
            shape: t.shape.clone(),
            values: Arc::clone(&t.values),
            requires_grad: true,
            node_id: Some(id),
        }
    }

    /// Standard matrix product `a[p,q] . b[q,r]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (p, q) = as_matrix(a, "matmul")?;
        let (q2, r) = as_matrix(b, "matmul")?;
        if q != q2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions {} vs {}", q, q2),
            });
        }
        let mut out = vec![0.0; p * r];
        kernels::gemm(p, q, r, &a.values, false, &b.values, false, 0.0, &mut out);
        let rg = a.requires_grad || b.requires_grad;
        Ok(self.push(
            Op::Matmul { a: a.input(), b: b.input(), p, q, r },
            vec![p, r],
            rg,
            out,
        ))
    }

    /// Affine map `x[rows,in] . w[out,in]^T + bias[out]`, the building block
    /// of every MLP layer here.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (rows, in_dim) = as_matrix(x, "linear")?;
        let (out_dim, in_w) = as_matrix(w, "linear")?;
        if in_dim != in_w {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("input width {} vs weight width {}", in_dim, in_w),
            });
        }
        if let Some(b) = bias {
            if b.len() != out_dim {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    detail: format!("bias length {} vs output width {}", b.len(), out_dim),
                });
            }
        }
        let mut out = vec![0.0; rows * out_dim];
        let beta = if let Some(b) = bias {
            for row in out.chunks_exact_mut(out_dim) {
                row.copy_from_slice(&b.values);
            }
            1.0
        } else {
            0.0
        };
        kernels::gemm(rows, in_dim, out_dim, &x.values, false, &w.values, true, beta, &mut out);
        let rg = x.requires_grad || w.requires_grad || bias.is_some_and(|b| b.requires_grad);
        Ok(self.push(
            Op::Linear {
                x: x.input(),
                w: w.input(),
                bias: bias.map(Tensor::input),
                rows,
                in_dim,
                out_dim,
            },
            vec![rows, out_dim],
            rg,
            out,
        ))
    }

    /// Elementwise max(x, 0). The subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.values.iter().map(|&v| v.max(0.0)).collect();
        let rg = x.requires_grad;
        Ok(self.push(Op::Relu { x: x.input() }, x.shape.clone(), rg, out))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", a.shape, b.shape),
            });
        }
        let out: Vec<f64> = a.values.iter().zip(b.values.iter()).map(|(x, y)| x + y).collect();
        let rg = a.requires_grad || b.requires_grad;
        Ok(self.push(Op::Add { a: a.input(), b: b.input() }, a.shape.clone(), rg, out))
    }

    /// Batched matrix-vector product: `mats[e,n,n] . vecs[e,n]` row by row.
    pub fn bmv(&mut self, mats: &Tensor, vecs: &Tensor) -> Result<Tensor> {
        let (rows, n) = match (mats.shape.as_slice(), vecs.shape.as_slice()) {
            (&[e, n1, n2], &[e2, n3]) if n1 == n2 && n1 == n3 && e == e2 => (e, n1),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "bmv",
                    detail: format!("mats {:?} vs vecs {:?}", mats.shape, vecs.shape),
                })
            }
        };
        let mut out = vec![0.0; rows * n];
        kernels::bmv(&mats.values, &vecs.values, rows, n, &mut out);
        let rg = mats.requires_grad || vecs.requires_grad;
        Ok(self.push(
            Op::Bmv { mats: mats.input(), vecs: vecs.input(), rows, n },
            vec![rows, n],
            rg,
            out,
        ))
    }

    /// Contiguous range of `x`'s flat data, viewed under a new shape.
    pub fn slice(&mut self, x: &Tensor, start: usize, shape: Vec<usize>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if start + len > x.len() {
            return Err(Error::IndexOutOfRange { op: "slice", index: start + len, bound: x.len() });
        }
        let out = x.values[start..start + len].to_vec();
        let rg = x.requires_grad;
        Ok(self.push(Op::Slice { x: x.input(), start }, shape, rg, out))
    }

    /// Select rows of `x` by index; used to pull source-node states onto edges.
    pub fn gather_rows(&mut self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = as_matrix(x, "gather_rows")?;
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange { op: "gather_rows", index: i, bound: rows });
            }
        }
        let n_rows = indices.len();
        let mut out = vec![0.0; n_rows * cols];
        for (dst, &src) in out.chunks_exact_mut(cols).zip(indices.iter()) {
            dst.copy_from_slice(&x.values[src * cols..(src + 1) * cols]);
        }
        let rg = x.requires_grad;
        Ok(self.push(
            Op::GatherRows { x: x.input(), indices: indices.to_vec().into(), cols },
            vec![n_rows, cols],
            rg,
            out,
        ))
    }

    /// Mean-aggregate message rows by target node. Nodes with no incoming
    /// message get a zero row, so an isolated node contributes nothing.
    pub fn scatter_mean(&mut self, messages: &Tensor, targets: &[usize], num_nodes: usize) -> Result<Tensor> {
        let (rows, cols) = as_matrix(messages, "scatter_mean")?;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "scatter_mean",
                detail: format!("{} messages vs {} targets", rows, targets.len()),
            });
        }
        for &t in targets {
            if t >= num_nodes {
                return Err(Error::IndexOutOfRange { op: "scatter_mean", index: t, bound: num_nodes });
            }
        }
        let mut counts = vec![0u32; num_nodes];
        for &t in targets {
            counts[t] += 1;
        }
        let mut out = vec![0.0; num_nodes * cols];
        kernels::scatter_sum(&messages.values, targets, cols, &mut out);
        for (k, row) in out.chunks_exact_mut(cols).enumerate() {
            if counts[k] > 1 {
                let inv = 1.0 / counts[k] as f64;
                for v in row {
                    *v *= inv;
                }
            }
        }
        let rg = messages.requires_grad;
        Ok(self.push(
            Op::ScatterMean {
                messages: messages.input(),
                targets: targets.to_vec().into(),
                counts: counts.into(),
                cols,
            },
            vec![num_nodes, cols],
            rg,
            out,
        ))
    }

    /// Mean squared error between two same-shape tensors; scalar output.
    pub fn mse_loss(&mut self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        if pred.shape != target.shape {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                detail: format!("{:?} vs {:?}", pred.shape, target.shape),
            });
        }
        let n = pred.len() as f64;
        let sum: f64 = pred
            .values
            .iter()
            .zip(target.values.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = pred.requires_grad || target.requires_grad;
        Ok(self.push(
            Op::MseLoss { pred: pred.input(), target: target.input() },
            vec![1],
            rg,
            vec![sum / n],
        ))
    }

    /// Sum of all entries; scalar output.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.values.iter().sum();
        let rg = x.requires_grad;
        Ok(self.push(Op::Sum { x: x.input() }, vec![1], rg, vec![s]))
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[r, c] => Ok((r, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            detail: format!("expected a matrix, got shape {:?}", t.shape),
        }),
    }
}

/// Reverse-topological gradient accumulation from a scalar loss.
///
/// Every `requires_grad` leaf on the tape receives a gradient of its own
/// shape (zero-filled when the leaf does not influence the loss).
pub fn backward(loss: &Tensor, tape: &Tape) -> Result<Gradients> {
    let loss_id = loss.node_id.ok_or_else(|| Error::Contract("loss is not on the tape".into()))?;
    if loss_id >= tape.nodes.len() {
        return Err(Error::Contract("loss node id is not on this tape".into()));
    }
    if !loss.is_scalar() {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape
        )));
    }

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; tape.nodes.len()];
    grads[loss_id] = Some(vec![1.0]);

    for id in (0..=loss_id).rev() {
        let node = &tape.nodes[id];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        apply_backward(&node.op, &g, &mut grads);
        grads[id] = Some(g);
    }

    // Untouched parameter leaves still get a (zero) gradient of the right shape.
    for (id, node) in tape.nodes.iter().enumerate() {
        if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
            grads[id] = Some(vec![0.0; node.shape.iter().product()]);
        }
    }

    Ok(Gradients { grads })
}

fn accumulate<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    input: &InputRef,
) -> Option<&'a mut [f64]> {
    if !input.requires_grad {
        return None;
    }
    let id = input.id?;
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![0.0; input.values.len()]);
    }
    slot.as_deref_mut()
}

fn apply_backward(op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b, p, q, r } => {
            if a.requires_grad && a.id.is_some() {
                let da = accumulate(grads, a).unwrap();
                // dA += G . B^T
                kernels::gemm(*p, *r, *q, g, false, &b.values, true, 1.0, da);
            }
            if b.requires_grad && b.id.is_some() {
                let db = accumulate(grads, b).unwrap();
                // dB += A^T . G
                kernels::gemm(*q, *p, *r, &a.values, true, g, false, 1.0, db);
            }
        }
        Op::Linear { x, w, bias, rows, in_dim, out_dim } => {
            if x.requires_grad && x.id.is_some() {
                let dx = accumulate(grads, x).unwrap();
                // dX += G . W
                kernels::gemm(*rows, *out_dim, *in_dim, g, false, &w.values, false, 1.0, dx);
            }
            if w.requires_grad && w.id.is_some() {
                let dw = accumulate(grads, w).unwrap();
                // dW += G^T . X
                kernels::gemm(*out_dim, *rows, *in_dim, g, true, &x.values, false, 1.0, dw);
            }
            if let Some(b) = bias {
                if b.requires_grad && b.id.is_some() {
                    let db = accumulate(grads, b).unwrap();
                    for row in g.chunks_exact(*out_dim) {
                        for (acc, gv) in db.iter_mut().zip(row) {
                            *acc += gv;
                        }
                    }
                }
            }
        }
        Op::Relu { x } => {
            if let Some(dx) = accumulate(grads, x) {
                for ((acc, &xv), &gv) in dx.iter_mut().zip(x.values.iter()).zip(g.iter()) {
                    if xv > 0.0 {
                        *acc += gv;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(da) = accumulate(grads, a) {
                for (acc, &gv) in da.iter_mut().zip(g.iter()) {
                    *acc += gv;
                }
            }
            if let Some(db) = accumulate(grads, b) {
                for (acc, &gv) in db.iter_mut().zip(g.iter()) {
                    *acc += gv;
                }
            }
        }
        Op::Bmv { mats, vecs, rows, n } => {
            let n = *n;
            if mats.requires_grad && mats.id.is_some() {
                let dm = accumulate(grads, mats).unwrap();
                // dM[e,i,j] += g[e,i] * v[e,j]
                for e in 0..*rows {
                    let ge = &g[e * n..(e + 1) * n];
                    let ve = &vecs.values[e * n..(e + 1) * n];
                    let dme = &mut dm[e * n * n..(e + 1) * n * n];
                    for i in 0..n {
                        let gi = ge[i];
                        for (acc, &vj) in dme[i * n..(i + 1) * n].iter_mut().zip(ve) {
                            *acc += gi * vj;
                        }
                    }
                }
            }
            if vecs.requires_grad && vecs.id.is_some() {
                let dv = accumulate(grads, vecs).unwrap();
                // dV[e,j] += sum_i M[e,i,j] * g[e,i]
                for e in 0..*rows {
                    let ge = &g[e * n..(e + 1) * n];
                    let me = &mats.values[e * n * n..(e + 1) * n * n];
                    let dve = &mut dv[e * n..(e + 1) * n];
                    for i in 0..n {
                        let gi = ge[i];
                        for (acc, &mij) in dve.iter_mut().zip(&me[i * n..(i + 1) * n]) {
                            *acc += gi * mij;
                        }
                    }
                }
            }
        }
        Op::Slice { x, start } => {
            if let Some(dx) = accumulate(grads, x) {
                for (acc, &gv) in dx[*start..*start + g.len()].iter_mut().zip(g.iter()) {
                    *acc += gv;
                }
            }
        }
        Op::GatherRows { x, indices, cols } => {
            if let Some(dx) = accumulate(grads, x) {
                for (row, &src) in g.chunks_exact(*cols).zip(indices.iter()) {
                    for (acc, &gv) in dx[src * cols..(src + 1) * cols].iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
            }
        }
        Op::ScatterMean { messages, targets, counts, cols } => {
            if let Some(dm) = accumulate(grads, messages) {
                for (row, &t) in dm.chunks_exact_mut(*cols).zip(targets.iter()) {
                    let inv = 1.0 / counts[t] as f64;
                    for (acc, &gv) in row.iter_mut().zip(&g[t * cols..(t + 1) * cols]) {
                        *acc += gv * inv;
                    }
                }
            }
        }
        Op::MseLoss { pred, target } => {
            let n = pred.values.len() as f64;
            let scale = 2.0 * g[0] / n;
            if let Some(dp) = accumulate(grads, pred) {
                for ((acc, &p), &t) in dp.iter_mut().zip(pred.values.iter()).zip(target.values.iter()) {
                    *acc += scale * (p - t);
                }
            }
            if let Some(dt) = accumulate(grads, target) {
                for ((acc, &p), &t) in dt.iter_mut().zip(pred.values.iter()).zip(target.values.iter()) {
                    *acc -= scale * (p - t);
                }
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = accumulate(grads, x) {
                for acc in dx.iter_mut() {
                    *acc += g[0];
                }
            }
        }
    }
}

/// Max relative disagreement between the tape gradient of `f` at `point`
/// and a central finite difference with half-width `step`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.shape().to_vec(), point.values().to_vec(), true)?;
    let loss = f(&mut tape, &x)?;
    if !loss.is_scalar() {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    let grads = backward(&loss, &tape)?;
    let analytic = grads.wrt(&x).expect("leaf requires grad").to_vec();

    let eval = |vals: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let p = t.leaf(point.shape().to_vec(), vals, false)?;
        Ok(f(&mut t, &p)?.values()[0])
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.values().to_vec();
        plus[i] += step;
        let mut minus = point.values().to_vec();
        minus[i] -= step;
        let cd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - cd).abs() / (analytic[i].abs() + cd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
