//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every differentiable operation in the order it was
//! executed; [`Tape::backward`] replays the entries in reverse and
//! accumulates gradients into the `requires_grad` leaves. Tensors are
//! cheap handles (`Rc`) so parameters persist across tapes: an output
//! produced on an old tape is treated as a constant by any newer tape,
//! which gives detach-on-tape-switch semantics for free.
//!
//! Broadcasting is restricted to equal shapes and scalar-with-tensor.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    /// (tape id, entry index) of the op that produced this tensor, if any.
    node: Option<(u64, usize)>,
}

/// Shared handle to a dense tensor. Clones alias the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(data: &[f64], context: &str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: context.to_string(),
        });
    }
    Ok(())
}

impl Tensor {
    /// Constant tensor. Rejects empty/zero-sized shapes, length mismatches
    /// and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        check_finite(&data, "Tensor::new")?;
        Ok(Self::from_parts(shape, data, false))
    }

    /// Leaf that accumulates gradient during backward passes.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value], false)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::from_parts(shape, vec![0.0; n], false)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Self::from_parts(shape, vec![value; n], false)
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad,
                grad: None,
                node: None,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// Copy of the underlying data.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value; panics if the tensor is not length 1.
    pub fn value(&self) -> f64 {
        let inner = self.inner.borrow();
        assert!(inner.data.len() == 1, "value() on non-scalar tensor");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        if let Some(g) = inner.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// New constant leaf with copied data (no tape history, no grad).
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Self::from_parts(inner.shape.clone(), inner.data.clone(), false)
    }

    /// Overwrite data in place (used by optimizers and deserialization).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        check_finite(&data, "Tensor::set_data")?;
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::InvalidShape {
                shape: inner.shape.clone(),
                len: data.len(),
            });
        }
        inner.data = data;
        Ok(())
    }

    fn add_to_grad(&self, update: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, u) in grad.iter_mut().zip(update) {
            *g += u;
        }
    }

    fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Relu,
    Clamp01,
    Softplus,
    L2Normalize { norm: f64 },
    Matmul { m: usize, k: usize, n: usize },
    Reshape,
    Concat { sizes: Vec<usize> },
    EmbedMean { ids: Vec<usize>, dim: usize },
    Sum,
    Mean,
    Dot,
    L2NormSq,
}

struct Entry {
    op: Op,
    /// (handle, entry index on this tape if produced here).
    inputs: Vec<(Tensor, Option<usize>)>,
    output: Tensor,
}

/// Append-only record of one forward pass. Backward visits entries in
/// strict reverse order, which is a reverse topological order by
/// construction.
pub struct Tape {
    id: u64,
    entries: Vec<Entry>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drop all recorded entries; leaf gradients are untouched.
    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Entry index on this tape, if the tensor was produced here.
    fn node_on(&self, t: &Tensor) -> Option<usize> {
        match t.inner.borrow().node {
            Some((tape_id, idx)) if tape_id == self.id => Some(idx),
            _ => None,
        }
    }

    fn tracked(&self, t: &Tensor) -> bool {
        t.requires_grad() || self.node_on(t).is_some()
    }

    fn record(&mut self, op: Op, inputs: &[&Tensor], output: &Tensor) {
        if !inputs.iter().any(|t| self.tracked(t)) {
            return;
        }
        let idx = self.entries.len();
        let inputs = inputs
            .iter()
            .map(|t| ((*t).clone(), self.node_on(t)))
            .collect();
        output.inner.borrow_mut().node = Some((self.id, idx));
        self.entries.push(Entry {
            op,
            inputs,
            output: output.clone(),
        });
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        let out = if sa == sb {
            let (da, db) = (a.inner.borrow(), b.inner.borrow());
            da.data
                .iter()
                .zip(db.data.iter())
                .map(|(&x, &y)| f(x, y))
                .collect::<Vec<_>>()
        } else if b.is_scalar() {
            let y = b.value();
            a.to_vec().iter().map(|&x| f(x, y)).collect()
        } else if a.is_scalar() {
            let x = a.value();
            b.to_vec().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(Error::ShapeMismatch { left: sa, right: sb });
        };
        check_finite(&out, name)?;
        let shape = if a.len() >= b.len() { sa } else { sb };
        let result = Tensor::from_parts(shape, out, false);
        self.record(op, &[a, b], &result);
        Ok(result)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    fn unary(
        &mut self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
    ) -> Result<Tensor> {
        let out: Vec<f64> = a.inner.borrow().data.iter().map(|&x| f(x)).collect();
        check_finite(&out, name)?;
        let result = Tensor::from_parts(a.shape(), out, false);
        self.record(op, &[a], &result);
        Ok(result)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(Op::Scale(c), "scale", a, |x| c * x)
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Tanh, "tanh", a, f64::tanh)
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Relu, "relu", a, |x| x.max(0.0))
    }

    /// Clamp to [0, 1]; the gradient is zero outside the open interval,
    /// including exactly at the rails.
    pub fn clamp01(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Clamp01, "clamp01", a, |x| x.clamp(0.0, 1.0))
    }

    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Softplus, "softplus", a, |x| {
            x.max(0.0) + (-x.abs()).exp().ln_1p()
        })
    }

    /// x / ||x||; errors when the norm is below 1e-12.
    pub fn l2_normalize(&mut self, a: &Tensor) -> Result<Tensor> {
        let data = a.to_vec();
        if data.is_empty() {
            return Err(Error::EmptyTensor { op: "l2_normalize" });
        }
        let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroNormEmbedding { norm });
        }
        let out: Vec<f64> = data.iter().map(|v| v / norm).collect();
        check_finite(&out, "l2_normalize")?;
        let result = Tensor::from_parts(a.shape(), out, false);
        self.record(Op::L2Normalize { norm }, &[a], &result);
        Ok(result)
    }

    // ── Structure ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 {
            return Err(Error::MatmulRank { shape: sa });
        }
        if sb.len() != 2 {
            return Err(Error::MatmulRank { shape: sb });
        }
        if sa[1] != sb[0] {
            return Err(Error::MatmulDims { left: sa, right: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = a.inner.borrow();
        let db = b.inner.borrow();
        let out = matmul_raw(&da.data, &db.data, m, k, n);
        drop(da);
        drop(db);
        check_finite(&out, "matmul")?;
        let result = Tensor::from_parts(vec![m, n], out, false);
        self.record(Op::Matmul { m, k, n }, &[a, b], &result);
        Ok(result)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.is_empty() || numel(&shape) != a.len() {
            return Err(Error::InvalidShape { shape, len: a.len() });
        }
        let result = Tensor::from_parts(shape, a.to_vec(), false);
        self.record(Op::Reshape, &[a], &result);
        Ok(result)
    }

    /// Concatenate rank-1 tensors into one rank-1 tensor.
    pub fn concat(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyTensor { op: "concat" });
        }
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.to_vec();
            sizes.push(v.len());
            data.extend_from_slice(&v);
        }
        let result = Tensor::from_parts(vec![data.len()], data, false);
        self.record(Op::Concat { sizes }, parts, &result);
        Ok(result)
    }

    /// Mean of the given rows of a rank-2 embedding table. Duplicate ids
    /// contribute (and receive gradient) once per occurrence.
    pub fn embed_mean(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(Error::MatmulRank { shape });
        }
        if ids.is_empty() {
            return Err(Error::EmptyTokenList);
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::UnknownToken {
                id: bad,
                vocab: rows,
            });
        }
        let data = table.inner.borrow();
        let mut out = vec![0.0; dim];
        for &id in ids {
            for (o, v) in out.iter_mut().zip(&data.data[id * dim..(id + 1) * dim]) {
                *o += v;
            }
        }
        drop(data);
        let inv = 1.0 / ids.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        check_finite(&out, "embed_mean")?;
        let result = Tensor::from_parts(vec![dim], out, false);
        self.record(
            Op::EmbedMean {
                ids: ids.to_vec(),
                dim,
            },
            &[table],
            &result,
        );
        Ok(result)
    }

    // ── Reductions ──────────────────────────────────────────────────

    fn reduce(
        &mut self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        value: f64,
    ) -> Result<Tensor> {
        if a.is_empty() {
            return Err(Error::EmptyTensor { op: name });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: name.to_string(),
            });
        }
        let result = Tensor::from_parts(vec![1], vec![value], false);
        self.record(op, &[a], &result);
        Ok(result)
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let v = a.inner.borrow().data.iter().sum();
        self.reduce(Op::Sum, "sum", a, v)
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let inner = a.inner.borrow();
        if inner.data.is_empty() {
            return Err(Error::EmptyTensor { op: "mean" });
        }
        let v = inner.data.iter().sum::<f64>() / inner.data.len() as f64;
        drop(inner);
        self.reduce(Op::Mean, "mean", a, v)
    }

    pub fn l2norm_sq(&mut self, a: &Tensor) -> Result<Tensor> {
        let v = a.inner.borrow().data.iter().map(|x| x * x).sum();
        self.reduce(Op::L2NormSq, "l2norm_sq", a, v)
    }

    /// Inner product of two equal-length rank-1 tensors.
    pub fn dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 1 || sb.len() != 1 || sa != sb {
            return Err(Error::ShapeMismatch { left: sa, right: sb });
        }
        if a.is_empty() {
            return Err(Error::EmptyTensor { op: "dot" });
        }
        let da = a.inner.borrow();
        let db = b.inner.borrow();
        let v: f64 = da
            .data
            .iter()
            .zip(db.data.iter())
            .map(|(x, y)| x * y)
            .sum();
        drop(da);
        drop(db);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "dot".to_string(),
            });
        }
        let result = Tensor::from_parts(vec![1], vec![v], false);
        self.record(Op::Dot, &[a, b], &result);
        Ok(result)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss recorded on this tape. Gradients
    /// accumulate additively into `requires_grad` leaves until zeroed.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss.shape(),
            });
        }
        let start = self.node_on(loss).ok_or(Error::LossNotOnTape)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.entries.len()];
        grads[start] = Some(vec![1.0]);

        for idx in (0..=start).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let entry = &self.entries[idx];
            let wants: Vec<bool> = entry
                .inputs
                .iter()
                .map(|(t, src)| src.is_some() || t.requires_grad())
                .collect();
            if wants.iter().all(|w| !w) {
                continue;
            }
            let contributions = backward_rule(entry, &g, &wants);
            for (slot, contrib) in entry.inputs.iter().zip(contributions) {
                let contrib = match contrib {
                    Some(c) => c,
                    None => continue,
                };
                match slot.1 {
                    Some(src) => {
                        let buf = grads[src]
                            .get_or_insert_with(|| vec![0.0; self.entries[src].output.len()]);
                        for (b, c) in buf.iter_mut().zip(&contrib) {
                            *b += c;
                        }
                    }
                    None => slot.0.add_to_grad(&contrib),
                }
            }
        }
        Ok(())
    }
}

/// Gradient contributions per input. `wants[i]` gates the (possibly
/// expensive) computation for inputs that will not receive it.
fn backward_rule(entry: &Entry, g: &[f64], wants: &[bool]) -> Vec<Option<Vec<f64>>> {
    let input = |i: usize| entry.inputs[i].0.inner.borrow();
    match &entry.op {
        Op::Add => {
            let da = wants[0].then(|| reduce_bcast(g, entry.inputs[0].0.len(), 1.0));
            let db = wants[1].then(|| reduce_bcast(g, entry.inputs[1].0.len(), 1.0));
            vec![da, db]
        }
        Op::Sub => {
            let da = wants[0].then(|| reduce_bcast(g, entry.inputs[0].0.len(), 1.0));
            let db = wants[1].then(|| reduce_bcast(g, entry.inputs[1].0.len(), -1.0));
            vec![da, db]
        }
        Op::Mul => {
            let (a, b) = (input(0), input(1));
            let da = wants[0].then(|| {
                let full: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * pick(&b.data, i))
                    .collect();
                reduce_bcast(&full, a.data.len(), 1.0)
            });
            let db = wants[1].then(|| {
                let full: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * pick(&a.data, i))
                    .collect();
                reduce_bcast(&full, b.data.len(), 1.0)
            });
            vec![da, db]
        }
        Op::Scale(c) => vec![wants[0].then(|| g.iter().map(|gv| c * gv).collect())],
        Op::Tanh => {
            let y = entry.output.inner.borrow();
            vec![wants[0].then(|| {
                g.iter()
                    .zip(&y.data)
                    .map(|(gv, t)| gv * (1.0 - t * t))
                    .collect()
            })]
        }
        Op::Relu => {
            let x = input(0);
            vec![wants[0].then(|| {
                g.iter()
                    .zip(&x.data)
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect()
            })]
        }
        Op::Clamp01 => {
            let x = input(0);
            vec![wants[0].then(|| {
                g.iter()
                    .zip(&x.data)
                    .map(|(gv, &v)| if v > 0.0 && v < 1.0 { *gv } else { 0.0 })
                    .collect()
            })]
        }
        Op::Softplus => {
            let x = input(0);
            vec![wants[0].then(|| {
                g.iter()
                    .zip(&x.data)
                    .map(|(gv, &v)| gv / (1.0 + (-v).exp()))
                    .collect()
            })]
        }
        Op::L2Normalize { norm } => {
            let y = entry.output.inner.borrow();
            vec![wants[0].then(|| {
                let proj: f64 = y.data.iter().zip(g).map(|(yv, gv)| yv * gv).sum();
                y.data
                    .iter()
                    .zip(g)
                    .map(|(yv, gv)| (gv - yv * proj) / norm)
                    .collect()
            })]
        }
        Op::Matmul { m, k, n } => {
            let (a, b) = (input(0), input(1));
            let da = wants[0].then(|| {
                // dA = G . B^T
                let mut out = vec![0.0; m * k];
                for i in 0..*m {
                    for j in 0..*n {
                        let gv = g[i * n + j];
                        for p in 0..*k {
                            out[i * k + p] += gv * b.data[p * n + j];
                        }
                    }
                }
                out
            });
            let db = wants[1].then(|| {
                // dB = A^T . G
                let mut out = vec![0.0; k * n];
                for i in 0..*m {
                    for p in 0..*k {
                        let av = a.data[i * k + p];
                        for j in 0..*n {
                            out[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                out
            });
            vec![da, db]
        }
        Op::Reshape => vec![wants[0].then(|| g.to_vec())],
        Op::Concat { sizes } => {
            let mut offset = 0;
            sizes
                .iter()
                .zip(wants)
                .map(|(&size, &want)| {
                    let part = want.then(|| g[offset..offset + size].to_vec());
                    offset += size;
                    part
                })
                .collect()
        }
        Op::EmbedMean { ids, dim } => {
            vec![wants[0].then(|| {
                let rows = entry.inputs[0].0.len() / dim;
                let mut out = vec![0.0; rows * dim];
                let inv = 1.0 / ids.len() as f64;
                for &id in ids {
                    for (o, gv) in out[id * dim..(id + 1) * dim].iter_mut().zip(g) {
                        *o += gv * inv;
                    }
                }
                out
            })]
        }
        Op::Sum => vec![wants[0].then(|| vec![g[0]; entry.inputs[0].0.len()])],
        Op::Mean => {
            let n = entry.inputs[0].0.len();
            vec![wants[0].then(|| vec![g[0] / n as f64; n])]
        }
        Op::Dot => {
            let (a, b) = (input(0), input(1));
            let da = wants[0].then(|| b.data.iter().map(|v| g[0] * v).collect());
            let db = wants[1].then(|| a.data.iter().map(|v| g[0] * v).collect());
            vec![da, db]
        }
        Op::L2NormSq => {
            let x = input(0);
            vec![wants[0].then(|| x.data.iter().map(|v| 2.0 * g[0] * v).collect())]
        }
    }
}

fn pick(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

/// Sum a full-size gradient down to a scalar slot when one operand of a
/// broadcasted binary op was length 1.
fn reduce_bcast(g: &[f64], target_len: usize, sign: f64) -> Vec<f64> {
    if target_len == g.len() {
        if sign == 1.0 {
            g.to_vec()
        } else {
            g.iter().map(|v| sign * v).collect()
        }
    } else {
        vec![sign * g.iter().sum::<f64>()]
    }
}

pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
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
    out
}

// ── Optimizer ───────────────────────────────────────────────────────

/// First/second moment buffers for one parameter list.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moment_norms(&self) -> (f64, f64) {
        let norm = |buf: &[Vec<f64>]| {
            buf.iter()
                .flat_map(|v| v.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        };
        (norm(&self.m), norm(&self.v))
    }
}

/// One Adam update over `params`, in place. Every parameter must carry a
/// populated gradient; all gradients are zeroed after the update.
pub fn adam_step(
    params: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::OptimizerStateMismatch {
            state: state.m.len(),
            params: params.len(),
        });
    }
    for (index, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::MissingGrad { index });
        }
        if state.m[index].len() != p.len() {
            return Err(Error::OptimizerStateMismatch {
                state: state.m[index].len(),
                params: p.len(),
            });
        }
    }
    state.step += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (index, p) in params.iter().enumerate() {
        let grad = p.grad().expect("checked above");
        let mut inner = p.inner.borrow_mut();
        let m = &mut state.m[index];
        let v = &mut state.v[index];
        for i in 0..grad.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            inner.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if let Some(g) = inner.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(())
}

/// Convenience wrapper owning parameter handles and Adam state.
pub struct Optimizer {
    params: Vec<Tensor>,
    state: AdamState,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Optimizer {
    pub fn adam(params: Vec<Tensor>, lr: f64) -> Self {
        let state = AdamState::new(&params);
        Optimizer {
            params,
            state,
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    pub fn step(&mut self) -> Result<()> {
        adam_step(&self.params, &mut self.state, self.lr, self.betas, self.eps)
    }

    /// Ensure every parameter has an allocated, zeroed gradient buffer so
    /// a step with no backward contributions is a clean no-op.
    pub fn prime_grads(&self) {
        for p in &self.params {
            let mut inner = p.inner.borrow_mut();
            let n = inner.data.len();
            match inner.grad.as_mut() {
                Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
                None => inner.grad = Some(vec![0.0; n]),
            }
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }
}

// ── Gradient checking ───────────────────────────────────────────────

/// Max over coordinates of |autodiff - central difference| / max(1, |central|)
/// for a deterministic scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::BadGradCheckStep { h });
    }
    let probe = x.detach();
    probe.set_requires_grad(true);
    let mut tape = Tape::new();
    let loss = f(&mut tape, &probe)?;
    if !loss.is_scalar() {
        return Err(Error::NonScalarLoss {
            shape: loss.shape(),
        });
    }
    if !loss.value().is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check f(x)".to_string(),
        });
    }
    tape.backward(&loss)?;
    let autodiff = probe.grad().unwrap_or_else(|| vec![0.0; probe.len()]);

    let base = x.to_vec();
    let shape = x.shape();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = eval_scalar(&f, shape.clone(), plus)?;
        let fm = eval_scalar(&f, shape.clone(), minus)?;
        let central = (fp - fm) / (2.0 * h);
        let err = (autodiff[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn eval_scalar<F>(f: &F, shape: Vec<usize>, data: Vec<f64>) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let t = Tensor::new(shape, data)?;
    let mut tape = Tape::new();
    let out = f(&mut tape, &t)?;
    let v = out.value();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check probe".to_string(),
        });
    }
    Ok(v)
}

/// Bitwise equality of two tensors' data.
pub fn bit_identical(a: &Tensor, b: &Tensor) -> bool {
    if a.same_storage(b) {
        return true;
    }
    let (da, db) = (a.inner.borrow(), b.inner.borrow());
    da.shape == db.shape
        && da
            .data
            .iter()
            .zip(&db.data)
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn_vec, stream};

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "index {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn elementwise_forward_values() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(tape.add(&a, &b).unwrap().to_vec(), vec![4.0, 6.0]);
        let z = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert_eq!(tape.tanh(&z).unwrap().to_vec(), vec![0.0]);
        let c = Tensor::new(vec![3], vec![-0.5, 0.3, 1.7]).unwrap();
        assert_eq!(tape.clamp01(&c).unwrap().to_vec(), vec![0.0, 0.3, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_structured() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        match tape.add(&a, &b) {
            Err(Error::ShapeMismatch { left, right }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            tape.matmul(&eye, &m).unwrap().to_vec(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        let row = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let col = Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap();
        assert_eq!(tape.matmul(&row, &col).unwrap().to_vec(), vec![2.0]);
    }

    #[test]
    fn reduce_values() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(tape.dot(&a, &b).unwrap().value(), 11.0);
        let c = Tensor::new(vec![2], vec![2.0, 4.0]).unwrap();
        assert_eq!(tape.mean(&c).unwrap().value(), 3.0);
        let d = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(tape.l2norm_sq(&d).unwrap().value(), 25.0);
    }

    #[test]
    fn backward_dot_self() {
        let w = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let loss = tape.dot(&w, &w).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_mean() {
        let w = Tensor::param(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let loss = tape.mean(&w).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let w = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        for round in 1..=2 {
            let mut tape = Tape::new();
            let loss = tape.sum(&w).unwrap();
            tape.backward(&loss).unwrap();
            assert_eq!(w.grad().unwrap(), vec![round as f64; 2]);
        }
        w.zero_grad();
        assert_eq!(w.grad().unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let y = tape.scale(&w, 2.0).unwrap();
        match tape.backward(&y) {
            Err(Error::NonScalarLoss { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn stale_tape_output_is_constant() {
        let w = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let detached = {
            let mut scratch = Tape::new();
            scratch.scale(&w, 3.0).unwrap()
        };
        let mut tape = Tape::new();
        let loss = tape.sum(&detached).unwrap();
        assert!(tape.backward(&loss).is_err(), "constant loss has no tape node");
        assert!(w.grad().is_none());
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = stream(11, 0);
        let w1 = Tensor::new(vec![5, 4], randn_vec(&mut rng, 20)).unwrap();
        let w2 = Tensor::new(vec![1, 5], randn_vec(&mut rng, 5)).unwrap();
        let x = Tensor::new(vec![4], randn_vec(&mut rng, 4)).unwrap();
        let f = |tape: &mut Tape, x: &Tensor| {
            let xc = tape.reshape(x, vec![4, 1])?;
            let h = tape.matmul(&w1, &xc)?;
            let h = tape.tanh(&h)?;
            let o = tape.matmul(&w2, &h)?;
            tape.sum(&o)
        };
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "two-layer net grad error {err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = stream(7, 0);
        let b = Tensor::new(vec![4, 2], randn_vec(&mut rng, 8)).unwrap();
        let a0 = Tensor::new(vec![3, 4], randn_vec(&mut rng, 12)).unwrap();
        let f = |tape: &mut Tape, a: &Tensor| {
            let a2 = tape.reshape(a, vec![3, 4])?;
            let c = tape.matmul(&a2, &b)?;
            tape.sum(&c)
        };
        let flat = Tensor::new(vec![12], a0.to_vec()).unwrap();
        let err = grad_check(f, &flat, 1e-5).unwrap();
        assert!(err < 1e-6, "matmul grad error {err}");
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let err = grad_check(|t, x| t.sum(x), &x, 1e-4).unwrap();
        assert!(err <= 1e-10, "linear grad error {err}");
    }

    #[test]
    fn grad_check_l2norm_sq() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|t, x| t.l2norm_sq(x), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "l2norm_sq grad error {err}");
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let x = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        assert!(matches!(
            grad_check(|t, x| t.sum(x), &x, 0.5),
            Err(Error::BadGradCheckStep { .. })
        ));
    }

    #[test]
    fn adam_descends_quadratic() {
        let w = Tensor::param(vec![1], vec![1.0]).unwrap();
        let mut state = AdamState::new(std::slice::from_ref(&w));
        let mut tape = Tape::new();
        let loss = tape.mul(&w, &w).unwrap();
        let loss = tape.sum(&loss).unwrap();
        tape.backward(&loss).unwrap();
        adam_step(
            std::slice::from_ref(&w),
            &mut state,
            0.1,
            (0.9, 0.999),
            1e-8,
        )
        .unwrap();
        assert!(w.to_vec()[0] < 1.0, "descent step should reduce w");
    }

    #[test]
    fn adam_zero_grad_is_noop_from_fresh_state() {
        let w = Tensor::param(vec![2], vec![0.5, -0.25]).unwrap();
        w.add_to_grad(&[0.0, 0.0]);
        let mut state = AdamState::new(std::slice::from_ref(&w));
        adam_step(
            std::slice::from_ref(&w),
            &mut state,
            0.1,
            (0.9, 0.999),
            1e-8,
        )
        .unwrap();
        assert_eq!(w.to_vec(), vec![0.5, -0.25]);
    }

    #[test]
    fn adam_requires_populated_grad() {
        let w = Tensor::param(vec![1], vec![1.0]).unwrap();
        let mut state = AdamState::new(std::slice::from_ref(&w));
        match adam_step(
            std::slice::from_ref(&w),
            &mut state,
            0.1,
            (0.9, 0.999),
            1e-8,
        ) {
            Err(Error::MissingGrad { index }) => assert_eq!(index, 0),
            other => panic!("expected MissingGrad, got {other:?}"),
        }
    }

    #[test]
    fn adam_converges_on_bowl() {
        let w = Tensor::param(vec![2], vec![1.0, -1.5]).unwrap();
        let mut opt = Optimizer::adam(vec![w.clone()], 0.05);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let loss = tape.l2norm_sq(&w).unwrap();
            tape.backward(&loss).unwrap();
            opt.step().unwrap();
        }
        let v = w.to_vec();
        assert!(
            v.iter().all(|x| x.abs() < 1e-2),
            "bowl minimum not reached: {v:?}"
        );
    }

    #[test]
    fn tape_hygiene_repeat_pass_identical() {
        let w = Tensor::param(vec![3], vec![0.2, -0.4, 0.6]).unwrap();
        let run = |w: &Tensor| {
            let mut tape = Tape::new();
            let h = tape.tanh(w).unwrap();
            let loss = tape.l2norm_sq(&h).unwrap();
            tape.backward(&loss).unwrap();
            let g = w.grad().unwrap();
            w.zero_grad();
            g
        };
        let g1 = run(&w);
        let g2 = run(&w);
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn concat_splits_gradient() {
        let a = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::param(vec![3], vec![3.0, 4.0, 5.0]).unwrap();
        let mut tape = Tape::new();
        let c = tape.concat(&[&a, &b]).unwrap();
        let w = Tensor::new(vec![5], vec![1.0, 10.0, 100.0, 1000.0, 10000.0]).unwrap();
        let loss = tape.dot(&c, &w).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 10.0]);
        assert_eq!(b.grad().unwrap(), vec![100.0, 1000.0, 10000.0]);
    }

    #[test]
    fn embed_mean_accumulates_duplicates() {
        let table = Tensor::param(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let e = tape.embed_mean(&table, &[0, 0, 2]).unwrap();
        assert_close(&e.to_vec(), &[4.0 / 3.0, 2.0 / 3.0], 1e-12);
        let loss = tape.sum(&e).unwrap();
        tape.backward(&loss).unwrap();
        let g = table.grad().unwrap();
        assert_close(&g, &[2.0 / 3.0, 2.0 / 3.0, 0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0], 1e-12);
    }

    #[test]
    fn embed_mean_rejects_unknown_id() {
        let table = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            tape.embed_mean(&table, &[5]),
            Err(Error::UnknownToken { id: 5, vocab: 2 })
        ));
    }

    #[test]
    fn l2_normalize_unit_norm_and_gradient() {
        let mut rng = stream(3, 1);
        let x = Tensor::new(vec![6], randn_vec(&mut rng, 6)).unwrap();
        let mut tape = Tape::new();
        let y = tape.l2_normalize(&x).unwrap();
        let norm: f64 = y.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let w = Tensor::new(vec![6], randn_vec(&mut rng, 6)).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.l2_normalize(x)?;
                t.dot(&y, &w)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "l2_normalize grad error {err}");
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let a = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = Tensor::param(vec![1], vec![2.0]).unwrap();
        let mut tape = Tape::new();
        let y = tape.mul(&a, &s).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 4.0, 6.0]);
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0; 3]);
        assert_eq!(s.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn non_finite_input_rejected() {
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        let a = Tensor::new(vec![1], vec![1e308]).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            tape.mul(&a, &a),
            Err(Error::NonFinite { .. })
        ));
    }
}
