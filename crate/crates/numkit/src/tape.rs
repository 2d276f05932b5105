//! Wengert tape for reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its value and the ids of
//! its inputs. Inputs always precede their consumers, so a single reverse
//! sweep over the node list applies the chain rule.

use crate::error::{NumError, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive mask value for disallowed entries.
pub const MASK_NEG: f64 = -1e9;

/// Any additive mask entry at or below this is treated as "masked out": the
/// corresponding probability is exactly zero.
const MASK_CUTOFF: f64 = MASK_NEG / 2.0;

const BN_EPS: f64 = 1e-5;

/// Converts an allow-list into an additive mask (`0` allowed, [`MASK_NEG`]
/// disallowed).
pub fn additive_mask(allowed: &[bool]) -> Vec<f64> {
    allowed
        .iter()
        .map(|&ok| if ok { 0.0 } else { MASK_NEG })
        .collect()
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with statistics of the selected rows (all rows when `rows`
    /// is `None`). Fewer than two selected rows fall back to `running`.
    Train {
        rows: Option<&'a [bool]>,
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
    /// Frozen statistics; the op is an affine map.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Softmax(Var),
    LogSoftmax { x: Var, probs: Vec<f64>, masked: Vec<bool> },
    Relu(Var),
    Tanh(Var),
    Log(Var),
    Sum(Var),
    Mean { x: Var, axis: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// `None` in eval mode (statistics are constants).
        selected: Option<Vec<bool>>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of a computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumError {
    NumError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(NumError::InvalidArgument {
            op,
            msg: format!("expected a matrix, got shape {s:?}"),
        }),
    }
}

fn mask_is_out(m: f64) -> bool {
    m <= MASK_CUTOFF || m.is_nan()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input leaf. Rejects NaN/Inf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf bound to a store entry; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.params.get(id.index()) {
            return *v;
        }
        let value = store.get(id).clone();
        let v = self.push(value, Op::Leaf, store.is_trainable(id));
        if self.params.len() <= id.index() {
            self.params.resize(id.index() + 1, None);
        }
        self.params[id.index()] = Some(v);
        v
    }

    /// Parameters materialized on this tape.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::from_index(i), v)))
    }

    // ---------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = matrix(av, "matmul")?;
        let (k2, n) = matrix(bv, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += aip * b;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = matrix(av, "matmul_nt")?;
        let (n, k2) = matrix(bv, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", av.shape(), bv.shape()));
        }
        let (ad, bd) = (av.data(), bv.data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out.push(arow.iter().zip(brow).map(|(x, y)| x * y).sum());
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (m, n) = matrix(xv, "transpose")?;
        let d = xv.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(x), rg))
    }

    // ---------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Broadcasts a `[1, n]` (or `[n]`) row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let (_, n) = xv.dims2();
        if rv.len() != n || rv.dims2().0 != 1 {
            return Err(shape_err("add_row", xv.shape(), rv.shape()));
        }
        let r = rv.data();
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(NumError::NonFinite { op: "scale" });
        }
        let xv = &self.nodes[x.0].value;
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v * factor).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Scale(x, factor), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v.max(0.0)).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Relu(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v.tanh()).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Tanh(x), rg))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.data().iter().any(|v| *v <= 0.0) {
            return Err(NumError::NonFinite { op: "log" });
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v.ln()).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Log(x), rg))
    }

    // ---------------------------------------------------------------
    // Structural
    // ---------------------------------------------------------------

    /// Concatenation of matrices along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| NumError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let rows = matrix(&self.nodes[first.0].value, "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let pv = &self.nodes[p.0].value;
            let (r, c) = matrix(pv, "concat")?;
            if r != rows {
                return Err(shape_err("concat", self.nodes[first.0].value.shape(), pv.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, total], data), Op::Concat(parts.to_vec()), rg))
    }

    /// Concatenation of matrices along the first axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| NumError::InvalidArgument {
            op: "stack_rows",
            msg: "no inputs".into(),
        })?;
        let cols = matrix(&self.nodes[first.0].value, "stack_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let pv = &self.nodes[p.0].value;
            let (r, c) = matrix(pv, "stack_rows")?;
            if c != cols {
                return Err(shape_err("stack_rows", self.nodes[first.0].value.shape(), pv.shape()));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::StackRows(parts.to_vec()), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (m, n) = matrix(xv, "slice_cols")?;
        if start + width > n || width == 0 {
            return Err(shape_err("slice_cols", xv.shape(), &[start, width]));
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&xv.data()[i * n + start..i * n + start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, width], data), Op::SliceCols { x, start }, rg))
    }

    /// Gathers rows (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (m, n) = matrix(xv, "select_rows")?;
        if rows.is_empty() {
            return Err(NumError::InvalidArgument {
                op: "select_rows",
                msg: "empty row selection".into(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(shape_err("select_rows", xv.shape(), &[r]));
            }
            data.extend_from_slice(&xv.data()[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), n], data),
            Op::SelectRows { x, rows: rows.to_vec() },
            rg,
        ))
    }

    // ---------------------------------------------------------------
    // Reductions and normalizations
    // ---------------------------------------------------------------

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Mean of a matrix over `axis` (0: rows collapse to `[1, n]`, 1: columns
    /// collapse to `[m, 1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (m, n) = matrix(xv, "mean")?;
        let d = xv.data();
        let t = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for row in d.chunks(n) {
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                Tensor::from_parts(vec![1, n], out)
            }
            1 => Tensor::from_parts(
                vec![m, 1],
                d.chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect(),
            ),
            _ => {
                return Err(NumError::InvalidArgument {
                    op: "mean",
                    msg: format!("axis {axis} out of range"),
                })
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Mean { x, axis }, rg))
    }

    fn masked_logits(&self, x: Var, mask: Option<&[f64]>, op: &'static str) -> Result<(usize, usize, Vec<f64>, Vec<bool>)> {
        let xv = &self.nodes[x.0].value;
        let (m, n) = xv.dims2();
        let mut z = xv.data().to_vec();
        let mut masked = vec![false; z.len()];
        if let Some(mask) = mask {
            let row_broadcast = mask.len() == n;
            if !(row_broadcast || mask.len() == z.len()) {
                return Err(shape_err(op, xv.shape(), &[mask.len()]));
            }
            for (idx, zi) in z.iter_mut().enumerate() {
                let mv = if row_broadcast { mask[idx % n] } else { mask[idx] };
                if mask_is_out(mv) {
                    masked[idx] = true;
                } else {
                    *zi += mv;
                }
            }
        }
        for row in masked.chunks(n) {
            if row.iter().all(|b| *b) {
                return Err(NumError::InvalidArgument {
                    op,
                    msg: "every entry of a row is masked".into(),
                });
            }
        }
        Ok((m, n, z, masked))
    }

    /// Softmax over the last axis. `mask` is additive and either matches `x`
    /// element-for-element or is one row broadcast to every row. Masked-out
    /// entries get probability exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[f64]>) -> Result<Var> {
        let (_, n, z, masked) = self.masked_logits(x, mask, "softmax")?;
        let mut out = vec![0.0; z.len()];
        for ((zr, mr), or) in z.chunks(n).zip(masked.chunks(n)).zip(out.chunks_mut(n)) {
            let max = zr
                .iter()
                .zip(mr)
                .filter(|(_, m)| !**m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ((o, v), m) in or.iter_mut().zip(zr).zip(mr) {
                if !*m {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            or.iter_mut().for_each(|o| *o /= total);
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg))
    }

    /// Log-softmax over the last axis with the same mask convention as
    /// [`Tape::softmax`]; masked-out entries are reported as `0` and carry no
    /// gradient.
    pub fn log_softmax(&mut self, x: Var, mask: Option<&[f64]>) -> Result<Var> {
        let (_, n, z, masked) = self.masked_logits(x, mask, "log_softmax")?;
        let mut out = vec![0.0; z.len()];
        let mut probs = vec![0.0; z.len()];
        for (((zr, mr), or), pr) in z
            .chunks(n)
            .zip(masked.chunks(n))
            .zip(out.chunks_mut(n))
            .zip(probs.chunks_mut(n))
        {
            let max = zr
                .iter()
                .zip(mr)
                .filter(|(_, m)| !**m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = zr
                .iter()
                .zip(mr)
                .filter(|(_, m)| !**m)
                .map(|(v, _)| (v - max).exp())
                .sum();
            let lse = max + total.ln();
            for (((o, p), v), m) in or.iter_mut().zip(pr.iter_mut()).zip(zr).zip(mr) {
                if !*m {
                    *o = v - lse;
                    *p = o.exp();
                }
            }
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { x, probs, masked }, rg))
    }

    /// Batch normalization of `x: [rows, d]` over the row axis with per-column
    /// affine `gamma`, `beta` (`[1, d]`). Returns the batch statistics when
    /// they were used.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BnStats>)> {
        let xv = &self.nodes[x.0].value;
        let (m, d) = matrix(xv, "batch_norm")?;
        for p in [gamma, beta] {
            let pv = &self.nodes[p.0].value;
            if pv.len() != d {
                return Err(shape_err("batch_norm", xv.shape(), pv.shape()));
            }
        }
        let data = xv.data();
        let (mean, var, selected, stats) = match mode {
            BnMode::Train {
                rows,
                running_mean,
                running_var,
            } => {
                let sel: Vec<bool> = match rows {
                    Some(r) if r.len() != m => return Err(shape_err("batch_norm", xv.shape(), &[r.len()])),
                    Some(r) => r.to_vec(),
                    None => vec![true; m],
                };
                let count = sel.iter().filter(|s| **s).count();
                if count < 2 {
                    if running_mean.len() != d || running_var.len() != d {
                        return Err(shape_err("batch_norm", xv.shape(), &[running_mean.len()]));
                    }
                    (running_mean.to_vec(), running_var.to_vec(), None, None)
                } else {
                    let mut mean = vec![0.0; d];
                    for (row, s) in data.chunks(d).zip(&sel) {
                        if *s {
                            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    }
                    mean.iter_mut().for_each(|a| *a /= count as f64);
                    let mut var = vec![0.0; d];
                    for (row, s) in data.chunks(d).zip(&sel) {
                        if *s {
                            for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                                *a += (v - mu) * (v - mu);
                            }
                        }
                    }
                    var.iter_mut().for_each(|a| *a /= count as f64);
                    let stats = BnStats {
                        mean: mean.clone(),
                        var: var.clone(),
                        count,
                    };
                    (mean, var, Some(sel), Some(stats))
                }
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(shape_err("batch_norm", xv.shape(), &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None, None)
            }
        };
        if var.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(NumError::NonFinite { op: "batch_norm" });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let mut xhat = Vec::with_capacity(m * d);
        let mut out = Vec::with_capacity(m * d);
        for row in data.chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let var_out = self.push(
            Tensor::from_parts(vec![m, d], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                selected,
            },
            rg,
        );
        Ok((var_out, stats))
    }

    // ---------------------------------------------------------------
    // Reverse sweep
    // ---------------------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NumError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.param_vars().collect();
        Ok(Gradients {
            grads,
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            params,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                if let Some(ga) = self.acc(grads, *a) {
                    let bd = val(*b).data();
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let ad = val(*a).data();
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = ad[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += arp * x;
                            }
                        }
                    }
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().0;
                if let Some(ga) = self.acc(grads, *a) {
                    let bd = val(*b).data();
                    for r in 0..m {
                        for j in 0..n {
                            let gij = g[r * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (o, y) in ga[r * k..(r + 1) * k].iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                *o += gij * y;
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let ad = val(*a).data();
                    for r in 0..m {
                        for j in 0..n {
                            let gij = g[r * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[j * k..(j + 1) * k].iter_mut().zip(&ad[r * k..(r + 1) * k]) {
                                *o += gij * x;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = val(*x).dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                let n = val(*row).len();
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += f * v);
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.dims2().0;
                let total = node.value.dims2().1;
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).dims2().1;
                    if let Some(gp) = self.acc(grads, *p) {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(o, v)| *o += v);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).dims2().1;
                let (m, w) = node.value.dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        for c in 0..w {
                            gx[r * n + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let n = val(*x).dims2().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            gx[r * n + c] += g[k * n + c];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.dims2().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((yr, gr), or) in node.value.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((o, y), gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o += y * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, probs, masked } => {
                let n = node.value.dims2().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (((pr, mr), gr), or) in probs
                        .chunks(n)
                        .zip(masked.chunks(n))
                        .zip(g.chunks(n))
                        .zip(gx.chunks_mut(n))
                    {
                        let total: f64 = gr.iter().zip(mr).filter(|(_, m)| !**m).map(|(g, _)| g).sum();
                        for (((o, p), gv), m) in or.iter_mut().zip(pr).zip(gr).zip(mr) {
                            if !*m {
                                *o += gv - p * total;
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(node.value.data()) {
                        *o += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Log(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                        *o += gv / xv;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean { x, axis } => {
                let (m, n) = val(*x).dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += if *axis == 0 { g[c] / m as f64 } else { g[r] / n as f64 };
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                selected,
            } => {
                let (m, d) = node.value.dims2();
                let gam = val(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for r in 0..m {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for r in 0..m {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    match selected {
                        None => {
                            for r in 0..m {
                                for j in 0..d {
                                    gx[r * d + j] += g[r * d + j] * gam[j] * inv_std[j];
                                }
                            }
                        }
                        Some(sel) => {
                            let count = sel.iter().filter(|s| **s).count() as f64;
                            // Sums over every row: each output depends on the
                            // shared statistics of the selected rows.
                            let mut sum_gh = vec![0.0; d];
                            let mut sum_gh_xhat = vec![0.0; d];
                            for r in 0..m {
                                for j in 0..d {
                                    let gh = g[r * d + j] * gam[j];
                                    sum_gh[j] += gh;
                                    sum_gh_xhat[j] += gh * xhat[r * d + j];
                                }
                            }
                            for r in 0..m {
                                for j in 0..d {
                                    let gh = g[r * d + j] * gam[j];
                                    let mut dx = gh * inv_std[j];
                                    if sel[r] {
                                        dx -= inv_std[j] / count * (sum_gh[j] + xhat[r * d + j] * sum_gh_xhat[j]);
                                    }
                                    gx[r * d + j] += dx;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Result<Tensor> {
        if !self.requires.get(v.0).copied().unwrap_or(false) {
            return Err(NumError::Detached(v.0));
        }
        let shape = tape.value(v).shape().to_vec();
        Ok(match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    /// Gradients of every trainable entry of `store`. Entries not touched by
    /// the tape get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out: Vec<Option<Vec<f64>>> = store
            .entries()
            .iter()
            .map(|e| e.trainable.then(|| vec![0.0; e.value.len()]))
            .collect();
        for (id, v) in &self.params {
            if let (Some(slot), Some(g)) = (out.get_mut(id.index()).and_then(Option::as_mut), &self.grads[v.0]) {
                slot.iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
        }
        ParamGrads::from_raw(out)
    }
}
