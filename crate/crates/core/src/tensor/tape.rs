//! Reverse-mode differentiation over a closed vocabulary of tensor ops.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constant inputs or parameters (identified by their index in a
//! [`ParamStore`](super::ParamStore)); [`Tape::backward`] replays the record
//! in reverse and returns the gradient of a scalar node with respect to every
//! parameter leaf.

use std::borrow::Cow;
use std::ops::Range;

use super::{gelu_grad_scalar, gemm, layer_norm_with_stats, softmax, NormStats, Scalar, Tensor};
use crate::error::{ComboError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Transpose(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<S>,
    },
    Softmax(Var),
    Gelu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<S>,
    },
    RowBlockNorm {
        x: Var,
        rows: Range<usize>,
    },
}

#[derive(Debug)]
struct Node<'p, S: Scalar> {
    value: Cow<'p, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to parameters, indexed like the
/// parameter store the tape was fed from. `None` means the parameter did not
/// participate, i.e. its gradient is exactly zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStore<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradStore<S> {
    pub fn get(&self, index: usize) -> Option<&Tensor<S>> {
        self.grads.get(index).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    fn slot(&mut self, index: usize) -> &mut Option<Tensor<S>> {
        if self.grads.len() <= index {
            self.grads.resize(index + 1, None);
        }
        &mut self.grads[index]
    }

    fn accumulate_one(&mut self, index: usize, g: Tensor<S>) {
        match self.slot(index) {
            Some(existing) => existing.add_assign(&g).expect("same parameter shape"),
            slot @ None => *slot = Some(g),
        }
    }

    /// `self += other`, parameter by parameter.
    pub fn accumulate(&mut self, other: &GradStore<S>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate_one(i, g.clone());
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * c;
            }
        }
    }
}

/// Forward-pass record. Parameter values are borrowed for the lifetime `'p`.
#[derive(Debug)]
pub struct Tape<'p, S: Scalar> {
    nodes: Vec<Node<'p, S>>,
    consumed: bool,
}

impl<'p, S: Scalar> Default for Tape<'p, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> ComboError {
    ComboError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn two_d<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(ComboError::InvalidTensor(format!(
            "{op} needs a matrix, got shape {s:?}"
        ))),
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'p, Tensor<S>>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        self.push(Cow::Owned(value), op, inputs)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.owned(value, Op::Input, &[])
    }

    pub fn input_ref(&mut self, value: &'p Tensor<S>) -> Var {
        self.push(Cow::Borrowed(value), Op::Input, &[])
    }

    /// Parameter leaf; `index` is its position in the parameter store.
    pub fn param(&mut self, index: usize, value: &'p Tensor<S>) -> Var {
        self.push(Cow::Borrowed(value), Op::Param(index), &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.owned(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.owned(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `r×n` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.numel() != n {
            return Err(dim_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        Ok(self.owned(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).scale(c);
        self.owned(out, Op::Scale(x, c), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.owned(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.owned(out, Op::Reshape(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (out, stats) =
            layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax(self.value(x));
        self.owned(out, Op::Softmax(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = super::gelu(self.value(x));
        self.owned(out, Op::Gelu(x), &[x])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = two_d("slice_cols", xv)?;
        if len == 0 || start + len > c {
            return Err(ComboError::InvalidTensor(format!(
                "column slice {start}..{} out of {c}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in xv.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.owned(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (r, _) = two_d("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = two_d("concat_cols", self.value(p))?;
            if pr != r {
                return Err(dim_err("concat_cols", first, self.value(p)));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.owned(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = two_d("slice_rows", xv)?;
        if len == 0 || start + len > r {
            return Err(ComboError::InvalidTensor(format!(
                "row slice {start}..{} out of {r}",
                start + len
            )));
        }
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        Ok(self.owned(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (_, c) = two_d("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = two_d("concat_rows", self.value(p))?;
            if pc != c {
                return Err(dim_err("concat_rows", first, self.value(p)));
            }
            rows += pr;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.owned(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.owned(out, Op::Sum(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[label]` for a `B×C` tensor.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = two_d("cross_entropy", lv)?;
        if labels.len() != b {
            return Err(ComboError::Data(format!(
                "{} labels for {b} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(ComboError::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let probs = softmax(lv);
        let mut total = S::zero();
        for (i, &label) in labels.iter().enumerate() {
            total = total + log_sum_exp(lv.row(i)) - lv.row(i)[label];
        }
        let out = Tensor::scalar(total / S::of(b as f64));
        Ok(self.owned(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Frobenius norm of a block of rows of a matrix.
    pub fn row_block_norm(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = two_d("row_block_norm", xv)?;
        if rows.start >= rows.end || rows.end > r {
            return Err(ComboError::InvalidTensor(format!(
                "row block {rows:?} out of {r} rows"
            )));
        }
        let block = &xv.data()[rows.start * c..rows.end * c];
        let norm = block.iter().map(|&v| v * v).sum::<S>().sqrt();
        Ok(self.owned(Tensor::scalar(norm), Op::RowBlockNorm { x, rows }, &[x]))
    }

    /// Gradient of the scalar `loss` with respect to every parameter leaf.
    ///
    /// The tape is consumed: intermediate values are released and a second
    /// call returns [`ComboError::InvalidState`].
    pub fn backward(&mut self, loss: Var) -> Result<GradStore<S>> {
        if self.consumed {
            return Err(ComboError::InvalidState(
                "backward called on a consumed tape".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(ComboError::InvalidState(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), S::one()));
        let mut out = GradStore::default();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |v: Var, t: Tensor<S>| {
                if nodes[v.0].requires_grad {
                    match &mut grads[v.0] {
                        Some(existing) => existing.add_assign(&t).expect("gradient shape"),
                        slot @ None => *slot = Some(t),
                    }
                }
            };
            let needs = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| -> &Tensor<S> { &nodes[v.0].value };

            match &node.op {
                Op::Input => {}
                Op::Param(index) => out.accumulate_one(*index, g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if needs(*a) {
                        let mut da = vec![S::zero(); av.numel()];
                        gemm(&g, false, bv, true, &mut da, S::zero());
                        send(*a, Tensor::new(av.shape().to_vec(), da)?);
                    }
                    if needs(*b) {
                        let mut db = vec![S::zero(); bv.numel()];
                        gemm(av, true, &g, false, &mut db, S::zero());
                        send(*b, Tensor::new(bv.shape().to_vec(), db)?);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        send(*b, g.clone());
                    }
                    send(*a, g);
                }
                Op::AddBias(x, bias) => {
                    if needs(*bias) {
                        let bv = val(*bias);
                        let n = bv.numel();
                        let mut db = vec![S::zero(); n];
                        for row in g.data().chunks_exact(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        send(*bias, Tensor::new(bv.shape().to_vec(), db)?);
                    }
                    send(*x, g);
                }
                Op::Scale(x, c) => send(*x, g.scale(*c)),
                Op::Transpose(x) => send(*x, g.transpose()?),
                Op::Reshape(x) => send(*x, g.reshape(val(*x).shape().to_vec())?),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let gv = val(*gamma);
                    let d = gv.numel();
                    if needs(*gamma) || needs(*beta) {
                        let mut dgamma = vec![S::zero(); d];
                        let mut dbeta = vec![S::zero(); d];
                        for (grow, xrow) in g
                            .data()
                            .chunks_exact(d)
                            .zip(stats.normalized.chunks_exact(d))
                        {
                            for j in 0..d {
                                dgamma[j] = dgamma[j] + grow[j] * xrow[j];
                                dbeta[j] = dbeta[j] + grow[j];
                            }
                        }
                        send(*gamma, Tensor::new(gv.shape().to_vec(), dgamma)?);
                        send(*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)?);
                    }
                    if needs(*x) {
                        let inv_d = S::one() / S::of(d as f64);
                        let mut dx = Vec::with_capacity(g.numel());
                        for ((grow, xrow), &rstd) in g
                            .data()
                            .chunks_exact(d)
                            .zip(stats.normalized.chunks_exact(d))
                            .zip(&stats.rstd)
                        {
                            let mut mean_dxh = S::zero();
                            let mut mean_dxh_xh = S::zero();
                            for j in 0..d {
                                let dxh = grow[j] * gv.data()[j];
                                mean_dxh = mean_dxh + dxh;
                                mean_dxh_xh = mean_dxh_xh + dxh * xrow[j];
                            }
                            mean_dxh = mean_dxh * inv_d;
                            mean_dxh_xh = mean_dxh_xh * inv_d;
                            for j in 0..d {
                                let dxh = grow[j] * gv.data()[j];
                                dx.push(rstd * (dxh - mean_dxh - xrow[j] * mean_dxh_xh));
                            }
                        }
                        send(*x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut dx = Vec::with_capacity(y.numel());
                    for (yrow, grow) in y.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                        let dot: S = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        dx.extend(yrow.iter().zip(grow).map(|(&yv, &gv)| yv * (gv - dot)));
                    }
                    send(*x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::Gelu(x) => {
                    let xv = val(*x);
                    let dx = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| gi * gelu_grad_scalar(xi))
                        .collect();
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let c = xv.cols();
                    let len = g.cols();
                    let mut dx = vec![S::zero(); xv.numel()];
                    for (drow, grow) in dx.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                        drow[*start..start + len].copy_from_slice(grow);
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let pc = pv.cols();
                        if needs(p) {
                            let mut dp = Vec::with_capacity(pv.numel());
                            for grow in g.data().chunks_exact(total) {
                                dp.extend_from_slice(&grow[offset..offset + pc]);
                            }
                            send(p, Tensor::new(pv.shape().to_vec(), dp)?);
                        }
                        offset += pc;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let c = xv.cols();
                    let mut dx = vec![S::zero(); xv.numel()];
                    dx[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        if needs(p) {
                            let dp = g.data()[offset..offset + n].to_vec();
                            send(p, Tensor::new(val(p).shape().to_vec(), dp)?);
                        }
                        offset += n;
                    }
                }
                Op::Sum(x) => {
                    let xv = val(*x);
                    send(*x, Tensor::full(xv.shape(), g.item()));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = probs.cols();
                    let coef = g.item() / S::of(labels.len() as f64);
                    let mut dl = probs.data().to_vec();
                    for (i, &label) in labels.iter().enumerate() {
                        dl[i * c + label] = dl[i * c + label] - S::one();
                    }
                    for v in dl.iter_mut() {
                        *v = *v * coef;
                    }
                    send(*logits, Tensor::new(probs.shape().to_vec(), dl)?);
                }
                Op::RowBlockNorm { x, rows } => {
                    let xv = val(*x);
                    let c = xv.cols();
                    let norm = node.value.item();
                    let mut dx = vec![S::zero(); xv.numel()];
                    // Subgradient 0 at an all-zero block.
                    if norm > S::zero() {
                        let coef = g.item() / norm;
                        for k in rows.start * c..rows.end * c {
                            dx[k] = xv.data()[k] * coef;
                        }
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
            }
        }
        Ok(out)
    }
}

/// Numerically stable `log Σ exp(row)`.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let total: S = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` at `params`, against the tape's
    /// gradient. `f` builds a scalar on a fresh tape from the parameters.
    fn check_grads(
        params: &[Tensor<f64>],
        f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
    ) -> f64 {
        let eval = |ps: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
            let l = f(&mut tape, &vars);
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
        let l = f(&mut tape, &vars);
        let grads = tape.backward(l).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (pi, p) in params.iter().enumerate() {
            for k in 0..p.numel() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[k] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.get(pi).map_or(0.0, |g| g.data()[k]);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn linear_case_gives_broadcast_input() {
        let x = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let w = Tensor::<f64>::zeros(&[2, 3]);
        let mut tape = Tape::new();
        let wv = tape.param(0, &w);
        let xv = tape.input(x);
        let y = tape.matmul(wv, xv).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let a = Tensor::<f64>::full(&[2], 1.0);
        let b = Tensor::<f64>::full(&[2], 1.0);
        let mut tape = Tape::new();
        let av = tape.param(0, &a);
        let _ = tape.param(1, &b);
        let l = tape.sum(av);
        let g = tape.backward(l).unwrap();
        assert!(g.get(1).is_none());
    }

    #[test]
    fn second_backward_is_invalid_state() {
        let a = Tensor::<f64>::full(&[2], 1.0);
        let mut tape = Tape::new();
        let av = tape.param(0, &a);
        let l = tape.sum(av);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(ComboError::InvalidState(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.input(Tensor::zeros(&[2, 5]));
        let l = tape.cross_entropy(z, &[0, 4]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-14);

        let z = tape.input(Tensor::new(vec![1, 3], vec![0.0, 1e4, 0.0]).unwrap());
        let l = tape.cross_entropy(z, &[1]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        let z = tape.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.cross_entropy(z, &[3]), Err(ComboError::Data(_))));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = random(&[3, 4], &mut rng).scale(3.0);
        let labels = [2, 0, 3];
        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            oracle += lse - row[y];
        }
        oracle /= 3.0;
        let mut tape = Tape::new();
        let z = tape.input(logits);
        let l = tape.cross_entropy(z, &labels).unwrap();
        assert!((tape.value(l).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            random(&[3, 4], &mut rng),
            random(&[4, 5], &mut rng),
            random(&[5], &mut rng),
            random(&[5], &mut rng),
            random(&[5], &mut rng),
        ];
        let worst = check_grads(&params, |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_bias(h, v[2]).unwrap();
            let h = t.layer_norm(h, v[3], v[4], 1e-6).unwrap();
            let g = t.gelu(h);
            let h = t.add(h, g).unwrap();
            let s = t.scale(h, 0.7);
            let tr = t.transpose(s).unwrap();
            let a = t.slice_cols(tr, 1, 2).unwrap();
            let b = t.slice_rows(tr, 0, 5).unwrap();
            let b = t.slice_cols(b, 0, 1).unwrap();
            let c = t.concat_cols(&[a, b]).unwrap();
            let r = t.reshape(c, vec![3, 5]).unwrap();
            let sm = t.softmax(r);
            let top = t.slice_rows(sm, 0, 1).unwrap();
            let stacked = t.concat_rows(&[top, r]).unwrap();
            let ce = t.cross_entropy(stacked, &[0, 4, 2, 1]).unwrap();
            let n = t.row_block_norm(v[0], 1..3).unwrap();
            let n = t.scale(n, 0.3);
            t.add(ce, n).unwrap()
        });
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn row_block_norm_has_zero_subgradient_at_zero() {
        let w = Tensor::<f64>::zeros(&[4, 2]);
        let mut tape = Tape::new();
        let wv = tape.param(0, &w);
        let n = tape.row_block_norm(wv, 0..2).unwrap();
        assert_eq!(tape.value(n).item(), 0.0);
        let g = tape.backward(n).unwrap();
        assert!(g.get(0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(&[4, 3], &mut rng);
        let x = random(&[2, 4], &mut rng);
        let run = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let wv = tape.param(0, &w);
            let xv = tape.input_ref(&x);
            let y = tape.matmul(xv, wv).unwrap();
            let sm = t_softmax_sum(&mut tape, y);
            let ce = tape.cross_entropy(y, &[1, 2]).unwrap();
            let l1 = tape.scale(sm, a);
            let l2 = tape.scale(ce, b);
            let l = tape.add(l1, l2).unwrap();
            tape.backward(l).unwrap().get(0).unwrap().clone()
        };
        fn t_softmax_sum(t: &mut Tape<'_, f64>, y: Var) -> Var {
            let s = t.softmax(y);
            let g = t.gelu(s);
            t.sum(g)
        }
        let g1 = run(1.0, 0.0);
        let g2 = run(0.0, 1.0);
        let combo = run(2.5, -0.75);
        for k in 0..combo.numel() {
            let e = 2.5 * g1.data()[k] - 0.75 * g2.data()[k];
            assert!((combo.data()[k] - e).abs() < 1e-10);
        }
    }
}
